"""
Checking every gradient path
============================

Each component of the model is compared against central finite differences
in float64. The same reports are available from ``guidedsplat gradcheck all``.
"""

import numpy as np

from guidedsplat.gradcheck import COMPONENTS, check_arrays, gradcheck
from guidedsplat.tensor_io import Rng

for name in COMPONENTS:
    report = gradcheck(name, Rng(0))
    print(report.format())

# A wrong gradient is caught: here d/dx sum(x^2) is reported as 2.02 x.
rng = Rng(1)
x = {"x": rng.normal(size=6)}
bad = check_arrays(lambda: float(np.sum(x["x"] ** 2)), x, {"x": 2.02 * x["x"]}, rng)
print("sabotaged group:", bad[0].name, "error %.1e" % bad[0].error, "passed", bad[0].passed)
