"""Feed-forward Gaussian splatting from one RGB-D view, guided by text and point tokens.

Main entry points::

    from guidedsplat import Config, Rng, load_scene, rasterize, train_toy
"""

from .errors import (ConfigError, FormatError, IoError, MissingInput, ShapeError, SplatError,
                     StateError, TrainingError, UsageError, ValidationError)
from .gaussians import GaussianSet
from .geometry import Camera, Pose, build_covariance, gaussian_centers, project_gaussian, \
    project_gaussians, unproject_depth
from .losses import LossBreakdown, LossWeights, l1_loss, psnr, ssim, total_loss
from .pipeline import Checkpoint, Model, evaluate, forward, prepare_inputs, train_toy
from .rasterizer import RenderSettings, rasterize, rasterize_backward, rasterize_oracle
from .synthetic import SyntheticSceneSpec, gen_scenes, make_scene
from .tensor_io import Config, Rng, Scene, load_config, load_scene, read_tensor, save_scene, \
    write_tensor

__version__ = "0.1.0"
