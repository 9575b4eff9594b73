"""Dense hand mesh estimation from 2D evidence on a self-contained toy hand model."""
from .assets import HandModelAssets, load_model_assets, save_model_assets
from .camera import BehindCameraError, ImagePlane, project
from .estimator import (Evidence2D, LinearRegressorWeights, TrainConfig, initial_params, load_weights,
                        run_hme, save_weights, train)
from .losses import GridDescriptor, LossWeights, NormalizationContext, normalize_skeleton
from .mesh import regress_skeleton, skeleton_from_params, synthesize_mesh
from .raster import rasterize_hard, rasterize_soft, render_shaded
from .refine import RefineConfig, testing_refine
from .synth import AugmentConfig, generate_record, perturb_seed
from .toy import gen_toy_model

__version__ = "0.1.0"
