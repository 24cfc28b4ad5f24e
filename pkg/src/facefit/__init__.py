"""Inverse rendering with linear morphable face models."""
__version__ = "0.1.0"

from .assets import (MorphableModel, gen_synthetic_model, load_model, save_model,
                     validate_model)
from .decoder import decode_albedo, decode_geometry, select_landmarks_3d, vertex_normals
from .fitter import FitConfig, evaluate, fit, init_from_landmarks
from .head import (EmbeddingSample, HeadWeights, TrainConfig, gen_embedding_dataset,
                   head_forward, head_init, head_train)
from .losses import LossReport, LossWeights, face_loss
from .params import FaceParams
from .renderer import RenderOutput, gradcheck, rasterize, render, render_backward
from .scene import project, rotation_from_euler, sh_basis, shade
