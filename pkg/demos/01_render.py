"""Build a synthetic face model, decode a random face and render it.

Writes ``face.ppm`` to the working directory.
"""
import numpy as np

from facefit import FaceParams, gen_synthetic_model, render, validate_model
from facefit.io import write_ppm
from facefit.head import sample_face_params

model = gen_synthetic_model(seed=0, n_grid=16)
print(f"{model.n_vertices} vertices, {len(model.triangles)} triangles")
print("validation:", validate_model(model))

# All-zero codes give the mean face under the default camera and light.
mean_face = FaceParams.zeros_like_model(model)
out = render(model, mean_face, 64, 64)
print(f"mean face covers {np.mean(out.tri_id >= 0):.0%} of the image")

# A random face: codes drawn from the prior, a small pose change.
params = sample_face_params(model, np.random.default_rng(7))
out = render(model, params, 128, 128)
write_ppm("face.ppm", out.color)
print("pose (pitch, yaw, roll):", np.round(params.cam[:3], 3))
print("wrote face.ppm")
