"""Analytic render gradients against finite differences.

The backward pass holds visibility fixed: every pixel keeps its triangle
and barycentric weights. Lighting and albedo enter the image linearly,
so those blocks agree to round-off. Shape and camera go through the
normals.
"""
import numpy as np

from facefit import gen_synthetic_model, gradcheck, render, render_backward
from facefit.head import sample_face_params

model = gen_synthetic_model(seed=0, n_grid=16)
params = sample_face_params(model, np.random.default_rng(3))

# Gradient of the mean red intensity.
out = render(model, params, 48, 48)
adjoint = np.zeros_like(out.color)
adjoint[..., 0] = 1.0 / adjoint[..., 0].size
grad = render_backward(model, params, 48, 48, adjoint)
print("largest lighting entries:", np.round(np.sort(np.abs(grad[224:251]))[-3:], 5))
print("translation and scale gradient:", grad[-3:])

report = gradcheck(model, params, 32, 32, seed=0)
for block in report.blocks:
    print(f"{block.block:6s} max rel err {block.max_rel_error:.2e}")
print("passed" if report.passed else "FAILED")
