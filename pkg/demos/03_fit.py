"""Recover face parameters from a rendered image and its landmarks."""
import numpy as np

from facefit import FaceParams, FitConfig, evaluate, fit, gen_synthetic_model, render
from facefit.losses import projected_landmarks
from facefit.head import sample_face_params

model = gen_synthetic_model(seed=0, n_grid=16)
truth = sample_face_params(model, np.random.default_rng(11))
target = render(model, truth, 64, 64).color
landmarks = projected_landmarks(model, truth, 64, 64)

# Start from a perturbed copy of the truth.
rng = np.random.default_rng(0)
init = FaceParams.from_vector(truth.to_vector() + 0.05 * rng.standard_normal(257), truth.sizes)
print("before:", evaluate(target, None, landmarks, model, init))

result = fit(target, landmarks, model, FitConfig(max_iters=200), init=init)
print("after: ", evaluate(target, None, landmarks, model, result.params))
print(f"best iterate {result.best_iter}, loss {result.trace[0][0]:.4f} -> "
      f"{result.best_so_far[-1]:.5f}")

# Without an init only the camera is set, from the landmarks; the codes and
# the light start at zero, so the first renders are black and more steps help.
for iters in (200, 1000):
    result = fit(target, landmarks, model, FitConfig(max_iters=iters))
    print(f"from landmarks, {iters} iters:", evaluate(target, None, landmarks, model, result.params))
