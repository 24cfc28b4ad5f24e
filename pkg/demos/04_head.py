"""Train the embedding-to-parameters head through the renderer.

Ground-truth parameters are used only to make the dataset; training sees
embeddings, target images and landmarks. A short run with a small head
keeps this quick; the defaults train the full 4096-wide model.
"""
import numpy as np

from facefit import TrainConfig, evaluate, gen_embedding_dataset, gen_synthetic_model
from facefit import head_forward, head_init, head_train
from facefit.head import smoothed

model = gen_synthetic_model(seed=0, n_grid=16)
data = gen_embedding_dataset(model, 64, seed=0, size=(32, 32), dim=256)

config = TrainConfig(iters=300, lr=3e-4, warmup_iters=20, batch_size=4, grad_accum=2)
head, curve = head_train(data, model, config, head=head_init(0, (256, 128, 128, 257)))
print(f"face loss {curve[0]:.3f} -> {smoothed(curve, 50)[-1]:.3f} (smoothed)")

sample = data[0]
pred = head_forward(head, sample.embedding)
print("sample 0:", evaluate(sample.target_image, None, sample.landmarks, model, pred))
print("mean |theta error|:", np.abs(pred.to_vector() - sample.theta_true.to_vector()).mean())
