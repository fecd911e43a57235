"""
Finite-difference gradient check
================================

Autograd is compared against central differences of the full training
objective (AU cross-entropy plus weighted reconstruction error) for a tiny
model.  Every activation in the network is smooth (ELU, sigmoid), so the two
should agree to about 1e-5 in double precision.
"""

import time

import torch

from aunet import AUNet, ModelConfig
from aunet.losses import triplet_loss
from aunet.training import gradient_check, init_parameters, model_gradient_check

torch.set_num_threads(1)

# The loss functions alone agree to rounding error.
a, p, n = (torch.randn(3, 5, dtype=torch.float64) for _ in range(3))
print("triplet loss:", gradient_check(lambda a, p, n: triplet_loss(a, p, n, 0.2), [a, p, n], eps=1e-6))

# A 16x16 model with 2 AUs has about 90k parameters, most of them in the first
# convolution of each classifier.  Running batch-norm
# statistics are populated first; the check itself runs in evaluation mode.
model = AUNet(ModelConfig(image_size=16, n_aus=2, encoder_channels=8, downsample_factor=4)).double()
init_parameters(model, seed=0)
x = torch.rand(4, 3, 16, 16, dtype=torch.float64)
with torch.no_grad():
    model.train()(x)

t0 = time.perf_counter()
err = model_gradient_check(model, x[:1], torch.tensor([[1, 0]]), lam=0.001)
n_params = sum(p.numel() for p in model.parameters())
print(f"full model, {n_params} parameters: max relative error {err:.2e} ({time.perf_counter() - t0:.0f}s)")
