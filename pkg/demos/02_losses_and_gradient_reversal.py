"""The training objectives and the adversarial coupling.

Run: python demos/02_losses_and_gradient_reversal.py
"""

import torch

from mitodet import losses as L

print("== Component losses ==")
print(f"smooth_l1(d=0.5, beta=1) = {L.smooth_l1(torch.tensor([0.5]), torch.zeros(1)):.4f}")
print(f"smooth_l1(d=2.0, beta=1) = {L.smooth_l1(torch.tensor([2.0]), torch.zeros(1)):.4f}")
print(f"focal(p=0.5, pos, a=.25 g=2) = "
      f"{L.focal_loss(torch.tensor([0.5]), torch.tensor([1.0])):.4f}")
print(f"domain CE, uniform over 3   = "
      f"{L.domain_cross_entropy(torch.zeros(3), 0):.4f}  (= ln 3)")

print("\n== Composite total ==")
w = L.LossWeights()  # lambda1=10, lambda2=25
b = L.total_loss(l_bb=0.5, l_inst=0.25, l_percep=0.1, l_ce=0.04, weights=w)
print(f"0.5 + 0.25 + 10*0.1 + 25*0.04 = {b.total}")

print("\n== Gradient reversal ==")
x = torch.linspace(-1, 1, 5, requires_grad=True)
head = lambda t: (t ** 2).sum()

plain = torch.autograd.grad(head(x), x)[0]
for strength in (1.0, 0.5, 0.0):
    xr = x.detach().clone().requires_grad_(True)
    head(L.grad_reverse(xr, strength)).backward()
    print(f"strength {strength}: grad = {xr.grad.tolist()} "
          f"(plain {plain.tolist()})")

print("\n== Perceptual loss on a frozen random-feature stack ==")
ext = L.FeatureExtractor(seed=0)
gen = torch.Generator().manual_seed(1)
img = torch.rand(1, 3, 64, 64, generator=gen)
noisy = (img + 0.1 * torch.randn(img.shape, generator=gen)).clamp(0, 1)
flat = torch.full_like(img, 0.5)
print(f"loss(img, img)   = {L.perceptual_loss(img, img, ext):.4f}")
print(f"loss(img, noisy) = {L.perceptual_loss(img, noisy, ext):.4f}")
print(f"loss(img, flat)  = {L.perceptual_loss(img, flat, ext):.4f}  "
      f"(structure destroyed -> large)")
