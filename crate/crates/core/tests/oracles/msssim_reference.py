"""Reference MS-SSIM values from the pytorch_msssim package.

The inputs are generated from closed-form expressions that the Rust tests
reproduce exactly (values are multiples of 1/255).
"""
import math

import torch
from pytorch_msssim import ms_ssim


def image(h, w, k):
    """k = 0: base pattern; k > 0: base plus a deterministic perturbation of amplitude k."""
    x = torch.zeros(1, 3, h, w, dtype=torch.float64)
    for c in range(3):
        for i in range(h):
            for j in range(w):
                v = 127.5 + 90 * math.sin(0.05 * i + 0.3 * c) * math.cos(0.037 * j * (c + 1)) \
                    + ((i * 7 + j * 13 + c * 29) % 17) - 8
                v += k * (((i * 3 + j * 5 + c * 11) % 9) - 4)
                x[0, c, i, j] = min(255, max(0, math.floor(v + 0.5))) / 255
    return x


# The package builds its default window in float32; use an exact float64 one.
coords = torch.arange(11, dtype=torch.float64) - 5
g = torch.exp(-(coords ** 2) / (2 * 1.5 ** 2))
WIN = (g / g.sum()).reshape(1, 1, 1, -1).repeat(3, 1, 1, 1)

for (h, w) in [(161, 170), (181, 203), (256, 192)]:
    for k in (1, 6):
        a, b = image(h, w, 0), image(h, w, k)
        print(h, w, k, repr(ms_ssim(a, b, data_range=1.0, size_average=True, win=WIN).item()))
