"""Walk through the multi-scale residual codec on a random latent."""
import torch

from nsarm import bsq
from nsarm.codec import accumulate, cascaded_modify, decompose
from nsarm.numerics import Rng
from nsarm.schedule import infinity_default_schedule, token_count

sched = infinity_default_schedule(64)
print("scales", sched.scales, "k_t", sched.k_t, "d", sched.d)
print("tokens per image", token_count(sched, 1, sched.K))

f = Rng(0).randn(*sched.latent_shape, sched.d)

# identity quantizer: the residual recursion is lossless
lossless = decompose(f, sched, bsq.identity)
print("identity max err", (accumulate(lossless) - f).abs().max().item())

# bit quantizer: error shrinks as scales are added
q = decompose(f, sched)
for k in range(sched.K + 1):
    print(f"k={k}  |F_k - f| = {(accumulate(q, k) - f).norm():.3f}")

tokens, _ = bsq.quantize(q.residuals[0])
print("scale-1 bits", tokens.bits.reshape(-1).tolist())

# splice a foreign prefix, later scales re-target what is left
prefix = [bsq.bsq(torch.randn(*sched.scale(k), sched.d)) for k in range(1, sched.k_t + 1)]
mod = cascaded_modify(f, sched, prefix)
print("spliced prefix kept", all(torch.equal(a, b) for a, b in zip(prefix, mod.residuals)))
print("final err after splice", (accumulate(mod) - f).norm().item(), "vs clean", (accumulate(q) - f).norm().item())
