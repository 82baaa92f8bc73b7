# %% [markdown]
# # Routing channels to pattern extractors
#
# The temporal module gives each channel a small learned distribution over M
# linear extractors and mixes the top-k of them.  This script shows each
# stage on a single window and checks the sparse evaluation against the
# dense reference that runs all M extractors.

# %%
import numpy as np
import torch

from duet.oracles import dense_mixture_oracle
from duet.temporal import (
    DistributionRouter, PatternExtractors, decompose_series, encode_distribution, keep_top_k, sample_gate_logits,
    tcm_forward,
)

torch.set_printoptions(precision=4)
T, d, d0, M, k = 24, 8, 16, 4, 2
router = DistributionRouter(T, d0, M, torch.Generator().manual_seed(0)).double()
extractors = PatternExtractors(T, d, M, torch.Generator().manual_seed(1)).double()

t = np.arange(T)
x = torch.tensor(np.sin(2 * np.pi * t / 12) + 0.05 * t)

# %%
# trend / seasonal split by a centered moving average
pair = decompose_series(x, 5)
print("trend   ", pair.trend[:6])
print("seasonal", pair.seasonal[:6])

# %%
# mean and scale encoders, then noisy logits
mu, sigma_raw = encode_distribution(x, router)
eps = torch.randn(M, generator=torch.Generator().manual_seed(2), dtype=torch.float64)
print("noiseless logits", sample_gate_logits(mu, sigma_raw, torch.zeros(M, dtype=torch.float64), router))
print("noisy logits    ", sample_gate_logits(mu, sigma_raw, eps, router))

# %%
sel = keep_top_k(sample_gate_logits(mu, sigma_raw, eps, router), k, eps)
print("selected extractors", sel.indices, "weights", sel.weights.round(4), "dense", sel.dense().round(4))

# %%
# a batch of channels goes through the whole module at once; only the
# selected extractors are evaluated
X = torch.stack([x, -x, torch.linspace(-1, 1, T, dtype=torch.float64)])
features, trace = tcm_forward(X, router, extractors, k, 5, "eval")
print("dense gates per channel\n", trace.gates)

params = {n: p.detach().numpy() for n, p in {**router.state_dict(), **extractors.state_dict()}.items()}
ref = dense_mixture_oracle(X.numpy(), params, k, 5)
print("max difference to the dense mixture:", np.abs(features.detach().numpy() - ref).max())
