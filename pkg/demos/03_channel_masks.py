# %% [markdown]
# # Channel distances and sampled masks
#
# Channels are compared through the amplitude spectrum of their normalized
# look-back window.  Close channels get high connection probability, and a
# binary mask is sampled from those probabilities.

# %%
import numpy as np
import torch

from duet.channel import ChannelMetric, ccm_forward, frequency_amplitude, sample_mask
from duet.data import instance_normalize
from duet.oracles import dft_oracle
from duet.synthetic import make_synthetic

torch.set_printoptions(precision=3)

# %%
# the amplitude of a pure tone sits in one bin
t = np.arange(96)
amp = frequency_amplitude(torch.tensor(np.sin(2 * np.pi * 8 * t / 96)))
print("largest bin", int(amp.argmax()) + 1, "amplitude", float(amp.max()))
x = np.random.default_rng(0).standard_normal(17)
print("agreement with the O(T^2) sum:", np.abs(frequency_amplitude(torch.tensor(x)).numpy() - dft_oracle(x)).max())

# %%
# five channels: (0, 1) correlated, (2, 3) correlated, 4 independent
ds = make_synthetic("correlated_pair", 2000, 5, seed=1, correlation=0.95)
X = torch.tensor(ds.values[500:596].T)
X_norm, _ = instance_normalize(X)
metric = ChannelMetric(48).double()
mask, rel = ccm_forward(X_norm, metric, gamma=0.9)
print("distances\n", rel.D)
print("probabilities (row max is gamma)\n", rel.P)
print("eval-mode mask\n", mask.hard)

# %%
# in training the mask is a Bernoulli draw per entry via two-class Gumbel-softmax
draws = sample_mask(rel.P.expand(5000, 5, 5), 1.0, "train", torch.Generator().manual_seed(0))
print("empirical link frequency\n", draws.hard.mean(0))
print("largest gap to P:", float((draws.hard.mean(0) - rel.P).abs().max()))
