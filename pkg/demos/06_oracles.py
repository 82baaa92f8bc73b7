# %% [markdown]
# # Independent checks
#
# The oracles recompute things the slow, obvious way.  Each check returns a
# report with its tolerance; the reports can be saved as JSON lines.

# %%
import tempfile
from pathlib import Path

import numpy as np
import torch

from duet import DuetConfig, DuetModel
from duet.channel import frequency_amplitude
from duet.oracles import (
    TOLERANCES, compare, dft_oracle, finite_difference_gradient, gating_equivalence_check, reference_forward,
    relative_error, write_jsonl,
)
from duet.temporal import DistributionRouter, sample_gate_logits, softplus

reports = []
rng = np.random.default_rng(0)

# %%
x = rng.standard_normal(31)
reports.append(compare("dft", frequency_amplitude(torch.tensor(x)).numpy(), dft_oracle(x), TOLERANCES["dft"], rel=True))

# %%
# logits H = WH (mu + eps * softplus(sigma_raw)) are Gaussian with known moments
router = DistributionRouter(8, 4, 4, torch.Generator().manual_seed(0)).double()
mu, sraw = torch.tensor(rng.standard_normal(4)), torch.tensor(rng.standard_normal(4))
fn = lambda eps: sample_gate_logits(mu, sraw, torch.tensor(eps), router).detach().numpy()
reports.append(gating_equivalence_check(mu.numpy(), softplus(sraw).numpy(), router.WH.detach().numpy(), 100_000,
                                        logits_fn=fn))

# %%
# the whole forward pass against a loop-based recomputation
cfg = DuetConfig(T=8, F=4, N=3, M=4, k=2, d=5, d0=6, kernel=3)
model = DuetModel(cfg).double()
X = rng.standard_normal((3, 8)) * 2 + 1
params = {k: v.detach().numpy() for k, v in model.state_dict().items()}
reports.append(compare("forward", model(torch.tensor(X)).forecast.detach().numpy(),
                       reference_forward(X, params, k=2, kernel=3, gamma=cfg.gamma), 1e-5))

# %%
# central differences for one tensor of a tiny model
tiny = DuetModel(DuetConfig(T=6, F=2, N=2, M=2, k=1, d=4, d0=3, d_ff=4, kernel=3)).double()
Xt, Yt = torch.tensor(rng.standard_normal((4, 2, 6))), torch.tensor(rng.standard_normal((4, 2, 2)))
(tiny(Xt).forecast - Yt).abs().mean().backward()


def loss(theta):
    with torch.no_grad():
        tiny.predictor.WO.copy_(torch.tensor(theta["WO"]))
        return float((tiny(Xt).forecast - Yt).abs().mean())


fd = finite_difference_gradient(loss, {"WO": tiny.predictor.WO.detach().numpy().copy()})
err = relative_error(tiny.predictor.WO.grad.numpy(), fd.grads["WO"])
print("predictor gradient relative error", err, "kinks", fd.kinks)

# %%
for r in reports:
    print(f"{r.name:20s} passed={r.passed}  max_abs={r.max_abs_error:.2e}  tol={r.tolerance}")
out = Path(tempfile.mkdtemp()) / "oracles.jsonl"
write_jsonl(reports, out)
print(out.read_text())
