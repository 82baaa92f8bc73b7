# %% [markdown]
# # Training on data with two regimes
#
# The two-regime series alternates trend-dominated and seasonal-dominated
# segments.  A model with routing should give windows from the two regimes
# different extractor mixtures, and should forecast better than the variant
# without routing.  Runs take a few minutes on a laptop CPU.

# %%
import tempfile
from pathlib import Path

import numpy as np
import torch

from duet import DuetConfig, load_checkpoint, make_synthetic, run_experiment, save_checkpoint
from duet.synthetic import mean_pairwise_tv, pure_regime_windows

T, F = 48, 24
ds = make_synthetic("two_regime", 4000, 4, seed=0, T=T, F=F)
config = DuetConfig(T=T, F=F, N=4, seed=0)

# %%
state, evaluation, report, prep = run_experiment(ds, config, "two_regime")
print({k: report[k] for k in ("variant", "mse", "mae", "n_windows")})
print("epochs run:", len(state.history), "best val mse:", round(state.best_val_mse, 4))

# %%
_, _, base_report, _ = run_experiment(ds, config.replace(variant="no_tcm"), "two_regime")
print(f"test mse with routing {report['mse']:.4f}, without {base_report['mse']:.4f}")

# %%
# gate vectors of windows that sit entirely inside one regime
test = prep.windows["test"]
model = state.model()
with torch.no_grad():
    gates = model(torch.as_tensor(test.X, dtype=torch.float32)).trace.gates.double().numpy()
regime = pure_regime_windows(ds.labels, test.origins, T)
a, b = gates[regime == 0].reshape(-1, config.M), gates[regime == 1].reshape(-1, config.M)
print("mean gates, trend regime   ", a.mean(0).round(3))
print("mean gates, seasonal regime", b.mean(0).round(3))
print("mean pairwise total variation:", round(mean_pairwise_tv(a, b), 3))

# %%
# checkpoints round-trip bit-exactly
path = Path(tempfile.mkdtemp()) / "model.ckpt"
save_checkpoint(state, path)
back = load_checkpoint(path)
print("identical parameters:", all(torch.equal(back.params[k], v) for k, v in state.params.items()))
