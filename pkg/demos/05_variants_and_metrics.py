# %% [markdown]
# # Ablation variants and channel metrics
#
# Short training runs of every variant and every channel metric on a
# correlated-channel dataset.  Budgets are small so the numbers are only
# indicative.

# %%
from duet import DuetConfig, make_synthetic, run_experiment

T, F = 48, 24
ds = make_synthetic("correlated_pair", 3000, 5, seed=0, T=T, F=F)
base = DuetConfig(T=T, F=F, N=5, d=64, d0=32, max_epochs=5)

print("variant         mse     mae")
for variant in ("full", "no_tcm", "no_ccm", "full_attention", "temporal_info"):
    _, ev, _, _ = run_experiment(ds, base.replace(variant=variant), max_steps=300)
    print(f"{variant:15s} {ev.metrics.mse:.4f}  {ev.metrics.mae:.4f}")

# %%
print("metric               mse     mae")
for metric in ("learned_mahalanobis", "euclidean", "cosine", "random"):
    _, ev, _, _ = run_experiment(ds, base.replace(metric_kind=metric), max_steps=300)
    print(f"{metric:20s} {ev.metrics.mse:.4f}  {ev.metrics.mae:.4f}")
