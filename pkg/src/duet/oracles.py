"""Brute-force reference computations used to cross-check the model.

Everything here is plain numpy with explicit loops where it matters, and
shares no code with the torch implementation.
"""

from __future__ import annotations

import json
import math
from collections.abc import Callable, Mapping
from dataclasses import asdict, dataclass

import numpy as np

from .errors import NonDeterministicLoss

TOLERANCES = {
    "dft": 1e-6,             # relative, amplitude vs brute-force DFT
    "dense_mixture": 1e-6,   # absolute, sparse routing vs dense mixture
    "gradient": 1e-4,        # relative, analytic vs central differences
    "gating_mean_se": 3.0,   # standard errors
    "gating_var_rel": 0.05,  # relative error of the variance
}


@dataclass
class OracleReport:
    name: str
    max_abs_error: float
    max_rel_error: float
    n_cases: int
    passed: bool
    details: str = ""
    tolerance: float = float("nan")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def write_jsonl(reports, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in reports:
            fh.write(r.to_json() + "\n")


# ---------------------------------------------------------------- scalar loops

def loop_matmul(a, b) -> np.ndarray:
    """Triple-loop matrix product of 2-D (or 1-D row) operands."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.asarray(b, dtype=np.float64)
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            acc = 0.0
            for t in range(a.shape[1]):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def loop_mean_abs(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    total = 0.0
    for x, y in zip(a, b):
        total += abs(x - y)
    return total / len(a)


def loop_mean_sq(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    total = 0.0
    for x, y in zip(a, b):
        total += (x - y) ** 2
    return total / len(a)


# ---------------------------------------------------------------- spectra

def dft_oracle(x) -> np.ndarray:
    """``|sum_t x_t exp(-2 pi i b t / T)|`` for ``b = 1 .. floor(T/2)``, O(T^2)."""
    x = np.asarray(x, dtype=np.float64)
    T = len(x)
    out = np.empty(T // 2)
    for b in range(1, T // 2 + 1):
        re = 0.0
        im = 0.0
        for t in range(T):
            angle = 2.0 * math.pi * ((b * t) % T) / T
            re += x[t] * math.cos(angle)
            im -= x[t] * math.sin(angle)
        out[b - 1] = math.hypot(re, im)
    return out


def compare(name: str, got, want, tol: float, rel: bool = False, details: str = "") -> OracleReport:
    """Elementwise comparison.  The relative error is taken against the
    largest reference magnitude, so bins that are zero in exact arithmetic
    do not blow it up."""
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    abs_err = np.abs(got - want)
    max_abs = float(abs_err.max()) if abs_err.size else 0.0
    scale = float(np.abs(want).max()) if want.size else 0.0
    max_rel = max_abs / scale if scale > 0 else max_abs
    passed = (max_rel if rel else max_abs) <= tol
    return OracleReport(name, max_abs, max_rel, int(want.size), bool(passed), details, tol)


# ---------------------------------------------------------------- gradients

@dataclass
class FiniteDifferenceResult:
    grads: dict[str, np.ndarray]
    kinks: list[tuple[str, tuple[int, ...]]]   # points where one-sided slopes disagree


def finite_difference_gradient(loss_fn: Callable[[dict[str, np.ndarray]], float],
                               params: Mapping[str, np.ndarray], step: float = 1e-4,
                               kink_tol: float = 1e-2) -> FiniteDifferenceResult:
    """Central differences ``(f(x+h) - f(x-h)) / 2h`` for every scalar parameter.

    ``loss_fn`` receives a dict of float64 arrays.  Scalars whose one-sided
    slopes differ by more than ``kink_tol`` (relative) are reported as kinks;
    their central estimate is still returned.
    """
    theta = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    f0 = float(loss_fn(theta))
    if float(loss_fn(theta)) != f0:
        raise NonDeterministicLoss("two evaluations at identical parameters differ")
    grads, kinks = {}, []
    for name, arr in theta.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            fp = float(loss_fn(theta))
            flat[i] = old - step
            fm = float(loss_fn(theta))
            flat[i] = old
            g.reshape(-1)[i] = (fp - fm) / (2 * step)
            right, left = (fp - f0) / step, (f0 - fm) / step
            if abs(right - left) > kink_tol * max(1.0, abs(right), abs(left)):
                kinks.append((name, np.unravel_index(i, arr.shape)))
        grads[name] = g
    return FiniteDifferenceResult(grads, kinks)


def relative_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


# ---------------------------------------------------------------- gating statistics

def _softplus(z):
    return np.logaddexp(0.0, z)


def gating_equivalence_check(mu, sigma, WH, n_samples: int = 100_000, seed: int = 0,
                             logits_fn: Callable[[np.ndarray], np.ndarray] | None = None,
                             name: str = "gating_equivalence") -> OracleReport:
    """Monte-Carlo test that ``H = WH (mu + eps * sigma)`` has the Gaussian
    moments ``mean = WH mu`` and ``var_i = sum_j (WH_ij sigma_j)^2``.

    ``sigma`` is the post-softplus scale.  ``logits_fn`` maps a batch of noise
    draws ``(n, M)`` to logits; by default the formula is evaluated directly.
    """
    if n_samples < 10_000:
        raise ValueError("need at least 10,000 samples")
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    WH = np.asarray(WH, dtype=np.float64)
    eps = np.random.default_rng(seed).standard_normal((n_samples, len(mu)))
    if logits_fn is None:
        H = np.einsum("ij,nj->ni", WH, mu + eps * sigma)
    else:
        H = np.asarray(logits_fn(eps), dtype=np.float64)

    want_mean = WH @ mu
    want_var = (WH ** 2) @ (sigma ** 2)
    got_mean = H.mean(axis=0)
    got_var = H.var(axis=0, ddof=1)

    se = np.sqrt(want_var / n_samples)
    mean_err = np.abs(got_mean - want_mean)
    var_err = np.abs(got_var - want_var)
    ok_mean = np.where(se > 0, mean_err <= TOLERANCES["gating_mean_se"] * se,
                       mean_err <= 1e-12 * np.maximum(1.0, np.abs(want_mean)))
    ok_var = np.where(want_var > 0, var_err <= TOLERANCES["gating_var_rel"] * want_var, got_var == 0)
    rel_var = np.where(want_var > 0, var_err / np.where(want_var > 0, want_var, 1.0), var_err)
    worst = int(np.argmax(rel_var))
    details = (f"worst component {worst}: mean {got_mean[worst]:.6g} vs {want_mean[worst]:.6g} "
               f"(se {se[worst]:.3g}), var {got_var[worst]:.6g} vs {want_var[worst]:.6g}")
    return OracleReport(name, float(mean_err.max()), float(rel_var.max()), int(len(mu)),
                        bool(ok_mean.all() and ok_var.all()), details, TOLERANCES["gating_var_rel"])


# ---------------------------------------------------------------- temporal module

def reference_decompose(x, kernel: int) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    T = len(x)
    half = (kernel - 1) // 2
    trend = np.empty(T)
    for t in range(T):
        acc = 0.0
        for j in range(t - half, t + half + 1):
            acc += x[min(max(j, 0), T - 1)]
        trend[t] = acc / kernel
    return trend, x - trend


def dense_mixture_oracle(X_norm, params: Mapping[str, np.ndarray], k: int, kernel: int,
                         eps=None) -> np.ndarray:
    """Temporal features with every extractor evaluated and top-k realized by
    writing -inf into the non-selected logits before a full softmax.

    ``params`` holds ``W0_mu, W1_mu, W0_sigma, W1_sigma, WH, Wt, Ws`` as
    arrays; ``eps`` (same shape as the logits) defaults to zero.
    """
    X = np.asarray(X_norm, dtype=np.float64)
    lead = X.shape[:-1]
    rows = X.reshape(-1, X.shape[-1])
    Wt, Ws = np.asarray(params["Wt"], np.float64), np.asarray(params["Ws"], np.float64)
    M, _, d = Wt.shape
    noise = np.zeros((rows.shape[0], M)) if eps is None else np.asarray(eps, np.float64).reshape(-1, M)
    out = np.zeros((rows.shape[0], d))
    for r, x in enumerate(rows):
        mu = np.maximum(x @ params["W0_mu"], 0.0) @ params["W1_mu"]
        sraw = np.maximum(x @ params["W0_sigma"], 0.0) @ params["W1_sigma"]
        H = np.asarray(params["WH"], np.float64) @ (mu + noise[r] * _softplus(sraw))
        order = sorted(range(M), key=lambda i: (-H[i], i))
        kept = np.full(M, -np.inf)
        for i in order[:k]:
            kept[i] = H[i]
        w = np.exp(kept - kept.max())
        w /= w.sum()
        trend, seasonal = reference_decompose(x, kernel)
        for i in range(M):
            out[r] += w[i] * (trend @ Wt[i] + seasonal @ Ws[i])
    return out.reshape(*lead, d)


# ---------------------------------------------------------------- channel module

def reference_distances(features, A=None, kind: str = "learned_mahalanobis") -> np.ndarray:
    F_ = np.asarray(features, dtype=np.float64)
    N = F_.shape[0]
    D = np.zeros((N, N))
    for i in range(N):
        for j in range(N):
            if i == j:
                continue
            diff = F_[i] - F_[j]
            if kind == "learned_mahalanobis":
                v = np.asarray(A, np.float64) @ diff
                D[i, j] = float(v @ v)
            elif kind == "euclidean":
                D[i, j] = float(diff @ diff)
            elif kind == "cosine":
                na, nb = np.linalg.norm(F_[i]), np.linalg.norm(F_[j])
                cos = 1.0 if na == nb == 0 else (0.0 if na * nb == 0 else float(F_[i] @ F_[j]) / (na * nb))
                D[i, j] = 1.0 - cos
    return D


def reference_probabilities(D, gamma: float, d_floor: float = 1e-8) -> np.ndarray:
    D = np.asarray(D, dtype=np.float64)
    N = D.shape[0]
    C = np.zeros((N, N))
    for i in range(N):
        for j in range(N):
            if i != j:
                C[i, j] = 1.0 / max(D[i, j], d_floor)
    P = np.eye(N)
    for i in range(N):
        row_max = max((C[i, j] for j in range(N) if j != i), default=0.0)
        for j in range(N):
            if i != j and row_max > 0:
                P[i, j] = C[i, j] * gamma / row_max
    return P


# ---------------------------------------------------------------- fusion and end to end

def _layer_norm(x, gain, bias, eps=1e-5):
    mean = x.mean(axis=-1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * gain + bias


_erf = np.vectorize(math.erf)


def _gelu(x):
    return 0.5 * x * (1.0 + _erf(x / math.sqrt(2.0)))


def reference_attention(X, mask, WQ, WK, WV) -> np.ndarray:
    X = np.asarray(X, np.float64)
    Q, K, V = X @ WQ, X @ WK, X @ WV
    d = WQ.shape[0]
    N = X.shape[0]
    out = np.zeros((N, V.shape[1]))
    for i in range(N):
        live = [j for j in range(N) if mask[i][j] == 1]
        s = np.array([Q[i] @ K[j] / math.sqrt(d) for j in live])
        w = np.exp(s - s.max())
        w /= w.sum()
        for wj, j in zip(w, live):
            out[i] += wj * V[j]
    return out


def reference_fusion_block(X, mask, p: Mapping[str, np.ndarray]) -> np.ndarray:
    X = np.asarray(X, np.float64)
    h = X + reference_attention(_layer_norm(X, p["ln1_gain"], p["ln1_bias"]), mask, p["WQ"], p["WK"], p["WV"])
    z = _layer_norm(h, p["ln2_gain"], p["ln2_bias"])
    return h + _gelu(z @ p["ffn_W1"] + p["ffn_b1"]) @ p["ffn_W2"] + p["ffn_b2"]


def reference_forward(X, params: Mapping[str, np.ndarray], *, k: int, kernel: int, gamma: float,
                      threshold: float = 0.5, std_floor: float = 1e-5, d_floor: float = 1e-8) -> np.ndarray:
    """Eval-mode forecast for one window ``(N, T)`` of the full variant.

    ``params`` uses the model's state-dict names (``router.WH``,
    ``fusion.WQ``, ``metric.A``, ...).
    """
    X = np.asarray(X, np.float64)
    N, T = X.shape
    mean = X.mean(axis=1, keepdims=True)
    std = np.maximum(np.sqrt(((X - mean) ** 2).mean(axis=1, keepdims=True)), std_floor)
    Xn = (X - mean) / std

    tcm = {name.split(".", 1)[1]: v for name, v in params.items() if name.startswith(("router.", "extractors."))}
    temporal = dense_mixture_oracle(Xn, tcm, k, kernel)

    amps = np.stack([dft_oracle(row) for row in Xn])
    P = reference_probabilities(reference_distances(amps, params["metric.A"]), gamma, d_floor)
    mask = (P >= threshold).astype(int)
    np.fill_diagonal(mask, 1)

    fusion = {name.split(".", 1)[1]: v for name, v in params.items() if name.startswith("fusion.")}
    mixed = reference_fusion_block(temporal, mask, fusion)
    y = mixed @ params["predictor.WO"]
    return y * std + mean
