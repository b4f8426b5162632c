"""Convergence diagnostics: split potential scale reduction and effective sample size."""
from __future__ import annotations

import numpy as np

from .errors import InsufficientChains


def _as_chains(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    return x


def split_psrf(chains) -> float:
    """Split-chain PSRF (each chain halved) for one scalar parameter.

    ``chains`` has shape (n_chains, n_draws). Zero within- and between-chain
    variance gives 1.0.
    """
    x = _as_chains(chains)
    if x.shape[0] < 2:
        raise InsufficientChains("PSRF needs at least two chains")
    half = x.shape[1] // 2
    if half < 2:
        raise ValueError("need at least 4 draws per chain")
    parts = np.concatenate([x[:, :half], x[:, -half:]], axis=0)
    n = parts.shape[1]
    W = parts.var(axis=1, ddof=1).mean()
    B = n * parts.mean(axis=1).var(ddof=1)
    if W == 0:
        return 1.0 if B == 0 else float("inf")
    var_plus = (n - 1) / n * W + B / n
    return float(max(1.0, np.sqrt(var_plus / W)))


def _autocov(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    centered = x - x.mean(axis=-1, keepdims=True)
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(centered, size, axis=-1)
    ac = np.fft.irfft(f * np.conj(f), size, axis=-1)[..., :n]
    return ac / n


def ess(chains) -> float:
    """Multi-chain effective sample size with Geyer's initial monotone sequence."""
    x = _as_chains(chains)
    m, n = x.shape
    total = m * n
    if n < 4:
        return float(total)
    acov = _autocov(x)
    chain_var = acov[:, 0] * n / (n - 1)
    W = chain_var.mean()
    if W == 0:
        return float(total)
    var_plus = W * (n - 1) / n
    if m > 1:
        var_plus += x.mean(axis=1).var(ddof=1)
    rho = 1.0 - (W - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # pair sums, truncated at the first non-positive pair and made monotone
    tau = -1.0
    prev = np.inf
    for k in range(0, n - 1, 2):
        p = rho[k] + rho[k + 1]
        if p <= 0:
            break
        p = min(p, prev)
        tau += 2.0 * p
        prev = p
    tau = max(tau, 1.0 / np.log10(total)) if total > 10 else max(tau, 1e-3)
    return float(total / tau)


def mcse(chains) -> float:
    """Monte-Carlo standard error of the posterior mean."""
    x = _as_chains(chains)
    return float(x.std(ddof=1) / np.sqrt(ess(x)))


def summarize(named_chains: dict[str, np.ndarray]) -> dict[str, dict[str, float]]:
    """PSRF (when >= 2 chains) and ESS for each named (n_chains, n_draws) array."""
    out = {}
    for name, x in named_chains.items():
        x = _as_chains(x)
        entry = {"ess": ess(x)}
        if x.shape[0] >= 2 and x.shape[1] >= 4:
            entry["psrf"] = split_psrf(x)
        out[name] = entry
    return out
