"""Link-level Monte-Carlo oracles: simulate pilot transmission, MMSE
estimation and MR/ZF combining on explicit M-antenna channels, and report
the empirical SINR decomposition. Used to validate every closed-form
expression against an independent signal-level path.

Intended for small instances only; a dimension guard rejects anything
beyond desk scale.
"""

from dataclasses import dataclass

import numpy as np

from .scenario import SystemDimensions, LargeScaleGains, PilotAllocation
from .estimation import PowerAllocation, compute_gamma_bs, gamma_cu_bs_full

DIMENSION_GUARD = 10_000


@dataclass
class EmpiricalSinr:
    """Empirical use-and-forget decomposition with per-term standard errors.

    The whole same-pilot other-cell contribution is reported under
    coherent_contamination (its coherent and non-coherent parts are not
    separable from samples alone).
    """

    numerator: float
    denominator_terms: dict
    sinr: float
    stderr: dict
    num_realizations: int


def _check_guard(dims: SystemDimensions):
    load = dims.antennas_per_bs * (dims.cus_per_cell * dims.num_cells + dims.num_d2d_pairs)
    if load > DIMENSION_GUARD:
        raise ValueError(f"oracle dimension guard exceeded: M*(K*B+L) = {load} > {DIMENSION_GUARD}")


def _crandn(rng, *shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


class _Welford:
    """Streaming mean/variance for batched statistics."""

    def __init__(self):
        self.n = 0
        self.total = 0.0
        self.total_sq = 0.0

    def add(self, batch):
        batch = np.asarray(batch)
        self.n += batch.shape[0]
        self.total += batch.sum(axis=0)
        self.total_sq += np.abs(batch * np.conj(batch)).sum(axis=0).real

    @property
    def mean(self):
        return self.total / self.n

    @property
    def stderr(self):
        var = self.total_sq / self.n - np.abs(self.mean) ** 2
        return np.sqrt(np.maximum(var, 0.0) / self.n)


def empirical_gamma(tau, pilot_powers, betas, target, num_realizations=100_000,
                    rng=None, combined=False):
    """Empirical mean square of the MMSE estimate of one scalar channel that
    shares a despread pilot observation with the given co-pilot channels.

    With combined=True the estimated quantity is the plain sum of the
    co-pilot channels instead of channel `target`.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    pilot_powers = np.asarray(pilot_powers, dtype=float)
    betas = np.asarray(betas, dtype=float)
    h = _crandn(rng, num_realizations, betas.size) * np.sqrt(betas)
    y = h @ np.sqrt(tau * pilot_powers) + _crandn(rng, num_realizations)
    den = 1.0 + tau * float(pilot_powers @ betas)
    if combined:
        coeff = float(np.sqrt(tau * pilot_powers) @ betas) / den
    else:
        coeff = np.sqrt(tau * pilot_powers[target]) * betas[target] / den
    return float(np.mean(np.abs(coeff * y) ** 2))


def _draw_channels(rng, batch, dims, gains, b):
    """Channels into BS b for one batch: (batch, B, K, M) CU channels and
    (batch, L, M) D2D channels."""
    m = dims.antennas_per_bs
    h_cu = _crandn(rng, batch, dims.num_cells, dims.cus_per_cell, m) \
        * np.sqrt(gains.beta_cu_bs[b])[None, :, :, None]
    h_d2d = _crandn(rng, batch, dims.num_d2d_pairs, m) \
        * np.sqrt(gains.beta_d2dtx_bs[b])[None, :, None]
    return h_cu, h_d2d


def _despread_cu_obs(rng, h_cu, alloc, tau):
    """Per-pilot despread observations (batch, K, M)."""
    batch, _, k_, m = h_cu.shape
    signal = np.einsum("bk,sbkm->skm", np.sqrt(tau * alloc.pilot_cu), h_cu)
    return signal + _crandn(rng, batch, k_, m)


def _despread_d2d_obs(rng, h_d2d, alloc, pilots, tau, n_sets):
    """Per-pilot-set despread observations (batch, N, M)."""
    batch, l_, m = h_d2d.shape
    obs = _crandn(rng, batch, n_sets, m)
    for j in range(l_):
        obs[:, pilots.pair_to_pilot[j], :] += np.sqrt(tau * alloc.pilot_d2d[j]) * h_d2d[:, j, :]
    return obs


def _accumulate_uatf(stats, v, h_cu, h_d2d, b, k):
    """Push one batch of combiner/channel inner products into the stats."""
    proj_cu = np.einsum("sm,sbkm->sbk", np.conj(v), h_cu)
    proj_d2d = np.einsum("sm,slm->sl", np.conj(v), h_d2d)
    stats["desired"].add(proj_cu[:, b, k][:, None])
    stats["cu_sq"].add(np.abs(proj_cu) ** 2)
    stats["d2d_sq"].add(np.abs(proj_d2d) ** 2)
    stats["vnorm"].add(np.sum(np.abs(v) ** 2, axis=1)[:, None])


def _finalize(stats, alloc, dims, b, k):
    mean_desired = complex(stats["desired"].mean[0])
    cu_sq = stats["cu_sq"].mean          # (B, K) E|v^H h|^2
    d2d_sq = stats["d2d_sq"].mean        # (L,)
    noise = float(stats["vnorm"].mean[0])
    p = alloc.data_cu
    others = np.arange(dims.num_cells) != b

    numerator = p[b, k] * abs(mean_desired) ** 2
    own_var = p[b, k] * (cu_sq[b, k] - abs(mean_desired) ** 2)
    terms = {
        "noise": noise,
        "estimation_error": float(own_var),
        "intra_cell": float(p[b] @ cu_sq[b] - p[b, k] * cu_sq[b, k]),
        "inter_cell": float((p[others] * cu_sq[others]).sum()
                            - p[others, k] @ cu_sq[others, k]),
        "d2d_interference": float(alloc.data_d2d @ d2d_sq),
        "coherent_contamination": float(p[others, k] @ cu_sq[others, k]),
    }
    total = sum(terms.values())
    stderr = {
        "numerator": 2 * abs(mean_desired) * p[b, k] * float(stats["desired"].stderr[0]),
        "noise": float(stats["vnorm"].stderr[0]),
        "cu_terms": float(np.sum(p * stats["cu_sq"].stderr)),
        "d2d_terms": float(alloc.data_d2d @ stats["d2d_sq"].stderr),
    }
    return EmpiricalSinr(float(numerator), terms, float(numerator / total),
                         stderr, stats["vnorm"].n)


def oracle_uatf_mr(dims: SystemDimensions, gains: LargeScaleGains,
                   pilots: PilotAllocation, alloc: PowerAllocation,
                   b: int, k: int, num_realizations=100_000, rng=None,
                   batch=2000) -> EmpiricalSinr:
    """Empirical MR use-and-forget SINR of CU k at BS b from simulated
    pilot + data transmission."""
    _check_guard(dims)
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    tau = dims.pilot_len
    denom = 1.0 + tau * float(alloc.pilot_cu[:, k] @ gains.beta_cu_bs[b, :, k])
    coeff = np.sqrt(tau * alloc.pilot_cu[b, k]) * gains.beta_cu_bs[b, b, k] / denom

    stats = {name: _Welford() for name in ("desired", "cu_sq", "d2d_sq", "vnorm")}
    done = 0
    while done < num_realizations:
        nb = min(batch, num_realizations - done)
        h_cu, h_d2d = _draw_channels(rng, nb, dims, gains, b)
        obs = _despread_cu_obs(rng, h_cu, alloc, tau)
        v = coeff * obs[:, k, :]
        _accumulate_uatf(stats, v, h_cu, h_d2d, b, k)
        done += nb
    return _finalize(stats, alloc, dims, b, k)


def oracle_zf(dims: SystemDimensions, gains: LargeScaleGains,
              pilots: PilotAllocation, alloc: PowerAllocation,
              b: int, k: int, num_realizations=100_000, rng=None,
              batch=2000) -> EmpiricalSinr:
    """Empirical ZF SINR of CU k at BS b. The detector is built per
    realization from the estimated own-cell CU channels and the N combined
    pilot-set channels."""
    _check_guard(dims)
    dims.require_zf()
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    tau = dims.pilot_len
    n_sets = dims.num_d2d_pilots
    k_ = dims.cus_per_cell

    gamma_full = gamma_cu_bs_full(gains, alloc, dims)
    q_bs = compute_gamma_bs(gains, alloc, pilots, dims)
    gamma_diag = np.concatenate([gamma_full[b, b, :], q_bs.gamma_set_bs[b]])

    den_cu = 1.0 + tau * np.einsum("jk,jk->k", alloc.pilot_cu, gains.beta_cu_bs[b])
    coeff_cu = np.sqrt(tau * alloc.pilot_cu[b]) * gains.beta_cu_bs[b, b] / den_cu  # (K,)
    coeff_set = np.zeros(n_sets)
    for i, grp in enumerate(pilots.d2d_pilot_sets):
        t = sum(tau * alloc.pilot_d2d[j] * gains.beta_d2dtx_bs[b, j] for j in grp)
        coeff_set[i] = sum(np.sqrt(tau * alloc.pilot_d2d[j]) * gains.beta_d2dtx_bs[b, j]
                           for j in grp) / (1.0 + t)

    stats = {name: _Welford() for name in ("desired", "cu_sq", "d2d_sq", "vnorm")}
    done = 0
    while done < num_realizations:
        nb = min(batch, num_realizations - done)
        h_cu, h_d2d = _draw_channels(rng, nb, dims, gains, b)
        obs_cu = _despread_cu_obs(rng, h_cu, alloc, tau)
        obs_set = _despread_d2d_obs(rng, h_d2d, alloc, pilots, tau, n_sets)
        est = np.concatenate([coeff_cu[None, :, None] * obs_cu,
                              coeff_set[None, :, None] * obs_set], axis=1)  # (s, K+N, M)
        hhat = est.transpose(0, 2, 1)                                       # (s, M, K+N)
        gram = np.einsum("smi,smj->sij", np.conj(hhat), hhat)
        v_all = np.einsum("smi,sij->smj", hhat, np.linalg.inv(gram)) \
            * np.sqrt(gamma_diag)[None, None, :]
        _accumulate_uatf(stats, v_all[:, :, k], h_cu, h_d2d, b, k)
        done += nb
    return _finalize(stats, alloc, dims, b, k)


def wishart_inverse_diagonal_mean(m: int, cols: int, num_samples=10_000, rng=None):
    """Empirical mean of [(Z^H Z)^{-1}]_{kk} over i.i.d. complex standard
    Gaussian M x cols matrices, averaged over k; the analytic value is
    1 / (m - cols)."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    total = 0.0
    batch = max(1, min(num_samples, 10_000_000 // (m * cols)))
    done = 0
    while done < num_samples:
        nb = min(batch, num_samples - done)
        z = _crandn(rng, nb, m, cols)
        gram = np.einsum("smi,smj->sij", np.conj(z), z)
        inv = np.linalg.inv(gram)
        total += np.einsum("sii->s", inv).real.sum() / cols
        done += nb
    return total / num_samples
