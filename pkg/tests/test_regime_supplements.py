"""Companion evidence for the three acceptance criteria that fail at the
documented default pathloss constants: each underlying claim is reproduced
here in the regime where it holds, so the failures can be attributed to the
operating point rather than to the implementation.
"""

import numpy as np

from mimo_d2d import (ScenarioConfig, Scenario, PathlossModel, PowerAllocation,
                      full_power_allocation, evaluate_network, d2d_se_exact,
                      maxmin_data, maxprod_data)
from mimo_d2d.scenario import DEFAULT_FIXED_LOSS_DB
from mimo_d2d.harness import drop_seed


def test_d2d_tightness_holds_at_low_se():
    """The closed-form D2D approximation is tight where the SE is small:
    over a population of log-uniform power draws the sub-3 b/s/Hz mean gap
    meets the 0.1 b/s/Hz bound (companion to acceptance criterion 4)."""
    cfg = ScenarioConfig()
    gaps, approxes = [], []
    for seed in range(8):
        scn = Scenario.build(cfg, seed=seed)
        rng = np.random.default_rng(seed + 41)
        for _ in range(3):
            shape = (scn.dims.num_cells, scn.dims.cus_per_cell)
            pc = np.exp(rng.uniform(np.log(1e-3), np.log(scn.p_max), shape))
            pd = np.exp(rng.uniform(np.log(1e-3), np.log(scn.p_max),
                                    scn.dims.num_d2d_pairs))
            alloc = PowerAllocation(pc, pd, np.full(shape, scn.p_max),
                                    np.full(scn.dims.num_d2d_pairs, scn.p_max),
                                    scn.p_max)
            rep = evaluate_network(scn.dims, scn.gains, scn.pilots, alloc, "mr")
            for l in range(scn.dims.num_d2d_pairs):
                exact = d2d_se_exact(l, scn.gains, alloc, scn.pilots, scn.dims,
                                     num_samples=20_000, rng=rng)
                gaps.append(rep.d2d_se_approx[l] - exact)
                approxes.append(rep.d2d_se_approx[l])
    gaps, approxes = np.array(gaps), np.array(approxes)
    low = approxes <= 3.0
    assert low.sum() >= 100
    assert float(np.abs(gaps[low]).mean()) <= 0.1


def test_approximation_gap_grows_with_se(rng):
    """The overestimate is a numerator-averaging effect, so it grows with
    the interference-free SINR: near zero at low SE, approaching the
    prelog * log2(e) * EulerGamma ceiling at high SE."""
    cfg = ScenarioConfig(num_cells=1, antennas_per_bs=16, cus_per_cell=1,
                         num_d2d_pairs=1, num_d2d_pilots=1, coherence_len=2000,
                         area_side=400.0, p_max_mw=2e9)
    scn = Scenario.build(cfg, seed=1)
    beta = scn.gains.beta_d2dtx_d2drx[0, 0]
    pp = 1e9 / scn.dims.pilot_len / beta
    gaps = []
    for snr in (0.1, 1.0, 10.0, 100.0):
        alloc = PowerAllocation(np.zeros((1, 1)), np.array([snr / beta]),
                                np.zeros((1, 1)), np.array([pp]), 2e9)
        rep = evaluate_network(scn.dims, scn.gains, scn.pilots, alloc, "mr")
        exact = d2d_se_exact(0, scn.gains, alloc, scn.pilots, scn.dims,
                             num_samples=300_000, rng=rng)
        gaps.append(rep.d2d_se_approx[0] - exact)
    assert gaps[0] < 0.05
    assert all(b > a - 0.01 for a, b in zip(gaps, gaps[1:]))
    ceiling = scn.dims.prelog * np.euler_gamma / np.log(2.0)
    assert gaps[-1] < ceiling + 0.02
    assert gaps[-1] > 0.5  # already past the claimed bound at high SE


def test_zf_maxprod_full_power_at_weak_coupling():
    """Acceptance criterion 9's property holds once cross-links are weak
    enough that residual post-nulling interference is negligible; +20 dB of
    fixed loss puts the reference layout in that regime."""
    pl = PathlossModel(fixed_loss_db=DEFAULT_FIXED_LOSS_DB + 20.0)
    cfg = ScenarioConfig(pathloss=pl)
    at_pmax, ratios = [], []
    for drop in range(6):
        scn = Scenario.build(cfg, seed=drop_seed(919, drop))
        alloc, _, _ = maxprod_data(scn, "zf")
        p = np.concatenate([alloc.data_cu.ravel(), alloc.data_d2d])
        at_pmax.append(p >= 0.99 * scn.p_max)
        full = full_power_allocation(scn.dims, scn.p_max)
        rep_o = evaluate_network(scn.dims, scn.gains, scn.pilots, alloc, "zf")
        rep_f = evaluate_network(scn.dims, scn.gains, scn.pilots, full, "zf")
        ratios.append((rep_o.cu_se.sum() + rep_o.d2d_se_approx.sum())
                      / (rep_f.cu_se.sum() + rep_f.d2d_se_approx.sum()))
    assert float(np.concatenate(at_pmax).mean()) >= 0.90
    assert max(abs(r - 1.0) for r in ratios) <= 0.02


def test_zf_maxprod_beats_maxmin_at_full_power_fraction():
    """The relative form of the full-power property holds at the default
    constants: max-product keeps more variables at the budget than max-min
    does on the same drops."""
    cfg = ScenarioConfig()
    frac_prod, frac_min = [], []
    for drop in range(5):
        scn = Scenario.build(cfg, seed=drop_seed(929, drop))
        a_prod, _, _ = maxprod_data(scn, "zf")
        a_min, _, _ = maxmin_data(scn, "zf")
        for alloc, bucket in ((a_prod, frac_prod), (a_min, frac_min)):
            p = np.concatenate([alloc.data_cu.ravel(), alloc.data_d2d])
            bucket.append((p >= 0.99 * scn.p_max).mean())
    assert np.mean(frac_prod) > np.mean(frac_min)


def test_d2d_distance_trend_under_power_control():
    """Longer D2D links force the pairs to spend more power for the same SE
    target, which drags down the SE level every user can be guaranteed; the
    max-min controller surfaces the trend that equal power cannot
    (companion to acceptance criterion 10). Averaged D2D transmit power
    rises with the distance for the same reason."""
    levels, d2d_power = [], []
    for dist in (10.0, 50.0, 100.0):
        cfg = ScenarioConfig(d2d_link_distance=dist)
        lams, powers = [], []
        for drop in range(10):
            scn = Scenario.build(cfg, seed=drop_seed(111, drop))
            alloc, lam, _ = maxmin_data(scn, "mr")
            lams.append(lam)
            powers.append(alloc.data_d2d.mean())
        levels.append(float(np.mean(lams)))
        d2d_power.append(float(np.mean(powers)))
    assert levels[0] > levels[1] > levels[2]
    assert d2d_power[0] < d2d_power[1] < d2d_power[2]


def test_equal_power_cu_se_is_distance_invariant():
    """The structural reason criterion 10 cannot pass as stated: with all
    powers fixed, moving only the (non-transmitting) D2D receivers leaves
    every CU SINR bit-identical."""
    values = []
    for dist in (10.0, 100.0):
        cfg = ScenarioConfig(d2d_link_distance=dist)
        scn = Scenario.build(cfg, seed=drop_seed(121, 0))
        full = full_power_allocation(scn.dims, scn.p_max)
        rep = evaluate_network(scn.dims, scn.gains, scn.pilots, full, "mr")
        values.append(rep.cu_se.copy())
    assert np.array_equal(values[0], values[1])
