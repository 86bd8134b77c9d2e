"""Tests for controls, p-variation dynamic programs, and the Gronwall bound."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from roughflow import (
    Control,
    ControlError,
    GridError,
    HypothesisError,
    InfeasibleLocalizationError,
    Localization,
    best_control,
    localized_p_variation,
    p_variation,
    rough_gronwall_bound,
)
from reference import increment_norms, pvar_by_enumeration


# ---------------------------------------------------------------------------
# plain p-variation
# ---------------------------------------------------------------------------

def test_zigzag_square_variation():
    # four unit swings: every swing must be its own cell
    assert p_variation([0.0, 1.0, 0.0, 1.0, 0.0], p=2.0) == 4.0


def test_monotone_path_single_cell():
    # for monotone data the single cell [0, T] dominates every refinement
    assert p_variation([0.0, 0.2, 0.7, 1.0], p=2.0) == pytest.approx(1.0, abs=0)


def test_pvariation_argmax_partition():
    value, nodes = p_variation([0.0, 1.0, 0.0, 1.0, 0.0], p=2.0, return_partition=True)
    assert value == 4.0
    assert nodes == [0, 1, 2, 3, 4]


def test_pvariation_rejects_bad_inputs():
    with pytest.raises(HypothesisError):
        p_variation([0.0, 1.0], p=0.5)
    with pytest.raises(GridError):
        p_variation(np.empty((0, 2)), p=2.0)
    with pytest.raises(GridError):
        p_variation()  # neither values nor increments


def test_single_sample_has_zero_variation():
    assert p_variation([3.7], p=2.0) == 0.0


def test_vector_valued_path_uses_euclidean_norm():
    path = np.array([[0.0, 0.0], [3.0, 4.0], [0.0, 0.0]])
    # |increment| = 5 each way
    assert p_variation(path, p=2.0) == pytest.approx(50.0)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(-10, 10, allow_nan=False, width=32), min_size=2, max_size=10),
    st.sampled_from([1.0, 1.5, 2.0, 2.7, 3.0]),
)
def test_dp_matches_enumeration(samples, p):
    values = np.asarray(samples, dtype=float)
    got = p_variation(values, p=p)
    want, _ = pvar_by_enumeration(increment_norms(values=values), p)
    # identical float arithmetic per partition, so the maxima agree exactly
    assert got == want


# ---------------------------------------------------------------------------
# localized p-variation
# ---------------------------------------------------------------------------

def _interval_loc(times, exponent, L, scale=1.0):
    return Localization(Control.interval_power(times, exponent, scale), L)


def test_generous_threshold_recovers_unrestricted():
    rng = np.random.default_rng(7)
    times = np.linspace(0.0, 1.0, 12)
    values = rng.standard_normal(12).cumsum()
    loc = _interval_loc(times, exponent=2.0, L=2.0)  # ω̄(0,T)=1 ≤ L
    assert localized_p_variation(values, 2.0, loc) == p_variation(values, 2.0)


def test_infeasible_threshold_reports_offending_step():
    times = np.array([0.0, 0.5, 1.0])
    loc = _interval_loc(times, exponent=1.0, L=0.25)
    with pytest.raises(InfeasibleLocalizationError) as exc:
        localized_p_variation([0.0, 1.0, 2.0], 2.0, loc)
    assert exc.value.step == 0


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.floats(-5, 5, allow_nan=False, width=32), min_size=3, max_size=9),
    st.floats(0.15, 1.0),
)
def test_localized_dp_matches_constrained_enumeration(samples, L):
    values = np.asarray(samples, dtype=float)
    n = values.size - 1
    times = np.linspace(0.0, 1.0, values.size)
    if 1.0 / n > L:  # keep instances feasible
        L = 1.5 / n
    loc = _interval_loc(times, exponent=1.0, L=L)
    got = localized_p_variation(values, 2.0, loc)
    want, _ = pvar_by_enumeration(increment_norms(values=values), 2.0, mask=loc.mask(times))
    assert got == want


def test_halving_threshold_costs_at_most_two_to_p_minus_one():
    # additive increments: an admissible cell [s,t] splits at the last node u
    # with ω̄(s,u) ≤ L/2, and superadditivity leaves ω̄(u,t) ≤ L/2 + (one grid
    # step); so ‖g‖^p_{(ω̄,L)} ≤ 2^{p-1} ‖g‖^p_{(ω̄, L/2 + step)}, which is the
    # grid-exact form of the continuum halving inequality.
    rng = np.random.default_rng(21)
    n = 512
    times = np.linspace(0.0, 1.0, n + 1)
    values = np.concatenate([[0.0], rng.standard_normal(n).cumsum()]) / math.sqrt(n)
    p = 2.5
    control = Control.interval_power(times, exponent=1.0)
    step_slack = float(np.max(control(times[:-1], times[1:])))
    for L in (0.5, 0.25):
        full = localized_p_variation(values, p, Localization(control, L))
        half = localized_p_variation(values, p, Localization(control, L / 2 + step_slack))
        assert full <= 2 ** (p - 1) * half * (1.0 + 1e-12)


def test_localized_variation_vanishes_with_threshold_for_larger_exponent():
    # for q > p the localized q-variation is ≤ (max admissible |g|)^{q-p} ‖g‖_p^p,
    # which decays like L^{(q-p)/p}; check monotone decay plus that bound
    rng = np.random.default_rng(3)
    n = 1024
    times = np.linspace(0.0, 1.0, n + 1)
    values = np.concatenate([[0.0], rng.standard_normal(n).cumsum()]) / math.sqrt(n)
    control = Control.interval_power(times, exponent=1.0)
    p, q = 2.0, 4.0
    pvar = p_variation(values, p)
    norms = increment_norms(values=values)
    vals = []
    for L in (0.25, 0.125, 0.0625, 0.03125):
        loc = Localization(control, L)
        val = localized_p_variation(values, q, loc)
        vals.append(val)
        max_adm = float(norms[loc.mask(times)].max())
        assert val <= max_adm ** (q - p) * pvar * (1 + 1e-12)
    assert all(b <= a * (1 + 1e-12) for a, b in zip(vals, vals[1:]))
    assert vals[-1] < 0.6 * vals[0]


# ---------------------------------------------------------------------------
# controls and best controls
# ---------------------------------------------------------------------------

def test_interval_power_below_one_rejected():
    with pytest.raises(ControlError):
        Control.interval_power([0.0, 1.0], exponent=0.8)


def test_control_sum_and_scale_pass_checks():
    times = np.linspace(0.0, 2.0, 9)
    ctrl = Control.interval_power(times, 1.5) + 3.0 * Control.interval_power(times, 2.0)
    ctrl.check()
    assert ctrl.kind == "sum"
    with pytest.raises(ControlError):
        (-1.0) * ctrl


def test_table_control_rejects_off_grid_queries():
    times = np.array([0.0, 1.0, 2.0])
    ctrl = Control.from_table(times, np.zeros((3, 3)))
    with pytest.raises(GridError):
        ctrl(0.0, 1.37)


def test_non_superadditive_table_fails_check():
    times = np.array([0.0, 1.0, 2.0])
    table = np.zeros((3, 3))
    table[0, 1] = table[1, 2] = 1.0
    table[0, 2] = 1.5  # violates ω(0,1)+ω(1,2) ≤ ω(0,2)
    with pytest.raises(ControlError):
        Control.from_table(times, table).check()


def test_best_control_dominates_and_is_superadditive():
    rng = np.random.default_rng(11)
    times = np.linspace(0.0, 1.0, 17)
    values = rng.standard_normal(17).cumsum() / 4.0
    p = 2.2
    loc = _interval_loc(times, exponent=1.0, L=0.4)
    ctrl = best_control(values, p, loc)
    ctrl.check()
    norms = increment_norms(values=values)
    mask = loc.mask(times)
    for i in range(17):
        for j in range(i + 1, 17):
            if mask[i, j]:
                assert norms[i, j] ** p <= ctrl(times[i], times[j]) + 1e-12


def test_best_control_window_values_match_localized_variation():
    rng = np.random.default_rng(13)
    times = np.linspace(0.0, 1.0, 11)
    values = rng.standard_normal(11).cumsum()
    loc = _interval_loc(times, exponent=1.0, L=0.55)
    ctrl = best_control(values, 2.0, loc)
    sub = slice(2, 9)
    want = localized_p_variation(values[sub], 2.0, loc, times=times[sub])
    assert ctrl(times[2], times[8]) == pytest.approx(want, rel=1e-14)


def test_best_control_full_interval_equals_p_variation():
    values = [0.0, 1.0, 0.0, 1.0, 0.0]
    times = np.linspace(0.0, 1.0, 5)
    ctrl = best_control(values, 2.0, times=times)
    assert ctrl(0.0, 1.0) == 4.0


# ---------------------------------------------------------------------------
# rough Gronwall bound
# ---------------------------------------------------------------------------

def test_gronwall_bound_with_vanishing_controls():
    times = np.linspace(0.0, 1.0, 5)
    zero = Control.zero(times)
    bound = rough_gronwall_bound(0.3, zero, zero, zero, L=1.0, C=1.0, k=2.0,
                                 k_prime=1.0, C_prime=0.7)
    assert bound == pytest.approx(2.0 * (0.3 + 0.7))


def test_gronwall_alpha_matches_closed_form():
    # with ω₂ = ω₃ = 0 the bound is 2·exp(ω₁(0,T)/(αL))·(G0 + C'), so α can be
    # read off; at L=1, C=1, k=2 it equals min(1, (2e²)^{-2}) ≈ 4.579e-3
    times = np.linspace(0.0, 1.0, 3)
    w1 = Control.interval_power(times, 1.0, scale=0.01)
    bound = rough_gronwall_bound(1.0, w1, L=1.0, C=1.0, k=2.0, k_prime=1.0)
    alpha = 0.01 / math.log(bound / 2.0)
    assert alpha == pytest.approx(1.0 / (2.0 * math.e ** 2) ** 2, rel=1e-9)
    assert alpha == pytest.approx(4.579e-3, rel=1e-3)


def test_gronwall_rejects_bad_constants_and_domination():
    times = np.linspace(0.0, 1.0, 4)
    w = Control.interval_power(times, 1.0)
    with pytest.raises(HypothesisError):
        rough_gronwall_bound(0.0, w, L=-1.0, C=1.0, k=2.0, k_prime=1.0)
    with pytest.raises(HypothesisError):
        rough_gronwall_bound(0.0, w, L=1.0, C=1.0, k=1.0, k_prime=2.0)
    # ω₂ = 2·ω₁ violates ω₂ ≤ ω₁
    with pytest.raises(HypothesisError):
        rough_gronwall_bound(0.0, w, 2.0 * w, L=1.0, C=1.0, k=2.0, k_prime=1.0)


def make_gronwall_instance(seed):
    """Synthetic (G, controls, constants) satisfying the increment hypothesis.

    Builds a smooth nonnegative path and shrinks its oscillation until the
    hypothesis holds on every localized grid pair, then returns everything
    needed to evaluate the bound.  Used here and by the acceptance suite.
    """
    rng = np.random.default_rng(seed)
    n = 48
    times = np.linspace(0.0, float(rng.uniform(0.5, 2.0)), n + 1)
    T = times[-1]
    k = float(rng.uniform(1.5, 3.0))
    k_prime = float(rng.uniform(1.0, k))
    C = float(rng.uniform(0.5, 3.0))
    C_prime = float(rng.choice([0.0, 0.2, 1.0]))
    G0 = float(rng.choice([0.0, 0.3, 1.0]))
    L = float(rng.uniform(0.3, 1.5))
    # keep ω₁(0,T)/(αL) ≤ ~400 so the bound stays finite (it is conservative
    # to the point of overflow otherwise — still a bound, but uninformative)
    alpha_L = min(L, (2 * C * np.e ** 2) ** -k)
    exponent1 = float(rng.uniform(1.0, 2.0))
    scale_cap = 400.0 * alpha_L / T ** exponent1
    w1 = Control.interval_power(times, exponent1,
                                scale=float(rng.uniform(0.2, 1.0)) * min(scale_cap, 2.0))
    w2 = float(rng.uniform(0.0, 1.0)) * w1          # guarantees ω₂ ≤ ω₁
    w3 = Control.interval_power(times, float(rng.uniform(1.0, 2.0)),
                                scale=float(rng.uniform(0.0, 0.5)))

    modes = rng.uniform(0.5, 3.0, size=3)
    phases = rng.uniform(0.0, 2 * np.pi, size=3)
    amps = rng.uniform(0.0, 1.0, size=3)
    wiggle = sum(a * (1.0 - np.cos(m * times / T * 2 * np.pi + ph) + 1.0 + np.sin(ph))
                 for a, m, ph in zip(amps, modes, phases))
    wiggle = wiggle - wiggle.min()  # nonnegative deviation from G0

    def hypothesis_holds(G):
        for i in range(n + 1):
            for j in range(i + 1, n + 1):
                o1 = w1(times[i], times[j])
                if o1 > L:
                    continue
                lhs = G[j] - G[i]
                rhs = (C * (G[i:j + 1].max() + C_prime) * o1 ** (1.0 / k)
                       + w2(times[i], times[j]) ** (1.0 / k_prime)
                       + w3(times[i], times[j]))
                if lhs > rhs + 1e-12:
                    return False
        return True

    scale = 1.0
    G = G0 + scale * wiggle
    for _ in range(60):
        if hypothesis_holds(G):
            break
        scale *= 0.5
        G = G0 + scale * wiggle
    else:
        raise AssertionError("could not shrink the synthetic path into the hypothesis")
    return dict(G=G, times=times, w1=w1, w2=w2, w3=w3, L=L, C=C, k=k,
                k_prime=k_prime, C_prime=C_prime, G0=float(G[0]))


@pytest.mark.parametrize("seed", range(5))
def test_gronwall_bound_dominates_synthetic_paths(seed):
    inst = make_gronwall_instance(seed)
    bound = rough_gronwall_bound(inst["G0"], inst["w1"], inst["w2"], inst["w3"],
                                 L=inst["L"], C=inst["C"], k=inst["k"],
                                 k_prime=inst["k_prime"], C_prime=inst["C_prime"])
    assert inst["G"].max() <= bound
