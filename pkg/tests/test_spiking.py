import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stflownet.network import NetConfig, init_params, qcfs_sites, zero_params
from stflownet.spiking import (
    LIFConfig,
    LIFState,
    SNNDiagnostics,
    SpikingModel,
    convert_a2s,
    firing_report,
    forward_snn,
    lif_step,
    set_leaks,
)
from stflownet.tensor import Tape, Tensor

import oracles


def run(currents, cfg, v0=0.0):
    """Feed a (steps, n) current trace through one LIF layer; return spikes and membranes."""
    currents = np.asarray(currents, dtype=float)
    state = LIFState.zeros(currents.shape[1:], v0)
    spikes, vs = [], []
    for c in currents:
        spikes.append(lif_step(state, Tensor(c), cfg).data.copy())
        vs.append(state.v.data.copy())
    return np.array(spikes), np.array(vs)


def tiny(N=2, **kw):
    return NetConfig(16, 16, N=N, base_channels=4, **kw)


def groups(rng, cfg, batch=1):
    return [Tensor(rng.poisson(0.4, size=(batch, 2, cfg.height, cfg.width)).astype(float)) for _ in range(cfg.N)]


class TestLIFStep:
    def test_soft_reset_subtracts_threshold(self):
        s, v = run([[1.2], [0.0]], LIFConfig(1.0, 0.0, "soft"))
        np.testing.assert_array_equal(s[:, 0], [1, 0])
        assert v[1, 0] == pytest.approx(0.2, abs=1e-15)

    def test_hard_reset_zeroes(self):
        s, v = run([[1.2], [0.0]], LIFConfig(1.0, 0.0, "hard"))
        np.testing.assert_array_equal(s[:, 0], [1, 0])
        assert v[1, 0] == 0.0

    def test_leak(self):
        cfg = LIFConfig(2.0, 0.8)
        assert cfg.decay == pytest.approx(0.4493, abs=5e-5)
        state = LIFState.zeros((1,), 1.0)
        lif_step(state, Tensor(np.zeros(1)), cfg)
        assert state.v.data[0] == pytest.approx(math.exp(-0.8), rel=1e-15)

    def test_threshold_is_inclusive(self):
        s, _ = run([[1.0, 0.999999]], LIFConfig(1.0))
        np.testing.assert_array_equal(s[0], [1, 0])

    @given(st.lists(st.floats(-2, 2, allow_nan=False), min_size=1, max_size=40), st.floats(0.1, 3.0))
    @settings(max_examples=80, deadline=None)
    def test_soft_reset_conservation(self, trace, theta):
        cur = np.array(trace)[:, None]
        s, v = run(cur, LIFConfig(theta))
        # reset for step t's spike lands at t+1, so count spikes strictly before t
        spikes_before = np.concatenate([[0.0], np.cumsum(s[:-1, 0])])
        residual = v[:, 0] + theta * spikes_before - np.cumsum(cur[:, 0])
        np.testing.assert_allclose(residual, 0.0, atol=1e-10)

    @given(st.lists(st.floats(-1, 0.3, allow_nan=False), min_size=1, max_size=20), st.floats(0.0, 1.0))
    @settings(max_examples=50, deadline=None)
    def test_hard_and_soft_agree_without_spikes(self, trace, tau):
        cur = np.array(trace)[:, None]
        s1, v1 = run(cur, LIFConfig(1.0, tau, "soft"))
        s2, v2 = run(cur, LIFConfig(1.0, tau, "hard"))
        if s1.any():
            return
        np.testing.assert_array_equal(s2, 0)
        np.testing.assert_array_equal(v1, v2)

    @pytest.mark.parametrize("tau", [0.0, 0.3, 0.8])
    def test_decay_monotone(self, tau):
        _, v = run(np.zeros((6, 3)), LIFConfig(5.0, tau), v0=-2.0)
        mags = np.abs(v[:, 0])
        if tau == 0:
            np.testing.assert_array_equal(mags, 2.0)
        else:
            assert np.all(np.diff(mags) < 0)

    def test_spikes_are_binary(self):
        s, _ = run(np.random.default_rng(0).normal(size=(20, 50)), LIFConfig(0.7))
        assert set(np.unique(s)) <= {0.0, 1.0}

    def test_rejects_bad_config(self):
        with pytest.raises(ValueError):
            LIFConfig(0.0)
        with pytest.raises(ValueError):
            LIFConfig(1.0, -0.1)


class TestLayerLosslessness:
    @pytest.mark.parametrize("L", [2, 4, 8])
    @pytest.mark.parametrize("shift", [0.0, 0.5])
    def test_rate_matches_qcfs(self, L, shift):
        rng = np.random.default_rng(L)
        lam = 0.9
        pre = rng.uniform(-0.3, 1.3, size=400)
        grid = pre * L / lam + shift
        pre = pre[np.abs(grid - np.round(grid)) > 1e-6]
        s, _ = run(np.repeat(pre[None], L, 0), LIFConfig(lam), v0=shift * lam)
        np.testing.assert_allclose(s.sum(0) * lam / L, oracles.qcfs(pre, lam, L, shift), atol=1e-9, rtol=0)


class TestConversion:
    def test_threshold_is_ceiling(self):
        cfg = tiny()
        p = init_params(cfg, lam=0.7)
        m = convert_a2s(p, T=2)
        assert all(m.theta[s] == 0.7 for s in qcfs_sites(cfg))
        assert m.reset == "soft" and m.tau_generator == 0 and m.tau_convgru2 == 0

    def test_weights_bit_identical(self):
        p = init_params(tiny(), seed=3)
        m = convert_a2s(p)
        for k, v in m.weights.items():
            assert v.data.tobytes() == p[k].data.tobytes()
        assert not any(k.endswith(".lambda") for k in m.weights)

    @pytest.mark.parametrize("T_", [0, 3, -2])
    def test_invalid_window(self, T_):
        with pytest.raises(ValueError):
            convert_a2s(init_params(tiny()), T=T_)

    def test_set_leaks_copies(self):
        m = convert_a2s(init_params(tiny()))
        m2 = set_leaks(m, 0.4, 0.8)
        assert (m.tau_generator, m.tau_convgru2) == (0.0, 0.0)
        assert (m2.tau_generator, m2.tau_convgru2) == (0.4, 0.8)
        with pytest.raises(ValueError):
            set_leaks(m, -0.1, 0.0)


class TestForwardSNN:
    def test_dead_network(self):
        cfg = tiny()
        m = convert_a2s(zero_params(cfg))
        flow, diag = forward_snn(m, groups(np.random.default_rng(0), cfg))
        np.testing.assert_array_equal(flow.data, 0.0)
        assert all(r == 0.0 for r in firing_report(diag).values())

    def test_rates_are_fractions(self):
        cfg = tiny(N=4)
        m = convert_a2s(init_params(cfg, seed=1, lam=0.05), T=8)
        flow, diag = forward_snn(m, groups(np.random.default_rng(1), cfg, batch=2), record_spikes=True)
        assert flow.shape == (2, 2, 16, 16)
        for site, rates in diag.rates.items():
            assert len(rates) == 8
            assert all(0.0 <= r <= 1.0 for r in rates)
            assert all(set(np.unique(s)) <= {0, 1} for s in diag.spikes[site])
        assert max(firing_report(diag).values()) > 0

    def test_group_count_checked(self):
        cfg = tiny()
        m = convert_a2s(init_params(cfg))
        with pytest.raises(ValueError, match="event groups"):
            forward_snn(m, groups(np.random.default_rng(2), cfg)[:1])
        with pytest.raises(ValueError):
            forward_snn(m, [])

    def test_always_firing_layer(self):
        cfg = LIFConfig(1e-9)
        s, _ = run(np.full((5, 3), 0.5), cfg)
        assert firing_report(SNNDiagnostics(None, {"x": [float(r.mean()) for r in s]})) == {"x": 1.0}

    def test_hand_counted_rates(self):
        # a integrates 0.6 per step and fires once, at step 2; b gets 1.5 and fires every step
        s, _ = run([[0.6, 1.5], [0.6, 1.5], [0.6, 1.5]], LIFConfig(1.0))
        np.testing.assert_array_equal(s, [[0, 1], [1, 1], [0, 1]])
        diag = SNNDiagnostics(None, {"layer": [float(x.mean()) for x in s]})
        assert firing_report(diag)["layer"] == pytest.approx((1 + 2 + 1) / 6)

    def test_temporal_links_recorded(self):
        cfg = tiny()
        m = convert_a2s(init_params(cfg, seed=4))
        for w in m.weights.values():
            w.requires_grad = True
        x = groups(np.random.default_rng(4), cfg)
        with Tape():
            _, diag = forward_snn(m, x)
            _, cut = forward_snn(m, x, detach_state=True)
        assert diag.temporal_links > 0
        assert cut.temporal_links == 0

    def test_model_validation(self):
        cfg = tiny()
        m = convert_a2s(init_params(cfg))
        with pytest.raises(ValueError, match="threshold"):
            SpikingModel(cfg, m.weights, {**m.theta, "encoder1": 0.0}, 2)
        with pytest.raises(ValueError, match="reset"):
            SpikingModel(cfg, m.weights, m.theta, 2, reset="partial")
