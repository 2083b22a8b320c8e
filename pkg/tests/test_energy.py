import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stflownet.energy import (
    EnergyConstants,
    OpCountReport,
    ac_module_ratio,
    count_ann_ops,
    count_snn_ops,
    module_ratio,
    rec,
)
from stflownet.network import ConvSpec, NetConfig, init_params, qcfs_sites
from stflownet.spiking import convert_a2s

TINY = NetConfig(16, 16, N=2, base_channels=1)

# per-layer MACs of TINY written out by hand: Cout * H' * W' * Cin * 9 (* groups)
HAND = {
    "convgru1.xi_r": 2 * 16 * 16 * 4 * 9 * 2,
    "convgru1.xi_z": 2 * 16 * 16 * 4 * 9 * 2,
    "convgru1.xi_i": 2 * 16 * 16 * 4 * 9 * 2,
    "encoder1": 1 * 8 * 8 * 4 * 9,
    "encoder2": 2 * 4 * 4 * 1 * 9,
    "encoder3": 4 * 2 * 2 * 2 * 9,
    "encoder4": 8 * 1 * 1 * 4 * 9,
    "block1.conv1": 8 * 8 * 9,
    "block1.conv2": 8 * 8 * 9,
    "block2.conv1": 8 * 8 * 9,
    "block2.conv2": 8 * 8 * 9,
    "fusion.d8": 1 * 1 * 9,
    "fusion.d4": 2 * 2 * 9,
    "fusion.d2": 4 * 4 * 9,
    "decoder1": 15 * 2 * 2 * 15 * 9,
    "generator": 2 * 2 * 2 * 15 * 9,
    "convgru2.xi_r": 2 * 16 * 16 * 4 * 9,
    "convgru2.xi_z": 2 * 16 * 16 * 4 * 9,
    "convgru2.xi_i": 2 * 16 * 16 * 4 * 9,
}


def uniform_rates(cfg, r):
    return {s: r for s in qcfs_sites(cfg)}


class TestANNCount:
    def test_single_conv(self):
        assert ConvSpec("c", 1, 1, 1, (4, 4), "x").macs == 144

    def test_hand_spreadsheet(self):
        rep = count_ann_ops(TINY)
        assert {l.name: l.ops for l in rep.layers} == HAND
        assert rep.ops("MAC") == sum(HAND.values())
        assert rep.energy == pytest.approx(sum(HAND.values()) * 4.6e-12, rel=1e-12)

    def test_doubling_width_doubles_every_layer(self):
        a = count_ann_ops(NetConfig(32, 32, N=2, base_channels=2))
        b = count_ann_ops(NetConfig(32, 64, N=2, base_channels=2))
        for la, lb in zip(a.layers, b.layers):
            assert lb.ops == 2 * la.ops

    def test_activations_kept_out_of_energy(self):
        rep = count_ann_ops(TINY)
        assert rep.activation_ops > 0
        assert rep.energy == pytest.approx(rep.ops("MAC") * rep.constants.e_mac, rel=1e-12)


class TestSNNCount:
    def test_classification(self):
        rep = count_snn_ops(TINY, uniform_rates(TINY, 0.3), T=2)
        kinds = {l.name: l.kind for l in rep.layers}
        for name, kind in kinds.items():
            heavy = name.split(".")[0] in ("convgru1", "encoder1", "decoder1", "convgru2")
            assert kind == ("MAC" if heavy else "AC"), name
        assert sorted(kinds) == sorted(HAND)
        assert all(l.rationale for l in rep.layers)

    def test_dead_network_costs_mac_layers_only(self):
        rep = count_snn_ops(TINY, uniform_rates(TINY, 0.0), T=2)
        assert rep.ops("AC") == 0.0
        assert rep.energy == pytest.approx(rep.ops("MAC") * 4.6e-12, rel=1e-12)

    def test_saturated_rate_counts_dense_ops_every_step(self):
        T = 4
        rep = count_snn_ops(TINY, uniform_rates(TINY, 1.0), T=T)
        for l in rep.layers:
            if l.kind == "AC":
                assert l.ops == T * HAND[l.name]

    def test_per_step_slices(self):
        rep = count_snn_ops(TINY, uniform_rates(TINY, 0.5), T=2)
        ops = {l.name: l.ops for l in rep.layers}
        # one group through ConvGRU1 and one polarity pair through encoder1 per step
        assert ops["convgru1.xi_r"] == 2 * HAND["convgru1.xi_r"] / 2
        assert ops["encoder1"] == 2 * HAND["encoder1"] / 2
        assert ops["decoder1"] == 2 * HAND["decoder1"]

    def test_per_step_mode_drops_T(self):
        a = count_snn_ops(TINY, uniform_rates(TINY, 0.2), T=4)
        b = count_snn_ops(TINY, uniform_rates(TINY, 0.2), T=4, steps_inside=False)
        assert a.energy == pytest.approx(4 * b.energy, rel=1e-12)

    def test_missing_rate_rejected(self):
        rates = uniform_rates(TINY, 0.1)
        del rates["encoder2"]
        with pytest.raises(KeyError, match="encoder2"):
            count_snn_ops(TINY, rates, T=2)

    def test_rate_range_checked(self):
        with pytest.raises(ValueError):
            count_snn_ops(TINY, uniform_rates(TINY, 1.5), T=2)

    def test_T_from_model(self):
        m = convert_a2s(init_params(TINY), T=4)
        assert count_snn_ops(m, uniform_rates(TINY, 0.1)).T == 4

    @given(st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.integers(1, 8))
    @settings(max_examples=40, deadline=None)
    def test_monotone_in_rates_and_steps(self, r1, r2, T):
        lo, hi = sorted((r1, r2))
        a = count_snn_ops(TINY, uniform_rates(TINY, lo), T=T).energy
        b = count_snn_ops(TINY, uniform_rates(TINY, hi), T=T).energy
        c = count_snn_ops(TINY, uniform_rates(TINY, hi), T=T + 1).energy
        assert a <= b <= c


class TestRatio:
    def test_identical_reports(self):
        rep = count_ann_ops(TINY)
        assert rec(rep, rep) == 1.0

    def test_scaled_report(self):
        ann = count_ann_ops(TINY)
        snn = OpCountReport([type(l)(l.name, l.kind, l.ops, l.rate, 0.4 * l.energy_j, "") for l in ann.layers])
        assert rec(ann, snn) == pytest.approx(0.4, rel=1e-12)

    def test_zero_denominator(self):
        with pytest.raises(ValueError):
            rec(OpCountReport([]), count_ann_ops(TINY))

    @pytest.mark.parametrize("rate,T", [(0.1, 4), (0.25, 8), (1.0, 1)])
    def test_ac_module_matches_closed_form(self, rate, T):
        ann = count_ann_ops(TINY)
        snn = count_snn_ops(TINY, uniform_rates(TINY, rate), T=T)
        want = 0.9 / 4.6 * rate * T
        assert ac_module_ratio(rate, T) == pytest.approx(want, rel=1e-12)
        for module in ("block1", "block2", "encoder3"):
            assert module_ratio(ann, snn, (module,)) == pytest.approx(want, rel=1e-12)

    def test_constants_validated(self):
        with pytest.raises(ValueError):
            EnergyConstants(1e-12, 2e-12)
        with pytest.raises(ValueError):
            EnergyConstants(0.0, 0.0)

    def test_csv(self, tmp_path):
        count_ann_ops(TINY).to_csv(tmp_path / "e.csv", "eta=1")
        lines = (tmp_path / "e.csv").read_text().splitlines()
        assert lines[0] == "layer,kind,ops,rate,energy_j" and lines[-1] == "# eta=1"
        assert len(lines) == len(HAND) + 2
        assert np.isclose(float(lines[1].split(",")[2]), HAND["convgru1.xi_r"])
