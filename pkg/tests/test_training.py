import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stflownet import tensor as T
from stflownet import training as tr
from stflownet.events import EventStream, synth_translating_pattern
from stflownet.network import NetConfig, calibrate_lambdas, init_params
from stflownet.spiking import LIFConfig, LIFState, convert_a2s, lif_step, set_leaks
from stflownet.tensor import Tape, Tensor, grad_check


def surrogate_grad(u):
    return 1.0 / (1.0 + (math.pi * u) ** 2)


def one_event(t=0.5, x=2, y=1, p=1):
    return EventStream(5, 4, [x], [y], [t], [p])


class TestContrastLoss:
    @pytest.mark.parametrize("mode", tr.TIMESTAMP_MODES)
    def test_single_event_mid_window(self, mode):
        loss = tr.contrast_loss(Tensor(np.zeros((2, 4, 5))), one_event(), (0.0, 1.0), timestamps=mode)
        # 0.5^2 at both references over one lit pixel, regulariser included
        assert loss.item() == pytest.approx(2 * 0.25 / (1 + 1e-9), abs=1e-15)

    @pytest.mark.parametrize("mode", tr.TIMESTAMP_MODES)
    def test_ground_truth_beats_zero_flow(self, mode):
        s, gt = synth_translating_pattern(32, 32, 0.5, (2.5, -1.5), seed=4)
        zero = tr.contrast_loss(Tensor(np.zeros_like(gt.flow)), s, (0.0, 1.0), timestamps=mode).item()
        good = tr.contrast_loss(Tensor(gt.flow), s, (0.0, 1.0), timestamps=mode).item()
        assert good < zero

    @given(st.floats(0.1, 10.0), st.floats(-5.0, 5.0), st.integers(0, 2**16))
    @settings(max_examples=30, deadline=None)
    def test_time_scaling_and_shift_invariance(self, scale, offset, seed):
        s, gt = synth_translating_pattern(16, 16, 0.5, (1.5, 2.0), seed=seed)
        flow = Tensor(gt.flow * 0.7)
        base = tr.contrast_loss(flow, s, (0.0, 1.0)).item()
        moved = EventStream(s.width, s.height, s.x, s.y, s.t * scale + offset, s.p)
        again = tr.contrast_loss(flow, moved, (offset, scale + offset)).item()
        assert again == pytest.approx(base, rel=1e-9)

    def test_empty_window(self):
        diag = {}
        loss = tr.contrast_loss(Tensor(np.zeros((2, 4, 5))), EventStream(5, 4), (0.0, 1.0), diagnostics=diag)
        assert loss.item() == 0.0 and diag["empty"]

    def test_flow_shape_checked(self):
        with pytest.raises(ValueError, match="does not match"):
            tr.contrast_loss(Tensor(np.zeros((2, 5, 5))), one_event(), (0.0, 1.0))

    def test_gradient_matches_finite_differences(self):
        s, gt = synth_translating_pattern(16, 16, 0.3, (1.0, 0.5), seed=5)
        # sub-pixel offset keeps every warped event off the integer kinks of the splat kernel
        flow = Tensor(gt.flow * 0.6 + 0.137, requires_grad=True)
        assert grad_check(lambda f: tr.contrast_loss(f, s, (0.0, 1.0)), [flow], epsilon=1e-6, max_elements=40) < 1e-5


class TestSmoothness:
    def test_constant_flow(self):
        assert tr.smoothness_loss(Tensor(np.full((2, 6, 7), 3.2))).item() == pytest.approx(1e-3, rel=1e-12)

    def test_unit_ramp(self):
        flow = np.zeros((2, 5, 5))
        flow[0] = np.arange(5.0)[None, :]
        eps = 1e-3
        # 20 horizontal u-pairs at (1 + eps^2)^0.5, all other 60 pairs at eps
        want = (20 * math.sqrt(1 + eps**2) + 60 * eps) / 80
        assert tr.smoothness_loss(Tensor(flow), eps).item() == pytest.approx(want, rel=1e-12)

    def test_loop_oracle(self):
        flow = np.random.default_rng(6).normal(size=(2, 8, 8))
        eps, alpha = 1e-3, 0.5
        terms = []
        for c in range(2):
            for i in range(8):
                for j in range(8):
                    if j + 1 < 8:
                        terms.append(((flow[c, i, j + 1] - flow[c, i, j]) ** 2 + eps**2) ** alpha)
                    if i + 1 < 8:
                        terms.append(((flow[c, i + 1, j] - flow[c, i, j]) ** 2 + eps**2) ** alpha)
        assert abs(tr.smoothness_loss(Tensor(flow), eps, alpha).item() - np.mean(terms)) < 1e-12


class TestTotalLoss:
    def test_weight_zero_is_contrast(self):
        s, gt = synth_translating_pattern(16, 16, 0.5, (1.0, 1.0), seed=7)
        f = Tensor(np.random.default_rng(7).normal(size=gt.flow.shape))
        total, con, _ = tr.total_loss(f, s, (0.0, 1.0), tr.LossConfig(smooth_weight=0.0))
        assert total.item() == con.item() == tr.contrast_loss(f, s, (0.0, 1.0)).item()

    def test_default_weight(self):
        assert tr.LossConfig().smooth_weight == 0.001

    def test_finite_on_wild_flow(self):
        s, _ = synth_translating_pattern(16, 16, 0.5, (1.0, 1.0), seed=8)
        f = Tensor(np.random.default_rng(8).normal(scale=1e3, size=(2, 16, 16)))
        total, _, _ = tr.total_loss(f, s, (0.0, 1.0))
        assert np.isfinite(total.item())

    def test_bad_mode(self):
        with pytest.raises(ValueError, match="timestamps"):
            tr.LossConfig(timestamps="end")


class TestAdam:
    def _param(self, value):
        return {"w": Tensor(np.array([value]), requires_grad=True)}

    def test_zero_gradient_is_a_no_op(self):
        p = self._param(1.5)
        opt = tr.OptimState.create(p, 0.1)
        for _ in range(3):
            tr.adam_step(p, {"w": np.zeros(1)}, opt)
        assert p["w"].data[0] == 1.5

    def test_constant_gradient_steps_at_lr(self):
        p = self._param(0.0)
        opt = tr.OptimState.create(p, 0.01)
        prev = 0.0
        for _ in range(200):
            tr.adam_step(p, {"w": np.array([-3.0])}, opt)
            step, prev = p["w"].data[0] - prev, p["w"].data[0]
        assert step == pytest.approx(0.01, rel=1e-6)

    def test_three_step_hand_trace(self):
        p = self._param(1.0)
        opt = tr.OptimState.create(p, 0.1)
        grads = [0.5, -1.0, 2.0]
        m = v = 0.0
        w = 1.0
        for k, g in enumerate(grads, 1):
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            w -= 0.1 * (m / (1 - 0.9**k)) / (math.sqrt(v / (1 - 0.999**k)) + 1e-8)
            tr.adam_step(p, {"w": np.array([g])}, opt)
            assert p["w"].data[0] == pytest.approx(w, abs=1e-15)
        # after step 1 the update is lr * sign(g) up to eps
        assert opt.m["w"][0] == pytest.approx(0.9 * (0.9 * 0.05 - 0.1) + 0.2)

    def test_decay_per_epoch(self):
        opt = tr.OptimState.create(self._param(0.0), 0.1, 0.5)
        opt.end_epoch()
        opt.end_epoch()
        assert opt.lr == 0.025

    def test_shape_mismatch(self):
        p = self._param(0.0)
        with pytest.raises(ValueError, match="does not match"):
            tr.adam_step(p, {"w": np.zeros(2)}, tr.OptimState.create(p, 0.1))


@pytest.fixture(scope="module")
def small_setup():
    cfg = NetConfig(16, 16, N=2, base_channels=2, qcfs_shift=True)
    data = tr.synthetic_dataset(12, 16, 2, density=0.5, seed=3)
    params = init_params(cfg, seed=3)
    calibrate_lambdas(params, tr.ann_batch(data[:4]))
    return cfg, data, params


class TestTrainANN:
    def test_zero_lr_keeps_parameters(self, small_setup):
        _, data, params = small_setup
        out, hist = tr.train_ann(params, data, tr.TrainConfig(lr=0.0, max_iterations=1, batch_size=4))
        assert len(hist) == 1
        for k, v in params.tensors.items():
            np.testing.assert_array_equal(out[k].data, v.data)

    def test_history_length_and_fields(self, small_setup):
        _, data, params = small_setup
        _, hist = tr.train_ann(params, data, tr.TrainConfig(lr=1e-3, max_iterations=5, batch_size=4))
        assert [h["iter"] for h in hist] == list(range(5))
        assert {"epoch", "contrast", "smooth", "total", "lr"} <= set(hist[0])
        assert hist[3]["epoch"] == 1  # 12 windows at batch 4 is 3 iterations per epoch

    def test_input_model_untouched(self, small_setup):
        _, data, params = small_setup
        before = params["encoder2.weight"].data.copy()
        tr.train_ann(params, data, tr.TrainConfig(lr=1e-2, max_iterations=2, batch_size=4))
        np.testing.assert_array_equal(params["encoder2.weight"].data, before)

    def test_history_csv(self, small_setup, tmp_path):
        _, data, params = small_setup
        _, hist = tr.train_ann(params, data, tr.TrainConfig(lr=1e-3, max_iterations=2, batch_size=4))
        tr.write_history_csv(hist, tmp_path / "h.csv")
        lines = (tmp_path / "h.csv").read_text().splitlines()
        assert lines[0] == "iter,epoch,contrast,smooth,total,lr" and len(lines) == 3


class TestSTBP:
    def _chain(self, w, xs, theta=1.0, tau=0.0):
        """Membranes and spikes of one LIF neuron driven by w * x_t, recorded on the active tape."""
        state = LIFState.zeros((1,))
        cfg = LIFConfig(theta, tau)
        spikes = []
        for x in xs:
            spikes.append(lif_step(state, w * x, cfg))
        return spikes

    def test_two_step_hand_chain_rule(self):
        w = Tensor(np.array([0.8]), requires_grad=True)
        x1, x2 = 1.5, 0.9
        with Tape() as tape:
            s1, s2 = self._chain(w, [x1, x2])
            loss = (s1 + s2 * 2.0).sum()
        grads = tr.stbp_backward(loss, tape, 2, {"w": w})
        v1 = 0.8 * x1
        v2 = v1 - float(s1.data[0]) + 0.8 * x2
        # same-step term of s1 plus the credit s2 receives through v2 = v1 - s1 + w x2
        dv2 = x1 - surrogate_grad(v1 - 1) * x1 + x2
        want = surrogate_grad(v1 - 1) * x1 + 2.0 * surrogate_grad(v2 - 1) * dv2
        assert grads["w"][0] == pytest.approx(want, rel=1e-12)

    def test_two_step_finite_difference_on_relaxation(self):
        w = Tensor(np.array([0.7]), requires_grad=True)
        with T.relaxed():
            err = grad_check(lambda w: sum(self._chain(w, [1.1, 0.6], theta=0.9, tau=0.3), Tensor(0.0)), [w], epsilon=1e-6)
        assert err < 1e-4

    def test_single_step_is_plain_backprop(self):
        w = Tensor(np.array([0.4]), requires_grad=True)
        with Tape() as tape:
            (s,) = self._chain(w, [2.0], theta=0.5)
            loss = s.sum()
        grads = tr.stbp_backward(loss, tape, 1, {"w": w})
        assert grads["w"][0] == pytest.approx(surrogate_grad((0.8 - 0.5) / 0.5) / 0.5 * 2.0, rel=1e-12)

    def test_silent_trace_matches_forward_mode_recursion(self):
        xs = [0.1, -0.2, 0.15, 0.05, 0.1]
        w0, theta = 0.9, 1.0
        w = Tensor(np.array([w0]), requires_grad=True)
        with Tape() as tape:
            spikes = self._chain(w, xs, theta)
            loss = sum(spikes, Tensor(0.0)).sum()
        assert not any(s.data.any() for s in spikes)
        got = tr.stbp_backward(loss, tape, len(xs), {"w": w})["w"][0]
        # unrolled accumulation v_t = v_{t-1} - theta s_{t-1} + w x_t, differentiated forward in time
        v = dv = 0.0
        ds_prev = 0.0
        total = 0.0
        for x in xs:
            dv = dv - theta * ds_prev + x
            v = v + w0 * x
            ds_prev = surrogate_grad((v - theta) / theta) / theta * dv
            total += ds_prev
        assert got == pytest.approx(total, rel=1e-12)

    def test_detached_state_is_refused(self):
        w = Tensor(np.array([0.5]), requires_grad=True)
        with Tape() as tape:
            loss = (lif_step(LIFState.zeros((1,)), w * 1.0, LIFConfig(1.0))).sum()
        with pytest.raises(ValueError, match="links"):
            tr.stbp_backward(loss, tape, 3, {"w": w})


class TestSpikingTraining:
    @pytest.fixture
    def converted(self, small_setup):
        _, data, params = small_setup
        return set_leaks(convert_a2s(params, T=2), 0.2, 0.4), data

    def test_zero_epochs_is_conversion(self, converted):
        m, data = converted
        out, hist = tr.bisnn_train(m, data, tr.TrainConfig(epochs_bisnn=0))
        assert hist == []
        for k, v in m.weights.items():
            np.testing.assert_array_equal(out.weights[k].data, v.data)

    def test_weights_move_biology_stays(self, converted):
        m, data = converted
        out, hist = tr.bisnn_train(m, data, tr.TrainConfig(lr=1e-2, max_iterations=2, batch_size=4))
        assert len(hist) == 2
        assert any(not np.array_equal(out.weights[k].data, v.data) for k, v in m.weights.items())
        assert out.theta == m.theta
        assert (out.tau_generator, out.tau_convgru2, out.T, out.reset) == (0.2, 0.4, 2, "soft")

    def test_direct_stbp_differs_only_in_start(self, converted):
        m, data = converted
        cfg = tr.TrainConfig(lr=0.0, max_iterations=1, batch_size=4)
        out, _ = tr.direct_stbp_train(m, data, cfg, init_seed=9)
        fresh = init_params(m.config, seed=9)
        for k, v in out.weights.items():
            np.testing.assert_array_equal(v.data, fresh[k].data)
        assert out.theta == m.theta and out.T == m.T
        assert (out.tau_generator, out.tau_convgru2) == (m.tau_generator, m.tau_convgru2)
