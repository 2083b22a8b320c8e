"""Self-supervised losses, Adam, ANN training, STBP and BISNN retraining."""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .events import EventStream, GroundTruthFlow, group_events, synth_translating_pattern
from .network import STFlowNetParams, forward_ann, init_params
from .spiking import SpikingModel, forward_snn
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

LAMBDA_FLOOR = 1e-4
TIMESTAMP_MODES = ("reference", "start")


@dataclass(frozen=True)
class LossConfig:
    smooth_weight: float = 0.001
    charbonnier_eps: float = 1e-3
    charbonnier_alpha: float = 0.5
    eps_w: float = 1e-9
    # "reference": timestamp weight 1 - |t_ref - t|/dt; "start": (t - t_start)/dt for both references
    timestamps: str = "reference"

    def __post_init__(self):
        if self.timestamps not in TIMESTAMP_MODES:
            raise ValueError(f"timestamps must be one of {TIMESTAMP_MODES}, got {self.timestamps!r}")
        if self.smooth_weight < 0:
            raise ValueError("smooth_weight must be >= 0")
        if not (self.charbonnier_eps > 0 and self.eps_w > 0):
            raise ValueError("charbonnier_eps and eps_w must be positive")
        if not 0 < self.charbonnier_alpha <= 1:
            raise ValueError("charbonnier_alpha must lie in (0, 1]")


@dataclass(frozen=True)
class TrainConfig:
    epochs_ann: int = 100
    epochs_bisnn: int = 10
    batch_size: int = 8
    lr: float = 2e-4
    gamma: float = 0.98
    seed: int = 0
    # stop after this many iterations regardless of epochs (None = run all epochs)
    max_iterations: int | None = None
    clip_norm: float | None = None
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.epochs_ann < 0 or self.epochs_bisnn < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr < 0 or not 0 < self.gamma <= 1:
            raise ValueError("lr must be >= 0 and gamma in (0, 1]")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _avg_timestamp_image(flow: Tensor, x, y, ts, c, width, height):
    """Splat events moved by ``c * flow`` and return (S_tau, S_1)."""
    idx = y * width + x
    u = T.gather(flow[0], idx)
    v = T.gather(flow[1], idx)
    px = u * c + x.astype(np.float64)
    py = v * c + y.astype(np.float64)
    return T.splat(px, py, ts, height, width), T.splat(px, py, 1.0, height, width)


def contrast_loss(
    flow: Tensor,
    events: EventStream,
    window: tuple[float, float],
    eps_w: float = 1e-9,
    diagnostics: dict | None = None,
    timestamps: str = "reference",
) -> Tensor:
    """Sum over t_ref in {t_start, t_end} of the squared per-polarity average-timestamp images.

    ``flow`` is (2, H, W) in pixels per window.  Each reference term is
    normalized by the number of pixels that receive warped mass.  With
    ``timestamps="reference"`` an event is weighted by its closeness to t_ref,
    ``1 - |t_ref - t|/dt``, so events left in place by the warp weigh most;
    ``"start"`` weights every event by ``(t - t_start)/dt`` at both references.
    """
    if timestamps not in TIMESTAMP_MODES:
        raise ValueError(f"timestamps must be one of {TIMESTAMP_MODES}, got {timestamps!r}")
    flow = flow if isinstance(flow, Tensor) else Tensor(flow)
    if flow.shape != (2, events.height, events.width):
        raise ValueError(f"flow {flow.shape} does not match sensor (2, {events.height}, {events.width})")
    t0, t1 = window
    dt = t1 - t0
    if not dt > 0:
        raise ValueError(f"window must have positive length, got {window}")
    if events.count == 0:
        if diagnostics is not None:
            diagnostics["empty"] = True
        log.warning("contrast loss on an empty event set")
        return Tensor(0.0)
    tau = (events.t - t0) / dt
    total = None
    for ref in (0.0, 1.0):
        weight = 1.0 - np.abs(ref - tau) if timestamps == "reference" else tau
        squares = None
        mass = np.zeros((events.height, events.width))
        for pol in (1, -1):
            sel = events.p == pol
            if not sel.any():
                continue
            s_tau, s_one = _avg_timestamp_image(
                flow, events.x[sel], events.y[sel], weight[sel], ref - tau[sel], events.width, events.height
            )
            empty = (s_one.data == 0).astype(np.float64)
            img = s_tau / (s_one + empty)
            sq = (img * img).sum()
            squares = sq if squares is None else squares + sq
            mass += s_one.data
        term = squares * (1.0 / (np.count_nonzero(mass > 0) + eps_w))
        total = term if total is None else total + term
    return total


def smoothness_loss(flow: Tensor, eps: float = 1e-3, alpha: float = 0.5) -> Tensor:
    """Charbonnier penalty averaged over all 4-neighbour pairs of both components."""
    flow = flow if isinstance(flow, Tensor) else Tensor(flow)
    dx = flow[:, :, 1:] - flow[:, :, :-1]
    dy = flow[:, 1:, :] - flow[:, :-1, :]
    e2 = eps * eps
    px = ((dx * dx) + e2) ** alpha
    py = ((dy * dy) + e2) ** alpha
    return (px.sum() + py.sum()) * (1.0 / (dx.size + dy.size))


def total_loss(
    flow: Tensor, events: EventStream, window: tuple[float, float], cfg: LossConfig = LossConfig()
) -> tuple[Tensor, Tensor, Tensor]:
    """Returns (total, contrast, smooth) with total = contrast + w * smooth."""
    c = contrast_loss(flow, events, window, cfg.eps_w, timestamps=cfg.timestamps)
    s = smoothness_loss(flow, cfg.charbonnier_eps, cfg.charbonnier_alpha)
    return c + s * cfg.smooth_weight, c, s


surrogate_spike = T.spike


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    lr: float
    gamma: float = 0.98
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, params: dict[str, Tensor], lr: float, gamma: float = 0.98) -> "OptimState":
        if lr < 0:
            raise ValueError("learning rate must be >= 0")
        return cls(
            {k: np.zeros_like(p.data) for k, p in params.items()},
            {k: np.zeros_like(p.data) for k, p in params.items()},
            lr,
            gamma,
        )

    def end_epoch(self) -> None:
        self.lr *= self.gamma


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], opt: OptimState) -> dict[str, Tensor]:
    """Bias-corrected Adam update applied in place; returns ``params``."""
    for k, g in grads.items():
        if k not in params:
            raise KeyError(f"gradient for unknown parameter {k!r}")
        if g.shape != params[k].shape or opt.m[k].shape != g.shape:
            raise ValueError(f"{k}: gradient {g.shape} does not match parameter {params[k].shape}")
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1**opt.step
    c2 = 1.0 - b2**opt.step
    for k, g in grads.items():
        opt.m[k] = b1 * opt.m[k] + (1 - b1) * g
        opt.v[k] = b2 * opt.v[k] + (1 - b2) * g * g
        p = params[k]
        p.data = p.data - opt.lr * (opt.m[k] / c1) / (np.sqrt(opt.v[k] / c2) + opt.eps)
    return params


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass
class Sample:
    stream: EventStream
    gt: GroundTruthFlow
    window: tuple[float, float]
    ann_input: np.ndarray  # (2N, H, W) raw counts
    snn_input: np.ndarray  # (N, 2, H, W) raw counts


def make_sample(stream: EventStream, gt: GroundTruthFlow, window: tuple[float, float], N: int) -> Sample:
    groups = group_events(stream, N)
    f = groups.frames.astype(np.float64)
    return Sample(stream, gt, window, f.reshape(-1, *f.shape[2:]), f)


def synthetic_dataset(
    count: int,
    size: int,
    N: int,
    max_speed: float = 3.0,
    density: float = 0.5,
    seed: int = 0,
    events_per_dot: int = 8,
) -> list[Sample]:
    """Translating-dot windows with velocities uniform in [-max_speed, max_speed]^2."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        vel = tuple(float(v) for v in rng.uniform(-max_speed, max_speed, 2))
        s, gt = synth_translating_pattern(
            size, size, density, vel, seed=int(rng.integers(2**31)), events_per_dot=events_per_dot
        )
        out.append(make_sample(s, gt, (0.0, 1.0), N))
    return out


def ann_batch(samples: Sequence[Sample]) -> Tensor:
    return Tensor(np.stack([s.ann_input for s in samples]))


def snn_batch(samples: Sequence[Sample]) -> list[Tensor]:
    stacked = np.stack([s.snn_input for s in samples])  # (B, N, 2, H, W)
    return [Tensor(stacked[:, n]) for n in range(stacked.shape[1])]


def batch_loss(flow: Tensor, samples: Sequence[Sample], cfg: LossConfig) -> tuple[Tensor, float, float]:
    """Mean total loss over the batch plus the mean contrast and smooth parts."""
    tot, con, smo = None, 0.0, 0.0
    for b, s in enumerate(samples):
        t, c, sm = total_loss(flow[b], s.stream, s.window, cfg)
        tot = t if tot is None else tot + t
        con += c.item()
        smo += sm.item()
    n = len(samples)
    return tot * (1.0 / n), con / n, smo / n


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


def _fit(
    weights: "OrderedDict[str, Tensor]",
    forward: Callable[[Sequence[Sample]], Tensor],
    dataset: Sequence[Sample],
    cfg: TrainConfig,
    epochs: int,
    grad_fn: Callable[[Tensor, Tape], dict[str, np.ndarray]],
) -> list[dict]:
    if len(dataset) == 0:
        raise ValueError("training needs a non-empty dataset")
    rng = np.random.default_rng(cfg.seed)
    opt = OptimState.create(weights, cfg.lr, cfg.gamma)
    history: list[dict] = []
    it = 0
    for epoch in range(epochs):
        order = rng.permutation(len(dataset))
        for start in range(0, len(order), cfg.batch_size):
            if cfg.max_iterations is not None and it >= cfg.max_iterations:
                return history
            batch = [dataset[i] for i in order[start : start + cfg.batch_size]]
            with Tape() as tape:
                flow = forward(batch)
                loss, con, smo = batch_loss(flow, batch, cfg.loss)
            grads = grad_fn(loss, tape)
            if cfg.clip_norm is not None:
                norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
                if norm > cfg.clip_norm:
                    grads = {k: g * (cfg.clip_norm / norm) for k, g in grads.items()}
            history.append({"iter": it, "epoch": epoch, "contrast": con, "smooth": smo, "total": loss.item(), "lr": opt.lr})
            adam_step(weights, grads, opt)
            for k, p in weights.items():
                if k.endswith(".lambda"):
                    p.data = np.maximum(p.data, LAMBDA_FLOOR)
            it += 1
        opt.end_epoch()
    return history


def _plain_grads(weights):
    def fn(loss: Tensor, tape: Tape) -> dict[str, np.ndarray]:
        T.backward(loss, tape)
        return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in weights.items()}

    return fn


def train_ann(params: STFlowNetParams, dataset: Sequence[Sample], cfg: TrainConfig) -> tuple[STFlowNetParams, list[dict]]:
    """Train the QCFS network on single windows (zero recurrent state)."""
    params = params.copy()

    def forward(batch):
        return forward_ann(params, ann_batch(batch))[0]

    history = _fit(params.tensors, forward, dataset, cfg, cfg.epochs_ann, _plain_grads(params.tensors))
    return params, history


def stbp_backward(loss: Tensor, tape: Tape, steps: int, weights: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Backpropagate through layers and time of a spiking run recorded on ``tape``.

    A run of more than one step must have carried membrane state across
    steps on the tape; otherwise the temporal credit path is missing.
    """
    if steps > 1 and tape.temporal_links == 0:
        raise ValueError("tape holds no membrane links across time steps; was the state detached?")
    T.backward(loss, tape)
    return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in weights.items()}


def _train_snn(model: SpikingModel, dataset, cfg: TrainConfig) -> tuple[SpikingModel, list[dict]]:
    model = model.copy()

    def forward(batch):
        return forward_snn(model, snn_batch(batch))[0]

    def grads(loss, tape):
        return stbp_backward(loss, tape, model.T, model.weights)

    history = _fit(model.weights, forward, dataset, cfg, cfg.epochs_bisnn, grads)
    return model, history


def bisnn_train(converted: SpikingModel, dataset: Sequence[Sample], cfg: TrainConfig) -> tuple[SpikingModel, list[dict]]:
    """STBP retraining of the weights of a converted model; thresholds and leaks stay fixed."""
    return _train_snn(converted, dataset, cfg)


def direct_stbp_train(
    template: SpikingModel, dataset: Sequence[Sample], cfg: TrainConfig, init_seed: int = 0
) -> tuple[SpikingModel, list[dict]]:
    """Same loop as :func:`bisnn_train` from freshly initialized weights.

    Thresholds, leaks and T are taken from ``template``.
    """
    fresh = init_params(template.config, seed=init_seed)
    weights = OrderedDict(
        (k, Tensor(v.data.copy(), requires_grad=True, name=k)) for k, v in fresh.tensors.items() if not k.endswith(".lambda")
    )
    start = replace(template, weights=weights)
    return _train_snn(start, dataset, cfg)


def evaluate_loss(flow_fn: Callable[[Sequence[Sample]], Tensor], samples: Sequence[Sample], cfg: LossConfig = LossConfig()) -> float:
    """Mean total loss of ``flow_fn`` over ``samples`` (no gradients)."""
    flow = flow_fn(samples)
    return batch_loss(flow, samples, cfg)[0].item()


def write_history_csv(history: list[dict], path) -> None:
    with open(path, "w") as f:
        f.write("iter,epoch,contrast,smooth,total,lr\n")
        for r in history:
            f.write(f"{r['iter']},{r['epoch']},{r['contrast']!r},{r['smooth']!r},{r['total']!r},{r['lr']!r}\n")
