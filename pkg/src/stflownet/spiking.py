"""Spiking execution of the flow network and ANN-to-SNN conversion.

Every QCFS layer becomes an integrate-and-fire layer with threshold equal to
its ceiling and soft reset, so a layer passes ``spike * theta`` downstream.
Event group ``n`` drives step ``n``.  ConvGRU1 runs on each group as it
arrives, and encoder1's slot ``n`` weights are applied to it with a gain of
``N``, so the time-average of encoder1's input current equals the ANN
pre-activation.

The generator integrates its input current in a leaky membrane and is read
out as membrane / T.  ConvGRU2 runs at every step on the partial flow; its
output changes feed a second leaky membrane whose value after the last step
is the flow.  With both leaks at zero, the SNN reproduces the quantized ANN
exactly whenever the per-layer input currents are constant in time.
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .network import ModelState, NetConfig, STFlowNetParams, conv, convgru_step, normalize_counts, qcfs_sites, zero_state
from .tensor import Tensor

log = logging.getLogger(__name__)

RESET_MODES = ("soft", "hard")


@dataclass
class SpikingModel:
    config: NetConfig
    weights: "OrderedDict[str, Tensor]"
    theta: dict[str, float]
    T: int
    tau_generator: float = 0.0
    tau_convgru2: float = 0.0
    reset: str = "soft"

    def __post_init__(self):
        if self.reset not in RESET_MODES:
            raise ValueError(f"reset must be one of {RESET_MODES}, got {self.reset!r}")
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if self.T < self.config.N or self.T % self.config.N:
            raise ValueError(f"T={self.T} must be a positive multiple of N={self.config.N}")
        if min(self.tau_generator, self.tau_convgru2) < 0:
            raise ValueError("leak constants must be >= 0")
        for site, th in self.theta.items():
            if not th > 0:
                raise ValueError(f"threshold of {site} must be positive, got {th}")

    @property
    def repeats(self) -> int:
        """Steps each event group is held for."""
        return self.T // self.config.N

    @property
    def sites(self) -> list[str]:
        return qcfs_sites(self.config)

    def copy(self) -> "SpikingModel":
        w = OrderedDict((k, Tensor(v.data.copy(), requires_grad=True, name=k)) for k, v in self.weights.items())
        return SpikingModel(self.config, w, dict(self.theta), self.T, self.tau_generator, self.tau_convgru2, self.reset)


def convert_a2s(params: STFlowNetParams, T: int | None = None, reset: str = "soft") -> SpikingModel:
    """Copy weights verbatim; each QCFS ceiling becomes a firing threshold."""
    cfg = params.config
    weights = OrderedDict(
        (k, Tensor(v.data.copy(), requires_grad=True, name=k)) for k, v in params.tensors.items() if not k.endswith(".lambda")
    )
    theta = {s: float(params.lam(s).data) for s in qcfs_sites(cfg)}
    return SpikingModel(cfg, weights, theta, cfg.N if T is None else T, reset=reset)


@dataclass
class LIFConfig:
    theta: float
    tau: float = 0.0
    reset: str = "soft"

    def __post_init__(self):
        if not self.theta > 0:
            raise ValueError(f"threshold must be positive, got {self.theta}")
        if self.tau < 0:
            raise ValueError(f"tau must be >= 0, got {self.tau}")
        if self.reset not in RESET_MODES:
            raise ValueError(f"reset must be one of {RESET_MODES}, got {self.reset!r}")

    @property
    def decay(self) -> float:
        return float(np.exp(-self.tau))


@dataclass
class LIFState:
    v: Tensor
    s_prev: Tensor

    @classmethod
    def zeros(cls, shape, v0: float = 0.0) -> "LIFState":
        return cls(Tensor(np.full(shape, v0, dtype=np.float64)), Tensor(np.zeros(shape)))


def lif_step(state: LIFState, current: Tensor, cfg: LIFConfig) -> Tensor:
    """Advance one integrate-and-fire step in place and return the spikes.

    The spike surrogate is evaluated on ``(v - theta)/theta`` so its width
    scales with the threshold.
    """
    if current.shape != state.v.shape:
        raise ValueError(f"current {current.shape} does not match membrane {state.v.shape}")
    tape = T._active_tape()
    if tape is not None and state.v.requires_grad:
        tape.temporal_links += 1
    v, s_prev, th = state.v, state.s_prev, cfg.theta
    if cfg.decay != 1.0:
        v = v * cfg.decay
    if cfg.reset == "soft":
        v = v - s_prev * th + current
    else:
        v = v * (1.0 - s_prev) + current
    s = T.spike((v - th) * (1.0 / th))
    state.v, state.s_prev = v, s
    return s


@dataclass
class SNNDiagnostics:
    state: ModelState
    # mean firing rate per spiking layer, one entry per step
    rates: dict[str, list[float]] = field(default_factory=dict)
    spikes: dict[str, list[np.ndarray]] | None = None
    temporal_links: int = 0


def firing_report(diag: SNNDiagnostics) -> dict[str, float]:
    """Mean rate per spiking layer over steps and elements."""
    return {k: float(np.mean(v)) if v else 0.0 for k, v in diag.rates.items()}


def forward_snn(
    model: SpikingModel,
    inputs: list[Tensor],
    state: ModelState | None = None,
    record_spikes: bool = False,
    detach_state: bool = False,
) -> tuple[Tensor, SNNDiagnostics]:
    """Run T steps on N per-group count frames, each (B, 2, H, W).

    Returns the flow read after the last step and the run diagnostics.
    """
    cfg = model.config
    if not inputs:
        raise ValueError("forward_snn needs at least one event group")
    if len(inputs) != cfg.N:
        raise ValueError(f"expected {cfg.N} event groups, got {len(inputs)}")
    b, c, h, w = inputs[0].shape
    for x in inputs:
        if x.shape != (b, 2, cfg.height, cfg.width):
            raise ValueError(f"group frame {x.shape} does not match network (B, 2, {cfg.height}, {cfg.width})")
    W = model.weights
    prev = state.prev_flow if state is not None and state.prev_flow is not None else zero_state(cfg, b)
    v0 = cfg.shift

    lif: dict[str, LIFState] = {}
    cfgs = {s: LIFConfig(model.theta[s], 0.0, model.reset) for s in model.sites}
    rates: dict[str, list[float]] = {s: [] for s in model.sites}
    spikes = {s: [] for s in model.sites} if record_spikes else None
    tape = T._active_tape()
    links0 = tape.temporal_links if tape is not None else 0

    def fire(site: str, current: Tensor) -> Tensor:
        th = model.theta[site]
        if site not in lif:
            lif[site] = LIFState.zeros(current.shape, v0 * th)
        s = lif_step(lif[site], current, cfgs[site])
        if detach_state:
            lif[site].v, lif[site].s_prev = lif[site].v.detach(), s.detach()
        rates[site].append(float(s.data.mean()))
        if spikes is not None:
            spikes[site].append(s.data.astype(np.uint8))
        return s * th

    e1w, e1b = W["encoder1.weight"], W["encoder1.bias"]
    k_gen = float(np.exp(-model.tau_generator))
    k_gru = float(np.exp(-model.tau_convgru2))
    g_mem = None
    out_mem = None
    o_last = None
    frames = [Tensor(normalize_counts(x.data)) for x in inputs]
    for t in range(model.T):
        n = t // model.repeats
        aug = convgru_step(W, "convgru1", frames[n], prev)
        cur = T.conv2d(aug, e1w[:, 2 * n : 2 * n + 2], None, 2, 1) * float(cfg.N) + e1b.reshape(1, -1, 1, 1)
        a = fire("encoder1", cur)
        feats = [a]
        for l in range(2, 5):
            a = fire(f"encoder{l}", conv(W, f"encoder{l}", a, stride=2))
            feats.append(a)
        f = a
        for blk in (1, 2):
            y = fire(f"block{blk}.conv1", conv(W, f"block{blk}.conv1", f))
            f = fire(f"block{blk}.conv2", conv(W, f"block{blk}.conv2", y) + f)
        fused = T.concat(
            [
                conv(W, "fusion.d8", feats[0], stride=8),
                conv(W, "fusion.d4", feats[1], stride=4),
                conv(W, "fusion.d2", feats[2], stride=2),
                f,
            ],
            axis=1,
        )
        d = T.bilinear_upsample(fused, 2)
        for k in range(1, cfg.num_decoders + 1):
            d = fire(f"decoder{k}", conv(W, f"decoder{k}", d))
        g_in = conv(W, "generator", d)
        g_mem = g_in if g_mem is None else g_mem * k_gen + g_in
        basic = T.bilinear_upsample(g_mem * (1.0 / model.T), h // g_in.shape[2])
        o = convgru_step(W, "convgru2", basic, prev)
        delta = o if o_last is None else o - o_last
        out_mem = delta if out_mem is None else out_mem * k_gru + delta
        o_last = o

    links = (tape.temporal_links - links0) if tape is not None else 0
    return out_mem * cfg.flow_scale, SNNDiagnostics(ModelState(out_mem), rates, spikes, links)


def set_leaks(model: SpikingModel, tau_generator: float, tau_convgru2: float) -> SpikingModel:
    m = model.copy()
    m.tau_generator, m.tau_convgru2 = float(tau_generator), float(tau_convgru2)
    m.__post_init__()
    return m
