"""The flow network in ANN mode.

Layout (H x W input, C base channels, N event groups)::

    ConvGRU1  (2-ch cell, shared over the N groups)    H    x W    2N
    encoder1..4  (3x3 stride 2 + QCFS)                  H/2..H/16  C..8C
    block1, block2  (residual, QCFS)                    H/16       8C
    fusion d8/d4/d2 on encoder1..3 + concat             H/16       15C
    x2 bilinear                                         H/8        15C
    decoder1..#Ds  (3x3, QCFS)                          H/8        15C
    generator  (3x3, 2 filters) then x8 bilinear        H          2
    ConvGRU2  (state = previous flow)                   H          2

ConvGRU2's output is a convex mix of its state and a tanh, so it lives in
(-1, 1); the returned flow is that output times ``flow_scale`` pixels.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .tensor import Tensor

GRU_GATES = ("xi_r", "xi_z", "xi_i")


@dataclass(frozen=True)
class NetConfig:
    height: int
    width: int
    N: int = 4
    base_channels: int = 32
    num_decoders: int = 1
    levels: int = 4
    flow_scale: float = 8.0
    qcfs_shift: bool = False

    def __post_init__(self):
        if self.height % 16 or self.width % 16:
            raise ValueError(f"input extents {self.height}x{self.width} must be divisible by 16")
        if min(self.N, self.base_channels, self.num_decoders, self.levels) < 1:
            raise ValueError("N, base_channels, num_decoders and levels must be >= 1")
        if self.flow_scale <= 0:
            raise ValueError("flow_scale must be positive")

    @property
    def fused_channels(self) -> int:
        return 15 * self.base_channels

    @property
    def decoder_size(self) -> tuple[int, int]:
        return self.height // 8, self.width // 8

    @property
    def shift(self) -> float:
        return 0.5 if self.qcfs_shift else 0.0


@dataclass(frozen=True)
class ConvSpec:
    name: str
    cin: int
    cout: int
    stride: int
    in_hw: tuple[int, int]
    module: str
    kernel: int = 3
    padding: int = 1
    activation: str = "none"  # "qcfs" | "gate" | "none"
    groups_applied: int = 1  # how many times the kernel runs per forward (shared ConvGRU1)

    @property
    def out_hw(self) -> tuple[int, int]:
        h, w = self.in_hw
        return (
            (h + 2 * self.padding - self.kernel) // self.stride + 1,
            (w + 2 * self.padding - self.kernel) // self.stride + 1,
        )

    @property
    def macs(self) -> int:
        ho, wo = self.out_hw
        return self.cout * ho * wo * self.cin * self.kernel * self.kernel * self.groups_applied


def layer_specs(cfg: NetConfig) -> list[ConvSpec]:
    """Every convolution of the network in execution order."""
    H, W, C = cfg.height, cfg.width, cfg.base_channels
    specs: list[ConvSpec] = []
    for g in GRU_GATES:
        specs.append(ConvSpec(f"convgru1.{g}", 4, 2, 1, (H, W), "convgru1", activation="gate", groups_applied=cfg.N))
    chans = [2 * cfg.N] + [C * 2**i for i in range(4)]
    for l in range(1, 5):
        hw = (H >> (l - 1), W >> (l - 1))
        specs.append(ConvSpec(f"encoder{l}", chans[l - 1], chans[l], 2, hw, f"encoder{l}", activation="qcfs"))
    hw16 = (H // 16, W // 16)
    for b in (1, 2):
        for c in (1, 2):
            specs.append(ConvSpec(f"block{b}.conv{c}", 8 * C, 8 * C, 1, hw16, f"block{b}", activation="qcfs"))
    for name, src, stride in (("d8", 1, 8), ("d4", 2, 4), ("d2", 3, 2)):
        hw = (H >> src, W >> src)
        ch = chans[src]
        specs.append(ConvSpec(f"fusion.{name}", ch, ch, stride, hw, "fusion"))
    hw8 = cfg.decoder_size
    for k in range(1, cfg.num_decoders + 1):
        specs.append(ConvSpec(f"decoder{k}", cfg.fused_channels, cfg.fused_channels, 1, hw8, f"decoder{k}", activation="qcfs"))
    specs.append(ConvSpec("generator", cfg.fused_channels, 2, 1, hw8, "generator"))
    for g in GRU_GATES:
        specs.append(ConvSpec(f"convgru2.{g}", 4, 2, 1, (H, W), "convgru2", activation="gate"))
    return specs


def qcfs_sites(cfg: NetConfig) -> list[str]:
    return [s.name for s in layer_specs(cfg) if s.activation == "qcfs"]


@dataclass
class STFlowNetParams:
    config: NetConfig
    tensors: "OrderedDict[str, Tensor]" = field(default_factory=OrderedDict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def weights(self) -> list[Tensor]:
        return list(self.tensors.values())

    def lam(self, site: str) -> Tensor:
        return self.tensors[f"{site}.lambda"]

    def copy(self) -> "STFlowNetParams":
        return STFlowNetParams(
            self.config,
            OrderedDict((k, Tensor(v.data.copy(), requires_grad=True, name=k)) for k, v in self.tensors.items()),
        )


@dataclass
class ModelState:
    """Recurrent state: the previous final flow in ConvGRU2 units, or None (= zero)."""

    prev_flow: Tensor | None = None


def init_params(cfg: NetConfig, seed: int = 0, lam: float = 1.0) -> STFlowNetParams:
    """He-uniform weights, zero biases, QCFS ceilings set to ``lam``."""
    rng = np.random.default_rng(seed)
    tensors: OrderedDict[str, Tensor] = OrderedDict()
    for s in layer_specs(cfg):
        fan_in = s.cin * s.kernel * s.kernel
        bound = np.sqrt(6.0 / fan_in)
        if s.activation != "qcfs":
            bound = np.sqrt(1.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(s.cout, s.cin, s.kernel, s.kernel))
        tensors[f"{s.name}.weight"] = Tensor(w, requires_grad=True, name=f"{s.name}.weight")
        tensors[f"{s.name}.bias"] = Tensor(np.zeros(s.cout), requires_grad=True, name=f"{s.name}.bias")
        if s.activation == "qcfs":
            tensors[f"{s.name}.lambda"] = Tensor(np.array(lam), requires_grad=True, name=f"{s.name}.lambda")
    return STFlowNetParams(cfg, tensors)


def zero_params(cfg: NetConfig, lam: float = 1.0) -> STFlowNetParams:
    p = init_params(cfg)
    for k, v in p.tensors.items():
        v.data = np.full_like(v.data, lam) if k.endswith(".lambda") else np.zeros_like(v.data)
    return p


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def conv(params: STFlowNetParams | dict, name: str, x: Tensor, stride: int = 1, padding: int = 1) -> Tensor:
    tensors = params.tensors if isinstance(params, STFlowNetParams) else params
    return T.conv2d(x, tensors[f"{name}.weight"], tensors[f"{name}.bias"], stride, padding)


def qcfs(x: Tensor, lam, levels: int, shift: float = 0.0) -> Tensor:
    return T.qcfs(x, lam, levels, shift)


def convgru_step(params, prefix: str, inp: Tensor, state: Tensor) -> Tensor:
    """One ConvGRU update; returns the augmented/aligned output.

    R = sigmoid(xi_R[O, I]), Z = sigmoid(xi_Z[O, I]),
    H = tanh(xi_I[R*O, I]),  out = (1 - Z)*O + Z*H.
    """
    if inp.shape[0] != state.shape[0] or inp.shape[2:] != state.shape[2:]:
        raise ValueError(f"ConvGRU input {inp.shape} and state {state.shape} extents differ")
    tensors = params.tensors if isinstance(params, STFlowNetParams) else params
    w = tensors[f"{prefix}.xi_r.weight"]
    if state.shape[1] + inp.shape[1] != w.shape[1]:
        raise ValueError(f"{prefix}: state {state.shape} + input {inp.shape} do not match kernel {w.shape}")
    oi = T.concat([state, inp], axis=1)
    r = T.sigmoid(conv(tensors, f"{prefix}.xi_r", oi))
    z = T.sigmoid(conv(tensors, f"{prefix}.xi_z", oi))
    h = T.tanh(conv(tensors, f"{prefix}.xi_i", T.concat([r * state, inp], axis=1)))
    return (1.0 - z) * state + z * h


def convgru1_grouped(params, inp: Tensor, state: Tensor, groups: int) -> Tensor:
    """ConvGRU1 on a 2N-channel input: the 2-channel cell runs once per group.

    Equivalent to replicating the 2-channel state N times along channels and
    applying a block-diagonal cell whose diagonal blocks share weights.
    """
    b, c, h, w = inp.shape
    if c != 2 * groups:
        raise ValueError(f"ConvGRU1 expects {2 * groups} channels, got {inp.shape}")
    if groups == 1:
        return convgru_step(params, "convgru1", inp, state)
    lifted = T.concat([state] * groups, axis=1).reshape(b * groups, 2, h, w)
    out = convgru_step(params, "convgru1", inp.reshape(b * groups, 2, h, w), lifted)
    return out.reshape(b, c, h, w)


def residual_block(params, prefix: str, x: Tensor, levels: int, shift: float = 0.0) -> Tensor:
    """y = QCFS(conv2(QCFS(conv1(x))) + x)."""
    tensors = params.tensors if isinstance(params, STFlowNetParams) else params
    y = qcfs(conv(tensors, f"{prefix}.conv1", x), tensors[f"{prefix}.conv1.lambda"], levels, shift)
    y = conv(tensors, f"{prefix}.conv2", y) + x
    return qcfs(y, tensors[f"{prefix}.conv2.lambda"], levels, shift)


def normalize_counts(x: np.ndarray) -> np.ndarray:
    """Divide each (sample, channel) count image by its own maximum when nonzero."""
    peak = x.max(axis=(2, 3), keepdims=True)
    return x / np.where(peak > 0, peak, 1.0)


def zero_state(cfg: NetConfig, batch: int) -> Tensor:
    return Tensor(np.zeros((batch, 2, cfg.height, cfg.width)))


def forward_ann(
    params: STFlowNetParams,
    inp: Tensor,
    state: ModelState | None = None,
    trace: dict | None = None,
) -> tuple[Tensor, ModelState]:
    """Predict flow (B, 2, H, W) in pixels per window from raw event counts (B, 2N, H, W).

    ``trace``, when given, receives every QCFS pre-activation keyed by layer.
    """
    cfg = params.config
    b, c, h, w = inp.shape
    if (h, w) != (cfg.height, cfg.width) or c != 2 * cfg.N:
        raise ValueError(f"input {inp.shape} does not match network ({2 * cfg.N}, {cfg.height}, {cfg.width})")
    L, shift = cfg.levels, cfg.shift
    prev = state.prev_flow if state is not None and state.prev_flow is not None else zero_state(cfg, b)

    def act(site: str, x: Tensor) -> Tensor:
        if trace is not None:
            trace[site] = x.data
        return qcfs(x, params.lam(site), L, shift)

    x = Tensor(normalize_counts(inp.data))
    aug = convgru1_grouped(params, x, prev, cfg.N)
    feats = []
    f = aug
    for l in range(1, 5):
        f = act(f"encoder{l}", conv(params, f"encoder{l}", f, stride=2))
        feats.append(f)
    for blk in (1, 2):
        y = act(f"block{blk}.conv1", conv(params, f"block{blk}.conv1", f))
        f = act(f"block{blk}.conv2", conv(params, f"block{blk}.conv2", y) + f)
    fused = T.concat(
        [
            conv(params, "fusion.d8", feats[0], stride=8),
            conv(params, "fusion.d4", feats[1], stride=4),
            conv(params, "fusion.d2", feats[2], stride=2),
            f,
        ],
        axis=1,
    )
    d = T.bilinear_upsample(fused, 2)
    for k in range(1, cfg.num_decoders + 1):
        d = act(f"decoder{k}", conv(params, f"decoder{k}", d))
    basic = conv(params, "generator", d)
    basic = T.bilinear_upsample(basic, h // basic.shape[2])
    out = convgru_step(params, "convgru2", basic, prev)
    return out * cfg.flow_scale, ModelState(out)


def calibrate_lambdas(
    params: STFlowNetParams, inp: Tensor, percentile: float = 99.0, rescale: bool = True
) -> STFlowNetParams:
    """Threshold balancing: set each QCFS ceiling from its positive pre-activations.

    Layers are calibrated in order so each sees already-calibrated upstream
    activations.  With ``rescale`` the layer's weights and bias are divided by
    the measured percentile instead and the ceiling set to 1; QCFS is
    positively homogeneous, so this only changes the scale downstream layers
    see, and keeps every ceiling on the same footing for the optimizer.
    A residual output (which also sums the block input) is never rescaled.
    """
    sites = qcfs_sites(params.config)
    for site in sites:
        params.lam(site).data = np.array(1e6)
    for site in sites:
        trace: dict = {}
        forward_ann(params, inp, trace=trace)
        pre = trace[site]
        pos = pre[pre > 0]
        level = float(np.percentile(pos, percentile)) if pos.size else 1.0
        if rescale and not site.endswith("conv2"):
            params[f"{site}.weight"].data = params[f"{site}.weight"].data / level
            params[f"{site}.bias"].data = params[f"{site}.bias"].data / level
            level = 1.0
        params.lam(site).data = np.array(level)
    return params


def with_config(params: STFlowNetParams, **changes) -> STFlowNetParams:
    return STFlowNetParams(replace(params.config, **changes), params.tensors)
