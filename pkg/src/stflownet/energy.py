"""Theoretical energy accounting: MAC vs AC operation counts and relative energy.

ANN layers are all multiply-accumulate.  In the spiking model a layer counts
as accumulate-only when its input is a spike train; ConvGRU1, encoder1,
decoder1 and ConvGRU2 see real-valued inputs and stay MAC.  MAC layers are
counted once per step (``T`` times); AC layers count dense ops times the
firing rate of their input times ``T``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .network import ConvSpec, NetConfig, layer_specs
from .spiking import SpikingModel

MAC_MODULES = ("convgru1", "encoder1", "decoder1", "convgru2")


@dataclass(frozen=True)
class EnergyConstants:
    e_mac: float = 4.6e-12
    e_ac: float = 0.9e-12

    def __post_init__(self):
        if not (self.e_mac > 0 and self.e_ac > 0):
            raise ValueError("energy per operation must be positive")
        if not self.e_ac < self.e_mac:
            raise ValueError("an accumulate must cost less than a multiply-accumulate")


@dataclass
class LayerOps:
    name: str
    kind: str  # "MAC" | "AC"
    ops: float
    rate: float
    energy_j: float
    rationale: str


@dataclass
class OpCountReport:
    layers: list[LayerOps]
    T: int = 1
    # elementwise nonlinearities (sigmoid/tanh gates, QCFS or spike thresholds), outside the energy totals
    activation_ops: int = 0
    constants: EnergyConstants = field(default_factory=EnergyConstants)

    @property
    def energy(self) -> float:
        return float(sum(l.energy_j for l in self.layers))

    def ops(self, kind: str) -> float:
        return float(sum(l.ops for l in self.layers if l.kind == kind))

    def to_csv(self, path, summary: str | None = None) -> None:
        with open(path, "w") as f:
            f.write("layer,kind,ops,rate,energy_j\n")
            for l in self.layers:
                f.write(f"{l.name},{l.kind},{l.ops!r},{l.rate!r},{l.energy_j!r}\n")
            if summary:
                f.write(f"# {summary}\n")


def _activation_ops(cfg: NetConfig) -> int:
    n = 0
    for s in layer_specs(cfg):
        ho, wo = s.out_hw
        if s.activation in ("qcfs", "gate"):
            n += s.cout * ho * wo * s.groups_applied
    return n


def count_ann_ops(cfg: NetConfig, constants: EnergyConstants = EnergyConstants()) -> OpCountReport:
    """One forward pass: every convolution as Cout*H'*W'*Cin*kH*kW MACs."""
    layers = [
        LayerOps(s.name, "MAC", float(s.macs), 1.0, s.macs * constants.e_mac, "ANN layers multiply real-valued activations")
        for s in layer_specs(cfg)
    ]
    return OpCountReport(layers, 1, _activation_ops(cfg), constants)


def spike_source(spec: ConvSpec, cfg: NetConfig) -> str | None:
    """Spiking layer whose output feeds ``spec``, or None for real-valued input."""
    name = spec.name
    if spec.module in MAC_MODULES:
        return None
    if name.startswith("encoder"):
        return f"encoder{int(name[7]) - 1}"
    chain = {
        "block1.conv1": "encoder4",
        "block1.conv2": "block1.conv1",
        "block2.conv1": "block1.conv2",
        "block2.conv2": "block2.conv1",
        "fusion.d8": "encoder1",
        "fusion.d4": "encoder2",
        "fusion.d2": "encoder3",
        "generator": f"decoder{cfg.num_decoders}",
    }
    if name in chain:
        return chain[name]
    if name.startswith("decoder"):
        return f"decoder{int(name[7:]) - 1}"
    raise KeyError(f"no spike source known for {name}")


def snn_step_macs(spec: ConvSpec, cfg: NetConfig) -> int:
    """Dense ops of one step: the spiking ConvGRU1 sees one group and encoder1 one slot."""
    if spec.module == "convgru1":
        return spec.macs // spec.groups_applied
    if spec.module == "encoder1":
        return spec.macs * 2 // spec.cin
    return spec.macs


def count_snn_ops(
    model: SpikingModel | NetConfig,
    rates: dict[str, float],
    T: int | None = None,
    constants: EnergyConstants = EnergyConstants(),
    steps_inside: bool = True,
) -> OpCountReport:
    """Firing-rate weighted operation counts of a spiking run.

    With ``steps_inside=False`` the counts are per step (T left outside).
    """
    cfg = model.config if isinstance(model, SpikingModel) else model
    T = (model.T if isinstance(model, SpikingModel) else cfg.N) if T is None else T
    if T < 1:
        raise ValueError("T must be >= 1")
    mult = T if steps_inside else 1
    layers = []
    for s in layer_specs(cfg):
        dense = snn_step_macs(s, cfg)
        src = spike_source(s, cfg)
        if src is None:
            ops = float(dense * mult)
            why = f"{s.module} receives real-valued input"
            layers.append(LayerOps(s.name, "MAC", ops, 1.0, ops * constants.e_mac, why))
            continue
        if src not in rates:
            raise KeyError(f"firing rate of {src} (input of {s.name}) is missing")
        r = float(rates[src])
        if not 0.0 <= r <= 1.0:
            raise ValueError(f"firing rate of {src} must lie in [0, 1], got {r}")
        ops = dense * r * mult
        layers.append(LayerOps(s.name, "AC", ops, r, ops * constants.e_ac, f"input is the spike train of {src}"))
    return OpCountReport(layers, T, _activation_ops(cfg) * mult, constants)


def rec(ann: OpCountReport, snn: OpCountReport) -> float:
    """Relative energy consumption eta = Phi_SNN / Phi_ANN."""
    base = ann.energy
    if not base > 0:
        raise ValueError("ANN energy must be positive")
    return snn.energy / base


def ac_module_ratio(rate: float, T: int, constants: EnergyConstants = EnergyConstants()) -> float:
    """Closed form of eta for a module whose every layer is AC in the spiking model."""
    return constants.e_ac / constants.e_mac * rate * T


def module_ratio(ann: OpCountReport, snn: OpCountReport, prefixes: tuple[str, ...]) -> float:
    """eta restricted to layers whose names start with one of ``prefixes``."""
    a = sum(l.energy_j for l in ann.layers if l.name.startswith(prefixes))
    s = sum(l.energy_j for l in snn.layers if l.name.startswith(prefixes))
    if not a > 0:
        raise ValueError(f"no ANN energy under {prefixes}")
    return s / a
