"""Command line: synth, train, convert, retrain, stbp, infer, eval, energy, sweep, visualize.

Configuration is a flat ``key=value`` file (``--config``) overridden by
``--key value`` flags.  Exit status: 0 success, 1 usage error, 2 data or
format error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint as ck
from .energy import EnergyConstants, count_ann_ops, count_snn_ops, rec
from .events import (
    EventFormatError,
    EventStream,
    load_events,
    load_ground_truth,
    read_flo,
    save_ground_truth,
    synth_translating_pattern,
    write_events,
    write_flo,
)
from .metrics import MetricReport, aee, event_mask, fwl, rsat
from .network import NetConfig, calibrate_lambdas, init_params
from .pipeline import evaluate_samples, predict_stream
from .spiking import SpikingModel, convert_a2s, firing_report, forward_snn, set_leaks
from .training import LossConfig, TrainConfig, ann_batch, bisnn_train, direct_stbp_train, snn_batch, synthetic_dataset, train_ann, write_history_csv
from .viz import render_flow, write_ppm

log = logging.getLogger("stflownet")


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class Key:
    name: str
    type: type
    default: object
    help: str
    full_scale: str | None = None


KEYS = [
    Key("size", int, 32, "sensor width and height in pixels (multiple of 16)"),
    Key("N", int, 4, "event groups per window"),
    Key("base_channels", int, 4, "channels of encoder1; later encoders double it", "32-256 ladder"),
    Key("num_decoders", int, 1, "tandem decoder count", "1"),
    Key("levels", int, 4, "QCFS quantization levels L"),
    Key("qcfs_shift", int, 0, "1 = half-step shifted QCFS floor, 0 = unshifted", "0"),
    Key("flow_scale", float, 8.0, "pixels per unit of ConvGRU2 output"),
    Key("T", int, 4, "spiking time steps (multiple of N)", "T = L"),
    Key("tau0", float, 0.0, "generator membrane leak tau (decay e^-tau)"),
    Key("tau1", float, 0.0, "ConvGRU2 membrane leak tau (decay e^-tau)"),
    Key("reset", str, "soft", "spiking reset mode: soft or hard", "soft"),
    Key("smooth_weight", float, 0.001, "weight of the Charbonnier smoothness term", "0.001"),
    Key("charbonnier_eps", float, 1e-3, "Charbonnier epsilon"),
    Key("charbonnier_alpha", float, 0.5, "Charbonnier exponent"),
    Key("eps_w", float, 1e-9, "floor of the contrast-loss pixel count"),
    Key("timestamps", str, "reference", "contrast-loss timestamp weighting: reference or start"),
    Key("epochs_ann", int, 100, "ANN training epochs", "100"),
    Key("epochs_bisnn", int, 10, "spiking retraining epochs", "10"),
    Key("iterations", int, 0, "stop training after this many iterations (0 = all epochs)"),
    Key("batch_size", int, 32, "training batch size", "8"),
    Key("lr", float, 3e-3, "Adam learning rate", "2e-4"),
    Key("gamma", float, 0.98, "learning-rate decay per epoch"),
    Key("seed", int, 0, "random seed for data and initialization"),
    Key("windows", int, 2400, "synthetic training windows"),
    Key("eval_windows", int, 50, "synthetic evaluation windows"),
    Key("eval_seed", int, 99, "seed of the synthetic evaluation set"),
    Key("density", float, 0.3, "synthetic events per pixel"),
    Key("max_speed", float, 3.0, "synthetic speed bound per axis, pixels per window"),
    Key("velocity", str, "2,1", "synth velocity vx,vy in pixels per window"),
    Key("window", str, "0,1", "time window t0,t1 of an event file (synth writes [0, 1])"),
    Key("format", str, "text", "event file format: text or binary"),
    Key("grid", int, 5, "sweep grid points per axis over [0, 0.8]"),
    Key("dt", str, "dt1", "AEE convention for eval: dt1 or dt4"),
    Key("e_mac", float, 4.6e-12, "joules per multiply-accumulate"),
    Key("e_ac", float, 0.9e-12, "joules per accumulate"),
]
KEY_MAP = {k.name: k for k in KEYS}

COMMANDS = {
    "synth": "write a synthetic translating-pattern event window and its ground truth",
    "train": "train the QCFS network on synthetic windows; writes ann.stfw and ann_loss.csv into --out",
    "convert": "convert an ANN checkpoint into a spiking model; writes a2s.stfw into --out",
    "retrain": "retrain a converted spiking model with STBP (BISNN); writes bisnn.stfw and bisnn_loss.csv",
    "stbp": "train with STBP from random weights, thresholds and T taken from --ckpt; writes stbp.stfw and stbp_loss.csv",
    "infer": "predict flow for an event file",
    "eval": "compute AEE/FWL/RSAT for a checkpoint or a flow file",
    "energy": "theoretical MAC/AC energy of a spiking checkpoint",
    "sweep": "metrics over a tau0 x tau1 grid",
    "visualize": "render a .flo file as a color-coded PPM",
}


def parse_config_file(path: str) -> dict[str, str]:
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e.strerror}") from None
    for i, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{i}: expected key=value, got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in KEY_MAP:
            raise UsageError(f"{path}:{i}: unknown config key {k!r}")
        out[k] = v
    return out


def resolve_config(file_values: dict[str, str], flags: dict[str, object]) -> dict[str, object]:
    cfg = {}
    for k in KEYS:
        raw = flags.get(k.name)
        if raw is None:
            raw = file_values.get(k.name, k.default)
        try:
            cfg[k.name] = k.type(raw)
        except (TypeError, ValueError):
            raise UsageError(f"config key {k.name}: cannot parse {raw!r} as {k.type.__name__}") from None
    if cfg["size"] % 16 or cfg["size"] < 16:
        raise UsageError("size must be a positive multiple of 16")
    for k in ("reset", "timestamps", "format", "dt"):
        allowed = {"reset": ("soft", "hard"), "timestamps": ("reference", "start"), "format": ("text", "binary"), "dt": ("dt1", "dt4")}[k]
        if cfg[k] not in allowed:
            raise UsageError(f"config key {k} must be one of {allowed}, got {cfg[k]!r}")
    return cfg


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stflownet", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", metavar="command")
    for name, help_text in COMMANDS.items():
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("--config", help="flat key=value file; flags override it")
        sp.add_argument("--out", help="output file or directory")
        sp.add_argument("--ckpt", help="input checkpoint (.stfw)")
        sp.add_argument("--events", help="event file")
        sp.add_argument("--gt", help="ground-truth .flo file")
        sp.add_argument("--flow", help="flow .flo file")
        sp.add_argument("--epochs", type=int, help="epoch override for train/retrain/stbp")
        grp = sp.add_argument_group("configuration keys")
        for k in KEYS:
            extra = f"; full-scale setting: {k.full_scale}" if k.full_scale else ""
            grp.add_argument(f"--{k.name}", default=None, metavar=k.type.__name__.upper(), help=f"{k.help} (default {k.default}{extra})")
    return p


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _need(args, *names):
    for n in names:
        if getattr(args, n) is None:
            raise UsageError(f"{args.command} needs --{n}")


def _net_config(cfg: dict) -> NetConfig:
    try:
        return NetConfig(cfg["size"], cfg["size"], cfg["N"], cfg["base_channels"], cfg["num_decoders"], cfg["levels"], cfg["flow_scale"], bool(cfg["qcfs_shift"]))
    except ValueError as e:
        raise UsageError(str(e)) from None


def _train_config(cfg: dict, epochs: int | None, spiking: bool) -> TrainConfig:
    loss = LossConfig(cfg["smooth_weight"], cfg["charbonnier_eps"], cfg["charbonnier_alpha"], cfg["eps_w"], cfg["timestamps"])
    e_ann = cfg["epochs_ann"] if epochs is None or spiking else epochs
    e_snn = cfg["epochs_bisnn"] if epochs is None or not spiking else epochs
    return TrainConfig(e_ann, e_snn, cfg["batch_size"], cfg["lr"], cfg["gamma"], cfg["seed"], cfg["iterations"] or None, None, loss)


def _train_set(cfg: dict):
    return synthetic_dataset(cfg["windows"], cfg["size"], cfg["N"], cfg["max_speed"], cfg["density"], cfg["seed"])


def _eval_set(cfg: dict):
    return synthetic_dataset(cfg["eval_windows"], cfg["size"], cfg["N"], cfg["max_speed"], cfg["density"], cfg["eval_seed"])


def _load_model(path: str):
    if ck.is_spiking_checkpoint(path):
        return ck.load_spiking(path)
    return ck.load_params(path)


def _load_stream(args, cfg) -> EventStream:
    return load_events(args.events, cfg["format"])


def _window(cfg) -> tuple[float, float]:
    try:
        t0, t1 = (float(v) for v in cfg["window"].split(","))
    except ValueError:
        raise UsageError(f"window must be 't0,t1', got {cfg['window']!r}") from None
    if not t1 > t0:
        raise UsageError("window end must exceed its start")
    return t0, t1


def _out_dir(out: str) -> Path:
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_outputs(out: str, flow: np.ndarray) -> None:
    path = Path(out)
    write_flo(path, flow)
    write_ppm(path.with_suffix(".ppm"), render_flow(flow))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args, cfg) -> None:
    _need(args, "out")
    try:
        vel = tuple(float(v) for v in cfg["velocity"].split(","))
    except ValueError:
        raise UsageError(f"velocity must be 'vx,vy', got {cfg['velocity']!r}") from None
    if len(vel) != 2:
        raise UsageError(f"velocity must be 'vx,vy', got {cfg['velocity']!r}")
    try:
        stream, gt = synth_translating_pattern(cfg["size"], cfg["size"], cfg["density"], vel, seed=cfg["seed"])
    except ValueError as e:
        raise UsageError(str(e)) from None
    out = _out_dir(out_dir := args.out)
    ext = "txt" if cfg["format"] == "text" else "bin"
    write_events(stream, out / f"events.{ext}", cfg["format"])
    save_ground_truth(gt, out / "gt.flo")
    print(f"wrote {stream.count} events to {out_dir}; ground-truth flow magnitude {float(np.hypot(*vel)):.6g} px/window")


def cmd_train(args, cfg) -> None:
    _need(args, "out")
    net = _net_config(cfg)
    data = _train_set(cfg)
    params = init_params(net, seed=cfg["seed"])
    calibrate_lambdas(params, ann_batch(data[:16]))
    params, history = train_ann(params, data, _train_config(cfg, args.epochs, spiking=False))
    out = _out_dir(args.out)
    ck.save_params(params, out / "ann.stfw")
    write_history_csv(history, out / "ann_loss.csv")
    print(f"trained {len(history)} iterations; final loss {history[-1]['total']:.6g}" if history else "no iterations run")


def cmd_convert(args, cfg) -> None:
    _need(args, "ckpt", "out")
    params = ck.load_params(args.ckpt)
    try:
        model = convert_a2s(params, cfg["T"], cfg["reset"])
        model = set_leaks(model, cfg["tau0"], cfg["tau1"])
    except ValueError as e:
        raise UsageError(str(e)) from None
    out = _out_dir(args.out)
    ck.save_spiking(model, out / "a2s.stfw")
    print(f"converted {args.ckpt} -> {out / 'a2s.stfw'} (T={model.T})")


def _spiking_train(args, cfg, fresh: bool) -> None:
    _need(args, "ckpt", "out")
    template = ck.load_spiking(args.ckpt)
    data = _train_set(cfg)
    tc = _train_config(cfg, args.epochs, spiking=True)
    if fresh:
        model, history = direct_stbp_train(template, data, tc, init_seed=cfg["seed"])
    else:
        model, history = bisnn_train(template, data, tc)
    name = "stbp" if fresh else "bisnn"
    out = _out_dir(args.out)
    ck.save_spiking(model, out / f"{name}.stfw")
    write_history_csv(history, out / f"{name}_loss.csv")
    print(f"{len(history)} STBP iterations -> {out / f'{name}.stfw'}")


def cmd_retrain(args, cfg) -> None:
    _spiking_train(args, cfg, fresh=False)


def cmd_stbp(args, cfg) -> None:
    _spiking_train(args, cfg, fresh=True)


def cmd_infer(args, cfg) -> None:
    _need(args, "ckpt", "events", "out")
    model = _load_model(args.ckpt)
    stream = _load_stream(args, cfg)
    if (stream.height, stream.width) != (model.config.height, model.config.width):
        raise EventFormatError(f"events are {stream.width}x{stream.height}, model expects {model.config.width}x{model.config.height}")
    flow, _ = predict_stream(model, stream)
    _write_outputs(args.out, flow)
    print(f"flow written to {args.out}; mean magnitude {float(np.hypot(*flow).mean()):.6g}")


def cmd_eval(args, cfg) -> None:
    if args.flow is not None:
        _need(args, "events", "gt")
        stream = _load_stream(args, cfg)
        gt = load_ground_truth(args.gt)
        flow = read_flo(args.flow)
        window = _window(cfg)
        report = MetricReport("file", aee(flow, gt, event_mask(stream)), None, fwl(stream, flow, window), rsat(stream, flow, window))
    else:
        _need(args, "ckpt")
        model = _load_model(args.ckpt)
        report = evaluate_samples(model, _eval_set(cfg), dt4=cfg["dt"] == "dt4")
        report.breakdown = []
    print(report.table())
    if args.out:
        report.to_csv(args.out)


def cmd_energy(args, cfg) -> None:
    _need(args, "ckpt")
    model = _load_model(args.ckpt)
    if not isinstance(model, SpikingModel):
        raise EventFormatError(f"{args.ckpt}: energy needs a spiking checkpoint")
    data = _eval_set(cfg)
    _, diag = forward_snn(model, snn_batch(data))
    rates = firing_report(diag)
    consts = EnergyConstants(cfg["e_mac"], cfg["e_ac"])
    ann = count_ann_ops(model.config, consts)
    snn = count_snn_ops(model, rates, constants=consts)
    per_step = count_snn_ops(model, rates, constants=consts, steps_inside=False)
    summary = f"phi_ann={ann.energy!r} phi_snn={snn.energy!r} eta={rec(ann, snn)!r} eta_per_step={rec(ann, per_step)!r}"
    if args.out:
        snn.to_csv(args.out, summary)
    for l in snn.layers:
        print(f"{l.name:<16}{l.kind:>4}{l.ops:>14.1f}{l.rate:>8.4f}{l.energy_j:>12.4g}  {l.rationale}")
    print(summary)


def cmd_sweep(args, cfg) -> None:
    _need(args, "ckpt")
    model = _load_model(args.ckpt)
    if not isinstance(model, SpikingModel):
        raise EventFormatError(f"{args.ckpt}: sweep needs a spiking checkpoint")
    if cfg["grid"] < 1:
        raise UsageError("grid must be >= 1")
    data = _eval_set(cfg)
    taus = np.linspace(0.0, 0.8, cfg["grid"]) if cfg["grid"] > 1 else np.array([0.0])
    rows = []
    for t0 in taus:
        for t1 in taus:
            r = evaluate_samples(set_leaks(model, t0, t1), data)
            rows.append((t0, t1, r.aee1, r.fwl, r.rsat))
            print(f"tau0={t0:.2f} tau1={t1:.2f} aee={r.aee1:.4f} fwl={r.fwl:.4f} rsat={r.rsat:.4f}")
    if args.out:
        with open(args.out, "w") as f:
            f.write("tau0,tau1,aee,fwl,rsat\n")
            for row in rows:
                f.write(",".join(repr(float(v)) for v in row) + "\n")


def cmd_visualize(args, cfg) -> None:
    _need(args, "flow", "out")
    write_ppm(args.out, render_flow(read_flo(args.flow)))
    print(f"wrote {args.out}")


HANDLERS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "convert": cmd_convert,
    "retrain": cmd_retrain,
    "stbp": cmd_stbp,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "energy": cmd_energy,
    "sweep": cmd_sweep,
    "visualize": cmd_visualize,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            return 1
        flags = {k.name: getattr(args, k.name) for k in KEYS}
        file_values = parse_config_file(args.config) if args.config else {}
        cfg = resolve_config(file_values, flags)
        HANDLERS[args.command](args, cfg)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (EventFormatError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
