"""STFW checkpoint files.

Layout (little-endian)::

    b"STFW" | u32 version=1 | u32 base_channels, N, num_decoders, levels, height, width
    u32 tensor count
    per tensor: u32 name length | UTF-8 name | u32 ndim | u32 dims... | f32 data

ANN checkpoints carry every ``*.weight``, ``*.bias`` and ``*.lambda`` plus the
scalars ``meta.flow_scale`` and ``meta.qcfs_shift``.  Spiking checkpoints drop
``*.lambda`` and add ``<layer>.theta``, ``tau.generator``, ``tau.convgru2``,
``meta.T`` and ``meta.reset`` (0 soft, 1 hard).
"""

from __future__ import annotations

import struct
from collections import OrderedDict

import numpy as np

from .events import EventFormatError
from .network import NetConfig, STFlowNetParams, layer_specs, qcfs_sites
from .spiking import RESET_MODES, SpikingModel
from .tensor import Tensor

MAGIC = b"STFW"
VERSION = 1


class CheckpointError(EventFormatError):
    pass


def _config_tensors(cfg: NetConfig) -> dict[str, np.ndarray]:
    return {"meta.flow_scale": np.array(cfg.flow_scale), "meta.qcfs_shift": np.array(float(cfg.qcfs_shift))}


def write_checkpoint(path, cfg: NetConfig, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<7I", VERSION, cfg.base_channels, cfg.N, cfg.num_decoders, cfg.levels, cfg.height, cfg.width))
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            raw = name.encode("utf-8")
            arr = np.asarray(arr)
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
            f.write(arr.astype("<f4").tobytes())


def read_checkpoint(path) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    """Return (header fields, tensors as float64 arrays in file order)."""
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an STFW checkpoint (magic {buf[:4]!r})")
    pos = 4

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    version, base, n, nd, levels, h, w = take("<7I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported STFW version {version}")
    header = dict(base_channels=base, N=n, num_decoders=nd, levels=levels, height=h, width=w)
    (count,) = take("<I")
    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (ln,) = take("<I")
        if pos + ln > len(buf):
            raise CheckpointError(f"{path}: truncated tensor name at byte {pos}")
        name = buf[pos : pos + ln].decode("utf-8")
        pos += ln
        (ndim,) = take("<I")
        dims = take(f"<{ndim}I")
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        if pos + nbytes > len(buf):
            raise CheckpointError(f"{path}: truncated data of {name!r} at byte {pos}")
        tensors[name] = np.frombuffer(buf, "<f4", int(np.prod(dims, dtype=np.int64)), pos).reshape(dims).astype(np.float64)
        pos += nbytes
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return header, tensors


def _config_from(header: dict, tensors: dict, path) -> NetConfig:
    try:
        fs = float(tensors.pop("meta.flow_scale"))
        shift = bool(tensors.pop("meta.qcfs_shift"))
    except KeyError as e:
        raise CheckpointError(f"{path}: missing scalar {e.args[0]}") from None
    return NetConfig(header["height"], header["width"], header["N"], header["base_channels"], header["num_decoders"], header["levels"], fs, shift)


def _check_weights(cfg: NetConfig, tensors: dict, path, spiking: bool) -> None:
    for s in layer_specs(cfg):
        for suffix, shape in (("weight", (s.cout, s.cin, s.kernel, s.kernel)), ("bias", (s.cout,))):
            key = f"{s.name}.{suffix}"
            if key not in tensors:
                raise CheckpointError(f"{path}: missing tensor {key}")
            if tensors[key].shape != shape:
                raise CheckpointError(f"{path}: {key} has shape {tensors[key].shape}, expected {shape}")
    for site in qcfs_sites(cfg):
        key = f"{site}.theta" if spiking else f"{site}.lambda"
        if key not in tensors:
            raise CheckpointError(f"{path}: missing tensor {key}")


def is_spiking_checkpoint(path) -> bool:
    return "meta.T" in read_checkpoint(path)[1]


def save_params(params: STFlowNetParams, path) -> None:
    tensors = OrderedDict((k, v.data) for k, v in params.tensors.items())
    tensors.update(_config_tensors(params.config))
    write_checkpoint(path, params.config, tensors)


def load_params(path) -> STFlowNetParams:
    header, tensors = read_checkpoint(path)
    if "meta.T" in tensors:
        raise CheckpointError(f"{path}: holds a spiking model, expected ANN parameters")
    cfg = _config_from(header, tensors, path)
    _check_weights(cfg, tensors, path, spiking=False)
    return STFlowNetParams(cfg, OrderedDict((k, Tensor(v, requires_grad=True, name=k)) for k, v in tensors.items()))


def save_spiking(model: SpikingModel, path) -> None:
    tensors = OrderedDict((k, v.data) for k, v in model.weights.items())
    for site, th in model.theta.items():
        tensors[f"{site}.theta"] = np.array(th)
    tensors["tau.generator"] = np.array(model.tau_generator)
    tensors["tau.convgru2"] = np.array(model.tau_convgru2)
    tensors["meta.T"] = np.array(float(model.T))
    tensors["meta.reset"] = np.array(float(RESET_MODES.index(model.reset)))
    tensors.update(_config_tensors(model.config))
    write_checkpoint(path, model.config, tensors)


def load_spiking(path) -> SpikingModel:
    header, tensors = read_checkpoint(path)
    if "meta.T" not in tensors:
        raise CheckpointError(f"{path}: holds ANN parameters, expected a spiking model")
    cfg = _config_from(header, tensors, path)
    _check_weights(cfg, tensors, path, spiking=True)
    T = int(tensors.pop("meta.T"))
    reset = RESET_MODES[int(tensors.pop("meta.reset"))]
    tau0 = float(tensors.pop("tau.generator"))
    tau1 = float(tensors.pop("tau.convgru2"))
    theta = {s: float(tensors.pop(f"{s}.theta")) for s in qcfs_sites(cfg)}
    weights = OrderedDict((k, Tensor(v, requires_grad=True, name=k)) for k, v in tensors.items())
    return SpikingModel(cfg, weights, theta, T, tau0, tau1, reset)
