"""Event streams, frame-group representations and a synthetic scene generator."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .tensor import Tensor

BINARY_MAGIC = b"EVT1"
_RECORD = np.dtype([("t", "<f8"), ("x", "<u2"), ("y", "<u2"), ("p", "u1"), ("pad", "u1")])
FLO_MAGIC = 202021.25  # b"PIEH" read as a little-endian float32


class EventFormatError(ValueError):
    """A file does not parse under its declared event/flow format."""


class Event(NamedTuple):
    x: int
    y: int
    t: float
    p: int


@dataclass
class EventStream:
    """Time-ordered events on a ``width`` x ``height`` sensor.

    Stored column-wise; polarity is +1/-1.
    """

    width: int
    height: int
    x: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    y: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    t: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.float64))
    p: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.t = np.asarray(self.t, dtype=np.float64)
        self.p = np.asarray(self.p, dtype=np.int64)
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise ValueError("event columns must have equal length")
        if n:
            if self.x.min() < 0 or self.x.max() >= self.width or self.y.min() < 0 or self.y.max() >= self.height:
                raise ValueError(f"event coordinates outside the {self.width}x{self.height} sensor")
            if not np.all(np.isin(self.p, (-1, 1))):
                raise ValueError("polarity must be +1 or -1")
            if np.any(np.diff(self.t) < 0):
                order = np.argsort(self.t, kind="stable")
                self.x, self.y, self.t, self.p = self.x[order], self.y[order], self.t[order], self.p[order]

    @property
    def count(self) -> int:
        return len(self.t)

    K = count

    def __len__(self) -> int:
        return self.count

    @property
    def events(self) -> list[Event]:
        return [Event(int(a), int(b), float(c), int(d)) for a, b, c, d in zip(self.x, self.y, self.t, self.p)]

    def slice(self, start: int, stop: int) -> "EventStream":
        return EventStream(self.width, self.height, self.x[start:stop], self.y[start:stop], self.t[start:stop], self.p[start:stop])

    def window(self) -> tuple[float, float]:
        if not self.count:
            return (0.0, 0.0)
        return float(self.t[0]), float(self.t[-1])

    def count_image(self) -> np.ndarray:
        img = np.zeros((self.height, self.width), dtype=np.int64)
        np.add.at(img, (self.y, self.x), 1)
        return img

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.p, other.p)
        )


@dataclass
class EventFrameGroups:
    """``frames[n, 0]`` is f+ and ``frames[n, 1]`` is f- for group n."""

    frames: np.ndarray
    window: tuple[float, float]
    sizes: tuple[int, ...]

    @property
    def N(self) -> int:
        return self.frames.shape[0]


@dataclass
class GroundTruthFlow:
    flow: np.ndarray  # (2, H, W), pixels per window
    valid_mask: np.ndarray  # (H, W) bool

    def __post_init__(self):
        if self.flow.shape[1:] != self.valid_mask.shape:
            raise ValueError(f"flow {self.flow.shape} and mask {self.valid_mask.shape} extents differ")


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def write_events(stream: EventStream, path, format: str = "binary") -> None:
    path = Path(path)
    if format == "binary":
        rec = np.zeros(stream.count, dtype=_RECORD)
        rec["t"], rec["x"], rec["y"] = stream.t, stream.x, stream.y
        rec["p"] = (stream.p > 0).astype(np.uint8)
        with open(path, "wb") as fh:
            fh.write(BINARY_MAGIC)
            fh.write(struct.pack("<IIQ", stream.width, stream.height, stream.count))
            fh.write(rec.tobytes())
    elif format == "text":
        with open(path, "w") as fh:
            fh.write(f"# width={stream.width} height={stream.height}\n")
            for t, x, y, p in zip(stream.t, stream.x, stream.y, stream.p):
                fh.write(f"{float(t)!r} {int(x)} {int(y)} {1 if p > 0 else 0}\n")
    else:
        raise ValueError(f"unknown event format {format!r}")


def load_events(path, format: str = "binary", width: int | None = None, height: int | None = None) -> EventStream:
    """Read an event file.

    Text files carry their sensor size in a ``# width=W height=H`` comment;
    ``width``/``height`` override it, and without either the extents are
    inferred from the largest coordinates.
    """
    path = Path(path)
    if format == "binary":
        return _load_binary(path)
    if format != "text":
        raise ValueError(f"unknown event format {format!r}")
    ts, xs, ys, ps = [], [], [], []
    hdr_w = hdr_h = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                for tok in line[1:].split():
                    key, _, val = tok.partition("=")
                    if key == "width" and val.isdigit():
                        hdr_w = int(val)
                    elif key == "height" and val.isdigit():
                        hdr_h = int(val)
                continue
            parts = line.split(" ")
            if len(parts) != 4:
                raise EventFormatError(f"{path}:{lineno}: expected 't x y p', got {line!r}")
            try:
                t, x, y, p = float(parts[0]), int(parts[1]), int(parts[2]), int(parts[3])
            except ValueError as exc:
                raise EventFormatError(f"{path}:{lineno}: {exc}") from None
            if p not in (0, 1):
                raise EventFormatError(f"{path}:{lineno}: polarity must be 0 or 1, got {p}")
            if x < 0 or y < 0:
                raise EventFormatError(f"{path}:{lineno}: negative coordinate")
            ts.append(t)
            xs.append(x)
            ys.append(y)
            ps.append(1 if p else -1)
    w = width if width is not None else hdr_w
    h = height if height is not None else hdr_h
    if w is None:
        w = max(xs) + 1 if xs else 0
    if h is None:
        h = max(ys) + 1 if ys else 0
    if xs and (max(xs) >= w or max(ys) >= h):
        bad = next(i for i in range(len(xs)) if xs[i] >= w or ys[i] >= h)
        raise EventFormatError(f"{path}: event {bad} at ({xs[bad]}, {ys[bad]}) outside {w}x{h} sensor")
    return EventStream(w, h, xs, ys, ts, ps)


def _load_binary(path: Path) -> EventStream:
    raw = path.read_bytes()
    if raw[:4] != BINARY_MAGIC:
        raise EventFormatError(f"{path}: bad magic {raw[:4]!r}, expected {BINARY_MAGIC!r}")
    if len(raw) < 20:
        raise EventFormatError(f"{path}: truncated header")
    w, h, n = struct.unpack_from("<IIQ", raw, 4)
    body = raw[20:]
    if len(body) != n * _RECORD.itemsize:
        raise EventFormatError(
            f"{path}: header declares {n} records ({n * _RECORD.itemsize} bytes) "
            f"but {len(body)} bytes follow offset 20"
        )
    rec = np.frombuffer(body, dtype=_RECORD)
    if n and (np.any(rec["p"] > 1) or np.any(rec["pad"] != 0)):
        i = int(np.argmax((rec["p"] > 1) | (rec["pad"] != 0)))
        raise EventFormatError(f"{path}: malformed record {i} at offset {20 + i * _RECORD.itemsize}")
    if n and (rec["x"].max() >= w or rec["y"].max() >= h):
        i = int(np.argmax((rec["x"] >= w) | (rec["y"] >= h)))
        raise EventFormatError(f"{path}: record {i} at offset {20 + i * _RECORD.itemsize} outside {w}x{h} sensor")
    return EventStream(w, h, rec["x"].astype(np.int64), rec["y"].astype(np.int64), rec["t"].copy(), np.where(rec["p"] == 1, 1, -1))


def write_flo(path, flow: np.ndarray) -> None:
    """Middlebury ``.flo``: magic, width, height, row-major interleaved (u, v) float32."""
    flow = np.asarray(flow)
    _, h, w = flow.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<fii", FLO_MAGIC, w, h))
        fh.write(np.ascontiguousarray(flow.transpose(1, 2, 0), dtype="<f4").tobytes())


def read_flo(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise EventFormatError(f"{path}: truncated .flo header")
    magic, w, h = struct.unpack_from("<fii", raw, 0)
    if magic != FLO_MAGIC:
        raise EventFormatError(f"{path}: bad .flo magic {raw[:4]!r}")
    if w < 0 or h < 0 or len(raw) != 12 + 8 * w * h:
        raise EventFormatError(f"{path}: .flo size does not match {w}x{h}")
    data = np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w, 2)
    return data.transpose(2, 0, 1).astype(np.float64)


def write_pgm(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    h, w = mask.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.where(mask, 255, 0).astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise EventFormatError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise EventFormatError(f"{path}: 16-bit PGM not supported")
    body = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos)
    return body.reshape(h, w) != 0


def save_ground_truth(gt: GroundTruthFlow, flo_path) -> Path:
    """Write ``.flo`` plus a sidecar ``.pgm`` mask; returns the mask path."""
    flo_path = Path(flo_path)
    write_flo(flo_path, gt.flow)
    mask_path = flo_path.with_suffix(".pgm")
    write_pgm(mask_path, gt.valid_mask)
    return mask_path


def load_ground_truth(flo_path) -> GroundTruthFlow:
    flo_path = Path(flo_path)
    flow = read_flo(flo_path)
    mask_path = flo_path.with_suffix(".pgm")
    mask = read_pgm(mask_path) if mask_path.exists() else np.ones(flow.shape[1:], dtype=bool)
    return GroundTruthFlow(flow, mask)


# ---------------------------------------------------------------------------
# representations
# ---------------------------------------------------------------------------


def group_bounds(K: int, N: int) -> np.ndarray:
    """Cumulative floor boundaries: group n spans indices [b[n], b[n+1])."""
    return (np.arange(N + 1, dtype=np.int64) * K) // N


def group_events(stream: EventStream, N: int) -> EventFrameGroups:
    K = stream.count
    if N < 1:
        raise ValueError(f"group count must be positive, got {N}")
    if N > K:
        raise ValueError(f"cannot split {K} events into {N} non-empty groups")
    bounds = group_bounds(K, N)
    frames = np.zeros((N, 2, stream.height, stream.width), dtype=np.int64)
    group_of = np.repeat(np.arange(N), np.diff(bounds))
    chan = (stream.p < 0).astype(np.int64)
    np.add.at(frames, (group_of, chan, stream.y, stream.x), 1)
    return EventFrameGroups(frames, stream.window(), tuple(int(s) for s in np.diff(bounds)))


def to_ann_input(groups: EventFrameGroups) -> Tensor:
    n, _, h, w = groups.frames.shape
    return Tensor(groups.frames.reshape(1, 2 * n, h, w).astype(np.float64))


def to_snn_input(groups: EventFrameGroups) -> list[Tensor]:
    return [Tensor(f[None].astype(np.float64)) for f in groups.frames]


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------


def synth_translating_pattern(
    width: int,
    height: int,
    density: float,
    velocity: tuple[float, float],
    duration: float = 1.0,
    seed: int = 0,
    events_per_dot: int = 8,
    t_start: float = 0.0,
) -> tuple[EventStream, GroundTruthFlow]:
    """Random dots translating at ``velocity`` pixels per window.

    Each dot carries a polarity and emits ``events_per_dot`` events at evenly
    spaced (randomly phased) timestamps, each at the pixel the dot occupies
    at that instant.  Dots start where their whole path stays in frame.
    """
    if density <= 0:
        raise ValueError("density must be positive")
    vx, vy = float(velocity[0]), float(velocity[1])
    limit = min(width, height) / 4
    if abs(vx) > limit or abs(vy) > limit:
        raise ValueError(f"|velocity| components must be <= {limit} for a {width}x{height} sensor")
    rng = np.random.default_rng(seed)
    n_dots = max(1, int(round(density * width * height / events_per_dot)))
    # keep p(t) inside [0, W) x [0, H) for t in [0, 1]
    x_lo, x_hi = max(0.0, -vx), min(width, width - vx)
    y_lo, y_hi = max(0.0, -vy), min(height, height - vy)
    x0 = rng.uniform(x_lo, np.nextafter(x_hi, x_lo), size=n_dots)
    y0 = rng.uniform(y_lo, np.nextafter(y_hi, y_lo), size=n_dots)
    pol = rng.choice(np.array([1, -1]), size=n_dots)
    phase = rng.uniform(0.0, 1.0, size=n_dots)
    frac = (np.arange(events_per_dot)[None, :] + phase[:, None]) / events_per_dot
    xs = np.floor(x0[:, None] + vx * frac).astype(np.int64).clip(0, width - 1)
    ys = np.floor(y0[:, None] + vy * frac).astype(np.int64).clip(0, height - 1)
    ts = t_start + frac * duration
    ps = np.repeat(pol[:, None], events_per_dot, axis=1)
    order = np.argsort(ts.reshape(-1), kind="stable")
    stream = EventStream(
        width,
        height,
        xs.reshape(-1)[order],
        ys.reshape(-1)[order],
        ts.reshape(-1)[order],
        ps.reshape(-1)[order],
    )
    flow = np.empty((2, height, width))
    flow[0], flow[1] = vx, vy
    return stream, GroundTruthFlow(flow, np.ones((height, width), dtype=bool))
