"""Flow quality metrics: AEE (dt=1 / dt=4), FWL and RSAT, plus event warping."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .events import EventStream, GroundTruthFlow, group_bounds
from .tensor import Tensor, _splat_corners
from .training import contrast_loss

log = logging.getLogger(__name__)


@dataclass
class WarpedEventImage:
    counts: np.ndarray  # (2, H, W): positive, negative
    avg_timestamps: np.ndarray  # (2, H, W), weight 1 - |t_ref - t|/dt averaged per pixel
    t_ref: float
    clipped: float  # mass that left the frame

    @property
    def total(self) -> np.ndarray:
        return self.counts.sum(axis=0)


def _splat_np(px: np.ndarray, py: np.ndarray, values: np.ndarray, h: int, w: int) -> np.ndarray:
    corners, _, _ = _splat_corners(px, py, h, w)
    img = np.zeros(h * w)
    for idx, ok, wgt in corners:
        img += np.bincount(idx, weights=np.where(ok, wgt * values, 0.0), minlength=h * w)
    return img.reshape(h, w)


def warp_events(events: EventStream, flow: np.ndarray, t_ref: float, dt: float) -> WarpedEventImage:
    """Move every event by (t_ref - t)/dt times the flow at its pixel and splat bilinearly."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    flow = np.asarray(flow, dtype=np.float64)
    h, w = events.height, events.width
    if flow.shape != (2, h, w):
        raise ValueError(f"flow {flow.shape} does not match sensor (2, {h}, {w})")
    c = (t_ref - events.t) / dt
    px = events.x + c * flow[0, events.y, events.x]
    py = events.y + c * flow[1, events.y, events.x]
    weight = 1.0 - np.abs(c)
    counts = np.zeros((2, h, w))
    ts = np.zeros((2, h, w))
    for i, pol in enumerate((1, -1)):
        sel = events.p == pol
        counts[i] = _splat_np(px[sel], py[sel], np.ones(sel.sum()), h, w)
        s = _splat_np(px[sel], py[sel], weight[sel], h, w)
        ts[i] = np.divide(s, counts[i], out=np.zeros_like(s), where=counts[i] > 0)
    return WarpedEventImage(counts, ts, t_ref, float(events.count - counts.sum()))


def event_mask(events: EventStream) -> np.ndarray:
    return events.count_image() > 0


def aee(pred: np.ndarray, gt: GroundTruthFlow, mask: np.ndarray | None = None) -> float | None:
    """Mean endpoint error over valid GT pixels that also lie in ``mask``.

    Returns None (and logs) when no pixel qualifies.
    """
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape != gt.flow.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.flow.shape} differ")
    sel = gt.valid_mask if mask is None else gt.valid_mask & mask
    if not sel.any():
        log.warning("AEE evaluation set is empty")
        return None
    err = np.sqrt(((pred - gt.flow) ** 2).sum(axis=0))
    return float(err[sel].mean())


def aee_windows(
    pred_fn: Callable[[EventStream], np.ndarray], events: EventStream, gt: GroundTruthFlow, mode: str = "dt1"
) -> float | None:
    """AEE with one prediction per window (dt1) or four summed quarter predictions (dt4).

    Quarters split the events by index with the same floor partition used for
    event groups.  ``gt`` holds the displacement over the whole window.
    """
    if mode == "dt1":
        pred = np.asarray(pred_fn(events), dtype=np.float64)
    elif mode == "dt4":
        b = group_bounds(events.count, 4)
        pred = sum(np.asarray(pred_fn(events.slice(b[i], b[i + 1])), dtype=np.float64) for i in range(4))
    else:
        raise ValueError(f"mode must be 'dt1' or 'dt4', got {mode!r}")
    return aee(pred, gt, event_mask(events))


def fwl(events: EventStream, flow: np.ndarray, window: tuple[float, float]) -> float | None:
    """Variance of the flow-warped IWE at t_end over that of the unwarped IWE."""
    if events.count == 0:
        log.warning("FWL undefined without events")
        return None
    t0, t1 = window
    zero = warp_events(events, np.zeros((2, events.height, events.width)), t1, t1 - t0).total
    warped = warp_events(events, flow, t1, t1 - t0).total
    base = zero.var()
    if base == 0:
        return None
    return float(warped.var() / base)


def rsat(events: EventStream, flow: np.ndarray, window: tuple[float, float], timestamps: str = "reference") -> float | None:
    """Contrast loss of ``flow`` relative to the zero flow."""
    if events.count == 0:
        log.warning("RSAT undefined without events")
        return None
    h, w = events.height, events.width
    base = contrast_loss(Tensor(np.zeros((2, h, w))), events, window, timestamps=timestamps).item()
    if base == 0:
        return None
    return contrast_loss(Tensor(np.asarray(flow, dtype=np.float64)), events, window, timestamps=timestamps).item() / base


@dataclass
class MetricReport:
    scenario: str = "all"
    aee1: float | None = None
    aee4: float | None = None
    fwl: float | None = None
    rsat: float | None = None
    breakdown: list["MetricReport"] = field(default_factory=list)

    def rows(self) -> list[tuple[str, str, float]]:
        out = []
        for r in [self, *self.breakdown]:
            for name in ("aee1", "aee4", "fwl", "rsat"):
                v = getattr(r, name)
                if v is not None:
                    out.append((r.scenario, name, v))
        return out

    def to_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("scenario,metric,value\n")
            for s, m, v in self.rows():
                f.write(f"{s},{m},{v!r}\n")

    def table(self) -> str:
        lines = [f"{'scenario':<16}{'AEE1':>10}{'AEE4':>10}{'FWL':>10}{'RSAT':>10}"]
        fmt = lambda v: f"{v:>10.4f}" if v is not None else f"{'-':>10}"
        for r in [self, *self.breakdown]:
            lines.append(f"{r.scenario:<16}{fmt(r.aee1)}{fmt(r.aee4)}{fmt(r.fwl)}{fmt(r.rsat)}")
        return "\n".join(lines)


def _mean(vals):
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def summarize(reports: list[MetricReport], scenario: str = "all") -> MetricReport:
    return MetricReport(
        scenario,
        _mean(r.aee1 for r in reports),
        _mean(r.aee4 for r in reports),
        _mean(r.fwl for r in reports),
        _mean(r.rsat for r in reports),
        list(reports),
    )
