"""Prediction helpers shared by the command line and the benchmark harness."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .events import EventStream, group_events, to_ann_input, to_snn_input
from .metrics import MetricReport, aee, aee_windows, event_mask, fwl, rsat, summarize
from .network import ModelState, STFlowNetParams, forward_ann
from .spiking import SpikingModel, forward_snn
from .training import Sample, ann_batch, snn_batch

Model = STFlowNetParams | SpikingModel


def predict_stream(model: Model, stream: EventStream, state: ModelState | None = None) -> tuple[np.ndarray, ModelState]:
    """Flow (2, H, W) for one window of events."""
    groups = group_events(stream, model.config.N)
    if isinstance(model, SpikingModel):
        flow, diag = forward_snn(model, to_snn_input(groups), state)
        return flow.data[0], diag.state
    flow, new_state = forward_ann(model, to_ann_input(groups), state)
    return flow.data[0], new_state


def flow_fn(model: Model) -> Callable[[EventStream], np.ndarray]:
    return lambda stream: predict_stream(model, stream)[0]


def predict_batch(model: Model, samples: Sequence[Sample], chunk: int = 32) -> np.ndarray:
    """Flows (B, 2, H, W) for independent windows, zero recurrent state."""
    out = []
    for i in range(0, len(samples), chunk):
        part = samples[i : i + chunk]
        if isinstance(model, SpikingModel):
            out.append(forward_snn(model, snn_batch(part))[0].data)
        else:
            out.append(forward_ann(model, ann_batch(part))[0].data)
    return np.concatenate(out)


def evaluate_samples(
    model: Model | None, samples: Sequence[Sample], flows: np.ndarray | None = None, dt4: bool = False, name: str = "synthetic"
) -> MetricReport:
    """Metrics per window averaged over ``samples``; ``flows`` overrides model predictions."""
    if flows is None:
        flows = predict_batch(model, samples)
    reports = []
    for i, (s, f) in enumerate(zip(samples, flows)):
        r = MetricReport(f"{name}{i}", aee(f, s.gt, event_mask(s.stream)), None, fwl(s.stream, f, s.window), rsat(s.stream, f, s.window))
        if dt4 and model is not None:
            r.aee4 = aee_windows(flow_fn(model), s.stream, s.gt, "dt4")
        reports.append(r)
    return summarize(reports, name)


def mean_aee(flows: np.ndarray, samples: Sequence[Sample]) -> float:
    return float(np.mean([aee(f, s.gt, event_mask(s.stream)) for f, s in zip(flows, samples)]))


def zero_flow_aee(samples: Sequence[Sample]) -> float:
    return mean_aee(np.zeros((len(samples), 2, samples[0].gt.flow.shape[1], samples[0].gt.flow.shape[2])), samples)
