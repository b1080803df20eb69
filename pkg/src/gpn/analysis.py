"""Post-hoc diagnostics: gradient statistics over time and gate-parameter heterogeneity."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .datasets import BinnedDataset
from .neurons import NeuronKind, NeuronLayer
from .training import LossMode, TrainConfig, compute_loss, evaluate_loss, train

PRECONVERGENCE_FRACTION = 0.9
DEFAULT_BINS = 50


class AnalysisError(ValueError):
    pass


@dataclass
class GradientRecord:
    mean: np.ndarray  # (T,)
    std: np.ndarray  # (T,)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.mean)


@dataclass
class GateTensorRecord:
    """Gate activations of one GPN layer, each ``(N, C, T)``."""
    forget: np.ndarray | None
    input: np.ndarray | None
    threshold: np.ndarray | None
    bypass: np.ndarray | None = None

    def items(self):
        for name, arr in (("forget", self.forget), ("input", self.input),
                          ("threshold", self.threshold), ("bypass", self.bypass)):
            if arr is not None:
                yield name, arr


@dataclass
class Histogram:
    edges: np.ndarray
    density: np.ndarray

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.edges)

    def mass(self) -> float:
        return float((self.density * self.widths).sum())


@dataclass
class DistributionFit:
    family: str  # "normal" or "lognormal"
    mu: float
    sigma: float
    loglik: float

    def pdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.family == "normal":
            return np.exp(-0.5 * ((x - self.mu) / self.sigma) ** 2) / (self.sigma * math.sqrt(2 * math.pi))
        out = np.zeros_like(x)
        pos = x > 0
        lx = np.log(x[pos])
        out[pos] = np.exp(-0.5 * ((lx - self.mu) / self.sigma) ** 2) / (
            x[pos] * self.sigma * math.sqrt(2 * math.pi))
        return out


@dataclass
class TemporalTrace:
    mean: np.ndarray  # (T,)
    quantiles: dict[float, np.ndarray] = field(default_factory=dict)  # per-neuron quantiles, each (T,)


# ---------------------------------------------------------------------------
# gradients vs time


def _single_spiking_layer(net) -> NeuronLayer:
    layers = net.spiking_layers
    if len(layers) != 1:
        raise AnalysisError(f"gradient analysis needs exactly one spiking layer, found {len(layers)}")
    return layers[0]


def grad_vs_time(net, inputs: np.ndarray, labels: np.ndarray, target: str = "spike_input",
                 meta: dict | None = None) -> GradientRecord:
    """Mean/std of d(last-step loss)/d(x_i) for each step ``i``.

    ``target="spike_input"`` differentiates w.r.t. the spiking layer's input
    (after the first FC); ``"raw"`` w.r.t. the network input counts.
    """
    layer = _single_spiking_layer(net)
    inputs = np.asarray(inputs, dtype=np.float64)
    if target == "raw":
        leaves = [Value(inputs[t], requires_grad=True) for t in range(inputs.shape[0])]
        res = net.forward_sequence(inputs, train=False, input_values=leaves)
        nodes = leaves
    elif target == "spike_input":
        res = net.forward_sequence(inputs, train=False, capture_inputs=True)
        nodes = res.spike_inputs
    else:
        raise ValueError(f"unknown gradient target {target!r}")
    loss = compute_loss(res.outputs, labels, LossMode.LAST_STEP)
    for n in nodes:
        n.grad = None
    ad.backward(loss)
    grads = [n.grad if n.grad is not None else np.zeros(n.shape) for n in nodes]
    mean = np.array([g.mean() for g in grads])
    std = np.array([g.std() for g in grads])
    info = {"neuron": layer.cfg.kind.value, "T": inputs.shape[0], "loss_mode": "last_step",
            "target": target}
    info.update(meta or {})
    return GradientRecord(mean, std, info)


def lif_chain_gradient(beta: float, spikes: np.ndarray) -> np.ndarray:
    """Closed-form dh_T/dh_i = prod_{k=i+1..T} beta (1 - s_{k-1}) for one LIF neuron.

    ``spikes`` holds s_1..s_T; returns the T values for i = 1..T.
    """
    spikes = np.asarray(spikes, dtype=np.float64)
    T = spikes.size
    out = np.ones(T)
    for j in range(T - 2, -1, -1):  # 0-based step j: factor beta (1 - s_j)
        out[j] = out[j + 1] * beta * (1.0 - spikes[j])
    return out


def train_to_preconvergence(net, train_data: BinnedDataset, val_data: BinnedDataset,
                            cfg: TrainConfig, fraction: float = PRECONVERGENCE_FRACTION):
    """Train until the epoch train loss first drops below ``fraction`` of the initial loss.

    The initial loss is that of the untrained network on the training set.
    Returns ``(epoch, initial_loss, final_loss)``; ``net`` is left at that epoch.
    """
    initial = evaluate_loss(net, train_data, cfg.loss_mode)
    hit = {}

    def stop(epoch, _net, row):
        if row.train_loss < fraction * initial:
            hit["epoch"] = epoch
            hit["loss"] = row.train_loss
            return True
        return False

    result = train(net, train_data, val_data, cfg, on_epoch=stop)
    if "epoch" not in hit:
        hit = {"epoch": result.epochs_run, "loss": result.metrics.rows[-1].train_loss}
    return hit["epoch"], initial, hit["loss"]


# ---------------------------------------------------------------------------
# gate parameters


def first_gpn_index(net) -> int:
    for k, layer in enumerate(net.layers):
        if isinstance(layer, NeuronLayer) and layer.cfg.kind is NeuronKind.GPN:
            return k
    raise AnalysisError("network has no GPN layer")


def extract_gate_params(net, inputs: np.ndarray) -> GateTensorRecord:
    """Gate values of the first GPN layer for every sample, neuron and step."""
    first_gpn_index(net)
    with ad.no_grad():
        res = net.forward_sequence(np.asarray(inputs, dtype=np.float64), train=False,
                                   capture_gates=True)
    recs = res.gate_records

    def stacked(key):
        if key not in recs[0]:
            return None
        return np.stack([r[key] for r in recs]).transpose(2, 1, 0)  # (T, C, N) -> (N, C, T)

    return GateTensorRecord(stacked("F"), stacked("I"), stacked("T"), stacked("B"))


def to_time_constants(values) -> np.ndarray:
    """tau = 1 / (1 - beta) for leak factors strictly inside (0, 1)."""
    b = np.asarray(values, dtype=np.float64)
    if np.any(b <= 0) or np.any(b >= 1):
        raise ValueError("leak factors must lie strictly inside (0, 1)")
    return 1.0 / (1.0 - b)


def spatial_values(record: np.ndarray) -> np.ndarray:
    """Average an ``(N, C, T)`` record over samples and steps -> ``(C,)``."""
    return np.asarray(record, dtype=np.float64).mean(axis=(0, 2))


def density_histogram(values, bins: int = DEFAULT_BINS) -> Histogram:
    if bins < 2:
        raise ValueError("bins must be >= 2")
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    lo, hi = values.min(), values.max()
    if lo == hi:
        return Histogram(np.array([lo - 0.5, lo + 0.5]), np.array([1.0]))
    density, edges = np.histogram(values, bins=bins, range=(lo, hi), density=True)
    return Histogram(edges, density)


def spatial_histogram(record: np.ndarray, bins: int = DEFAULT_BINS) -> Histogram:
    return density_histogram(spatial_values(record), bins)


def temporal_trace(record: np.ndarray, quantiles=(0.05, 0.25, 0.5, 0.75, 0.95)) -> TemporalTrace:
    """Mean over samples and neurons per step, plus quantiles of per-neuron traces."""
    record = np.asarray(record, dtype=np.float64)
    per_neuron = record.mean(axis=0)  # (C, T)
    return TemporalTrace(per_neuron.mean(axis=0),
                         {q: np.quantile(per_neuron, q, axis=0) for q in quantiles})


def fit_distribution(samples, family: str) -> DistributionFit:
    """Maximum-likelihood normal or lognormal fit."""
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    if np.unique(x).size < 2:
        raise ValueError("need at least two distinct samples (zero variance)")
    if family == "normal":
        z = x
    elif family == "lognormal":
        if np.any(x <= 0):
            raise ValueError("lognormal fit requires strictly positive samples")
        z = np.log(x)
    else:
        raise ValueError(f"unknown family {family!r}")
    mu = z.mean()
    sigma = z.std()
    n = z.size
    loglik = -0.5 * n * math.log(2 * math.pi * sigma ** 2) - ((z - mu) ** 2).sum() / (2 * sigma ** 2)
    if family == "lognormal":
        loglik -= z.sum()
    return DistributionFit(family, float(mu), float(sigma), float(loglik))


@dataclass
class ParamReport:
    """Everything the heterogeneity analysis emits for one checkpoint."""
    spatial: dict[str, np.ndarray]  # per-neuron tau1, tau2, threshold
    histograms: dict[str, Histogram]
    fits: dict[str, DistributionFit]
    traces: dict[str, TemporalTrace]


def param_report(gates: GateTensorRecord, bins: int = DEFAULT_BINS) -> ParamReport:
    """tau1/tau2 from forget/input gates and thresholds: histograms, fits, traces.

    Gates are averaged per neuron (or per step) first, then converted to time
    constants.
    """
    spatial, traces = {}, {}
    if gates.forget is not None:
        spatial["tau1"] = to_time_constants(spatial_values(gates.forget))
        tr = temporal_trace(gates.forget)
        traces["tau1"] = TemporalTrace(to_time_constants(tr.mean),
                                       {q: to_time_constants(v) for q, v in tr.quantiles.items()})
    if gates.input is not None:
        spatial["tau2"] = to_time_constants(spatial_values(gates.input))
        tr = temporal_trace(gates.input)
        traces["tau2"] = TemporalTrace(to_time_constants(tr.mean),
                                       {q: to_time_constants(v) for q, v in tr.quantiles.items()})
    if gates.threshold is not None:
        spatial["threshold"] = spatial_values(gates.threshold)
        traces["threshold"] = temporal_trace(gates.threshold)
    if not spatial:
        raise AnalysisError("no forget, input or threshold gate to analyse")
    hists = {k: density_histogram(v, bins) for k, v in spatial.items()}
    fits = {}
    for k, v in spatial.items():
        family = "normal" if k == "threshold" else "lognormal"
        try:
            fits[k] = fit_distribution(v, family)
        except ValueError:
            pass
    return ParamReport(spatial, hists, fits, traces)


# ---------------------------------------------------------------------------
# export


def analysis_filename(experiment: str, neuron: str, steps: int) -> str:
    return f"{experiment}_{neuron}_{steps}.csv"


def _writer(fh):
    return csv.writer(fh, lineterminator="\n")


def export_analysis(obj, path) -> Path:
    """Write a record, histogram, fit or trace as CSV."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = _writer(fh)
        if isinstance(obj, GradientRecord):
            w.writerow(["i", "mean", "std"])
            for i, (m, s) in enumerate(zip(obj.mean, obj.std), start=1):
                w.writerow([i, repr(float(m)), repr(float(s))])
        elif isinstance(obj, Histogram):
            w.writerow(["bin_left", "bin_right", "density"])
            for lo, hi, d in zip(obj.edges[:-1], obj.edges[1:], obj.density):
                w.writerow([repr(float(lo)), repr(float(hi)), repr(float(d))])
        elif isinstance(obj, DistributionFit):
            w.writerow(["family", "p1", "p2", "loglik"])
            w.writerow([obj.family, repr(obj.mu), repr(obj.sigma), repr(obj.loglik)])
        elif isinstance(obj, TemporalTrace):
            qs = sorted(obj.quantiles)
            w.writerow(["t", "mean"] + [f"q{q:g}" for q in qs])
            for t in range(len(obj.mean)):
                w.writerow([t + 1, repr(float(obj.mean[t]))]
                           + [repr(float(obj.quantiles[q][t])) for q in qs])
        else:
            raise TypeError(f"cannot export {type(obj).__name__}")
    return path


def read_csv_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
