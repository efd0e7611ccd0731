"""Classification metrics and parameter / FLOP accounting."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import autodiff as ad
from .errors import ValidationError
from .layers import Conv, Dense, MaxPool, Model, ModelSpec, PoolingHead, ResidualBlock, trace_shapes


@dataclass
class ConfusionMatrix:
    matrix: np.ndarray
    class_names: tuple = ()

    @property
    def total(self) -> int:
        return int(self.matrix.sum())

    def accuracy(self) -> float:
        return float(np.trace(self.matrix) / self.total) if self.total else 0.0

    def to_csv(self) -> str:
        k = self.matrix.shape[0]
        names = list(self.class_names) or [str(i) for i in range(k)]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true\\pred", *names])
        for name, row in zip(names, self.matrix):
            w.writerow([name, *row.tolist()])
        return buf.getvalue()


def confusion_matrix(predictions, labels, k: int, class_names=()) -> ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""
    pred = np.asarray(predictions, dtype=np.int64).reshape(-1)
    true = np.asarray(labels, dtype=np.int64).reshape(-1)
    if pred.shape != true.shape:
        raise ValidationError(f"{pred.size} predictions for {true.size} labels")
    for arr in (pred, true):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise ValidationError(f"class index outside [0, {k})")
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    return ConfusionMatrix(cm, tuple(class_names))


def _f1_fractions(cm: ConfusionMatrix) -> list[Fraction]:
    # exact rationals from integer counts: 2PR/(P+R) == 2TP/(2TP+FP+FN), 0 on a 0 denominator
    m = cm.matrix
    out = []
    for c in range(m.shape[0]):
        tp = int(m[c, c])
        denom = int(m[:, c].sum()) + int(m[c, :].sum())
        out.append(Fraction(2 * tp, denom) if denom else Fraction(0))
    return out


def per_class_f1(cm: ConfusionMatrix) -> np.ndarray:
    return np.array([float(f) for f in _f1_fractions(cm)])


def macro_f1(cm: ConfusionMatrix) -> float:
    scores = _f1_fractions(cm)
    return float(sum(scores) / len(scores))


def weighted_f1(cm: ConfusionMatrix) -> float:
    support = cm.matrix.sum(axis=1)
    if support.sum() == 0:
        return 0.0
    total = sum(f * int(n) for f, n in zip(_f1_fractions(cm), support))
    return float(total / int(support.sum()))


def nearest_rank_percentile(values, q: float) -> float:
    s = np.sort(np.asarray(values))
    if s.size == 0:
        raise ValidationError("percentile of an empty array")
    rank = max(1, math.ceil(q / 100.0 * s.size))
    return float(s[rank - 1])


@dataclass
class LengthAccuracy:
    edges: np.ndarray
    accuracy: np.ndarray  # NaN for empty bins
    counts: np.ndarray

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_low", "bin_high", "count", "accuracy"])
        lows = list(self.edges[:-1]) + [self.edges[-1]]
        highs = list(self.edges[1:]) + ["inf"]
        for lo, hi, n, acc in zip(lows, highs, self.counts, self.accuracy):
            w.writerow([_fmt(lo), _fmt(hi), int(n), "" if np.isnan(acc) else repr(float(acc))])
        return buf.getvalue()


def _fmt(x):
    return x if isinstance(x, str) else repr(float(x))


def accuracy_vs_length(predictions, labels, true_lengths, n_bins: int = 10) -> LengthAccuracy:
    """Accuracy binned by true length.

    ``n_bins`` edges equidistant on [0, p90] (nearest-rank) give n_bins - 1
    regular bins, the last closed on the right; lengths above p90 fall in a
    final overflow bin.
    """
    pred = np.asarray(predictions)
    true = np.asarray(labels)
    lengths = np.asarray(true_lengths, dtype=np.float64)
    if not (pred.shape == true.shape == lengths.shape):
        raise ValidationError("predictions, labels and lengths must have equal length")
    if lengths.size == 0:
        edges = np.zeros(n_bins)
        return LengthAccuracy(edges, np.full(n_bins, np.nan), np.zeros(n_bins, dtype=np.int64))
    p90 = nearest_rank_percentile(lengths, 90)
    edges = np.linspace(0.0, p90, n_bins)
    n_regular = n_bins - 1
    bins = np.searchsorted(edges, lengths, side="right") - 1
    bins = np.clip(bins, 0, n_regular - 1)
    bins[lengths == p90] = n_regular - 1
    bins[lengths > p90] = n_regular
    counts = np.bincount(bins, minlength=n_bins)
    correct = np.bincount(bins, weights=(pred == true).astype(np.float64), minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        acc = np.where(counts > 0, correct / np.maximum(counts, 1), np.nan)
    return LengthAccuracy(edges, acc, counts)


# complexity -----------------------------------------------------------------

@dataclass
class LayerCost:
    name: str
    kind: str
    params: int
    macs: int


@dataclass
class ComplexityReport:
    layers: list = field(default_factory=list)
    input_length: int | None = None
    flops_per_mac: int = 1

    @property
    def total_params(self) -> int:
        return sum(layer.params for layer in self.layers)

    @property
    def total_macs(self) -> int:
        return sum(layer.macs for layer in self.layers)

    @property
    def total_flops(self) -> int:
        return self.total_macs * self.flops_per_mac

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "kind", "params", "macs", "flops_2x"])
        for layer in self.layers:
            w.writerow([layer.name, layer.kind, layer.params, layer.macs, 2 * layer.macs])
        w.writerow(["total", "", self.total_params, self.total_macs, 2 * self.total_macs])
        return buf.getvalue()

    def summary(self, **extra) -> str:
        record = {"input_length": self.input_length, "params": self.total_params,
                  "macs": self.total_macs, "flops": self.total_flops,
                  "flops_per_mac": self.flops_per_mac, **extra}
        return json.dumps(record, sort_keys=True)


def _spec_of(model) -> ModelSpec:
    return model.spec if isinstance(model, Model) else model


def count_params(model) -> ComplexityReport:
    spec = _spec_of(model)
    layers = []
    for name, layer, before, after in trace_shapes(spec, spec.fixed_length or _probe_length(spec)):
        layers.append(LayerCost(name, _kind(layer), _layer_params(layer, before), 0))
    return ComplexityReport(layers)


def _probe_length(spec: ModelSpec) -> int:
    from .layers import min_input_length
    return max(min_input_length(spec), 64)


def _kind(layer) -> str:
    if isinstance(layer, PoolingHead):
        return layer.kind
    return type(layer).__name__.lower()


def _layer_params(layer, before) -> int:
    if isinstance(layer, Conv):
        return layer.c_out * layer.c_in * layer.k + layer.c_out
    if isinstance(layer, ResidualBlock):
        return layer.depth * (layer.channels * layer.channels * layer.k + layer.channels)
    if isinstance(layer, Dense):
        return layer.n_out * layer.n_in + layer.n_out
    if isinstance(layer, PoolingHead) and layer.kind == "gem":
        return before[0]
    return 0


def count_flops(model, input_length: int, flops_per_mac: int = 1) -> ComplexityReport:
    """Per-layer multiply-accumulates for one sample of ``input_length`` steps.

    conv: T_out*C_out*C_in*k; dense: out*in; relu, residual add, max-pool and
    global pooling heads: one unit per element touched; flatten: 0.
    """
    spec = _spec_of(model)
    layers = []
    for name, layer, before, after in trace_shapes(spec, input_length):
        params = _layer_params(layer, before)
        if isinstance(layer, Conv):
            t_out = after[1]
            macs = t_out * layer.c_out * layer.c_in * layer.k
            if layer.relu:
                macs += after[0] * after[1]
        elif isinstance(layer, ResidualBlock):
            c, t = before
            macs = layer.depth * (t * c * c * layer.k) + layer.depth * c * t + c * t
        elif isinstance(layer, MaxPool):
            macs = before[0] * before[1]
        elif isinstance(layer, PoolingHead):
            macs = 0 if layer.kind == "flatten" else before[0] * before[1]
        elif isinstance(layer, Dense):
            macs = layer.n_out * layer.n_in + (layer.n_out if layer.relu else 0)
        else:
            macs = 0
        layers.append(LayerCost(name, _kind(layer), params, macs))
    return ComplexityReport(layers, input_length, flops_per_mac)


def predict(model: Model, batches) -> tuple[np.ndarray, np.ndarray]:
    """(predictions, labels) over already-collated batches, inference mode."""
    from .layers import forward
    preds, labels = [], []
    for batch in batches:
        logits = forward(model, ad.Tensor(batch.data))
        preds.append(np.argmax(logits.data, axis=1))
        labels.append(batch.labels)
    if not preds:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(preds), np.concatenate(labels)
