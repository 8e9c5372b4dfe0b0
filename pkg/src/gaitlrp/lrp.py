"""Layer-wise relevance propagation over a cached forward trace.

Relevance starts at a single pre-softmax logit and is redistributed layer by
layer. Dense and Conv1D layers use the epsilon or alpha-beta rule, ReLU and
Flatten pass relevance through, max-pooling hands it to the window winner.
Whatever an affine layer cannot pass down (bias share, epsilon stabilizer,
zero denominators) is recorded as absorbed so the books always balance.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .data import CHANNELS, AgeGroup
from .errors import MissingClass, ShapeError
from .nn import Flatten, MaxPool1D, Network, ReLU, Trace, _Affine

RULES = ("epsilon", "alphabeta")


@dataclass(frozen=True)
class LrpConfig:
    rule: str = "epsilon"
    epsilon: float = 1e-6
    alpha: float = 1.0
    beta: float = 0.0
    explain: str = "true"  # "true": ground-truth class, "predicted": argmax class

    def __post_init__(self):
        if self.rule not in RULES:
            raise ValueError(f"rule must be one of {RULES}, got {self.rule!r}")
        if not (self.epsilon >= 0 and math.isfinite(self.epsilon)):
            raise ValueError("epsilon must be finite and >= 0")
        if self.beta < 0 or abs(self.alpha - self.beta - 1.0) > 1e-12:
            raise ValueError("alpha-beta rule needs beta >= 0 and alpha - beta = 1")
        if self.explain not in ("true", "predicted"):
            raise ValueError("explain must be 'true' or 'predicted'")


@dataclass
class RelevanceMap:
    """Relevance for one (input, target class) pair.

    ``layer_relevance[i]`` is shaped like the input of layer ``i``; the last
    entry is the output-layer seed. ``absorbed_*[i]`` are the amounts layer
    ``i`` did not pass down.
    """

    layer_relevance: list[np.ndarray]
    target_class: int
    explained_logit: float
    absorbed_bias: np.ndarray
    absorbed_stabilizer: np.ndarray
    absorbed_dropped: np.ndarray

    @property
    def input_relevance(self) -> np.ndarray:
        return self.layer_relevance[0]

    @property
    def output_relevance(self) -> np.ndarray:
        return self.layer_relevance[-1]

    @property
    def absorbed(self) -> np.ndarray:
        return self.absorbed_bias + self.absorbed_stabilizer + self.absorbed_dropped


def _epsilon_rule(layer: _Affine, x, z, R, eps):
    w, b = layer.params["weight"], layer.params["bias"]
    sign = np.where(z >= 0, 1.0, -1.0)
    denom = z + eps * sign
    zero = denom == 0
    s = np.divide(R, denom, out=np.zeros_like(R), where=~zero)
    R_in = x * layer.apply_transpose(s, w, x.shape[-1])
    bshape = (1, -1) + (1,) * (R.ndim - 2)
    axes = tuple(range(1, R.ndim))
    bias = (b.reshape(bshape) * s).sum(axis=axes)
    stab = (eps * sign * s).sum(axis=axes)
    dropped = np.where(zero, R, 0.0).sum(axis=axes)
    return R_in, bias, stab, dropped


def _alphabeta_rule(layer: _Affine, x, R, alpha, beta):
    w, b = layer.params["weight"], layer.params["bias"]
    wp, wn = np.maximum(w, 0), np.minimum(w, 0)
    xp, xn = np.maximum(x, 0), np.minimum(x, 0)
    bshape = (1, -1) + (1,) * (R.ndim - 2)
    bp = np.maximum(b, 0).reshape(bshape)
    bn = np.minimum(b, 0).reshape(bshape)
    zp = layer.apply(xp, wp) + layer.apply(xn, wn) + bp
    zn = layer.apply(xp, wn) + layer.apply(xn, wp) + bn
    sp = np.divide(R, zp, out=np.zeros_like(R), where=zp > 0)
    sn = np.divide(R, zn, out=np.zeros_like(R), where=zn < 0)
    L = x.shape[-1]
    pos = xp * layer.apply_transpose(sp, wp, L) + xn * layer.apply_transpose(sp, wn, L)
    neg = xp * layer.apply_transpose(sn, wn, L) + xn * layer.apply_transpose(sn, wp, L)
    R_in = alpha * pos - beta * neg
    axes = tuple(range(1, R.ndim))
    bias = (alpha * sp * bp - beta * sn * bn).sum(axis=axes)
    dropped = (alpha * np.where(zp > 0, 0.0, R) - beta * np.where(zn < 0, 0.0, R)).sum(axis=axes)
    return R_in, bias, np.zeros_like(bias), dropped


def propagate(net: Network, trace: Trace, output_relevance, config: LrpConfig):
    """Batched propagation of ``output_relevance`` (N, C) down to the input.

    Returns ``(layer_relevances, bias, stabilizer, dropped)`` where the
    absorption arrays are shaped ``(N, n_layers)``.
    """
    if len(trace.inputs) != len(net.layers):
        raise ShapeError(f"trace has {len(trace.inputs)} layer inputs, network has "
                         f"{len(net.layers)} layers")
    outputs = trace.inputs[1:] + [trace.output]
    R = np.asarray(output_relevance, dtype=np.float64)
    if R.shape != trace.output.shape:
        raise ShapeError(f"output relevance shape {R.shape} != logits shape {trace.output.shape}")
    n = R.shape[0]
    n_layers = len(net.layers)
    absorbed = [np.zeros((n, n_layers)) for _ in range(3)]
    rels = [None] * n_layers + [R]
    for i in range(n_layers - 1, -1, -1):
        layer, x = net.layers[i], trace.inputs[i]
        expected = (x.shape[0],) + layer.output_shape(x.shape[1:])
        if outputs[i].shape != expected:
            raise ShapeError(f"layer {i} ({layer.kind}): trace output {outputs[i].shape} "
                             f"!= expected {expected}")
        if isinstance(layer, _Affine):
            if config.rule == "epsilon":
                R, *parts = _epsilon_rule(layer, x, outputs[i], R, config.epsilon)
            else:
                R, *parts = _alphabeta_rule(layer, x, R, config.alpha, config.beta)
            for store, part in zip(absorbed, parts):
                store[:, i] = part
        elif isinstance(layer, ReLU):
            pass
        elif isinstance(layer, MaxPool1D):
            R = layer.route(x, R)
        elif isinstance(layer, Flatten):
            R = R.reshape(x.shape)
        else:
            raise TypeError(f"no LRP rule for layer type {layer.kind!r}")
        rels[i] = R
    return rels, *absorbed


def _seed(trace: Trace, targets: np.ndarray, n_classes: int) -> np.ndarray:
    if np.any((targets < 0) | (targets >= n_classes)):
        raise ValueError(f"target class must lie in [0, {n_classes})")
    rows = np.arange(trace.output.shape[0])
    seed = np.zeros_like(trace.output)
    seed[rows, targets] = trace.output[rows, targets]
    return seed


def lrp_explain_batch(net: Network, trace: Trace, target_classes, config: LrpConfig = LrpConfig(),
                      output_relevance=None) -> list[RelevanceMap]:
    """One :class:`RelevanceMap` per sample of a (possibly batched) trace."""
    n = trace.output.shape[0]
    targets = np.broadcast_to(np.asarray(target_classes, dtype=np.int64), (n,)).copy()
    if output_relevance is None:
        seed = _seed(trace, targets, net.n_classes)
    else:
        seed = np.asarray(output_relevance, dtype=np.float64).reshape(trace.output.shape)
    rels, bias, stab, dropped = propagate(net, trace, seed, config)
    rows = np.arange(n)
    logits = trace.output[rows, targets]
    return [RelevanceMap([r[k] for r in rels], int(targets[k]), float(logits[k]),
                         bias[k], stab[k], dropped[k]) for k in range(n)]


def lrp_explain(net: Network, trace: Trace, target_class: int, config: LrpConfig = LrpConfig(),
                output_relevance=None) -> RelevanceMap:
    """Explain the ``target_class`` logit of a single-sample trace.

    The seed is the target logit itself on a one-hot vector unless
    ``output_relevance`` overrides it.
    """
    if trace.output.shape[0] != 1:
        raise ShapeError("lrp_explain takes a single-sample trace; use lrp_explain_batch")
    return lrp_explain_batch(net, trace, [target_class], config, output_relevance)[0]


@dataclass(frozen=True)
class ConservationReport:
    layer_sums: list[float]  # input of each layer, then the output seed
    absorbed_per_layer: list[float]
    total_absorbed: float
    explained_logit: float
    seed_total: float

    @property
    def input_sum(self) -> float:
        return self.layer_sums[0]

    @property
    def conservation_error(self) -> float:
        """``|sum input relevance - seed| / |seed|``."""
        return abs(self.input_sum - self.seed_total) / abs(self.seed_total)

    @property
    def accounting_error(self) -> float:
        """``|sum input + absorbed - seed| / |seed|``."""
        return abs(self.input_sum + self.total_absorbed - self.seed_total) / abs(self.seed_total)

    def lines(self) -> list[str]:
        out = [f"explained_logit={self.explained_logit!r}",
               f"input_relevance_sum={self.input_sum!r}",
               f"total_absorbed={self.total_absorbed!r}",
               f"conservation_error={self.conservation_error!r}",
               f"accounting_error={self.accounting_error!r}"]
        out += [f"layer{i}_sum={s!r}" for i, s in enumerate(self.layer_sums)]
        return out


def conservation_report(rmap: RelevanceMap) -> ConservationReport:
    sums = [float(r.sum()) for r in rmap.layer_relevance]
    absorbed = rmap.absorbed
    return ConservationReport(sums, [float(a) for a in absorbed], float(absorbed.sum()),
                              rmap.explained_logit, sums[-1])


# --------------------------------------------------------------------------
# aggregation


@dataclass(frozen=True)
class ClassRelevanceProfile:
    group: AgeGroup
    channels: tuple[tuple[str, str], ...]
    mean_relevance: np.ndarray  # (channels, T)
    mean_signal: np.ndarray
    sd_signal: np.ndarray
    n_trials: int


class ClassProfiles(dict):
    """``AgeGroup -> ClassRelevanceProfile``; ``missing`` lists omitted classes."""

    missing: tuple[AgeGroup, ...] = ()


def aggregate_class_relevance(entries: Iterable, channels=CHANNELS,
                              n_classes: int = len(AgeGroup)) -> ClassProfiles:
    """Average input relevance and normalized signals per ground-truth class.

    ``entries`` yields ``(RelevanceMap, class, input)`` triples. Inputs in the
    flat layout are folded back to ``(len(channels), T)``. Signal SD uses the
    population divisor.
    """
    channels = tuple(tuple(c) for c in channels)
    rel: dict[int, list] = {}
    sig: dict[int, list] = {}
    shape = None
    for rmap, cls, x in entries:
        cls = int(cls)
        x = np.asarray(x, dtype=np.float64)
        r = np.asarray(rmap.input_relevance, dtype=np.float64)
        if shape is None:
            shape = x.shape
        elif x.shape != shape:
            raise ShapeError(f"input shape {x.shape} differs from earlier {shape}")
        if r.shape != x.shape:
            raise ShapeError(f"relevance shape {r.shape} != input shape {x.shape}")
        rel.setdefault(cls, []).append(r.reshape(len(channels), -1))
        sig.setdefault(cls, []).append(x.reshape(len(channels), -1))
    out = ClassProfiles()
    for cls in range(n_classes):
        if cls not in rel:
            continue
        r = np.stack(rel[cls])
        s = np.stack(sig[cls])
        out[AgeGroup(cls)] = ClassRelevanceProfile(AgeGroup(cls), channels, r.mean(axis=0),
                                                   s.mean(axis=0), s.std(axis=0), len(rel[cls]))
    missing = tuple(AgeGroup(c) for c in range(n_classes) if c not in rel)
    if missing:
        warnings.warn(f"no trials for classes {[g.name for g in missing]}; omitted")
    out.missing = missing
    return out


def total_relevance(profiles, n_classes: int = len(AgeGroup)) -> np.ndarray:
    """Pointwise sum over classes of the absolute mean relevance curves."""
    for cls in range(n_classes):
        if AgeGroup(cls) not in profiles:
            raise MissingClass(f"class {AgeGroup(cls).name} has no relevance profile")
    return sum(np.abs(profiles[AgeGroup(c)].mean_relevance) for c in range(n_classes))


# --------------------------------------------------------------------------
# CSV export

RELEVANCE_HEADER = ["class", "side", "component", "t", "mean_signal", "sd_signal", "mean_relevance"]


def write_relevance_csv(path, profiles, total=None, channels=None) -> None:
    """Rows per (class, channel, t); the ``TOTAL`` block leaves signal columns empty."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RELEVANCE_HEADER)
        for group in sorted(profiles):
            p = profiles[group]
            for ci, (side, comp) in enumerate(p.channels):
                for t in range(p.mean_relevance.shape[1]):
                    w.writerow([group.name, side, comp, t, repr(float(p.mean_signal[ci, t])),
                                repr(float(p.sd_signal[ci, t])),
                                repr(float(p.mean_relevance[ci, t]))])
        if total is not None:
            if channels is None:
                channels = next(iter(profiles.values())).channels
            for ci, (side, comp) in enumerate(channels):
                for t in range(total.shape[1]):
                    w.writerow(["TOTAL", side, comp, t, "", "", repr(float(total[ci, t]))])


def read_relevance_csv(path):
    """Inverse of :func:`write_relevance_csv`: ``(profiles, total or None)``.

    Trial counts are not stored in the file and come back as 0.
    """
    blocks: dict[str, dict] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != RELEVANCE_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            b = blocks.setdefault(row["class"], {})
            key = (row["side"], row["component"])
            b.setdefault(key, []).append(row)
    profiles = ClassProfiles()
    total = None
    for name, b in blocks.items():
        channels = tuple(b)

        def col(field):
            return np.array([[float(r[field]) for r in sorted(b[ch], key=lambda r: int(r["t"]))]
                             for ch in channels])

        if name == "TOTAL":
            total = col("mean_relevance")
            continue
        group = AgeGroup[name]
        profiles[group] = ClassRelevanceProfile(group, channels, col("mean_relevance"),
                                                col("mean_signal"), col("sd_signal"), 0)
    return profiles, total
