"""Unsupervised concept discovery from channel-mode tubes.

The channel factor of a non-negative factorization of layer activations
holds one channel-space concept vector (C-CAV) per column. Concept presence
at a spatial position is the NNLS coefficient of that column when the
position's channel tube is explained by all columns together.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Literal, Mapping, NamedTuple, Sequence

import numpy as np
from scipy.optimize import nnls

from .factorization import (
    FactorizationOptions,
    NmfResult,
    NtdFactors,
    compression_ratio,
    concat_modes,
    nmf,
    ntd,
    reconstruct,
    relative_error,
)
from .model import Classifier

log = logging.getLogger(__name__)


@dataclass
class ChannelCav:
    e: np.ndarray
    concept_index: int
    source: str = ""

    def __post_init__(self) -> None:
        self.e = np.asarray(self.e, dtype=np.float64)
        if (self.e < 0).any():
            raise ValueError("C-CAV entries must be non-negative")
        if not self.e.any():
            raise ValueError("C-CAV is all-zero")


@dataclass
class ConceptHeatmap:
    map: np.ndarray  # (88, T) in input-roll coordinates
    raw_map: np.ndarray  # (H, W) presence coefficients
    average_presence: float
    excerpt_id: str = ""
    concept_index: int = 0


def extract_channel_tubes(batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rows of the returned matrix are channel tubes; ``index[row] = (n, h, w)``."""
    batch = np.asarray(batch)
    if batch.ndim != 4:
        raise ValueError(f"expected (N, H, W, C) activations, got shape {batch.shape}")
    if (batch < 0).any():
        raise ValueError("activations must be non-negative")
    n, h, w, c = batch.shape
    index = np.stack(np.unravel_index(np.arange(n * h * w), (n, h, w)), axis=1)
    return batch.reshape(n * h * w, c), index


def c_cavs(factors: NtdFactors | NmfResult, source: str = "") -> list[ChannelCav]:
    """One C-CAV per column of the channel factor, in column order."""
    e = factors.channel_factor
    out = []
    for j in range(e.shape[1]):
        if not e[:, j].any():
            warnings.warn(f"channel factor column {j} is zero; skipping it", stacklevel=2)
            continue
        out.append(ChannelCav(e[:, j].copy(), j, source))
    return out


def presence_coefficients(acts: np.ndarray, dictionary: np.ndarray) -> np.ndarray:
    """NNLS coefficients of every channel tube against the dictionary columns.

    ``acts`` has shape ``(..., C)``; the result has shape ``(..., C')``.
    """
    acts = np.asarray(acts, dtype=np.float64)
    dictionary = np.asarray(dictionary, dtype=np.float64)
    if acts.shape[-1] != dictionary.shape[0]:
        raise ValueError(f"tubes have {acts.shape[-1]} channels but the dictionary has {dictionary.shape[0]} rows")
    tubes = acts.reshape(-1, acts.shape[-1])
    coef = np.zeros((len(tubes), dictionary.shape[1]))
    for i in np.flatnonzero(tubes.any(axis=1)):
        coef[i] = nnls(dictionary, tubes[i])[0]
    return coef.reshape(*acts.shape[:-1], dictionary.shape[1])


def upsample_bilinear(raw: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Bilinear resize with pixel-center alignment and edge clamping."""
    raw = np.asarray(raw, dtype=np.float64)

    def weights(n_in: int, n_out: int):
        pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = weights(raw.shape[0], shape[0])
    c0, c1, fc = weights(raw.shape[1], shape[1])
    rows = raw[r0] * (1 - fr)[:, None] + raw[r1] * fr[:, None]
    return rows[:, c0] * (1 - fc) + rows[:, c1] * fc


def heatmap_from_raw(raw: np.ndarray, input_shape: tuple[int, int], excerpt_id: str = "", concept_index: int = 0) -> ConceptHeatmap:
    raw = np.asarray(raw, dtype=np.float64)
    return ConceptHeatmap(upsample_bilinear(raw, input_shape), raw, float(raw.mean()), excerpt_id, concept_index)


def presence_map(
    act: np.ndarray,
    dictionary: np.ndarray,
    concept_index: int,
    input_shape: tuple[int, int] = (88, 400),
    excerpt_id: str = "",
) -> ConceptHeatmap:
    """Presence heatmap of one concept over one excerpt's ``(H, W, C)`` activations."""
    act = np.asarray(act)
    if act.ndim != 3:
        raise ValueError(f"expected (H, W, C) activations, got shape {act.shape}")
    coef = presence_coefficients(act, dictionary)
    return heatmap_from_raw(coef[..., concept_index], input_shape, excerpt_id, concept_index)


class Ranking(NamedTuple):
    top: list[ConceptHeatmap]
    bottom: list[ConceptHeatmap]
    truncated: bool


def rank_excerpts(heatmaps: Sequence[ConceptHeatmap], k: int = 5) -> Ranking:
    """Top ``k`` by descending and bottom ``k`` by ascending average presence."""
    if not heatmaps:
        raise ValueError("rank_excerpts needs at least one heatmap")
    truncated = k > len(heatmaps)
    # stable sorts keep input order among ties
    order = sorted(range(len(heatmaps)), key=lambda i: heatmaps[i].average_presence)
    bottom = [heatmaps[i] for i in order[:k]]
    top = [heatmaps[i] for i in sorted(range(len(heatmaps)), key=lambda i: -heatmaps[i].average_presence)[:k]]
    return Ranking(top, bottom, truncated)


def channel_sensitivities_from_grads(grads: np.ndarray, e: np.ndarray) -> np.ndarray:
    """Sensitivity along ``e`` broadcast over every spatial position.

    ``grads`` is ``(H, W, C)`` or ``(N, H, W, C)``.
    """
    grads = np.asarray(grads, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    if grads.shape[-1] != e.size:
        raise ValueError(f"C-CAV has {e.size} entries but activations have {grads.shape[-1]} channels")
    return grads.sum(axis=(-3, -2)) @ e


def channel_sensitivity(model: Classifier, roll, ccav: ChannelCav | np.ndarray, layer: int | None, class_o: int) -> float:
    e = ccav.e if isinstance(ccav, ChannelCav) else np.asarray(ccav)
    act = model.activations_at(roll, layer)
    return float(channel_sensitivities_from_grads(model.grad_head(act, layer, class_o), e))


def opposing_concepts(table: np.ndarray) -> list[int]:
    """Concepts whose mean sensitivity is positive for one class and negative for the other."""
    table = np.asarray(table, dtype=np.float64)
    if table.ndim != 2 or table.shape[1] != 2:
        raise ValueError(
            f"opposing-concept selection needs exactly two classes, got table of shape {table.shape}; "
            "explain classes pairwise instead"
        )
    return [int(k) for k in np.flatnonzero(np.sign(table[:, 0]) * np.sign(table[:, 1]) < 0)]


def fidelity(model: Classifier, x: np.ndarray, x_hat: np.ndarray, layer: int | None = None) -> float:
    """Fraction of excerpts whose predicted class survives replacing ``x`` by ``x_hat``."""
    x, x_hat = np.asarray(x), np.asarray(x_hat)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    before = model.head_forward(x, layer).argmax(axis=1)
    after = model.head_forward(x_hat, layer).argmax(axis=1)
    return float(np.mean(before == after))


# -- end-to-end unsupervised explanation --------------------------------------

Variant = Literal["4d", "3d", "2d"]


def factorize(acts: np.ndarray, variant: Variant, ranks: Sequence[int], opts: FactorizationOptions | None = None):
    """Factorize ``(N, H, W, C)`` activations; returns (factors, reconstruction, used ranks).

    ``ranks`` is ``(N', H', W', C')``. The 3d variant uses ``(N', H'·W', C')``
    (capped at H·W) and the 2d variant uses ``C'`` alone.
    """
    acts = np.asarray(acts, dtype=np.float64)
    n, h, w, c = acts.shape
    rn, rh, rw, rc = (int(r) for r in ranks)
    flat, merge = concat_modes(acts, variant)
    if variant == "4d":
        used = (rn, rh, rw, rc)
        f = ntd(flat, used, opts)
    elif variant == "3d":
        used = (rn, min(rh * rw, h * w), rc)
        f = ntd(flat, used, opts)
    else:
        used = (rc,)
        f = nmf(flat, rc, opts)
    return f, merge.unflatten(reconstruct(f)), used


@dataclass
class ExplainResult:
    report: dict
    factors: NtdFactors | NmfResult
    ccavs: list[ChannelCav]
    presence: np.ndarray  # (N, H, W, C') coefficients
    heatmaps: dict[int, list[ConceptHeatmap]] = field(default_factory=dict)  # concept -> top-k maps
    contrast: dict[int, list[ConceptHeatmap]] = field(default_factory=dict)  # concept -> bottom-k maps
    peaks: dict[int, float] = field(default_factory=dict)  # concept -> max presence over the evaluation set


def explain(
    model: Classifier,
    pieces: Mapping[int, np.ndarray],
    variant: Variant = "4d",
    ranks: Sequence[int] = (10, 4, 8, 4),
    layer: int | None = None,
    opts: FactorizationOptions | None = None,
    k: int = 5,
    excerpt_ids: Mapping[int, Sequence[str]] | None = None,
) -> ExplainResult:
    """Discover C-CAVs on the pooled excerpts of ``pieces`` (class index -> rolls)."""
    layer = model._layer(layer)
    classes = sorted(pieces)
    rolls = np.concatenate([np.asarray(pieces[o]) for o in classes])
    labels = np.concatenate([[o] * len(pieces[o]) for o in classes])
    ids: list[str] = []
    for o in classes:
        given = list((excerpt_ids or {}).get(o, []))
        ids += given if len(given) == len(pieces[o]) else [f"{model.class_names[o]}/{i}" for i in range(len(pieces[o]))]

    acts = model.activations_at(rolls, layer).astype(np.float64)
    factors, x_hat, used = factorize(acts, variant, ranks, opts)
    fid = fidelity(model, acts, x_hat, layer)
    ratio = compression_ratio(factors, acts.shape)
    ccavs = c_cavs(factors, source=variant)
    dictionary = factors.channel_factor
    presence = presence_coefficients(acts, dictionary)
    input_shape = model.config.input_shape

    table = np.zeros((len(ccavs), len(classes)))
    for j, o in enumerate(classes):
        mask = labels == o
        grads = model.grad_head(acts[mask], layer, o)
        for i, cc in enumerate(ccavs):
            table[i, j] = channel_sensitivities_from_grads(grads, cc.e).mean()
    opposing = opposing_concepts(table) if len(classes) == 2 else []

    result = ExplainResult({}, factors, ccavs, presence)
    concepts = []
    for i, cc in enumerate(ccavs):
        raw = presence[..., cc.concept_index]
        maps = [ConceptHeatmap(np.empty(0), raw[n], float(raw[n].mean()), ids[n], cc.concept_index) for n in range(len(ids))]
        ranking = rank_excerpts(maps, k)
        for group in (ranking.top, ranking.bottom):
            for hm in group:
                hm.map = upsample_bilinear(hm.raw_map, input_shape)
        result.heatmaps[cc.concept_index] = ranking.top
        result.contrast[cc.concept_index] = ranking.bottom
        result.peaks[cc.concept_index] = float(raw.max())
        concepts.append(
            {
                "index": cc.concept_index,
                "mean_sensitivity_per_class": {model.class_names[o]: float(table[i, j]) for j, o in enumerate(classes)},
                "opposing": i in opposing,
                "top5": [{"excerpt": hm.excerpt_id, "average_presence": hm.average_presence} for hm in ranking.top],
                "bottom5": [{"excerpt": hm.excerpt_id, "average_presence": hm.average_presence} for hm in ranking.bottom],
            }
        )
    result.report = {
        "variant": variant,
        "layer": layer,
        "ranks": list(used),
        "fidelity": fid,
        "compression_ratio": ratio,
        "relative_error": relative_error(acts, x_hat),
        "loss_history": [float(v) for v in factors.loss_history],
        "opposing": [ccavs[i].concept_index for i in opposing],
        "concepts": concepts,
    }
    return result
