"""Concept activation vectors and TCAV significance testing.

A CAV is the normal of a linear SVM separating concept activations from
random activations at one layer. The conceptual sensitivity of an excerpt is
the directional derivative of a class logit along that normal, and the TCAV
score of a class is the fraction of its excerpts with positive sensitivity.
Significance comes from comparing concept scores against scores of
random-vs-random CAVs with a two-sided Welch test, Bonferroni-corrected over
classes.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .model import Classifier
from .stats import welch_t_test

log = logging.getLogger(__name__)


class CavError(ValueError):
    pass


@dataclass
class CavOptions:
    epochs: int = 200
    lr: float = 0.001
    l2: float = 0.01
    seed: int = 0


@dataclass
class Cav:
    v: np.ndarray
    layer: int
    concept_id: str = ""
    classifier_accuracy: float = float("nan")
    bias: float = 0.0

    def __post_init__(self) -> None:
        self.v = np.asarray(self.v, dtype=np.float64).ravel()
        if not np.all(np.isfinite(self.v)):
            raise CavError("CAV has non-finite entries")
        if not self.v.any():
            raise CavError("CAV is all-zero")


def _flat(acts) -> np.ndarray:
    arr = np.asarray(acts, dtype=np.float64)
    return arr.reshape(len(arr), -1)


def train_linear_svm(x: np.ndarray, y: np.ndarray, opts: CavOptions) -> tuple[np.ndarray, float]:
    """SGD on ``l2/2 ||w||^2 + mean(hinge(y (w.x + b)))``.

    Returns the average of the iterates visited during the second half of
    training, which removes most of the constant-step oscillation.
    """
    n, d = x.shape
    rng = np.random.default_rng(opts.seed)
    w = np.zeros(d)
    b = 0.0
    w_sum = np.zeros(d)
    b_sum = 0.0
    averaged = 0
    start_avg = opts.epochs // 2
    for epoch in range(opts.epochs):
        for i in rng.permutation(n):
            margin = y[i] * (x[i] @ w + b)
            w *= 1.0 - opts.lr * opts.l2
            if margin < 1.0:
                w += opts.lr * y[i] * x[i]
                b += opts.lr * y[i]
            if epoch >= start_avg:
                w_sum += w
                b_sum += b
                averaged += 1
    if averaged:
        return w_sum / averaged, b_sum / averaged
    return w, b


def svm_objective(w: np.ndarray, b: float, x: np.ndarray, y: np.ndarray, l2: float) -> float:
    return 0.5 * l2 * float(w @ w) + float(np.mean(np.maximum(0.0, 1.0 - y * (x @ w + b))))


def fit_cav(
    concept_acts,
    random_acts,
    opts: CavOptions | None = None,
    layer: int = -1,
    concept_id: str = "",
) -> Cav:
    """Fit a CAV oriented so the concept side projects higher on average."""
    opts = opts or CavOptions()
    xc, xr = _flat(concept_acts), _flat(random_acts)
    if len(xc) == 0 or len(xr) == 0:
        raise CavError("concept and random activation sets must be non-empty")
    if xc.shape[1] != xr.shape[1]:
        raise CavError(f"dimension mismatch: concept {xc.shape[1]} vs random {xr.shape[1]}")
    if {r.tobytes() for r in xc} == {r.tobytes() for r in xr}:
        raise CavError("inseparable identical sets")
    x = np.concatenate([xc, xr])
    y = np.concatenate([np.ones(len(xc)), -np.ones(len(xr))])
    w, b = train_linear_svm(x, y, opts)
    accuracy = float(np.mean(np.where(x @ w + b >= 0, 1.0, -1.0) == y))
    if not w.any():
        raise CavError("linear classifier collapsed to a zero weight vector")
    if (xc @ w).mean() < (xr @ w).mean():
        w, b = -w, -b
    norm = np.linalg.norm(w)
    return Cav(w / norm, layer, concept_id, accuracy, b / norm)


def directional_sensitivities(grads: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Dot each flattened gradient with ``v``."""
    g = np.asarray(grads).reshape(len(grads), -1)
    v = np.asarray(v).ravel()
    if g.shape[1] != v.size:
        raise CavError(f"CAV has {v.size} entries but layer activations have {g.shape[1]}")
    return g.astype(np.float64) @ v.astype(np.float64)


def conceptual_sensitivity(model: Classifier, roll, cav: Cav, class_o: int) -> float:
    act = model.activations_at(roll, cav.layer)
    grad = model.grad_head(act, cav.layer, class_o)
    return float(directional_sensitivities(grad[None], cav.v)[0])


def sensitivities(model: Classifier, rolls, cav: Cav, class_o: int) -> np.ndarray:
    acts = model.activations_at(np.asarray(rolls), cav.layer)
    return directional_sensitivities(model.grad_head(acts, cav.layer, class_o), cav.v)


def tcav_score(sens: Sequence[float]) -> float:
    """Fraction of strictly positive sensitivities."""
    s = np.asarray(sens, dtype=np.float64)
    if s.size == 0:
        raise ValueError("tcav_score needs at least one sensitivity")
    return float(np.count_nonzero(s > 0) / s.size)


def sign_of(mean_score: float, significant: bool) -> str:
    if not significant or mean_score == 0.5:
        return "none"
    return "+" if mean_score > 0.5 else "-"


@dataclass
class ClassResult:
    class_index: int
    class_name: str
    scores: list[float]
    control_scores: list[float]
    mean: float
    t: float
    p: float
    significant: bool
    sign: str
    sensitivities: list[list[float]] = field(default_factory=list, repr=False)


@dataclass
class TcavReport:
    concept: str
    layer: int
    alpha: float
    threshold: float
    cav_accuracies: list[float]
    per_class: list[ClassResult]
    controls: str = "pairs"

    def to_dict(self, include_sensitivities: bool = False) -> dict:
        rows = []
        for r in self.per_class:
            row = asdict(r)
            row["class"] = row.pop("class_name")
            if not include_sensitivities:
                row.pop("sensitivities")
            rows.append(row)
        return {
            "concept": self.concept,
            "layer": self.layer,
            "alpha": self.alpha,
            "threshold": self.threshold,
            "cav_accuracies": self.cav_accuracies,
            "controls": self.controls,
            "per_class": rows,
        }

    def result_for(self, class_index: int) -> ClassResult:
        return next(r for r in self.per_class if r.class_index == class_index)


def tcav_experiment(
    model: Classifier,
    concept_rolls,
    random_sets: Sequence,
    eval_pieces: Mapping[int, object],
    layer: int | None = None,
    alpha: float = 0.05,
    concept: str = "concept",
    opts: CavOptions | None = None,
    controls: str = "pairs",
) -> TcavReport:
    """Run one concept against ``len(random_sets)`` random datasets.

    Run ``i`` fits a CAV for the concept against random set ``i``. Control
    CAVs separate one random set from another: every unordered pair
    ``(j, k)`` with ``controls="pairs"``, or ``(i, i + 1)`` cyclically with
    ``controls="cyclic"`` (also used for exactly two random sets). Per class, the concept scores and control scores
    are compared with a two-sided Welch test and called significant when
    p < alpha / num_classes. ``eval_pieces`` maps class index to that
    class's evaluation rolls.
    """
    if len(random_sets) < 2:
        raise ValueError("need at least two random datasets to build a control distribution")
    if controls not in ("pairs", "cyclic"):
        raise ValueError(f"controls must be 'pairs' or 'cyclic', got {controls!r}")
    opts = opts or CavOptions()
    layer = model._layer(layer)
    num_classes = model.config.num_classes
    threshold = alpha / num_classes

    concept_acts = model.activations_at(np.asarray(concept_rolls), layer)
    random_acts = [model.activations_at(np.asarray(rs), layer) for rs in random_sets]
    grads = {}
    for o, pieces in eval_pieces.items():
        acts = model.activations_at(np.asarray(pieces), layer)
        grads[o] = model.grad_head(acts, layer, o).reshape(len(acts), -1)

    runs = len(random_sets)
    cavs = []
    for i in range(runs):
        run_opts = CavOptions(opts.epochs, opts.lr, opts.l2, opts.seed + i)
        cavs.append(fit_cav(concept_acts, random_acts[i], run_opts, layer, concept))
        log.info("cav run", extra={"event": "cav_run", "run": i, "accuracy": cavs[-1].classifier_accuracy})
    if controls == "pairs" and runs > 2:
        pairs = list(itertools.combinations(range(runs), 2))
    else:
        # two random sets give a single unordered pair; both orders keep two controls
        pairs = [(i, (i + 1) % runs) for i in range(runs)]
    control_cavs = []
    for j, k in pairs:
        run_opts = CavOptions(opts.epochs, opts.lr, opts.l2, opts.seed + j)
        control_cavs.append(fit_cav(random_acts[j], random_acts[k], run_opts, layer, f"random{j}-random{k}"))

    per_class = []
    for o in sorted(grads):
        sens = [directional_sensitivities(grads[o], c.v) for c in cavs]
        scores = [tcav_score(s) for s in sens]
        control = [tcav_score(directional_sensitivities(grads[o], c.v)) for c in control_cavs]
        t, p = welch_t_test(scores, control)
        mean = float(np.mean(scores))
        significant = bool(p < threshold)
        per_class.append(
            ClassResult(
                class_index=o,
                class_name=model.class_names[o],
                scores=scores,
                control_scores=control,
                mean=mean,
                t=float(t),
                p=float(p),
                significant=significant,
                sign=sign_of(mean, significant),
                sensitivities=[s.tolist() for s in sens],
            )
        )
    return TcavReport(concept, layer, alpha, threshold, [c.classifier_accuracy for c in cavs], per_class, controls)
