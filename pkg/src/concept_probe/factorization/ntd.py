"""Non-negative Tucker decomposition and non-negative matrix factorization.

Each outer iteration first updates the Tucker core with a monotone variant
of FISTA projected onto the non-negative orthant, then every factor matrix
with HALS (exact column-wise non-negative coordinate descent). Every step is a descent step,
so ``loss_history`` never increases.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor_ops import multi_mode_product, relative_error, tucker_to_tensor, unfold

log = logging.getLogger(__name__)

# magnitude used to revive a factor column that HALS drove to exactly zero
_RESEED_SCALE = 1e-12


@dataclass
class FactorizationOptions:
    max_outer_iters: int = 200
    tolerance: float = 1e-6
    rng_seed: int = 0
    hals_iters: int = 1
    fista_iters: int = 20

    def __post_init__(self) -> None:
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if min(self.max_outer_iters, self.hals_iters, self.fista_iters) < 1:
            raise ValueError("iteration counts must be at least 1")


@dataclass
class NtdFactors:
    core: np.ndarray
    factors: list[np.ndarray]
    loss_history: list[float] = field(default_factory=list)

    @property
    def ranks(self) -> tuple[int, ...]:
        return self.core.shape

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(f.shape[0] for f in self.factors)

    @property
    def channel_factor(self) -> np.ndarray:
        """The last factor matrix (``E`` for a 4-d decomposition)."""
        return self.factors[-1]

    # named views for the 4-d case
    A = property(lambda self: self.factors[0])
    B = property(lambda self: self.factors[1])
    D = property(lambda self: self.factors[2])
    E = property(lambda self: self.factors[-1])

    def num_parameters(self) -> int:
        return int(self.core.size + sum(f.size for f in self.factors))


@dataclass
class NmfResult:
    W: np.ndarray  # (rows, rank)
    H: np.ndarray  # (rank, cols)
    loss_history: list[float] = field(default_factory=list)

    @property
    def channel_factor(self) -> np.ndarray:
        return self.H.T

    def num_parameters(self) -> int:
        return int(self.W.size + self.H.size)


def reconstruct(f: NtdFactors | NmfResult) -> np.ndarray:
    if isinstance(f, NmfResult):
        return f.W @ f.H
    return tucker_to_tensor(f.core, f.factors)


def compression_ratio(f: NtdFactors | NmfResult, shape: Sequence[int]) -> float:
    """Entries of the original tensor per stored parameter."""
    return float(np.prod(shape)) / f.num_parameters()


def _check_input(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains non-finite entries")
    if (x < 0).any():
        raise ValueError("input has negative entries; non-negative factorization requires x >= 0")
    return x


def _hals_columns(u: np.ndarray, xw: np.ndarray, ww: np.ndarray, sweeps: int, rng: np.random.Generator) -> None:
    """In-place HALS sweeps minimizing ||X - U W||^2 over U >= 0.

    ``xw`` is X W^T and ``ww`` is W W^T.
    """
    for _ in range(sweeps):
        for j in range(u.shape[1]):
            if ww[j, j] <= 0:
                continue
            col = u[:, j] + (xw[:, j] - u @ ww[:, j]) / ww[j, j]
            np.maximum(col, 0.0, out=col)
            if not col.any():
                col = rng.uniform(0.0, _RESEED_SCALE * (u.max() + 1.0), size=col.shape)
            u[:, j] = col


def _core_objective(core: np.ndarray, grams: list[np.ndarray], proj: np.ndarray) -> float:
    return 0.5 * float(np.vdot(core, multi_mode_product(core, grams))) - float(np.vdot(core, proj))


def _fista_core(core: np.ndarray, factors: list[np.ndarray], x: np.ndarray, iters: int) -> np.ndarray:
    """Monotone FISTA on 0.5 ||X - core x_k U_k||^2 with core >= 0."""
    grams = [u.T @ u for u in factors]
    proj = multi_mode_product(x, factors, transpose=True)
    lipschitz = float(np.prod([np.linalg.norm(g, 2) for g in grams]))
    if lipschitz <= 0:
        return core
    cur = core
    f_cur = _core_objective(cur, grams, proj)
    y = cur
    t = 1.0
    for _ in range(iters):
        grad = multi_mode_product(y, grams) - proj
        z = np.maximum(y - grad / lipschitz, 0.0)
        f_z = _core_objective(z, grams, proj)
        prev = cur
        if f_z <= f_cur:
            cur, f_cur = z, f_z
        t_next = (1.0 + np.sqrt(1.0 + 4.0 * t * t)) / 2.0
        y = cur + (t / t_next) * (z - cur) + ((t - 1.0) / t_next) * (cur - prev)
        t = t_next
    return cur


def _validate_ranks(shape: Sequence[int], ranks: Sequence[int]) -> tuple[int, ...]:
    ranks = tuple(int(r) for r in ranks)
    if len(ranks) != len(shape):
        raise ValueError(f"need {len(shape)} ranks for a {len(shape)}-d tensor, got {len(ranks)}")
    for mode, (r, n) in enumerate(zip(ranks, shape)):
        if not 1 <= r <= n:
            raise ValueError(f"rank {r} for mode {mode} must be between 1 and the dimension {n}")
    return ranks


def ntd(x: np.ndarray, ranks: Sequence[int], opts: FactorizationOptions | None = None) -> NtdFactors:
    """Non-negative Tucker decomposition of a tensor of any order.

    ``loss_history[0]`` is the relative error of the (scaled) random
    initialization; each later entry follows one outer iteration.
    """
    opts = opts or FactorizationOptions()
    x = _check_input(x)
    ranks = _validate_ranks(x.shape, ranks)
    rng = np.random.default_rng(opts.rng_seed)
    # a full-rank mode loses nothing by starting at the identity: any square
    # non-negative factor can be absorbed into a still non-negative core
    factors = [np.eye(n) if r == n else rng.uniform(size=(n, r)) for n, r in zip(x.shape, ranks)]
    core = rng.uniform(size=ranks)
    x_norm = np.linalg.norm(x)
    recon_norm = np.linalg.norm(tucker_to_tensor(core, factors))
    if x_norm > 0 and recon_norm > 0:
        core *= x_norm / recon_norm

    history = [relative_error(x, tucker_to_tensor(core, factors))]
    for it in range(opts.max_outer_iters):
        core = _fista_core(core, factors, x, opts.fista_iters)
        for mode in range(x.ndim):
            grams = [u.T @ u for u in factors]
            core_k = unfold(core, mode)
            xw = unfold(multi_mode_product(x, factors, skip=mode, transpose=True), mode) @ core_k.T
            ww = unfold(multi_mode_product(core, grams, skip=mode), mode) @ core_k.T
            _hals_columns(factors[mode], xw, ww, opts.hals_iters, rng)
        history.append(relative_error(x, tucker_to_tensor(core, factors)))
        if history[-2] - history[-1] < opts.tolerance:
            break
    log.debug("ntd finished after %d iterations, error %.3g", it + 1, history[-1])
    return NtdFactors(core, factors, history)


def nmf(m: np.ndarray, rank: int, opts: FactorizationOptions | None = None) -> NmfResult:
    """HALS non-negative matrix factorization ``M ~ W H``."""
    opts = opts or FactorizationOptions()
    m = _check_input(m)
    if m.ndim != 2:
        raise ValueError("nmf expects a matrix")
    if not 1 <= rank <= min(m.shape):
        raise ValueError(f"rank {rank} must be between 1 and min{m.shape}")
    rng = np.random.default_rng(opts.rng_seed)
    w = rng.uniform(size=(m.shape[0], rank))
    h = rng.uniform(size=(rank, m.shape[1]))
    m_norm, wh_norm = np.linalg.norm(m), np.linalg.norm(w @ h)
    if m_norm > 0 and wh_norm > 0:
        scale = np.sqrt(m_norm / wh_norm)
        w *= scale
        h *= scale

    history = [relative_error(m, w @ h)]
    for _ in range(opts.max_outer_iters):
        _hals_columns(w, m @ h.T, h @ h.T, opts.hals_iters, rng)
        ht = h.T.copy()
        _hals_columns(ht, m.T @ w, w.T @ w, opts.hals_iters, rng)
        h = ht.T.copy()
        history.append(relative_error(m, w @ h))
        if history[-2] - history[-1] < opts.tolerance:
            break
    return NmfResult(w, h, history)
