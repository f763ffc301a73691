"""Unfolding, mode products and Tucker reconstruction."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np


def unfold(x: np.ndarray, mode: int) -> np.ndarray:
    """Mode-``mode`` matricization, shape ``(I_mode, prod of the rest)``."""
    return np.moveaxis(x, mode, 0).reshape(x.shape[mode], -1)


def fold(m: np.ndarray, mode: int, shape: Sequence[int]) -> np.ndarray:
    full = [shape[mode]] + [s for i, s in enumerate(shape) if i != mode]
    return np.moveaxis(m.reshape(full), 0, mode)


def mode_product(x: np.ndarray, matrix: np.ndarray, mode: int) -> np.ndarray:
    """``x ×_mode matrix``: contracts axis ``mode`` of x with the columns of matrix."""
    return np.moveaxis(np.tensordot(matrix, x, axes=(1, mode)), 0, mode)


def multi_mode_product(x: np.ndarray, matrices: Sequence[np.ndarray | None], skip: int | None = None, transpose: bool = False) -> np.ndarray:
    for mode, m in enumerate(matrices):
        if mode == skip or m is None:
            continue
        x = mode_product(x, m.T if transpose else m, mode)
    return x


def tucker_to_tensor(core: np.ndarray, factors: Sequence[np.ndarray]) -> np.ndarray:
    return multi_mode_product(core, factors)


def relative_error(x: np.ndarray, x_hat: np.ndarray) -> float:
    """``||x - x_hat|| / ||x||``; equals ``||x_hat||`` when ``x`` is all zero."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    norm = np.linalg.norm(x)
    if norm == 0:
        return float(np.linalg.norm(x_hat))
    return float(np.linalg.norm(x - x_hat) / norm)


@dataclass(frozen=True)
class ModeMerge:
    """Records how a 4-d ``(N, H, W, C)`` tensor was flattened."""

    variant: Literal["4d", "3d", "2d"]
    shape: tuple[int, int, int, int]

    def flatten(self, x: np.ndarray) -> np.ndarray:
        n, h, w, c = self.shape
        if self.variant == "3d":
            return x.reshape(n, h * w, c)
        if self.variant == "2d":
            return x.reshape(n * h * w, c)
        return x.reshape(self.shape)

    def unflatten(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x).reshape(self.shape)


def concat_modes(x: np.ndarray, variant: Literal["4d", "3d", "2d"]) -> tuple[np.ndarray, ModeMerge]:
    """Merge spatial (3d) or piece and spatial (2d) modes; channels stay last."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise ValueError(f"expected a 4-d (N, H, W, C) tensor, got {x.ndim} dims")
    if variant not in ("4d", "3d", "2d"):
        raise ValueError(f"unknown variant {variant!r}")
    merge = ModeMerge(variant, tuple(x.shape))
    return merge.flatten(x), merge
