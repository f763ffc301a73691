"""Non-negative tensor and matrix factorization engines."""

from .io import load_factors, save_factors
from .ntd import (
    FactorizationOptions,
    NmfResult,
    NtdFactors,
    compression_ratio,
    nmf,
    ntd,
    reconstruct,
)
from .tensor_ops import (
    ModeMerge,
    concat_modes,
    mode_product,
    relative_error,
    tucker_to_tensor,
    unfold,
)

__all__ = [
    "FactorizationOptions",
    "ModeMerge",
    "NmfResult",
    "NtdFactors",
    "compression_ratio",
    "concat_modes",
    "load_factors",
    "mode_product",
    "nmf",
    "ntd",
    "reconstruct",
    "relative_error",
    "save_factors",
    "tucker_to_tensor",
    "unfold",
]
