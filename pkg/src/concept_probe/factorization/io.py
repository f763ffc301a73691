"""Factor storage: one PRT1 container per array plus a JSON manifest."""

from __future__ import annotations

import json
from pathlib import Path

from .. import prt
from .ntd import NmfResult, NtdFactors


def save_factors(directory: str | Path, f: NtdFactors | NmfResult, variant: str, seed: int, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if isinstance(f, NmfResult):
        arrays = {"W": f.W, "H": f.H}
        ranks = [f.W.shape[1]]
    else:
        arrays = {"core": f.core, **{f"factor_{i}": m for i, m in enumerate(f.factors)}}
        ranks = list(f.ranks)
    for name, arr in arrays.items():
        prt.save(directory / f"{name}.prt", arr, {"name": name})
    manifest = {
        "kind": "nmf" if isinstance(f, NmfResult) else "ntd",
        "variant": variant,
        "ranks": ranks,
        "seed": seed,
        "loss_history": [float(v) for v in f.loss_history],
        "arrays": sorted(arrays),
    }
    manifest.update(extra or {})
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def load_factors(directory: str | Path) -> tuple[NtdFactors | NmfResult, dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())

    def get(name):
        return prt.load(directory / f"{name}.prt")[0].astype("float64")

    if manifest["kind"] == "nmf":
        f = NmfResult(get("W"), get("H"), manifest["loss_history"])
    else:
        count = sum(1 for a in manifest["arrays"] if a.startswith("factor_"))
        f = NtdFactors(get("core"), [get(f"factor_{i}") for i in range(count)], manifest["loss_history"])
    return f, manifest
