"""Piano-roll images with concept-presence overlays, and MIDI export."""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .concepts import ConceptHeatmap
from .midi_roll import NoteSequence, PianoRoll, roll_to_notes, write_smf

Color = tuple[int, int, int]


@dataclass(frozen=True)
class RenderSpec:
    thresholds: tuple[float, ...] = (0.4, 0.6, 0.8)
    px_per_step: int = 2
    px_per_pitch: int = 4
    background: Color = (255, 255, 255)
    velocity_low: Color = (198, 219, 239)
    velocity_high: Color = (8, 48, 107)
    overlay: Color = (230, 85, 13)
    overlay_opacity: float = 0.45

    def __post_init__(self) -> None:
        if any(not 0 < t <= 1 for t in self.thresholds):
            raise ValueError("thresholds must lie in (0, 1]")
        if self.px_per_step <= 0 or self.px_per_pitch <= 0:
            raise ValueError("pixel scales must be positive")


@dataclass
class RenderedImage:
    threshold: float | None
    svg: bytes
    png: bytes

    def suffix(self) -> str:
        return "" if self.threshold is None else f"_t{int(round(self.threshold * 100))}"


def _velocity_color(v: float, spec: RenderSpec) -> Color:
    lo, hi = np.array(spec.velocity_low, float), np.array(spec.velocity_high, float)
    return tuple(int(round(c)) for c in lo + (hi - lo) * float(v))


def _hex(c: Color) -> str:
    return "#%02x%02x%02x" % c


def overlay_mask(heatmap: np.ndarray, threshold: float, peak: float | None = None) -> np.ndarray:
    """Cells whose presence, as a fraction of ``peak``, reaches ``threshold``."""
    heatmap = np.asarray(heatmap, dtype=np.float64)
    peak = float(heatmap.max()) if peak is None else float(peak)
    if peak <= 0:
        return np.zeros(heatmap.shape, dtype=bool)
    return heatmap / peak >= threshold


def _runs(row: np.ndarray):
    """(start, stop, value) for maximal runs of equal non-zero values."""
    t = 0
    n = len(row)
    while t < n:
        v = row[t]
        if not v:
            t += 1
            continue
        end = t + 1
        while end < n and row[end] == v:
            end += 1
        yield t, end, v
        t = end


def _svg(grid: np.ndarray, mask: np.ndarray | None, spec: RenderSpec) -> bytes:
    pitches, steps = grid.shape
    sx, sy = spec.px_per_step, spec.px_per_pitch
    width, height = steps * sx, pitches * sy
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" shape-rendering="crispEdges">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="{_hex(spec.background)}"/>',
        '<g id="notes">',
    ]
    for p in range(pitches):
        y = (pitches - 1 - p) * sy
        for start, stop, v in _runs(grid[p]):
            parts.append(
                f'<rect x="{start * sx}" y="{y}" width="{(stop - start) * sx}" height="{sy}" '
                f'fill="{_hex(_velocity_color(v, spec))}"/>'
            )
    parts.append("</g>")
    if mask is not None:
        parts.append(f'<g id="concept" fill="{_hex(spec.overlay)}" fill-opacity="{spec.overlay_opacity:g}">')
        for p in range(pitches):
            y = (pitches - 1 - p) * sy
            for start, stop, _ in _runs(mask[p]):
                parts.append(f'<rect x="{start * sx}" y="{y}" width="{(stop - start) * sx}" height="{sy}"/>')
        parts.append("</g>")
    parts.append("</svg>\n")
    return "\n".join(parts).encode("utf-8")


def _png(grid: np.ndarray, mask: np.ndarray | None, spec: RenderSpec) -> bytes:
    lo, hi = np.array(spec.velocity_low, float), np.array(spec.velocity_high, float)
    rgb = lo + (hi - lo) * grid[..., None]
    rgb = np.where(grid[..., None] > 0, np.round(rgb), np.array(spec.background, float))
    if mask is not None:
        a = spec.overlay_opacity
        rgb = np.where(mask[..., None], np.round((1 - a) * rgb + a * np.array(spec.overlay, float)), rgb)
    img = np.repeat(np.repeat(rgb[::-1].astype(np.uint8), spec.px_per_pitch, axis=0), spec.px_per_step, axis=1)
    buf = io.BytesIO()
    Image.fromarray(img, "RGB").save(buf, format="PNG")
    return buf.getvalue()


def render_roll(
    roll: PianoRoll | np.ndarray,
    heatmap: ConceptHeatmap | np.ndarray | None = None,
    spec: RenderSpec | None = None,
    peak: float | None = None,
) -> list[RenderedImage]:
    """One image per threshold when a heatmap is given, else a single image.

    ``peak`` is the presence that counts as 100%; it defaults to the
    heatmap's own maximum. Pass the maximum over an evaluation set to make
    thresholds comparable across excerpts.
    """
    spec = spec or RenderSpec()
    grid = np.asarray(getattr(roll, "grid", roll), dtype=np.float64)
    if heatmap is None:
        return [RenderedImage(None, _svg(grid, None, spec), _png(grid, None, spec))]
    hm = np.asarray(getattr(heatmap, "map", heatmap), dtype=np.float64)
    if hm.shape != grid.shape:
        raise ValueError(f"heatmap shape {hm.shape} does not match roll shape {grid.shape}")
    images = []
    for t in spec.thresholds:
        mask = overlay_mask(hm, t, peak)
        images.append(RenderedImage(t, _svg(grid, mask, spec), _png(grid, mask, spec)))
    return images


def export_midi(obj: PianoRoll | NoteSequence) -> bytes:
    """SMF format 0 at 480 PPQ and 120 bpm."""
    seq = roll_to_notes(obj) if isinstance(obj, PianoRoll) else obj
    return write_smf(seq)


def write_renders(out_dir: str | Path, name: str, images: Sequence[RenderedImage], roll: PianoRoll | None = None) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for img in images:
        for ext, data in (("svg", img.svg), ("png", img.png)):
            path = out_dir / f"{name}{img.suffix()}.{ext}"
            path.write_bytes(data)
            written.append(path)
    if roll is not None:
        path = out_dir / f"{name}.mid"
        path.write_bytes(export_midi(roll))
        written.append(path)
    return written
