"""Synthetic paired (clear, hazy) data from the atmospheric scattering model.

Hazy images are formed as ``I = J * t + A * (1 - t)`` with transmission
``t = exp(-beta * d)``. All arrays here live in the unit range ``[0, 1]``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy import ndimage

from .imageio import quantize, write_image

log = logging.getLogger(__name__)

A_RANGE = (0.7, 1.0)
BETA_RANGE = (0.3, 2.5)
DEPTH_STYLES = ("linear_ramp", "smooth_noise", "mixed")
MANIFEST_NAME = "manifest.jsonl"


@dataclass
class HazeParams:
    A: np.ndarray  # per-channel atmospheric light
    beta_scatter: Union[float, np.ndarray]  # scalar or (H, W) field
    depth: np.ndarray  # (H, W) in [0, 1]

    def transmission(self) -> np.ndarray:
        return np.exp(-np.asarray(self.beta_scatter) * self.depth)


def apply_asm(J: np.ndarray, params: HazeParams) -> np.ndarray:
    """Haze a clear image ``J`` of shape ``(H, W, C)``."""
    J = np.asarray(J, dtype=np.float64)
    if J.ndim != 3:
        raise ValueError(f"expected (H, W, C) image, got shape {J.shape}")
    if params.depth.shape != J.shape[:2]:
        raise ValueError(f"depth shape {params.depth.shape} does not match image {J.shape[:2]}")
    beta = np.asarray(params.beta_scatter, dtype=np.float64)
    if beta.ndim and beta.shape != J.shape[:2]:
        raise ValueError(f"beta field shape {beta.shape} does not match image {J.shape[:2]}")
    A = np.broadcast_to(np.asarray(params.A, dtype=np.float64), (J.shape[2],))
    t = params.transmission()[:, :, None]
    return np.clip(J * t + A * (1.0 - t), 0.0, 1.0)


def value_noise(height: int, width: int, rng: np.random.Generator, cells=(32, 16, 8)) -> np.ndarray:
    """Multi-octave cubic value noise normalized to ``[0, 1]``.

    The finest lattice spacing (8 px by default) sets the correlation length.
    """
    rows, cols = np.mgrid[0:height, 0:width].astype(np.float64)
    total = np.zeros((height, width))
    amp = 1.0
    for cell in cells:
        lattice = rng.random((height // cell + 4, width // cell + 4))
        coords = np.stack([rows / cell + 1.0, cols / cell + 1.0])
        total += amp * ndimage.map_coordinates(lattice, coords, order=3, mode="nearest")
        amp *= 0.5
    lo, hi = total.min(), total.max()
    if hi - lo < 1e-12:
        return np.zeros_like(total)
    return (total - lo) / (hi - lo)


def gen_depth(height: int, width: int, style: str, rng: np.random.Generator) -> np.ndarray:
    if height < 1 or width < 1:
        raise ValueError("depth map needs positive dimensions")
    if style == "linear_ramp":
        ramp = np.linspace(0.0, 1.0, height) if height > 1 else np.zeros(1)
        return np.repeat(ramp[:, None], width, axis=1)
    if style == "smooth_noise":
        return value_noise(height, width, rng)
    if style == "mixed":
        d = 0.5 * gen_depth(height, width, "linear_ramp", rng) + 0.5 * value_noise(height, width, rng)
        return (d - d.min()) / max(d.max() - d.min(), 1e-12)
    raise ValueError(f"unknown depth style {style!r}; expected one of {DEPTH_STYLES}")


def gen_scene(size: int, rng: np.random.Generator, channels: int = 3) -> np.ndarray:
    """Procedural clear scene: colour gradient, a few flat shapes and a stripe texture."""
    h = w = size
    rows, cols = np.mgrid[0:h, 0:w] / max(size - 1, 1)
    angle = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(angle) * rows + np.sin(angle) * cols
    ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-12)
    c0, c1 = rng.uniform(0.0, 0.8, channels), rng.uniform(0.1, 0.9, channels)
    img = c0 + ramp[:, :, None] * (c1 - c0)

    for _ in range(rng.integers(2, 6)):
        color = rng.uniform(0.0, 1.0, channels)
        cy, cx = rng.uniform(0, 1, 2)
        rad = rng.uniform(0.08, 0.3)
        if rng.random() < 0.5:
            mask = (rows - cy) ** 2 + (cols - cx) ** 2 < rad**2
        else:
            mask = (np.abs(rows - cy) < rad) & (np.abs(cols - cx) < rad * rng.uniform(0.5, 1.5))
        img[mask] = color

    freq = rng.uniform(3, 12)
    theta = rng.uniform(0, np.pi)
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (np.cos(theta) * rows + np.sin(theta) * cols))
    img = img * (0.85 + 0.15 * stripes[:, :, None])
    return np.clip(img, 0.0, 1.0)


def _pair_record(index: int, seed: int, size: int, homogeneous: Optional[bool]) -> dict:
    rng = np.random.default_rng([seed, index])
    scene_seed = int(rng.integers(2**31))
    depth_seed = int(rng.integers(2**31))
    field_seed = int(rng.integers(2**31))
    homo = bool(rng.random() < 0.5) if homogeneous is None else bool(homogeneous)
    rec = {
        "filename": f"{index:05d}.png",
        "index": index,
        "seed": seed,
        "size": size,
        "scene_seed": scene_seed,
        "A": [round(float(a), 6) for a in rng.uniform(*A_RANGE, 3)],
        "depth_style": DEPTH_STYLES[int(rng.integers(len(DEPTH_STYLES)))],
        "depth_seed": depth_seed,
        "homogeneous": homo,
    }
    if homo:
        rec["beta"] = round(float(rng.uniform(*BETA_RANGE)), 6)
    else:
        rec["beta_field_seed"] = field_seed
    return rec


def render_pair(rec: dict, channels: int = 3):
    """Rebuild ``(clear, hazy, params)`` in the unit range from a manifest record.

    The clear image is snapped to the 8-bit grid before hazing so the
    stored pair stays consistent with the model.
    """
    size = rec["size"]
    J = quantize(gen_scene(size, np.random.default_rng(rec["scene_seed"]), channels)) / 255.0
    depth = gen_depth(size, size, rec["depth_style"], np.random.default_rng(rec["depth_seed"]))
    if rec["homogeneous"]:
        beta = float(rec["beta"])
    else:
        field = value_noise(size, size, np.random.default_rng(rec["beta_field_seed"]))
        beta = BETA_RANGE[0] + (BETA_RANGE[1] - BETA_RANGE[0]) * field
    params = HazeParams(A=np.asarray(rec["A"][:channels]), beta_scatter=beta, depth=depth)
    return J, apply_asm(J, params), params


def gen_pairs(n_pairs: int, size: int, homogeneous: Optional[bool] = None, seed: int = 0):
    """In-memory generation; yields ``(record, clear, hazy)`` in unit range."""
    for i in range(n_pairs):
        rec = _pair_record(i, seed, size, homogeneous)
        J, I, _ = render_pair(rec)
        yield rec, J, I


def gen_dataset(n_pairs: int, size: int, homogeneous: Optional[bool], seed: int, out_dir) -> Path:
    """Write ``clear/``, ``hazy/`` and a JSON-lines manifest under ``out_dir``.

    ``homogeneous=None`` mixes homogeneous and non-homogeneous haze per pair.
    """
    if n_pairs < 0 or size < 1:
        raise ValueError("n_pairs must be >= 0 and size >= 1")
    out = Path(out_dir)
    (out / "clear").mkdir(parents=True, exist_ok=True)
    (out / "hazy").mkdir(parents=True, exist_ok=True)
    lines = []
    for rec, J, I in gen_pairs(n_pairs, size, homogeneous, seed):
        for sub, img in (("clear", J), ("hazy", I)):
            path = out / sub / rec["filename"]
            try:
                write_image(path, img, signed=False)
            except OSError as exc:
                raise OSError(f"failed to write {path}: {exc}") from exc
        lines.append(json.dumps(rec, sort_keys=True))
    (out / MANIFEST_NAME).write_text("".join(line + "\n" for line in lines))
    log.info("wrote %d pairs to %s", n_pairs, out)
    return out


def read_manifest(path) -> list[dict]:
    """Records from ``manifest.jsonl``; ``path`` may be the file or the dataset directory."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.jsonl"
    text = path.read_text()
    return [json.loads(line) for line in text.splitlines() if line.strip()]
