"""Deterministic synthetic head CT volumes with ellipsoidal hemorrhages."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import Case, write_dataset
from .errors import ConfigError
from .preprocess import Volume

__all__ = ["PhantomSpec", "generate_phantom", "write_dataset"]

AIR_HU = -1000.0


@dataclass
class PhantomSpec:
    seed: int = 0
    n_volumes: int = 6
    slices: int = 32
    size: int = 64
    positive_fraction: float = 0.5
    hemorrhage_hu: tuple[float, float] = (50.0, 90.0)
    brain_hu: float = 30.0
    brain_noise: float = 5.0
    skull_hu: float = 900.0
    slice_thickness_mm: float = 1.5
    blob_radius_px: tuple[float, float] = (4.0, 12.0)
    blob_extent: tuple[int, int] = (3, 8)

    def __post_init__(self) -> None:
        if not 0 <= self.positive_fraction <= 1:
            raise ConfigError("positive_fraction must lie in [0, 1]")
        if self.slices < 4:
            raise ConfigError("a phantom volume needs at least 4 slices")
        if self.size < 32:
            raise ConfigError("phantom slice size must be >= 32 pixels")
        if self.n_volumes < 1:
            raise ConfigError("n_volumes must be >= 1")
        lo, hi = self.blob_extent
        if not 1 <= lo <= hi:
            raise ConfigError(f"invalid blob extent range {self.blob_extent}")
        if lo > self.slices:
            raise ConfigError(f"blob extent {lo} exceeds {self.slices} slices")


def _head_geometry(spec: PhantomSpec, rng: np.random.Generator) -> dict:
    S = spec.size
    return {
        "cy": (S - 1) / 2 + rng.uniform(-0.03, 0.03) * S,
        "cx": (S - 1) / 2 + rng.uniform(-0.03, 0.03) * S,
        "ay": rng.uniform(0.40, 0.45) * S,
        "ax": rng.uniform(0.35, 0.40) * S,
        "skull": max(2.0, 0.05 * S),
    }


def _slice_scale(z: float, n_slices: int) -> float:
    # the head narrows towards the top and bottom of the stack
    zr = 0.8 * n_slices
    return float(np.sqrt(1 - ((z - (n_slices - 1) / 2) / zr) ** 2))


def _brain_contains(head: dict, scale: float, ys: np.ndarray, xs: np.ndarray, margin: float = 1.0) -> np.ndarray:
    by = (head["ay"] - head["skull"]) * scale - margin
    bx = (head["ax"] - head["skull"]) * scale - margin
    return ((ys - head["cy"]) / by) ** 2 + ((xs - head["cx"]) / bx) ** 2 <= 1


def _place_blob(spec: PhantomSpec, head: dict, rng: np.random.Generator) -> dict:
    S, Z = spec.size, spec.slices
    extent = int(rng.integers(spec.blob_extent[0], min(spec.blob_extent[1], Z) + 1))
    z0 = int(rng.integers(0, Z - extent + 1))
    ry, rx = (rng.uniform(*spec.blob_radius_px, size=2) * S / 64).tolist()
    scale = min(_slice_scale(z, Z) for z in range(z0, z0 + extent))
    theta = np.linspace(0, 2 * np.pi, 64, endpoint=False)

    def fits(py: int, px: int) -> bool:
        return bool(np.all(_brain_contains(head, scale, py + ry * np.sin(theta), px + rx * np.cos(theta))))

    for _ in range(500):
        py = int(round(rng.uniform(head["cy"] - head["ay"], head["cy"] + head["ay"])))
        px = int(round(rng.uniform(head["cx"] - head["ax"], head["cx"] + head["ax"])))
        if fits(py, px):
            break
    else:
        py, px = int(round(head["cy"])), int(round(head["cx"]))
        if not fits(py, px):
            raise ConfigError(f"hemorrhage blob (radii {ry:.1f}x{rx:.1f} px) does not fit inside the brain")
    return {"z0": z0, "extent": extent, "py": py, "px": px, "ry": ry, "rx": rx,
            "base_hu": float(rng.uniform(60.0, 80.0))}


def _render(spec: PhantomSpec, head: dict, blobs: list[dict], rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    S, Z = spec.size, spec.slices
    yy, xx = np.mgrid[0:S, 0:S].astype(np.float64)
    hu = np.empty((Z, S, S))
    mask = np.zeros((Z, S, S), dtype=np.uint8)
    for z in range(Z):
        scale = _slice_scale(z, Z)
        outer = ((yy - head["cy"]) / (head["ay"] * scale)) ** 2 + ((xx - head["cx"]) / (head["ax"] * scale)) ** 2 <= 1
        inner = _brain_contains(head, scale, yy, xx, margin=0.0)
        img = AIR_HU + rng.normal(0, 10, (S, S))
        img[outer] = spec.skull_hu + rng.normal(0, 30, int(outer.sum()))
        img[inner] = spec.brain_hu + rng.normal(0, spec.brain_noise, int(inner.sum()))
        hu[z] = img
    lo, hi = spec.hemorrhage_hu
    for blob in blobs:
        cz = blob["z0"] + (blob["extent"] - 1) / 2
        rz = blob["extent"] / 2
        for z in range(blob["z0"], blob["z0"] + blob["extent"]):
            inside = (((yy - blob["py"]) / blob["ry"]) ** 2 + ((xx - blob["px"]) / blob["rx"]) ** 2
                      + ((z - cz) / rz) ** 2) <= 1
            n = int(inside.sum())
            hu[z][inside] = np.clip(blob["base_hu"] + rng.normal(0, 5, n), lo, hi)
            mask[z][inside] = 1
    return np.round(hu).astype(np.int16), mask


def generate_phantom(spec: PhantomSpec) -> list[Case]:
    """Generate ``spec.n_volumes`` labelled cases; bit-identical for equal specs.

    ``round(positive_fraction * n_volumes)`` volumes receive 1-2 hemorrhage
    blobs, each spanning 3-8 consecutive slices.
    """
    children = np.random.SeedSequence(spec.seed).spawn(spec.n_volumes + 1)
    n_pos = int(round(spec.positive_fraction * spec.n_volumes))
    positive = set(np.random.default_rng(children[0]).permutation(spec.n_volumes)[:n_pos].tolist())
    spacing = (spec.slice_thickness_mm, 250.0 / spec.size, 250.0 / spec.size)
    cases = []
    for i in range(spec.n_volumes):
        rng = np.random.default_rng(children[i + 1])
        head = _head_geometry(spec, rng)
        blobs = []
        if i in positive:
            blobs = [_place_blob(spec, head, rng) for _ in range(int(rng.integers(1, 3)))]
        hu, mask = _render(spec, head, blobs, rng)
        labels = mask.reshape(spec.slices, -1).any(axis=1).astype(np.int64)
        cases.append(Case(
            volume_id=f"phantom_{i:03d}",
            volume=Volume(hu, spacing, "hu"),
            mask=Volume(mask, spacing, "mask"),
            labels=labels,
            ct_label=int(i in positive),
        ))
    return cases
