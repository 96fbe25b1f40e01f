"""Image-sequence datasets (raw + JSON header) and a synthetic dynamic phantom."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_DTYPES = {"real32": np.dtype("<f4"), "complex64": np.dtype("<c8")}


@dataclass
class Dataset:
    """A ``frames x side x side`` image sequence with magnitudes in [0, 1].

    ``intensity_scale`` is the factor the stored data was divided by, so
    ``data * intensity_scale`` recovers the original intensities.
    """

    data: np.ndarray
    intensity_scale: float = 1.0

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[1] != self.data.shape[2]:
            raise ValueError(f"expected frames x side x side, got {self.data.shape}")
        want = _DTYPES["complex64" if np.iscomplexobj(self.data) else "real32"]
        if self.data.dtype != want:
            self.data = self.data.astype(want)

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def side(self) -> int:
        return self.data.shape[1]

    @property
    def dtype(self) -> str:
        return "complex64" if np.iscomplexobj(self.data) else "real32"

    def frame(self, t: int) -> np.ndarray:
        """Frame ``t`` (1-based) as a float64/complex128 image."""
        img = self.data[t - 1]
        return img.astype(np.complex128 if np.iscomplexobj(img) else np.float64)

    def header(self) -> dict:
        return {"side": self.side, "frames": self.frames, "dtype": self.dtype,
                "intensity_scale": self.intensity_scale}

    @classmethod
    def from_array(cls, images) -> "Dataset":
        """Normalise an array of images so the largest magnitude is 1."""
        images = np.asarray(images)
        if images.ndim == 2:
            images = images[None]
        peak = float(np.abs(images).max()) if images.size else 0.0
        if peak == 0.0:
            return cls(images, 1.0)
        return cls(images / peak, peak)


def write_dataset(ds: Dataset, stem: str | Path) -> None:
    stem = Path(stem)
    stem.with_suffix(".raw").write_bytes(np.ascontiguousarray(ds.data).tobytes())
    stem.with_suffix(".json").write_text(json.dumps(ds.header(), indent=2))


def read_dataset(stem: str | Path) -> Dataset:
    """Load ``stem.raw`` / ``stem.json``; payloads not already in [0, 1] are normalised."""
    stem = Path(stem)
    try:
        header = json.loads(stem.with_suffix(".json").read_text())
        side, frames, kind = int(header["side"]), int(header["frames"]), header["dtype"]
        dtype = _DTYPES[kind]
    except (OSError, KeyError, ValueError, TypeError) as exc:
        raise ValueError(f"{stem}.json: bad dataset header ({exc})") from exc
    raw = stem.with_suffix(".raw").read_bytes()
    expected = frames * side * side * dtype.itemsize
    if len(raw) != expected:
        raise ValueError(f"{stem}.raw: {len(raw)} bytes, header implies {expected}")
    data = np.frombuffer(raw, dtype=dtype).reshape(frames, side, side).copy()
    scale = float(header.get("intensity_scale", 1.0))
    peak = float(np.abs(data).max()) if data.size else 0.0
    # a complex64 peak of 1 may read back one ulp off; only rescale real departures
    if peak > 0.0 and abs(peak - 1.0) > 1e-6:
        data = data / dtype.type(peak)
        scale *= peak
    return Dataset(data, scale)


# --------------------------------------------------------------------------
# Phantom
# --------------------------------------------------------------------------

# (intensity, centre x, centre y, semi-axis x, semi-axis y, angle in degrees)
_BODY = [
    (0.55, 0.0, 0.0, 0.86, 0.72, 0.0),
    (-0.25, 0.0, 0.0, 0.78, 0.64, 0.0),
]
_MOVING = (0.45, -0.18, 0.05, 0.30, 0.24, 20.0)
_PULSING = (0.30, 0.36, -0.28, 0.13, 0.10, -30.0)


def _ellipse(side: int, value, cx, cy, ax, ay, angle) -> np.ndarray:
    coords = (np.arange(side) + 0.5) / side * 2.0 - 1.0
    y, x = np.meshgrid(coords, coords, indexing="ij")
    th = math.radians(angle)
    xr = (x - cx) * math.cos(th) + (y - cy) * math.sin(th)
    yr = -(x - cx) * math.sin(th) + (y - cy) * math.cos(th)
    return np.where((xr / ax) ** 2 + (yr / ay) ** 2 <= 1.0, value, 0.0)


def phantom_frame(side: int, phase: float, motion_amplitude: float,
                  extras: list[tuple]) -> np.ndarray:
    """One frame at cardiac ``phase`` (radians); ``extras`` are static ellipses."""
    img = np.zeros((side, side))
    for e in _BODY + extras:
        img += _ellipse(side, *e)
    a = motion_amplitude
    s = math.sin(phase)
    val, cx, cy, ax, ay, ang = _MOVING
    img += _ellipse(side, val, cx + 0.05 * a * s, cy + 0.03 * a * s,
                    ax * (1 + 0.08 * a * s), ay * (1 + 0.08 * a * s), ang)
    val, cx, cy, ax, ay, ang = _PULSING
    img += _ellipse(side, val * (1 + 0.25 * a * s), cx, cy, ax, ay, ang)
    return np.clip(img, 0.0, None)


def generate_phantom(side: int = 64, frames: int = 10, motion_amplitude: float = 1.0,
                     seed: int = 0, period: float = 16.0) -> Dataset:
    """Piecewise-constant ellipse sequence with slow periodic motion.

    One ellipse translates and dilates, another changes intensity; a few
    small static ellipses are placed from ``seed``. Frames are sampled
    ``period`` per motion cycle, so neighbouring frames differ only slightly.
    """
    if side < 8 or side & (side - 1):
        raise ValueError(f"side must be a power of two >= 8, got {side}")
    if frames < 1:
        raise ValueError("frames must be >= 1")
    rng = np.random.default_rng(seed)
    extras = []
    for _ in range(3):
        r = rng.uniform(0.15, 0.5)
        phi = rng.uniform(0.0, 2.0 * math.pi)
        extras.append((float(rng.uniform(0.1, 0.25)), r * math.cos(phi), 0.8 * r * math.sin(phi),
                       float(rng.uniform(0.05, 0.1)), float(rng.uniform(0.05, 0.1)),
                       float(rng.uniform(0.0, 180.0))))
    images = [phantom_frame(side, 2.0 * math.pi * t / period, motion_amplitude, extras)
              for t in range(frames)]
    return Dataset.from_array(np.stack(images))
