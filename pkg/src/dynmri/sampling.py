"""Radial Cartesian undersampling masks and measured k-space frames."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .linops import apply_fu


@dataclass(frozen=True)
class SamplingMask:
    """Binary k-space mask in the centred layout (DC at ``(side//2, side//2)``)."""

    bits: np.ndarray
    num_rays: int = 0

    @property
    def side(self) -> int:
        return self.bits.shape[0]

    @property
    def rate(self) -> float:
        return int(self.bits.sum()) / self.bits.size

    @property
    def count(self) -> int:
        return int(self.bits.sum())

    def __eq__(self, other):
        return (isinstance(other, SamplingMask) and self.num_rays == other.num_rays
                and np.array_equal(self.bits, other.bits))

    def __hash__(self):
        return hash((self.num_rays, self.bits.tobytes()))


@dataclass
class KSpaceFrame:
    """Measurements of one frame on the positions where ``mask`` is set."""

    mask: SamplingMask
    values: np.ndarray
    frame_index: int = 1
    noise_bound: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        if self.values.shape != (self.mask.count,):
            raise ValueError(f"{self.values.shape[0] if self.values.ndim else 0} values "
                             f"for a mask with {self.mask.count} samples")


def _bit_reversed_fraction(t: int) -> float:
    # van der Corput sequence in base 2: 0, 1/2, 1/4, 3/4, 1/8, ...
    out, scale = 0.0, 0.5
    while t:
        out += scale * (t & 1)
        t >>= 1
        scale *= 0.5
    return out


def ray_angles(num_rays: int, seed_angle: float = 0.0, spacing: str = "nested") -> np.ndarray:
    """Angles (mod pi) of the full-diameter rays.

    ``"uniform"`` spaces ``num_rays`` rays by ``pi / num_rays``. ``"nested"``
    takes the first ``num_rays`` angles of the bit-reversed dyadic sequence:
    exactly uniform whenever ``num_rays`` is a power of two, never more than
    a factor two between adjacent gaps otherwise, and every family contains
    all smaller ones, so the sampled area grows with the ray count.
    """
    if num_rays < 1:
        raise ValueError("num_rays must be >= 1")
    if spacing == "uniform":
        frac = np.arange(num_rays) / num_rays
    elif spacing == "nested":
        frac = np.array([_bit_reversed_fraction(t) for t in range(num_rays)])
    else:
        raise ValueError(f"unknown spacing {spacing!r}")
    return seed_angle + np.pi * frac


def radial_mask(side: int, num_rays: int, seed_angle: float = 0.0,
                spacing: str = "nested") -> SamplingMask:
    """Rasterise ``num_rays`` lines through the k-space centre.

    A cell is marked when the line crosses the cell's open square, i.e. the
    cell centre lies within half a cell of the line in the max-norm. The
    result is made symmetric under ``k -> -k`` so that real images keep
    Hermitian-consistent sampling.
    """
    c = side // 2
    ii, jj = np.mgrid[0:side, 0:side]
    y = ii - c
    x = jj - c
    bits = np.zeros((side, side), dtype=bool)
    for theta in ray_angles(num_rays, seed_angle, spacing):
        s, co = math.sin(theta), math.cos(theta)
        dist = np.abs(co * y - s * x)
        bits |= dist < 0.5 * (abs(s) + abs(co)) - 1e-9
    bits |= np.roll(bits[::-1, ::-1], (1, 1), axis=(0, 1))
    return SamplingMask(bits, num_rays)


def rate_for_rays(side: int, num_rays: int, seed_angle: float = 0.0,
                  spacing: str = "nested") -> float:
    return radial_mask(side, num_rays, seed_angle, spacing).rate


def rays_for_rate(side: int, target_rate: float, seed_angle: float = 0.0,
                  spacing: str = "nested", max_rays: int | None = None) -> int:
    """Smallest ray count whose realised rate reaches ``target_rate``."""
    if not 0.0 < target_rate <= 1.0:
        raise ValueError(f"target rate must lie in (0, 1], got {target_rate}")
    max_rays = 8 * side if max_rays is None else max_rays

    def reached(k):
        return rate_for_rays(side, k, seed_angle, spacing) >= target_rate

    if spacing == "nested":
        # rate is nondecreasing in k: bisect
        if not reached(max_rays):
            raise ValueError(f"rate {target_rate} unreachable with {max_rays} rays")
        lo, hi = 1, max_rays
        while lo < hi:
            mid = (lo + hi) // 2
            if reached(mid):
                hi = mid
            else:
                lo = mid + 1
        return lo
    for k in range(1, max_rays + 1):
        if reached(k):
            return k
    raise ValueError(f"rate {target_rate} unreachable with {max_rays} rays")


def mask_for_rate(side: int, target_rate: float, seed_angle: float = 0.0,
                  spacing: str = "nested") -> SamplingMask:
    return radial_mask(side, rays_for_rate(side, target_rate, seed_angle, spacing),
                       seed_angle, spacing)


def measure(image: np.ndarray, mask: SamplingMask, noise_sigma: float = 0.0,
            rng: np.random.Generator | None = None, frame_index: int = 1) -> KSpaceFrame:
    """Sample ``image`` on ``mask`` with complex Gaussian noise of per-component std ``noise_sigma``."""
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    values = apply_fu(image, mask)
    if noise_sigma > 0:
        rng = np.random.default_rng() if rng is None else rng
        values = values + noise_sigma * (rng.standard_normal(values.shape)
                                         + 1j * rng.standard_normal(values.shape))
    bound = noise_sigma * math.sqrt(2 * values.size)
    return KSpaceFrame(mask, values, frame_index, bound)


# --------------------------------------------------------------------------
# Serialisation
# --------------------------------------------------------------------------

def write_mask(mask: SamplingMask, stem: str | Path) -> None:
    """Write ``stem.pgm`` (8-bit, 0/255), ``stem.bits`` (packed) and ``stem.json``."""
    stem = Path(stem)
    side = mask.side
    header = f"P5\n{side} {side}\n255\n".encode("ascii")
    stem.with_suffix(".pgm").write_bytes(header + (mask.bits.astype(np.uint8) * 255).tobytes())
    stem.with_suffix(".bits").write_bytes(np.packbits(mask.bits.ravel()).tobytes())
    meta = {"side": side, "num_rays": mask.num_rays, "rate": mask.rate}
    stem.with_suffix(".json").write_text(json.dumps(meta, indent=2))


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    pos += 1
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(f) for f in fields[1:])
    dtype = np.uint8 if maxval < 256 else ">u2"
    return np.frombuffer(raw[pos:], dtype=dtype, count=w * h).reshape(h, w)


def read_mask(stem: str | Path) -> SamplingMask:
    """Read a mask written by :func:`write_mask` (packed bitmap preferred)."""
    stem = Path(stem)
    meta = json.loads(stem.with_suffix(".json").read_text())
    side = int(meta["side"])
    packed = stem.with_suffix(".bits")
    if packed.exists():
        flat = np.unpackbits(np.frombuffer(packed.read_bytes(), dtype=np.uint8))[: side * side]
        bits = flat.reshape(side, side).astype(bool)
    else:
        bits = read_pgm(stem.with_suffix(".pgm")) > 127
    return SamplingMask(bits, int(meta.get("num_rays", 0)))
