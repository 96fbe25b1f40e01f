"""Linear operators of the observation and sparsity model.

Images are square complex ``ndarray``s whose side is a power of two. The
Fourier operator is the unitary, centred 2-D DFT (DC at ``(side // 2,
side // 2)``) restricted to a boolean sampling mask. Patches are stride-1,
wrap around at the borders and are stored column-wise, one column per
top-left pixel in row-major order.
"""

from __future__ import annotations

import functools
import math
import warnings
from dataclasses import dataclass

import numpy as np
import pywt

WAVELET = "db4"


def _check_square(image: np.ndarray) -> int:
    if image.ndim != 2 or image.shape[0] != image.shape[1]:
        raise ValueError(f"expected a square image, got shape {image.shape}")
    return image.shape[0]


def _mask_bits(mask) -> np.ndarray:
    return np.asarray(getattr(mask, "bits", mask), dtype=bool)


# --------------------------------------------------------------------------
# Fourier
# --------------------------------------------------------------------------

def fft2c(image: np.ndarray) -> np.ndarray:
    """Unitary centred 2-D DFT."""
    return np.fft.fftshift(np.fft.fft2(image, norm="ortho"))


def ifft2c(kspace: np.ndarray) -> np.ndarray:
    """Inverse of :func:`fft2c`."""
    return np.fft.ifft2(np.fft.ifftshift(kspace), norm="ortho")


def apply_fu(image: np.ndarray, mask) -> np.ndarray:
    """Undersampled Fourier operator.

    Returns the centred k-space values at the ``True`` positions of
    ``mask`` as a 1-D complex array (row-major order of the mask).
    """
    bits = _mask_bits(mask)
    if bits.shape != np.shape(image):
        raise ValueError(f"mask shape {bits.shape} != image shape {np.shape(image)}")
    return fft2c(image)[bits]


def embed(values: np.ndarray, mask) -> np.ndarray:
    """Scatter measured values onto the full k-space grid, zeros elsewhere."""
    bits = _mask_bits(mask)
    values = np.asarray(values)
    if values.shape != (int(bits.sum()),):
        raise ValueError(f"expected {int(bits.sum())} values, got shape {values.shape}")
    full = np.zeros(bits.shape, dtype=complex)
    full[bits] = values
    return full


def apply_fu_adjoint(values: np.ndarray, mask) -> np.ndarray:
    """Adjoint of :func:`apply_fu` (zero-filled inverse DFT)."""
    return ifft2c(embed(values, mask))


# --------------------------------------------------------------------------
# Patches
# --------------------------------------------------------------------------

def patch_side(L: int) -> int:
    side = math.isqrt(int(L))
    if side * side != L or side < 1:
        raise ValueError(f"patch area L={L} is not a positive perfect square")
    return side


def extract_patches(image: np.ndarray, L: int) -> np.ndarray:
    """All overlapping ``sqrt(L) x sqrt(L)`` patches, with wraparound.

    Returns an array of shape ``(L, n)`` for real images and ``(2L, n)``
    for complex ones, where the complex case stacks real parts on top of
    imaginary parts. Row ``a * sqrt(L) + b`` of column ``r * side + c``
    holds ``image[(r + a) % side, (c + b) % side]``.
    """
    side = _check_square(image)
    p = patch_side(L)
    if p > side:
        raise ValueError(f"patch side {p} exceeds image side {side}")
    rows = [np.roll(image, (-a, -b), axis=(0, 1)).ravel()
            for a in range(p) for b in range(p)]
    out = np.stack(rows)
    if np.iscomplexobj(image):
        return np.concatenate([out.real, out.imag])
    return out


def assemble_patches(patches: np.ndarray, n: int) -> np.ndarray:
    """Adjoint of :func:`extract_patches`: ``sum_i P_i^T p_i``.

    A stacked ``(2L, n)`` input is unstacked into a complex image (``L``
    and ``2L`` cannot both be perfect squares, so the layout is implied by
    the row count).
    """
    side = math.isqrt(int(n))
    if side * side != n:
        raise ValueError(f"pixel count {n} is not a perfect square")
    patches = np.asarray(patches)
    if patches.ndim != 2 or patches.shape[1] != n:
        raise ValueError(f"expected {n} patch columns, got shape {patches.shape}")
    rows = patches.shape[0]
    if math.isqrt(rows) ** 2 == rows:
        data = patches
    elif rows % 2 == 0 and math.isqrt(rows // 2) ** 2 == rows // 2:
        data = patches[: rows // 2] + 1j * patches[rows // 2:]
    else:
        raise ValueError(f"patch length {rows} is neither L nor 2L for a square L")
    p = math.isqrt(data.shape[0])
    out = np.zeros((side, side), dtype=data.dtype)
    for a in range(p):
        for b in range(p):
            out += np.roll(data[a * p + b].reshape(side, side), (a, b), axis=(0, 1))
    return out


# --------------------------------------------------------------------------
# Wavelets
# --------------------------------------------------------------------------

def default_levels(side: int) -> int:
    return max(int(math.log2(side)) - 2, 1)


@functools.lru_cache(maxsize=None)
def _slices(side: int, levels: int):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        coeffs = pywt.wavedec2(np.zeros((side, side)), WAVELET, mode="periodization", level=levels)
    _, slices = pywt.coeffs_to_array(coeffs)
    return slices


def _check_levels(side: int, levels: int) -> None:
    if levels < 1 or side % (2 ** levels) != 0:
        raise ValueError(f"invalid level count {levels} for image side {side}")


def _dwt2_real(x: np.ndarray, levels: int) -> np.ndarray:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        coeffs = pywt.wavedec2(x, WAVELET, mode="periodization", level=levels)
    arr, _ = pywt.coeffs_to_array(coeffs)
    return arr


def _idwt2_real(c: np.ndarray, levels: int) -> np.ndarray:
    coeffs = pywt.array_to_coeffs(c, _slices(c.shape[0], levels), output_format="wavedec2")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return pywt.waverec2(coeffs, WAVELET, mode="periodization")


def dwt2(image: np.ndarray, levels: int | None = None) -> np.ndarray:
    """Orthonormal periodic Daubechies-4 transform as a ``side x side`` array."""
    side = _check_square(image)
    levels = default_levels(side) if levels is None else levels
    _check_levels(side, levels)
    if np.iscomplexobj(image):
        return _dwt2_real(image.real, levels) + 1j * _dwt2_real(image.imag, levels)
    return _dwt2_real(np.asarray(image, dtype=float), levels)


def idwt2(coeffs: np.ndarray, levels: int | None = None) -> np.ndarray:
    side = _check_square(coeffs)
    levels = default_levels(side) if levels is None else levels
    _check_levels(side, levels)
    if np.iscomplexobj(coeffs):
        return _idwt2_real(coeffs.real, levels) + 1j * _idwt2_real(coeffs.imag, levels)
    return _idwt2_real(np.asarray(coeffs, dtype=float), levels)


# --------------------------------------------------------------------------
# Support
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SupportSet:
    """Significant wavelet coefficients of a reference frame."""

    mask: np.ndarray
    threshold: float

    @property
    def indices(self) -> set[tuple[int, int]]:
        return {(int(i), int(j)) for i, j in zip(*np.nonzero(self.mask))}

    def __len__(self) -> int:
        return int(self.mask.sum())

    @classmethod
    def empty(cls, side: int) -> "SupportSet":
        return cls(np.zeros((side, side), dtype=bool), math.inf)


def estimate_support(reference: np.ndarray, tau: float = 0.01,
                     levels: int | None = None) -> SupportSet:
    """Coefficients with ``|W x| >= tau * max |W x|``.

    An all-zero reference yields an empty support.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    mag = np.abs(dwt2(reference, levels))
    peak = float(mag.max())
    if peak == 0.0:
        return SupportSet(np.zeros(mag.shape, dtype=bool), 0.0)
    threshold = tau * peak
    return SupportSet(mag >= threshold, threshold)


def restrict_complement(coeffs: np.ndarray, support: SupportSet) -> np.ndarray:
    """Zero the coefficients on ``support`` and keep the rest."""
    if support.mask.shape != coeffs.shape:
        raise ValueError("support does not match the coefficient grid")
    return np.where(support.mask, 0, coeffs)
