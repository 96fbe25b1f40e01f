"""Per-frame ADMM solver alternating wavelet shrinkage, Gibbs sweeps and a k-space solve.

The frame objective couples three terms: patch fidelity to the current
dictionary codes (weight ``gamma_eps``), k-space data fidelity (weight
``lam``, or exact replacement in noiseless mode), and an l1 penalty on the
wavelet coefficients outside the reference support (weight ``lambda_g``),
split off through ``v = W x`` with scaled dual ``u`` and penalty ``rho``.

``v`` and ``u`` live on the full wavelet grid. On the support the shrinkage
threshold is zero and ``u`` is held at zero, so ``W'W = I``. With one noise
precision for all patches the x-step is then diagonal in k-space; with one
precision per group it is solved by conjugate gradients.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dictlearn import GibbsState, gibbs_sweep, group_residual, set_dependence, weighted_code
from .grouping import NeighborGraph, PatchGrouping, build_dependence
from .linops import (SupportSet, apply_fu, apply_fu_adjoint, dwt2, embed, extract_patches, fft2c,
                     idwt2, ifft2c, restrict_complement)
from .metrics import psnr
from .sampling import KSpaceFrame

log = logging.getLogger(__name__)


class NumericalAbort(RuntimeError):
    """Raised when an iterate stops being finite; carries the diagnostics so far."""

    def __init__(self, message: str, diagnostics: list[dict]):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class Weights:
    lambda_g: float = 10.0
    rho: float = 1000.0
    lam: float = 1e10
    noiseless: bool = False

    def __post_init__(self):
        if self.lambda_g < 0 or self.rho <= 0 or self.lam < 0:
            raise ValueError(f"invalid weights {self}")


@dataclass
class ReconContext:
    support: SupportSet
    weights: Weights = field(default_factory=Weights)
    levels: int | None = None
    max_iters: int = 100
    tolerance: float = 1e-4
    v: np.ndarray = None
    u: np.ndarray = None

    def __post_init__(self):
        shape = self.support.mask.shape
        if self.v is None:
            self.v = np.zeros(shape, dtype=complex)
        if self.u is None:
            self.u = np.zeros(shape, dtype=complex)
        if self.v.shape != shape or self.u.shape != shape:
            raise ValueError("v and u must match the wavelet grid")


def soft(c: np.ndarray, kappa) -> np.ndarray:
    """Complex soft thresholding ``c * max(1 - kappa / |c|, 0)``."""
    mag = np.abs(c)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.maximum(1.0 - kappa / mag, 0.0)
    return np.where(mag > 0, c * scale, 0.0)


def v_update(ctx: ReconContext, x: np.ndarray) -> np.ndarray:
    c = dwt2(x, ctx.levels) + ctx.u
    kappa = ctx.weights.lambda_g / ctx.weights.rho
    ctx.v = np.where(ctx.support.mask, c, soft(c, kappa))
    return ctx.v


def x_system(ctx: ReconContext, y: KSpaceFrame, code_weight: float):
    """Numerator pieces and diagonal of the k-space system (without the code term).

    ``code_weight`` is the scalar ``gamma_eps * L`` multiplying the identity.
    """
    w = ctx.weights
    M = y.mask.bits.astype(float)
    rhs = w.rho * fft2c(idwt2(ctx.v - ctx.u, ctx.levels))
    diag = code_weight + w.rho + (0.0 if w.noiseless else w.lam) * M
    if not w.noiseless:
        rhs = rhs + w.lam * embed(y.values, y.mask)
    return rhs, diag


def x_update(ctx: ReconContext, code_img: np.ndarray, y: KSpaceFrame,
             gamma_eps: float, L: int) -> np.ndarray:
    """Solve ``(gamma_eps L I + lam F_u'F_u + rho I) x = gamma_eps code + lam F_u'y + rho W'(v - u)``.

    ``code_img`` is the summed patch synthesis ``sum_i P_i' D alpha_i``.
    Noiseless mode drops the data term and overwrites the sampled entries.
    """
    if gamma_eps <= 0:
        raise ValueError("gamma_eps must be positive")
    rhs, diag = x_system(ctx, y, gamma_eps * L)
    X = (gamma_eps * fft2c(code_img) + rhs) / diag
    if ctx.weights.noiseless:
        X[y.mask.bits] = y.values
    return ifft2c(X)


def _cg(apply_A, b, x, precond, tol, max_iter):
    # stop on the preconditioned residual norm, which stays well scaled when
    # the data weight dwarfs the other terms
    target = tol ** 2 * max(np.vdot(b, precond(b)).real, 1e-300)
    r = b - apply_A(x)
    z = precond(r)
    p = z
    rz = np.vdot(r, z).real
    for it in range(max_iter):
        if rz <= target:
            return x, it
        Ap = apply_A(p)
        step = rz / np.vdot(p, Ap).real
        x = x + step * p
        r = r - step * Ap
        z = precond(r)
        rz, rz_old = np.vdot(r, z).real, rz
        p = z + (rz / rz_old) * p
    return x, max_iter


def x_update_weighted(ctx: ReconContext, synth: np.ndarray, weight: np.ndarray,
                      y: KSpaceFrame, tol: float = 1e-12, max_iter: int = 2000) -> np.ndarray:
    """Solve ``(diag(weight) + lam F_u'F_u + rho I) x = synth + lam F_u'y + rho W'(v - u)``.

    ``synth`` and ``weight`` come from :func:`dictlearn.weighted_code`, so each
    patch enters with its own group's noise precision. A constant ``weight``
    is solved in closed form in k-space; otherwise the system is diagonal in
    neither domain and conjugate gradients is run, over the unsampled
    frequencies only in noiseless mode.
    """
    weight = np.asarray(weight, dtype=float)
    if weight.min() <= 0:
        raise ValueError("pixel weights must be positive")
    w = ctx.weights
    mean_w = float(weight.mean())
    rhs_k, diag_k = x_system(ctx, y, mean_w)
    X0 = (fft2c(synth) + rhs_k) / diag_k
    if w.noiseless:
        X0[y.mask.bits] = y.values
    if np.ptp(weight) <= 1e-12 * mean_w:
        return ifft2c(X0)

    d = weight + w.rho
    b = synth + w.rho * idwt2(ctx.v - ctx.u, ctx.levels)
    if w.noiseless:
        free = ~y.mask.bits
        Y = embed(y.values, y.mask)

        def apply_A(z):
            Z = np.zeros(free.shape, dtype=complex)
            Z[free] = z
            return fft2c(d * ifft2c(Z))[free]

        z, _ = _cg(apply_A, fft2c(b - d * ifft2c(Y))[free], X0[free],
                   lambda r: r / (mean_w + w.rho), tol, max_iter)
        Y[free] = z
        return ifft2c(Y)

    M = y.mask.bits

    def apply_A(x):
        return d * x + w.lam * ifft2c(M * fft2c(x))

    x, _ = _cg(apply_A, b + w.lam * apply_fu_adjoint(y.values, y.mask), ifft2c(X0),
               lambda r: ifft2c(fft2c(r) / diag_k), tol, max_iter)
    return x


def data_consistent(image: np.ndarray, y: KSpaceFrame, weights: Weights) -> np.ndarray:
    """Blend ``image`` with the measurements in k-space (replace them in noiseless mode)."""
    X = fft2c(np.asarray(image, dtype=complex))
    if weights.noiseless:
        X[y.mask.bits] = y.values
    else:
        M = y.mask.bits
        X[M] = (X[M] + weights.lam * y.values) / (1.0 + weights.lam)
    return ifft2c(X)


def dual_update(ctx: ReconContext, x: np.ndarray) -> np.ndarray:
    """``u += W x - v`` off the support; ``u`` stays zero on it."""
    ctx.u = restrict_complement(ctx.u + dwt2(x, ctx.levels) - ctx.v, ctx.support)
    return ctx.u


def reconstruct_frame(y: KSpaceFrame, grouping: PatchGrouping, state: GibbsState,
                      ctx: ReconContext, L: int, graph: NeighborGraph | None = None,
                      sigma: float | None = None, truth: np.ndarray | None = None,
                      x0: np.ndarray | None = None, callback=None) -> tuple[np.ndarray, GibbsState, list[dict]]:
    """Run the frame loop: v-shrinkage, one Gibbs sweep, x-solve, dual step.

    With a neighbour ``graph`` and kernel width ``sigma`` the dependence
    matrix is rebuilt from the current patches before each sweep.
    Returns the last iterate, the updated state and one diagnostics row per
    iteration.
    """
    x = apply_fu_adjoint(y.values, y.mask) if x0 is None else np.asarray(x0, dtype=complex)
    y_norm = max(float(np.linalg.norm(y.values)), 1e-300)
    rows: list[dict] = []
    if not np.all(np.isfinite(x)):
        raise NumericalAbort("non-finite initial image", rows)
    for it in range(1, ctx.max_iters + 1):
        t0 = time.perf_counter()
        v_update(ctx, x)
        patches = extract_patches(x, L)
        if graph is not None and sigma is not None:
            set_dependence(state, build_dependence(patches, patches, graph, sigma))
        gibbs_sweep(state, patches, grouping)
        synth, weight = weighted_code(state, grouping)
        x_new = x_update_weighted(ctx, synth, weight, y)
        dual_update(ctx, x_new)
        elapsed = time.perf_counter() - t0

        change = float(np.linalg.norm(x_new - x) / max(np.linalg.norm(x), 1e-300))
        row = {
            "iteration": it,
            "residual": change,
            "patch_residual": group_residual(state, patches, grouping),
            "data_consistency": float(np.linalg.norm(apply_fu(x_new, y.mask) - y.values)) / y_norm,
            "dual_residual": float(np.linalg.norm(dwt2(x_new, ctx.levels) - ctx.v)),
            "x_norm": float(np.linalg.norm(x_new)),
            "gamma_eps": state.gamma_eps,
            "active_atoms": state.active_atoms,
            "gini": state.mean_gini(),
            "psnr": psnr(x_new, truth) if truth is not None else float("nan"),
            "seconds": elapsed,
        }
        rows.append(row)
        if callback is not None:
            callback(row)
        if not np.all(np.isfinite(x_new)):
            raise NumericalAbort(f"non-finite iterate at iteration {it}", rows)
        x = x_new
        if change < ctx.tolerance:
            log.debug("converged after %d iterations", it)
            break
    return x, state, rows


DIAG_FIELDS = ("frame", "iteration", "residual", "patch_residual", "data_consistency",
               "dual_residual", "x_norm", "gamma_eps", "active_atoms", "gini", "psnr", "seconds")


def write_diagnostics(path: str | Path, rows: list[dict], append: bool = False) -> None:
    path = Path(path)
    new = not (append and path.exists())
    with path.open("w" if new else "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=DIAG_FIELDS, extrasaction="ignore")
        if new:
            w.writeheader()
        w.writerows(rows)
