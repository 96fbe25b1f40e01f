"""Group-wise beta-process dictionary learning by Gibbs sampling.

Every patch group ``j`` owns a dictionary ``D`` (``P x K``), binary
activations ``Z`` and Gaussian weights ``S`` (both ``K x N_j``) with codes
``alpha = S * Z``. Usage probabilities are patch specific: ``pi = A @ pi_star``
where ``A`` is the row-stochastic dependence block of the group and each row
of ``pi_star`` is a beta draw informed by the activations in that patch's
neighbourhood. ``P`` is the atom length (``2L`` for stacked complex patches)
and plays the role of the patch dimension everywhere, including the prior
precision of the atoms.

Gamma draws use the shape/rate convention.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

try:
    from numba import njit
except ImportError:  # pragma: no cover - optional accelerator
    njit = None

from .grouping import DependenceMatrix, PatchGrouping
from .linops import assemble_patches

log = logging.getLogger(__name__)

PROB_CLIP = 1e-12


@dataclass(frozen=True)
class HyperParams:
    c0: float = 1.0
    c1: float = 1.0
    eta0: float = 1.0
    e0: float = 1.0
    f0: float = 1.0
    g0: float = 1.0
    h0: float = 1.0
    # Beta(a, 0) and Beta(0, b) are point masses; they are pulled inside (0, 1) by this much
    eta_delta: float = 1e-6
    # atoms unused for this many consecutive sweeps are redrawn from the prior
    prune_after: int = 10


@dataclass
class GroupState:
    D: np.ndarray
    S: np.ndarray
    Z: np.ndarray
    pi_star: np.ndarray
    pi: np.ndarray
    eta: np.ndarray
    gamma_s: np.ndarray
    gamma_eps: float
    rng: np.random.Generator
    A: sp.csr_matrix
    # neighbourhood pattern for the pi_star counts; None means the whole group
    Q: sp.csr_matrix | None = None
    idle: np.ndarray = None
    eta_rejects: int = 0

    def __post_init__(self):
        if self.idle is None:
            self.idle = np.zeros(self.D.shape[1], dtype=np.int64)
        self.set_dependence(self.A, self.Q)

    def set_dependence(self, A: sp.csr_matrix, Q: sp.csr_matrix | None) -> None:
        # single-precision copies: the products below only feed probabilities
        self.A, self.Q = A, Q
        self._A32 = sp.csr_matrix(A, dtype=np.float32)
        self._Q32 = None if Q is None else sp.csr_matrix(Q, dtype=np.float32)

    def mix(self, pi_star: np.ndarray) -> np.ndarray:
        """``A @ pi_star``."""
        return np.asarray(self._A32 @ pi_star.astype(np.float32), dtype=float)

    @property
    def alpha(self) -> np.ndarray:
        return self.S * self.Z

    @property
    def K(self) -> int:
        return self.D.shape[1]

    @property
    def N(self) -> int:
        return self.S.shape[1]

    @property
    def active_count(self) -> int:
        return int(self.Z.any(axis=1).sum())


@dataclass
class GibbsState:
    groups: list[GroupState]
    hyper: HyperParams
    seed: int = 0
    sweeps: int = 0

    @property
    def gamma_eps(self) -> float:
        """Patch-count weighted mean noise precision over the groups."""
        n = np.array([g.N for g in self.groups], dtype=float)
        return float(np.dot(n, [g.gamma_eps for g in self.groups]) / n.sum())

    @property
    def active_atoms(self) -> int:
        return sum(g.active_count for g in self.groups)

    def mean_gini(self) -> float:
        from .metrics import mean_code_gini
        n = np.array([g.N for g in self.groups], dtype=float)
        vals = [mean_code_gini(g.alpha) for g in self.groups]
        return float(np.dot(n, vals) / n.sum())

    def reseed(self, *key: int) -> None:
        """Give every group a fresh stream derived from ``(seed, *key, group)``."""
        for j, g in enumerate(self.groups):
            g.rng = np.random.default_rng([self.seed, *key, j])


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _clip01(p):
    return np.clip(p, PROB_CLIP, 1.0 - PROB_CLIP)


def beta_draw(rng: np.random.Generator, a, b, delta: float) -> np.ndarray:
    """Beta draw that treats a zero parameter as the limiting point mass."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    out = np.empty(np.broadcast(a, b).shape)
    a, b = np.broadcast_arrays(a, b)
    ok = (a > 0) & (b > 0)
    out[ok] = rng.beta(a[ok], b[ok])
    out[(a > 0) & (b <= 0)] = 1.0
    out[(a <= 0)] = 0.0
    return np.clip(out, delta, 1.0 - delta)


def gamma_draw(rng: np.random.Generator, shape, rate):
    return rng.gamma(shape, 1.0 / np.asarray(rate, dtype=float))


def _neighbor_counts(g: GroupState) -> tuple[np.ndarray, np.ndarray]:
    """Active counts ``sum_{i in Q_l} z_ik`` (``N x K``) and sizes ``|Q_l|``."""
    if g.Q is None:
        counts = np.broadcast_to(g.Z.sum(axis=1, dtype=float), (g.N, g.K))
        sizes = np.full(g.N, float(g.N))
        return counts, sizes
    counts = np.zeros((g.N, g.K))
    used = np.flatnonzero(g.Z.any(axis=1))
    if used.size:
        counts[:, used] = g._Q32 @ g.Z[used].T.astype(np.float32)
    sizes = np.diff(g.Q.indptr).astype(float)
    return counts, sizes


# --------------------------------------------------------------------------
# initialisation
# --------------------------------------------------------------------------

def init_group(N: int, P: int, K: int, A: sp.csr_matrix, Q: sp.csr_matrix | None,
               hyper: HyperParams, rng: np.random.Generator) -> GroupState:
    """Prior draw of one group's state."""
    D = rng.normal(0.0, 1.0 / math.sqrt(P), size=(P, K))
    eta = beta_draw(rng, np.full(K, hyper.c0 * hyper.eta0),
                    np.full(K, hyper.c0 * (1 - hyper.eta0)), hyper.eta_delta)
    pi_star = _clip01(beta_draw(rng, np.broadcast_to(hyper.c1 * eta, (N, K)),
                                np.broadcast_to(hyper.c1 * (1 - eta), (N, K)), hyper.eta_delta))
    pi = np.asarray(A @ pi_star, dtype=float)
    gamma_eps = float(gamma_draw(rng, hyper.g0, hyper.h0))
    gamma_s = gamma_draw(rng, np.full(K, hyper.e0), np.full(K, hyper.f0))
    S = rng.normal(size=(K, N)) / np.sqrt(gamma_s)[:, None]
    Z = rng.random((K, N)) < pi.T
    return GroupState(D, S, Z, pi_star, pi, eta, gamma_s, gamma_eps, rng, A, Q)


def init_state(grouping: PatchGrouping, patch_len: int, dependence: DependenceMatrix,
               K: int = 128, hyper: HyperParams | None = None, seed: int = 0,
               frame: int = 1) -> GibbsState:
    """Cold start of every group from the hierarchical prior."""
    if K < 1:
        raise ValueError("K must be >= 1")
    hyper = HyperParams() if hyper is None else hyper
    groups = []
    for j, m in enumerate(grouping.groups()):
        rng = np.random.default_rng([seed, frame, j])
        Q = None if dependence.is_identity else dependence.graph.patterns[j]
        groups.append(init_group(m.size, patch_len, K, dependence.blocks[j], Q, hyper, rng))
    return GibbsState(groups, hyper, seed)


def set_dependence(state: GibbsState, dependence: DependenceMatrix) -> None:
    """Swap in a rebuilt ``A`` and refresh the per-patch probabilities."""
    for j, g in enumerate(state.groups):
        g.set_dependence(dependence.blocks[j],
                         None if dependence.is_identity else dependence.graph.patterns[j])
        g.pi = g.mix(g.pi_star)


# --------------------------------------------------------------------------
# conditionals
# --------------------------------------------------------------------------

def activation_log_odds(pi, dtd, dtr, gamma_s, gamma_eps):
    """``log p(z=1 | .) - log p(z=0 | .)`` with the weight marginalised out."""
    with np.errstate(divide="ignore"):
        prior = np.log(pi) - np.log1p(-pi)
    return (prior - 0.5 * np.log1p(gamma_eps / gamma_s * dtd)
            + 0.5 * gamma_eps * dtr ** 2 / (gamma_s / gamma_eps + dtd))


def _sigmoid(x):
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def _codes_numpy(D, S, Z, R, logit_pi, gamma_s, ge, U, G):
    alpha = S * Z
    for k in range(D.shape[1]):
        d = D[:, k]
        dtd = float(d @ d)
        a_old = alpha[k]
        dtr = d @ R + dtd * a_old
        gs = gamma_s[k]
        lo = (logit_pi[:, k] - 0.5 * math.log1p(ge / gs * dtd)
              + 0.5 * ge * dtr ** 2 / (gs / ge + dtd))
        z = U[k] < _sigmoid(lo)
        prec = gs + ge * dtd * z
        s = np.where(z, ge * dtr / prec, 0.0) + G[k] / np.sqrt(prec)
        a_new = s * z
        R -= np.outer(d, a_new - a_old)
        Z[k] = z
        S[k] = s
        alpha[k] = a_new


if njit is not None:
    @njit(cache=True)
    def _codes_jit(D, S, Z, RT, logit_pi, gamma_s, ge, U, G):  # pragma: no cover - compiled
        P, K = D.shape
        N = S.shape[1]
        for k in range(K):
            dtd = 0.0
            for p in range(P):
                dtd += D[p, k] * D[p, k]
            gs = gamma_s[k]
            c0 = -0.5 * math.log1p(ge / gs * dtd)
            denom = gs / ge + dtd
            for i in range(N):
                a_old = S[k, i] if Z[k, i] else 0.0
                dtr = dtd * a_old
                for p in range(P):
                    dtr += D[p, k] * RT[i, p]
                lo = logit_pi[i, k] + c0 + 0.5 * ge * dtr * dtr / denom
                if lo >= 0:
                    p1 = 1.0 / (1.0 + math.exp(-lo))
                else:
                    e = math.exp(lo)
                    p1 = e / (1.0 + e)
                z = U[k, i] < p1
                prec = gs + ge * dtd if z else gs
                s = G[k, i] / math.sqrt(prec)
                if z:
                    s += ge * dtr / prec
                a_new = s if z else 0.0
                delta = a_new - a_old
                if delta != 0.0:
                    for p in range(P):
                        RT[i, p] -= D[p, k] * delta
                Z[k, i] = z
                S[k, i] = s


def sample_codes(g: GroupState, X: np.ndarray, use_jit: bool | None = None) -> None:
    """Redraw ``Z`` and ``S`` atom by atom, patches in parallel.

    For atom ``k`` the residual without that atom is
    ``r = X - sum_{l != k} d_l alpha_l``; ``z`` is Bernoulli with the
    collapsed odds of :func:`activation_log_odds` and then
    ``s | z ~ N(z * gamma_eps * d'r / prec, 1 / prec)`` with
    ``prec = gamma_s + gamma_eps * z * d'd``. The uniforms and normals are
    drawn up front so the compiled and the NumPy paths consume the same
    stream.
    """
    K, N = g.S.shape
    U = g.rng.random((K, N))
    G = g.rng.standard_normal((K, N))
    pi = _clip01(g.pi)
    logit_pi = np.log(pi) - np.log1p(-pi)
    R = X - g.D @ (g.S * g.Z)
    use_jit = (njit is not None) if use_jit is None else use_jit
    if use_jit:
        RT = np.ascontiguousarray(R.T)
        _codes_jit(np.ascontiguousarray(g.D), g.S, g.Z, RT, np.ascontiguousarray(logit_pi),
                   np.asarray(g.gamma_s, dtype=float), float(g.gamma_eps), U, G)
    else:
        _codes_numpy(g.D, g.S, g.Z, R, logit_pi, g.gamma_s, g.gamma_eps, U, G)


def _spd_factor(M: np.ndarray):
    jitter = 0.0
    for _ in range(12):
        try:
            return sla.cho_factor(M + jitter * np.eye(M.shape[0]), lower=True)
        except np.linalg.LinAlgError:
            jitter = 1e-10 if jitter == 0.0 else jitter * 10
    raise np.linalg.LinAlgError("dictionary posterior precision is not positive definite")


def dictionary_posterior(X: np.ndarray, alpha: np.ndarray, gamma_eps: float):
    """Row mean (``P x K``) and Cholesky factor of the row precision."""
    P = X.shape[0]
    K = alpha.shape[0]
    prec = gamma_eps * (alpha @ alpha.T) + P * np.eye(K)
    cf = _spd_factor(prec)
    mean = sla.cho_solve(cf, gamma_eps * (alpha @ X.T)).T
    return mean, cf


def sample_dictionary(g: GroupState, X: np.ndarray, noise: bool = True) -> None:
    """``D = X a'(a a' + (P / gamma_eps) I)^-1 + E``, rows of ``E`` ~ N(0, (gamma_eps a a' + P I)^-1)."""
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite patches")
    mean, (c, lower) = dictionary_posterior(X, g.alpha, g.gamma_eps)
    if noise:
        W = g.rng.standard_normal((g.K, X.shape[0]))
        # c is lower-triangular with prec = c c'; c'^-1 w has covariance prec^-1
        E = sla.solve_triangular(c, W, lower=True, trans="T")
        mean += E.T
    g.D = mean


def sample_noise_precision(g: GroupState, X: np.ndarray, hyper: HyperParams) -> None:
    resid = X - g.D @ g.alpha
    shape = hyper.g0 + 0.5 * X.size
    rate = hyper.h0 + 0.5 * float(np.einsum("ij,ij->", resid, resid))
    g.gamma_eps = float(gamma_draw(g.rng, shape, rate))


def sample_weight_precisions(g: GroupState, hyper: HyperParams) -> None:
    shape = hyper.e0 + 0.5 * g.Z.sum(axis=1)
    rate = hyper.f0 + 0.5 * (g.Z * g.S ** 2).sum(axis=1)
    g.gamma_s = gamma_draw(g.rng, shape, rate)


def sample_pi_star(g: GroupState, hyper: HyperParams) -> None:
    """Beta update of ``pi_star`` from neighbourhood counts, then ``pi = A pi_star``."""
    counts, sizes = _neighbor_counts(g)
    a = hyper.c1 * g.eta[None, :] + counts
    b = hyper.c1 * (1.0 - g.eta)[None, :] + (sizes[:, None] - counts)
    g.pi_star = _clip01(g.rng.beta(a, b))
    g.pi = g.mix(g.pi_star)


def _trunc_exp(rng, rate, width, size):
    """Draw from ``rate * exp(-rate x)`` on ``[0, width]`` (``rate > 0``)."""
    u = rng.random(size)
    return -np.log1p(u * np.expm1(-rate * width)) / rate


def sample_eta(g: GroupState, hyper: HyperParams) -> None:
    """Slice-sample every ``eta_k`` given ``pi_star``.

    The target is proportional to
    ``eta^(a-1) (1-eta)^(b-1) sin(pi eta)^N exp(-rate * eta)`` with
    ``a = c0 eta0``, ``b = c0 (1 - eta0)``, ``N`` the number of ``pi_star`` rows
    and ``rate = -c1 sum_l logit(pi_star_lk)``. Three uniform auxiliaries cut
    out an interval on which ``eta`` is a truncated exponential.
    """
    rng = g.rng
    eta = g.eta
    K = eta.size
    N = g.pi_star.shape[0]
    ps = _clip01(g.pi_star)
    rate = -hyper.c1 * (np.log(ps) - np.log1p(-ps)).sum(axis=0)
    a = hyper.c0 * hyper.eta0
    b = hyper.c0 * (1.0 - hyper.eta0)
    lo = np.zeros(K)
    hi = np.ones(K)
    # u: eta'^(a-1) > u
    if a != 1.0:
        log_u = (a - 1.0) * np.log(eta) + np.log(rng.random(K))
        with np.errstate(over="ignore"):
            bound = np.exp(np.minimum(log_u / (a - 1.0), 700.0))
        if a > 1.0:
            lo = np.maximum(lo, bound)
        else:
            hi = np.minimum(hi, bound)
    # v: (1 - eta')^(b-1) > v
    if b != 1.0:
        log_v = (b - 1.0) * np.log1p(-eta) + np.log(rng.random(K))
        with np.errstate(over="ignore"):
            bound = 1.0 - np.exp(np.minimum(log_v / (b - 1.0), 700.0))
        if b > 1.0:
            hi = np.minimum(hi, bound)
        else:
            lo = np.maximum(lo, bound)
    # w: sin(pi eta')^N > w
    log_w = N * np.log(np.sin(np.pi * eta)) + np.log(rng.random(K))
    edge = np.arcsin(np.clip(np.exp(log_w / N), 0.0, 1.0)) / np.pi
    lo = np.maximum(lo, edge)
    hi = np.minimum(hi, 1.0 - edge)

    width = hi - lo
    ok = width > 0
    new = eta.copy()
    flat = ok & (np.abs(rate * width) < 1e-12)
    new[flat] = lo[flat] + width[flat] * rng.random(int(flat.sum()))
    pos = ok & ~flat & (rate > 0)
    new[pos] = lo[pos] + _trunc_exp(rng, rate[pos], width[pos], int(pos.sum()))
    neg = ok & ~flat & (rate < 0)
    new[neg] = hi[neg] - _trunc_exp(rng, -rate[neg], width[neg], int(neg.sum()))
    inside = ok & (new > 0) & (new < 1)
    g.eta_rejects += int(K - inside.sum())
    g.eta = np.where(inside, new, eta)


def prune_atoms(g: GroupState, after: int) -> None:
    """Redraw from the prior any atom unused for ``after`` consecutive sweeps."""
    used = g.Z.any(axis=1)
    g.idle = np.where(used, 0, g.idle + 1)
    stale = np.flatnonzero(g.idle >= after)
    if stale.size:
        P = g.D.shape[0]
        g.D[:, stale] = g.rng.normal(0.0, 1.0 / math.sqrt(P), size=(P, stale.size))
        g.idle[stale] = 0


def sweep_group(g: GroupState, X: np.ndarray, hyper: HyperParams) -> None:
    """One full conditional pass over a single group."""
    sample_codes(g, X)
    sample_dictionary(g, X)
    sample_noise_precision(g, X, hyper)
    sample_weight_precisions(g, hyper)
    sample_pi_star(g, hyper)
    sample_eta(g, hyper)
    prune_atoms(g, hyper.prune_after)


def gibbs_sweep(state: GibbsState, patches: np.ndarray, grouping: PatchGrouping,
                order=None) -> GibbsState:
    """Sweep every group once on the columns of ``patches`` (``P x n``)."""
    members = grouping.groups()
    order = range(len(members)) if order is None else order
    for j in order:
        sweep_group(state.groups[j], patches[:, members[j]], state.hyper)
    state.sweeps += 1
    return state


def group_residual(state: GibbsState, patches: np.ndarray, grouping: PatchGrouping) -> float:
    """Mean squared patch residual ``||P_i x - D alpha_i||^2`` over all patches."""
    total = 0.0
    for m, g in zip(grouping.groups(), state.groups):
        r = patches[:, m] - g.D @ g.alpha
        total += float(np.einsum("ij,ij->", r, r))
    return total / grouping.n


def code_patches(state: GibbsState, grouping: PatchGrouping) -> np.ndarray:
    P = state.groups[0].D.shape[0]
    out = np.zeros((P, grouping.n))
    for m, g in zip(grouping.groups(), state.groups):
        out[:, m] = g.D @ g.alpha
    return out


def code_image(state: GibbsState, grouping: PatchGrouping) -> np.ndarray:
    """``sum_i P_i^T D_g(i) alpha_i`` as an image (complex for stacked atoms)."""
    return assemble_patches(code_patches(state, grouping), grouping.n)


def weighted_code(state: GibbsState, grouping: PatchGrouping) -> tuple[np.ndarray, np.ndarray]:
    """Patch synthesis and pixel weights with each patch scaled by its group's ``gamma_eps``.

    Returns ``sum_i g_i P_i^T D alpha_i`` and the diagonal ``sum_i g_i P_i^T P_i``
    as a real image.
    """
    gcol = np.empty(grouping.n)
    for m, g in zip(grouping.groups(), state.groups):
        gcol[m] = g.gamma_eps
    synth = assemble_patches(code_patches(state, grouping) * gcol, grouping.n)
    P = state.groups[0].D.shape[0]
    weight = assemble_patches(np.broadcast_to(gcol, (P, grouping.n)), grouping.n).real
    return synth, weight


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

_ARRAYS = ("D", "S", "Z", "pi_star", "pi", "eta", "gamma_s", "idle")


def save_state(state: GibbsState, stem: str | Path) -> None:
    """Write ``stem.npz`` (arrays) and ``stem.json`` (manifest and rng states)."""
    stem = Path(stem)
    arrays = {}
    for j, g in enumerate(state.groups):
        for name in _ARRAYS:
            arrays[f"g{j}_{name}"] = getattr(g, name)
        A = g.A.tocsr()
        arrays[f"g{j}_A_data"], arrays[f"g{j}_A_indices"], arrays[f"g{j}_A_indptr"] = \
            A.data, A.indices, A.indptr
        if g.Q is not None:
            arrays[f"g{j}_Q_indices"], arrays[f"g{j}_Q_indptr"] = g.Q.indices, g.Q.indptr
    np.savez(stem.with_suffix(".npz"), **arrays)
    manifest = {
        "groups": len(state.groups),
        "K": state.groups[0].K,
        "atom_length": state.groups[0].D.shape[0],
        "sweep_count": state.sweeps,
        "seeds": {"master": state.seed},
        "hyper": asdict(state.hyper),
        "gamma_eps": [g.gamma_eps for g in state.groups],
        "eta_rejects": [g.eta_rejects for g in state.groups],
        "rng": [g.rng.bit_generator.state for g in state.groups],
    }
    stem.with_suffix(".json").write_text(json.dumps(manifest, indent=1))


def load_state(stem: str | Path) -> GibbsState:
    stem = Path(stem)
    manifest = json.loads(stem.with_suffix(".json").read_text())
    groups = []
    with np.load(stem.with_suffix(".npz")) as z:
        for j in range(manifest["groups"]):
            kw = {name: z[f"g{j}_{name}"] for name in _ARRAYS}
            N = kw["S"].shape[1]
            A = sp.csr_matrix((z[f"g{j}_A_data"], z[f"g{j}_A_indices"], z[f"g{j}_A_indptr"]),
                              shape=(N, N))
            Q = None
            if f"g{j}_Q_indices" in z:
                idx = z[f"g{j}_Q_indices"]
                Q = sp.csr_matrix((np.ones(idx.size), idx, z[f"g{j}_Q_indptr"]), shape=(N, N))
            rng = np.random.default_rng()
            rng.bit_generator.state = manifest["rng"][j]
            kw["Z"] = kw["Z"].astype(bool)
            groups.append(GroupState(gamma_eps=manifest["gamma_eps"][j], rng=rng, A=A, Q=Q,
                                     eta_rejects=manifest["eta_rejects"][j], **kw))
    return GibbsState(groups, HyperParams(**manifest["hyper"]), manifest["seeds"]["master"],
                      manifest["sweep_count"])
