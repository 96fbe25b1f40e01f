"""Causal frame-by-frame reconstruction of a k-space sequence.

Frame 1 is reconstructed with global wavelet sparsity and then serves as
the guide image: the patch grouping, neighbour graph, kernel width and a
burned-in dictionary state are all derived from it once. Every later frame
takes its wavelet support and its initial dependence matrix from a
reference frame (the previous reconstruction by default) and warm-starts
the sampler from the state left by the frame before.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .admm import ReconContext, data_consistent, reconstruct_frame
from .config import RunConfig
from .dictlearn import GibbsState, code_image, gibbs_sweep, init_state, set_dependence
from .grouping import (DependenceMatrix, NeighborGraph, PatchGrouping, build_dependence,
                       kmeans_group, median_sigma)
from .linops import SupportSet, apply_fu_adjoint, estimate_support, extract_patches
from .metrics import psnr
from .sampling import KSpaceFrame

log = logging.getLogger(__name__)


@dataclass
class FrameModel:
    """Everything that is carried from one frame to the next."""

    grouping: PatchGrouping
    graph: NeighborGraph | None
    sigma: float | None
    state: GibbsState


@dataclass
class FrameResult:
    index: int
    image: np.ndarray
    diagnostics: list[dict]
    seconds: float
    psnr: float = float("nan")
    gini: float = float("nan")


@dataclass
class SequenceJob:
    frames: list[KSpaceFrame]
    config: RunConfig = field(default_factory=RunConfig)
    guide: np.ndarray | None = None
    truth: np.ndarray | None = None

    def __post_init__(self):
        if not self.frames:
            raise ValueError("no frames")
        idx = [f.frame_index for f in self.frames]
        if idx != list(range(1, len(idx) + 1)):
            raise ValueError(f"frame indices must run 1..T, got {idx}")
        sides = {f.mask.side for f in self.frames}
        if len(sides) != 1:
            raise ValueError(f"frames of different sizes {sorted(sides)}")
        if self.truth is not None and self.truth.shape[0] < len(self.frames):
            raise ValueError("fewer ground-truth frames than measured frames")

    @property
    def side(self) -> int:
        return self.frames[0].mask.side

    def truth_frame(self, t: int) -> np.ndarray | None:
        return None if self.truth is None else self.truth[t - 1]


def zero_filled(y: KSpaceFrame) -> np.ndarray:
    return apply_fu_adjoint(y.values, y.mask)


def _patches(image: np.ndarray, cfg: RunConfig) -> np.ndarray:
    return extract_patches(np.asarray(image, dtype=complex), cfg.patch_area)


def fit_model(image: np.ndarray, cfg: RunConfig, guide_frame: int = 1) -> FrameModel:
    """Group the patches of ``image``, build the dependence and burn in a fresh state."""
    X = _patches(image, cfg)
    side = image.shape[0]
    grouping = kmeans_group(X, cfg.n_groups, seed=cfg.kmeans_seed, guide_frame=guide_frame)
    if cfg.dependence:
        graph = NeighborGraph.build(grouping, side, cfg.radius)
        sigma = median_sigma(X, graph, seed=cfg.seed) if cfg.sigma == "median" else float(cfg.sigma)
        dep = build_dependence(X, X, graph, sigma)
    else:
        graph, sigma = None, None
        dep = DependenceMatrix.identity(grouping)
    state = init_state(grouping, X.shape[0], dep, K=cfg.atoms, hyper=cfg.hyper,
                       seed=cfg.seed, frame=guide_frame)
    for _ in range(cfg.burn_in):
        gibbs_sweep(state, X, grouping)
    return FrameModel(grouping, graph, sigma, state)


def _context(cfg: RunConfig, support: SupportSet) -> ReconContext:
    return ReconContext(support, cfg.weights, cfg.levels, cfg.iters, cfg.tolerance)


def bootstrap_first_frame(y1: KSpaceFrame, cfg: RunConfig, guide: np.ndarray | None = None,
                          truth: np.ndarray | None = None, callback=None
                          ) -> tuple[np.ndarray, FrameModel, list[dict]]:
    """Reconstruct frame 1 (unless ``guide`` is given) and build the model from it.

    Without a reference the whole wavelet grid is penalised. A provisional
    model fitted to the zero-filled image drives the frame-1 solve; the
    returned model is refitted to the reconstruction.
    """
    rows: list[dict] = []
    if guide is None:
        x0 = zero_filled(y1)
        provisional = fit_model(x0, cfg)
        ctx = _context(cfg, SupportSet.empty(y1.mask.side))
        x1, _, rows = reconstruct_frame(y1, provisional.grouping, provisional.state, ctx,
                                        cfg.patch_area, provisional.graph, provisional.sigma,
                                        truth=truth, callback=callback)
    else:
        x1 = np.asarray(guide, dtype=complex)
        if x1.shape != y1.mask.bits.shape:
            raise ValueError(f"guide shape {x1.shape} does not match the k-space grid")
    return x1, fit_model(x1, cfg), rows


def advance_frame(y: KSpaceFrame, model: FrameModel, reference: np.ndarray, cfg: RunConfig,
                  truth: np.ndarray | None = None, callback=None
                  ) -> tuple[np.ndarray, list[dict]]:
    """Reconstruct frame ``t >= 2`` given the reference image and the carried model."""
    support = estimate_support(reference, cfg.tau, cfg.levels)
    # the carried codes synthesise the previous frame; start from their patch
    # average made consistent with the new data
    x0 = data_consistent(code_image(model.state, model.grouping) / cfg.patch_area, y, cfg.weights)
    if model.graph is not None:
        dep = build_dependence(_patches(x0, cfg), _patches(reference, cfg),
                               model.graph, model.sigma)
        set_dependence(model.state, dep)
    model.state.reseed(y.frame_index)
    x, _, rows = reconstruct_frame(y, model.grouping, model.state, _context(cfg, support),
                                   cfg.patch_area, model.graph, model.sigma,
                                   truth=truth, x0=x0, callback=callback)
    return x, rows


def iter_sequence(job: SequenceJob, callback: Callable[[int, dict], None] | None = None
                  ) -> Iterator[FrameResult]:
    """Yield each frame's result as soon as it is reconstructed.

    Only the carried model and at most two images (first and previous
    frame) are kept between frames.
    """
    cfg = job.config

    def hook(t):
        return None if callback is None else (lambda row: callback(t, row))

    def finish(t, x, rows, t0):
        truth = job.truth_frame(t)
        return FrameResult(t, x, rows, time.perf_counter() - t0,
                           psnr(x, truth) if truth is not None else float("nan"),
                           model.state.mean_gini())

    t0 = time.perf_counter()
    y1 = job.frames[0]
    x, model, rows = bootstrap_first_frame(y1, cfg, job.guide, job.truth_frame(1), hook(1))
    first = prev = x
    yield finish(1, x, rows, t0)
    for y in job.frames[1:]:
        t0 = time.perf_counter()
        ref = prev if cfg.reference == "prev" else first
        x, rows = advance_frame(y, model, ref, cfg, job.truth_frame(y.frame_index),
                                hook(y.frame_index))
        prev = x
        yield finish(y.frame_index, x, rows, t0)


def reconstruct_sequence(job: SequenceJob, callback=None) -> list[FrameResult]:
    return list(iter_sequence(job, callback))


def ablation_baseline(job: SequenceJob, callback=None) -> list[FrameResult]:
    """Same pipeline with a single group and self-only dependence."""
    ab = SequenceJob(job.frames, job.config.ablation(), job.guide, job.truth)
    return reconstruct_sequence(ab, callback)
