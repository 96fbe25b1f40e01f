"""Run configuration shared by the pipeline, the scripts and the CLI."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .admm import Weights
from .dictlearn import HyperParams


def recon_hyper() -> HyperParams:
    # eta0 < 1 keeps atom usage sparse; at eta0 = 1 every atom stays switched on
    return HyperParams(eta0=0.1)


@dataclass(frozen=True)
class RunConfig:
    patch_area: int = 16
    atoms: int = 128
    n_groups: int = 11
    radius: float = 13.0
    sigma: float | str = "median"
    tau: float = 0.01
    lambda_g: float = 10.0
    rho: float = 1000.0
    lam: float = 1e10
    noiseless: bool = False
    iters: int = 100
    tolerance: float = 1e-4
    burn_in: int = 20
    seed: int = 0
    kmeans_seed: int = 0
    rate_first: float = 0.4
    rate_next: float = 0.2
    reference: str = "prev"
    dependence: bool = True
    levels: int | None = None
    hyper: HyperParams = field(default_factory=recon_hyper)

    def __post_init__(self):
        problems = []
        if self.patch_area < 1 or int(self.patch_area ** 0.5) ** 2 != self.patch_area:
            problems.append(f"patch_area {self.patch_area} is not a perfect square")
        if self.atoms < 1 or self.n_groups < 1:
            problems.append("atoms and n_groups must be >= 1")
        if self.radius < 0:
            problems.append("radius must be >= 0")
        if not (self.sigma == "median" or (isinstance(self.sigma, (int, float)) and self.sigma > 0)):
            problems.append(f"sigma must be 'median' or positive, got {self.sigma!r}")
        if not 0 < self.tau < 1:
            problems.append("tau must lie in (0, 1)")
        if self.reference not in ("prev", "first"):
            problems.append(f"reference must be 'prev' or 'first', got {self.reference!r}")
        if self.iters < 1 or self.burn_in < 0:
            problems.append("iters must be >= 1 and burn_in >= 0")
        for r in (self.rate_first, self.rate_next):
            if not 0 < r <= 1:
                problems.append(f"sampling rate {r} outside (0, 1]")
        if problems:
            raise ValueError("; ".join(problems))
        Weights(self.lambda_g, self.rho, self.lam, self.noiseless)

    @property
    def weights(self) -> Weights:
        return Weights(self.lambda_g, self.rho, self.lam, self.noiseless)

    def ablation(self) -> "RunConfig":
        """One group and self-only dependence rows."""
        return replace(self, n_groups=1, dependence=False)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "hyper" in d:
            d["hyper"] = HyperParams(**d["hyper"])
        return cls(**d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))
