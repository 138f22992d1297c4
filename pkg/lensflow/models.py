import math
from dataclasses import dataclass, replace
from typing import Optional, Tuple

from .densities import KIND_BOLTZMANN, KIND_VMF, BoltzmannParams, VmfComponent
from .flow import PriorParams


# -------------------------
# Training / evaluation knobs
# -------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3000
    batch: int = 6000
    lr: float = 1e-3
    beta0: float = 0.5
    T_anneal: int = 300
    seed: int = 0
    n_pairs: int = 6
    log_every: int = 100

    def __post_init__(self):
        if self.epochs < 1 or self.batch < 1:
            raise ValueError("epochs and batch must be >= 1")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.beta0 < 0 or self.T_anneal < 0:
            raise ValueError("beta0 and T_anneal must be >= 0")
        if self.n_pairs < 1:
            raise ValueError("n_pairs must be >= 1")


@dataclass(frozen=True)
class EvalConfig:
    n_samples: int = 100_000
    n_kl: int = 100_000
    keep_fraction: float = 0.01
    per_chart: bool = True
    mode_radius: float = 0.4
    mode_min_count: int = 20

    def __post_init__(self):
        if not 0.0 < self.keep_fraction <= 1.0:
            raise ValueError(f"keep_fraction must lie in (0, 1], got {self.keep_fraction}")
        if self.mode_radius <= 0:
            raise ValueError("mode_radius must be > 0")
        if self.n_kl < 1000:
            raise ValueError("n_kl must be >= 1000")


@dataclass(frozen=True)
class NormalizerConfig:
    n_mc: int = 200_000
    seed: int = 0


# -------------------------
# Experiment
# -------------------------

@dataclass(frozen=True)
class TargetSpec:
    kind: str
    components: Tuple[VmfComponent, ...] = ()
    boltzmann: Optional[BoltzmannParams] = None
    # request a deck-invariance check; the flag is only set if it passes
    symmetric: bool = False

    def __post_init__(self):
        if self.kind == KIND_VMF and not self.components:
            raise ValueError("vmf-mixture target needs components")
        if self.kind == KIND_VMF and abs(math.fsum(c.weight for c in self.components) - 1.0) > 1e-12:
            raise ValueError("vmf-mixture weights must sum to 1")
        if self.kind == KIND_BOLTZMANN and self.boltzmann is None:
            raise ValueError("boltzmann target needs parameters")
        if self.kind not in (KIND_VMF, KIND_BOLTZMANN):
            raise ValueError(f"unknown target kind {self.kind!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    lens: Tuple[int, int]
    target: TargetSpec
    priors: Tuple[PriorParams, PriorParams] = (PriorParams(), PriorParams())
    train: Tuple[TrainConfig, TrainConfig] = (TrainConfig(), TrainConfig())
    eval: EvalConfig = EvalConfig()
    normalizer: NormalizerConfig = NormalizerConfig()

    @property
    def seed(self) -> int:
        return self.train[0].seed

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, train=tuple(replace(t, seed=seed) for t in self.train))

    def prior(self, chart: int) -> PriorParams:
        return self.priors[chart - 1]

    def train_config(self, chart: int) -> TrainConfig:
        return self.train[chart - 1]
