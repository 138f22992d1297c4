"""
Post-training metrics on T1 u_A T2: local and global KL, the mixture
decomposition, model sampling, top-percentile filtering and mode counts.
"""
import logging
import math
from dataclasses import asdict, dataclass, field
from functools import partial
from typing import Dict, Iterator, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch

from .densities import PushforwardDensity, global_target_logpdf
from .errors import NonFiniteError
from .flow import KL_FLOOR_SIGMAS, FlowTransform, PriorParams, kl_terms, prior_sample
from .geometry import TWO_PI
from .utils.csv_files import write_csv

logger = logging.getLogger(__name__)

SAMPLE_HEADERS = ["chart", "theta", "x", "y", "log_q", "log_model"]
MAX_NONFINITE_FRACTION = 0.01


class KLEstimate(NamedTuple):
    value: float
    stderr: float
    n: int
    excluded: int = 0

    @property
    def below_zero(self) -> bool:
        """True when the estimate is negative beyond its MC error, which a normalized model cannot give."""
        return self.value < -KL_FLOOR_SIGMAS * self.stderr


def _estimate(summands: torch.Tensor) -> KLEstimate:
    finite = torch.isfinite(summands)
    excluded = int((~finite).sum())
    n = summands.numel()
    if excluded > MAX_NONFINITE_FRACTION * n:
        raise NonFiniteError(f"{excluded} of {n} KL summands are non-finite")
    vals = summands[finite].numpy()
    return KLEstimate(float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(vals.size)), n, excluded)


# -------------------------
# KL estimates
# -------------------------

def local_kl(flow: FlowTransform, prior: PriorParams, target_logpdf, n: int, rng: np.random.Generator) -> KLEstimate:
    """MC estimate of KL(F_* mu_Z | q_i) over n fresh prior samples."""
    if n < 1000:
        raise ValueError(f"need at least 1000 samples, got {n}")
    with torch.no_grad():
        return _estimate(kl_terms(flow, prior, target_logpdf, prior_sample(prior, n, rng)).summands)


def kl_decomposition(kl1: float, kl2: float, w: float) -> float:
    """(1 - w) KL_1 + w KL_2, w the T2 mixture weight."""
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"mixture weight must lie in [0, 1], got {w}")
    return (1.0 - w) * kl1 + w * kl2


@dataclass
class SampleSet:
    """Columnar model samples; iterate for LabeledSample rows."""

    chart: np.ndarray
    theta: np.ndarray
    x: np.ndarray
    y: np.ndarray
    log_q: np.ndarray
    log_model: np.ndarray

    def __len__(self) -> int:
        return int(self.chart.shape[0])

    def __iter__(self) -> Iterator["LabeledSample"]:
        for row in zip(self.chart, self.theta, self.x, self.y, self.log_q, self.log_model):
            yield LabeledSample(int(row[0]), *(float(v) for v in row[1:]))

    def select(self, mask: np.ndarray) -> "SampleSet":
        return SampleSet(**{k: v[mask] for k, v in asdict(self).items()})

    def coords(self) -> np.ndarray:
        return np.column_stack([self.theta, self.x, self.y])


class LabeledSample(NamedTuple):
    chart: int
    theta: float
    x: float
    y: float
    log_q: float
    log_model: float


def _bernoulli_charts(w: float, n: int, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"mixture weight must lie in [0, 1], got {w}")
    return np.where(rng.random(n) < w, 2, 1)


def _mixture_draw(flows, priors, pf: PushforwardDensity, w: float, n: int, rng):
    """
    Chart labels by Bernoulli(w), then each chart's prior through its flow.
    Returns (charts, coords, log p_Xa, log q) in sampling order.
    """
    charts = _bernoulli_charts(w, n, rng)
    coords = np.empty((n, 3))
    log_mix = np.empty(n)
    log_q = np.empty(n)
    for chart in (1, 2):
        idx = np.flatnonzero(charts == chart)
        if idx.size == 0:
            continue
        prior = priors[chart - 1]
        with torch.no_grad():
            terms = kl_terms(flows[chart - 1], prior, partial(global_target_logpdf, pf, chart), prior_sample(prior, idx.size, rng))
        weight = w if chart == 2 else 1.0 - w
        coords[idx] = terms.out.numpy()
        log_mix[idx] = math.log(weight) + terms.log_model.numpy()
        log_q[idx] = terms.log_q.numpy()
    return charts, coords, log_mix, log_q


def global_kl(
    flows: Sequence[FlowTransform],
    priors: Sequence[PriorParams],
    pf: PushforwardDensity,
    n: int,
    rng: np.random.Generator,
    w: Optional[float] = None,
) -> KLEstimate:
    """
    KL(X_a | X) by sampling the mixture directly: summands are
    log p_{X_a}(z) - log q(F(z)) with the chart weights kept on both sides.
    """
    w = pf.normalizers.weight if w is None else w
    _, _, log_mix, log_q = _mixture_draw(flows, priors, pf, w, n, rng)
    return _estimate(torch.from_numpy(log_mix - log_q))


def sample_model(
    flows: Sequence[FlowTransform],
    priors: Sequence[PriorParams],
    pf: PushforwardDensity,
    n: int,
    rng: np.random.Generator,
    w: Optional[float] = None,
) -> SampleSet:
    """
    Samples of the learned distribution. log_q is the global target
    log-density at each point; log_model is log p_Z - log|det J| (sample space).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    w = pf.normalizers.weight if w is None else w
    charts, coords, log_mix, log_q = _mixture_draw(flows, priors, pf, w, n, rng)
    log_model = log_mix - np.log(np.where(charts == 2, w, 1.0 - w))
    return SampleSet(charts, coords[:, 0], coords[:, 1], coords[:, 2], log_q, log_model)


# -------------------------
# Top percentile and modes
# -------------------------

def top_percentile_filter(samples: SampleSet, keep_fraction: float = 0.01, per_chart: bool = True) -> SampleSet:
    """Keep the top ceil(keep_fraction * n) log_q values (per chart by default); ties are kept."""
    if len(samples) == 0:
        raise ValueError("cannot filter an empty sample set")
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must lie in (0, 1], got {keep_fraction}")
    groups = [samples.chart == c for c in (1, 2)] if per_chart else [np.ones(len(samples), dtype=bool)]
    keep = np.zeros(len(samples), dtype=bool)
    for group in groups:
        values = samples.log_q[group]
        if values.size == 0:
            continue
        k = math.ceil(keep_fraction * values.size)
        threshold = np.partition(values, values.size - k)[values.size - k]
        keep |= group & (samples.log_q >= threshold)
    return samples.select(keep)


def torus_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Product metric: arc distance in theta combined with Euclidean disk distance."""
    dtheta = np.mod(a[..., 0] - b[..., 0], TWO_PI)
    dtheta = np.minimum(dtheta, TWO_PI - dtheta)
    return np.sqrt(dtheta ** 2 + (a[..., 1] - b[..., 1]) ** 2 + (a[..., 2] - b[..., 2]) ** 2)


def _leader_cluster_sizes(points: np.ndarray, radius: float) -> list:
    leaders = np.empty((0, 3))
    sizes = []
    for point in points:
        if leaders.shape[0]:
            dist = torus_distance(leaders, point)
            nearest = int(np.argmin(dist))
            if dist[nearest] <= radius:
                sizes[nearest] += 1
                continue
        leaders = np.vstack([leaders, point])
        sizes.append(1)
    return sizes


def count_modes(samples: SampleSet, radius: float = 0.4, min_count: int = 20) -> Dict[int, int]:
    """
    Greedy leader clustering per chart. Points are visited by descending log_q
    (ties broken by coordinates) so the result does not depend on input order.
    """
    if radius <= 0:
        raise ValueError("radius must be > 0")
    counts = {}
    for chart in (1, 2):
        part = samples.select(samples.chart == chart)
        order = np.lexsort((part.y, part.x, part.theta, -part.log_q))
        sizes = _leader_cluster_sizes(part.coords()[order], radius)
        counts[chart] = sum(1 for s in sizes if s >= min_count)
    return counts


def mode_count_stability(samples: SampleSet, radii=(0.25, 0.4, 0.6), min_count: int = 20) -> Dict[float, Dict[int, int]]:
    return {r: count_modes(samples, r, min_count) for r in radii}


# -------------------------
# Reports and files
# -------------------------

@dataclass
class MetricsReport:
    experiment: str
    lens: Tuple[int, int]
    seed: int
    kl_T1: KLEstimate
    kl_T2: KLEstimate
    kl_global: KLEstimate
    kl_decomposed: float
    I1: float
    I2: float
    w: float
    initial_kl: Tuple[float, float]
    mode_counts: Dict[int, int]
    mode_stability: Dict[float, Dict[int, int]]
    sample_sizes: Dict[str, int] = field(default_factory=dict)
    below_zero: Tuple[str, ...] = ()

    def __post_init__(self):
        for est in (self.kl_T1, self.kl_T2, self.kl_global):
            if not math.isfinite(est.value):
                raise NonFiniteError("metrics report holds a non-finite KL")
        if not 0.0 <= self.w <= 1.0:
            raise ValueError(f"mixture weight {self.w} outside [0, 1]")
        rows = {"kl_T1": self.kl_T1, "kl_T2": self.kl_T2, "kl_global": self.kl_global}
        self.below_zero = tuple(name for name, est in rows.items() if est.below_zero)
        for name in self.below_zero:
            est = rows[name]
            logger.warning("%s seed %d: %s = %.4f +- %.4f is below zero", self.experiment, self.seed, name, est.value, est.stderr)

    def to_dict(self) -> dict:
        out = asdict(self)
        for key in ("kl_T1", "kl_T2", "kl_global"):
            out[key] = getattr(self, key)._asdict()
        out["lens"] = list(self.lens)
        out["mode_counts"] = {f"T{c}": n for c, n in self.mode_counts.items()}
        out["mode_stability"] = {
            repr(r): {f"T{c}": n for c, n in counts.items()} for r, counts in self.mode_stability.items()
        }
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricsReport":
        return cls(
            experiment=doc["experiment"],
            lens=tuple(doc["lens"]),
            seed=int(doc["seed"]),
            kl_T1=KLEstimate(**doc["kl_T1"]),
            kl_T2=KLEstimate(**doc["kl_T2"]),
            kl_global=KLEstimate(**doc["kl_global"]),
            kl_decomposed=float(doc["kl_decomposed"]),
            I1=float(doc["I1"]),
            I2=float(doc["I2"]),
            w=float(doc["w"]),
            initial_kl=tuple(doc["initial_kl"]),
            mode_counts={int(k[1:]): n for k, n in doc["mode_counts"].items()},
            mode_stability={
                float(r): {int(c[1:]): n for c, n in counts.items()} for r, counts in doc["mode_stability"].items()
            },
            sample_sizes=doc.get("sample_sizes", {}),
        )


def summarize_seeds(reports: Sequence[MetricsReport]) -> Dict[str, Tuple[float, float]]:
    """Mean and (population) std over seeds of each KL row."""
    rows = {
        "Flow-T1": [r.kl_T1.value for r in reports],
        "Flow-T2": [r.kl_T2.value for r in reports],
        "Flow-L(p;q)": [r.kl_global.value for r in reports],
    }
    return {k: (float(np.mean(v)), float(np.std(v))) for k, v in rows.items()}


def write_samples_csv(samples: SampleSet, path):
    return write_csv(
        path,
        samples,
        SAMPLE_HEADERS,
        lambda s: [s.chart, repr(s.theta), repr(s.x), repr(s.y), repr(s.log_q), repr(s.log_model)],
    )


def write_scatter_svg(samples: SampleSet, chart: int, path):
    """(theta, atan2(y, x)) per chart, coloured by log_q quantile: red low, yellow high."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from scipy.stats import rankdata

    matplotlib.rcParams["svg.hashsalt"] = "lensflow"
    part = samples.select(samples.chart == chart)
    fig, ax = plt.subplots(figsize=(5, 4))
    if len(part):
        quantile = rankdata(part.log_q) / len(part)
        sc = ax.scatter(part.theta, np.arctan2(part.y, part.x), c=quantile, cmap="autumn", s=4, vmin=0, vmax=1)
        fig.colorbar(sc, ax=ax, label="log q quantile")
    ax.set_xlim(0, TWO_PI)
    ax.set_ylim(-math.pi, math.pi)
    ax.set_xlabel("theta")
    ax.set_ylabel("disk angle")
    ax.set_title(f"T{chart}")
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path
