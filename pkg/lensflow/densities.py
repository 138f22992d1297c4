"""
Target log-densities on S^3 and their pushforward to T1 u_A T2.

Every S^3 density is with respect to dvol_{S^3} (total volume 2 pi^2). The
pushforward is a density with respect to d(theta) dx dy on each torus.
"""
import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy import special

from .errors import GeometryError, NonFiniteError
from .geometry import (
    DTYPE,
    TWO_PI,
    UNIT_TOL,
    LensSpace,
    deck_apply,
    torus_to_sphere,
    uniform_sphere,
    uniform_torus,
)

logger = logging.getLogger(__name__)

LOG_4PI2 = math.log(4.0 * math.pi ** 2)
LOG_SPHERE_VOLUME = math.log(2.0 * math.pi ** 2)
LOG_HALF = math.log(0.5)
TORUS_VOLUME = TWO_PI * math.pi

KIND_VMF = "vmf-mixture"
KIND_BOLTZMANN = "boltzmann"
KIND_UNIFORM = "uniform"


def log_bessel_i(order: float, x: float) -> float:
    """log I_order(x) through the exponentially scaled ive, stable for large x."""
    if x < 0:
        raise ValueError(f"x must be >= 0, got {x}")
    return float(np.log(special.ive(order, x)) + x)


def _unit(vec, dim: int, what: str) -> torch.Tensor:
    t = torch.as_tensor(vec, dtype=DTYPE)
    if t.shape != (dim,) or abs(float(torch.linalg.vector_norm(t)) - 1.0) > UNIT_TOL:
        raise ValueError(f"{what} must be a unit vector in R^{dim}, got {list(np.asarray(vec))}")
    return t


# -------------------------
# Targets
# -------------------------

class TargetDensity(ABC):
    kind: str = ""

    def __init__(self, symmetric: bool = False):
        # Only declare_symmetric() sets this after a deck-invariance check.
        self.symmetric = bool(symmetric)

    @abstractmethod
    def logpdf(self, x: torch.Tensor) -> torch.Tensor:
        ...


class UniformSphere(TargetDensity):
    kind = KIND_UNIFORM

    def __init__(self):
        super().__init__(symmetric=True)

    def logpdf(self, x):
        return torch.full(x.shape[:-1], -LOG_SPHERE_VOLUME, dtype=DTYPE)


def uniform_sphere_density() -> UniformSphere:
    """Normalized uniform density 1/(2 pi^2); invariant under every deck action."""
    return UniformSphere()


def vmf_logpdf(x: torch.Tensor, mu, kappa: float) -> torch.Tensor:
    """log of kappa e^{kappa mu.x} / (4 pi^2 I_1(kappa)) on S^3."""
    if kappa <= 0:
        raise ValueError(f"kappa must be > 0, got {kappa}")
    mu = torch.as_tensor(mu, dtype=DTYPE)
    return math.log(kappa) - LOG_4PI2 - log_bessel_i(1, kappa) + kappa * (x @ mu)


@dataclass(frozen=True)
class VmfComponent:
    mu: Tuple[float, float, float, float]
    kappa: float
    weight: float

    def __post_init__(self):
        _unit(self.mu, 4, "vMF mean")
        if self.kappa <= 0:
            raise ValueError(f"kappa must be > 0, got {self.kappa}")
        if not 0.0 < self.weight <= 1.0:
            raise ValueError(f"weight must lie in (0, 1], got {self.weight}")


class VmfMixture(TargetDensity):
    kind = KIND_VMF

    def __init__(self, components: Sequence[VmfComponent], symmetric: bool = False):
        super().__init__(symmetric=symmetric)
        if not components:
            raise ValueError("mixture needs at least one component")
        total = math.fsum(c.weight for c in components)
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"mixture weights sum to {total!r}, not 1")
        self.components = tuple(components)
        self.mus = torch.tensor([c.mu for c in components], dtype=DTYPE)
        self.kappas = torch.tensor([c.kappa for c in components], dtype=DTYPE)
        self.log_offsets = torch.tensor(
            [math.log(c.weight) + math.log(c.kappa) - LOG_4PI2 - log_bessel_i(1, c.kappa) for c in components],
            dtype=DTYPE,
        )

    def logpdf(self, x):
        return mixture_logpdf(self, x)


def mixture_logpdf(target: VmfMixture, x: torch.Tensor) -> torch.Tensor:
    """log sum_k w_k C(kappa_k) exp(kappa_k <mu_k, x>) as one logsumexp over components."""
    return torch.logsumexp(target.log_offsets + target.kappas * (x @ target.mus.T), dim=-1)


# -------------------------
# Boltzmann density for a 6-fold rotor (benzene)
# -------------------------

def rotation_from_quaternion(q: torch.Tensor) -> torch.Tensor:
    """SO(3) image of a unit quaternion (w, x, y, z); batched over leading axes."""
    norm = torch.linalg.vector_norm(q, dim=-1)
    if not torch.all((norm - 1.0).abs() <= UNIT_TOL):
        raise GeometryError("quaternion is not unit length")
    w, x, y, z = q.unbind(-1)
    rows = [
        torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], dim=-1),
        torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], dim=-1),
        torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], dim=-1),
    ]
    return torch.stack(rows, dim=-2)


def quaternion_multiply(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dim=-1,
    )


def _normal_plane_basis(c: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    # standard basis vector least aligned with c, made orthogonal to it
    seed = torch.zeros(3, dtype=DTYPE)
    seed[int(torch.argmin(c.abs()))] = 1.0
    e2 = seed - (seed @ c) * c
    e2 = e2 / torch.linalg.vector_norm(e2)
    return e2, torch.linalg.cross(c, e2)


@dataclass(frozen=True)
class BoltzmannParams:
    kappa: float
    c: Tuple[float, float, float]
    V: float
    x0: Tuple[float, float, float]
    y0: Tuple[float, float, float]
    e2: Optional[Tuple[float, float, float]] = None
    e3: Optional[Tuple[float, float, float]] = None
    _basis: Tuple[torch.Tensor, ...] = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        c = _unit(self.c, 3, "c")
        x0 = _unit(self.x0, 3, "x0")
        y0 = _unit(self.y0, 3, "y0")
        if self.e2 is None or self.e3 is None:
            e2, e3 = _normal_plane_basis(c)
        else:
            e2, e3 = _unit(self.e2, 3, "e2"), _unit(self.e3, 3, "e3")
        frame = torch.stack([c, e2, e3])
        if not torch.allclose(frame @ frame.T, torch.eye(3, dtype=DTYPE), atol=UNIT_TOL) or torch.det(frame) < 0:
            raise ValueError("{c, e2, e3} must be a right-handed orthonormal frame")
        object.__setattr__(self, "_basis", (c, x0, y0, e2, e3))

    @property
    def vectors(self):
        """(c, x0, y0, e2, e3) as tensors."""
        return self._basis


class HinderedAngle(NamedTuple):
    phi: torch.Tensor
    degenerate: torch.Tensor


def hindered_angle(q: torch.Tensor, params: BoltzmannParams) -> HinderedAngle:
    """
    Rotor angle atan2(m3, m2) of R(q) y0 in the plane normal to c.
    Where the projection vanishes the angle is undefined; it is reported as 0
    and flagged in `degenerate`.
    """
    _, _, y0, e2, e3 = params.vectors
    y_rot = rotation_from_quaternion(q) @ y0
    m2, m3 = y_rot @ e2, y_rot @ e3
    degenerate = (m2.abs() < 1e-12) & (m3.abs() < 1e-12)
    phi = torch.where(degenerate, torch.zeros_like(m2), torch.atan2(m3, m2))
    return HinderedAngle(phi, degenerate)


def boltzmann_potential(q: torch.Tensor, params: BoltzmannParams) -> torch.Tensor:
    """U = -kappa (n.c)^2 + (n.c)^2 V (1 - cos 6 phi), n = R(q) x0."""
    c, x0, *_ = params.vectors
    align2 = (rotation_from_quaternion(q) @ x0 @ c) ** 2
    phi = hindered_angle(q, params).phi
    return -params.kappa * align2 + align2 * params.V * (1.0 - torch.cos(6.0 * phi))


def boltzmann_logpdf_unnorm(q: torch.Tensor, params: BoltzmannParams) -> torch.Tensor:
    # p is proportional to e^{+U}; -log C is left to the torus normalizers
    return boltzmann_potential(q, params)


class BoltzmannDensity(TargetDensity):
    kind = KIND_BOLTZMANN

    def __init__(self, params: BoltzmannParams, symmetric: bool = False):
        super().__init__(symmetric=symmetric)
        self.params = params

    def logpdf(self, x):
        return boltzmann_logpdf_unnorm(x, self.params)


# -------------------------
# Deck symmetry
# -------------------------

def check_deck_invariance(lens: LensSpace, target: TargetDensity, n: int = 10_000, rng=None) -> float:
    """Largest |log p(g^k x) - log p(x)| over k and n uniform points."""
    x = uniform_sphere(n, rng)
    base = target.logpdf(x)
    worst = 0.0
    for k in range(1, lens.p):
        worst = max(worst, float((target.logpdf(deck_apply(lens, x, k)) - base).abs().max()))
    return worst


def declare_symmetric(lens: LensSpace, target: TargetDensity, n: int = 10_000, rng=None, tol: float = 1e-9) -> TargetDensity:
    worst = check_deck_invariance(lens, target, n, rng)
    if worst > tol:
        raise ValueError(f"target is not invariant under the {lens} deck action (max deviation {worst:.3e})")
    target.symmetric = True
    return target


def symmetrize_logpdf(lens: LensSpace, target: TargetDensity, x: torch.Tensor) -> torch.Tensor:
    """log (1/p) sum_k p(g^k x); a symmetric target is returned unchanged."""
    if target.symmetric:
        return target.logpdf(x)
    stacked = torch.stack([target.logpdf(deck_apply(lens, x, k)) for k in range(lens.p)], dim=0)
    return torch.logsumexp(stacked, dim=0) - math.log(lens.p)


# -------------------------
# Pushforward on T1 u_A T2
# -------------------------

@dataclass(frozen=True)
class NormalizerEstimate:
    I1: float
    I2: float
    stderr1: float
    stderr2: float
    n_mc: int
    seed: int

    @property
    def total(self) -> float:
        return self.I1 + self.I2

    @property
    def weight(self) -> float:
        """Bernoulli parameter of the T2 component, I2 / (I1 + I2)."""
        return self.I2 / self.total

    def of(self, chart: int) -> float:
        return self.I1 if chart == 1 else self.I2


@dataclass
class PushforwardDensity:
    lens: LensSpace
    base: TargetDensity
    normalizers: Optional[NormalizerEstimate] = None


def pushforward_logpdf(pf: PushforwardDensity, chart: int, coords: torch.Tensor) -> torch.Tensor:
    """p_i = 1/2 p_sym o psi o h_i^{-1}; the 1/2 is the pulled-back volume element times p sheets."""
    return LOG_HALF + symmetrize_logpdf(pf.lens, pf.base, torus_to_sphere(pf.lens, chart, coords))


def _require_normalizers(pf: PushforwardDensity) -> NormalizerEstimate:
    if pf.normalizers is None:
        raise ValueError("normalizers have not been estimated for this pushforward")
    return pf.normalizers


def normalized_target_logpdf(pf: PushforwardDensity, chart: int, coords: torch.Tensor) -> torch.Tensor:
    """q_i = p_i / I_i, the training target on torus i."""
    norms = _require_normalizers(pf)
    return pushforward_logpdf(pf, chart, coords) - math.log(norms.of(chart))


def global_target_logpdf(pf: PushforwardDensity, chart: int, coords: torch.Tensor) -> torch.Tensor:
    """q on T1 u_A T2: I_i q_i / (I1 + I2), normalized even when the S^3 target is not."""
    norms = _require_normalizers(pf)
    return pushforward_logpdf(pf, chart, coords) - math.log(norms.total)


def estimate_normalizers(
    lens: LensSpace,
    target: TargetDensity,
    n: int = 200_000,
    seed: int = 0,
    chunk: int = 50_000,
) -> NormalizerEstimate:
    """
    I_i = vol(S^1 x D^2) * mean of p_i over n uniform torus points, per chart.
    Samples are drawn in fixed-size chunks, each from its own Philox stream, and
    reduced in chunk order so the result only depends on (n, seed).
    """
    if n < 10_000:
        raise ValueError(f"need at least 10^4 samples per torus, got {n}")
    pf = PushforwardDensity(lens, target)
    estimates = []
    chart_streams = np.random.SeedSequence(seed).spawn(2)
    for chart, stream in zip((1, 2), chart_streams):
        sizes = [min(chunk, n - start) for start in range(0, n, chunk)]
        values = []
        for size, child in zip(sizes, stream.spawn(len(sizes))):
            rng = np.random.Generator(np.random.Philox(child))
            with torch.no_grad():
                values.append(torch.exp(pushforward_logpdf(pf, chart, uniform_torus(size, rng))).numpy())
        values = np.concatenate(values)
        if not np.all(np.isfinite(values)):
            raise NonFiniteError(f"non-finite pushforward density on T{chart}")
        estimates.append((TORUS_VOLUME * values.mean(), TORUS_VOLUME * values.std(ddof=1) / math.sqrt(n)))
    (I1, se1), (I2, se2) = estimates
    if I1 + I2 <= 0:
        raise NonFiniteError("both torus normalizers vanished")
    logger.info("normalizers for %s: I1=%.5f (+-%.5f) I2=%.5f (+-%.5f)", lens, I1, se1, I2, se2)
    return NormalizerEstimate(I1=float(I1), I2=float(I2), stderr1=float(se1), stderr2=float(se2), n_mc=n, seed=seed)


def sample_vmf(mu, kappa: float, n: int, rng: Optional[np.random.Generator] = None) -> torch.Tensor:
    """
    Wood's rejection sampler for vMF on S^3: draw the cosine w to mu, then a
    uniform tangent direction.
    """
    rng = np.random.default_rng() if rng is None else rng
    mu = np.asarray(mu, dtype=float)
    dim = mu.shape[0] - 1
    b = dim / (np.sqrt(4.0 * kappa * kappa + dim * dim) + 2.0 * kappa)
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + dim * np.log(1.0 - x0 * x0)
    ws = np.empty(0)
    while ws.size < n:
        z = rng.beta(dim / 2.0, dim / 2.0, size=2 * n)
        w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
        u = rng.uniform(size=2 * n)
        ws = np.concatenate([ws, w[kappa * w + dim * np.log(1.0 - x0 * w) - c >= np.log(u)]])
    w = ws[:n, None]
    v = rng.standard_normal(size=(n, mu.shape[0]))
    v -= (v @ mu)[:, None] * mu
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return torch.from_numpy(np.sqrt(1.0 - w * w) * v + w * mu)
