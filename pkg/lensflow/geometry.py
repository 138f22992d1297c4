"""
Lens space kernels for L(p;q): deck action, Heegaard chart maps, their
fiber-reduced inverses, boundary gluing and C^2 <-> R^4 conversion.

Sphere points are float64 tensors of shape (..., 4) holding (w, x, y, z),
identified with (z1, z2) = (w + ix, y + iz). Torus points are (..., 3)
tensors (theta, x, y) on S^1 x D^2 together with a chart index 1 or 2.
"""
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch

from .errors import GeometryError

TWO_PI = 2.0 * math.pi
SQRT_HALF = math.sqrt(0.5)
DTYPE = torch.float64

UNIT_TOL = 1e-9
QUOTIENT_TOL = 1e-8
DISK_TOL = 1e-12

# below this radius the fiber angle phi is degenerate and reported as 0
CORE_RADIUS = 1e-12


# -------------------------
# Types
# -------------------------

@dataclass(frozen=True)
class LensSpace:
    p: int
    q: int
    r: int
    s: int

    def __post_init__(self):
        if self.p < 2 or not 1 <= self.q < self.p:
            raise GeometryError(f"need p >= 2 and 1 <= q < p, got ({self.p},{self.q})")
        if math.gcd(self.p, self.q) != 1:
            raise GeometryError(f"gcd({self.p},{self.q}) != 1")
        if (self.r * self.q) % self.p != 1 % self.p or not 0 <= self.r < self.p:
            raise GeometryError(f"r={self.r} is not q^-1 mod p")
        if self.det != 1:
            raise GeometryError(f"gluing matrix has det {self.det}")

    @property
    def gluing_matrix(self) -> Tuple[Tuple[int, int], Tuple[int, int]]:
        return ((self.r, self.p), (self.s, self.q))

    @property
    def det(self) -> int:
        return self.r * self.q - self.p * self.s

    def __str__(self) -> str:
        return f"L({self.p};{self.q})"


@dataclass(frozen=True)
class SpherePoint:
    """Checked wrapper around an R^4 tensor on S^3 (batched allowed)."""

    r4: torch.Tensor

    def __post_init__(self):
        norm = torch.linalg.vector_norm(self.r4, dim=-1)
        if not torch.all((norm - 1.0).abs() <= UNIT_TOL):
            raise GeometryError("point is not on S^3")

    @classmethod
    def from_c2(cls, c2) -> "SpherePoint":
        return cls(c2_to_r4(torch.as_tensor(c2, dtype=torch.complex128)))

    @property
    def c2(self) -> torch.Tensor:
        return r4_to_c2(self.r4)


@dataclass(frozen=True)
class TorusPoint:
    chart: int
    coords: torch.Tensor  # (..., 3): theta, x, y

    def __post_init__(self):
        _check_chart(self.chart)
        radius2 = self.coords[..., 1] ** 2 + self.coords[..., 2] ** 2
        if not torch.all(radius2 <= 1.0 + DISK_TOL):
            raise GeometryError("disk coordinates outside the closed unit disk")

    @property
    def theta(self) -> torch.Tensor:
        return self.coords[..., 0]


# -------------------------
# Helpers
# -------------------------

def _t(value) -> torch.Tensor:
    return torch.as_tensor(value, dtype=DTYPE)


def _check_chart(chart: int) -> None:
    if chart not in (1, 2):
        raise GeometryError(f"chart must be 1 or 2, got {chart}")


def wrap_angle(angle: torch.Tensor) -> torch.Tensor:
    """Floored modulus into [0, 2pi); guards the rounding case that lands on 2pi."""
    out = torch.remainder(angle, TWO_PI)
    return torch.where(out >= TWO_PI, out - TWO_PI, out)


def angle_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    d = wrap_angle(a - b)
    return torch.minimum(d, TWO_PI - d)


def _phases(z: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    return torch.atan2(z[..., 1], z[..., 0]), torch.atan2(z[..., 3], z[..., 2])


def _moduli2(z: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    return z[..., 0] ** 2 + z[..., 1] ** 2, z[..., 2] ** 2 + z[..., 3] ** 2


def _from_polar(m1, a1, m2, a2) -> torch.Tensor:
    return torch.stack(
        [m1 * torch.cos(a1), m1 * torch.sin(a1), m2 * torch.cos(a2), m2 * torch.sin(a2)],
        dim=-1,
    )


# -------------------------
# Construction and conversions
# -------------------------

def make_lens(p: int, q: int) -> LensSpace:
    p, q = int(p), int(q)
    if p < 2 or not 1 <= q < p:
        raise GeometryError(f"need p >= 2 and 1 <= q < p, got ({p},{q})")
    if math.gcd(p, q) != 1:
        raise GeometryError(f"gcd({p},{q}) != 1: the Z_{p} action is not free")
    r = pow(q, -1, p)
    s, rem = divmod(r * q - 1, p)
    if rem:
        raise GeometryError(f"(rq - 1)/p is not an integer for ({p},{q})")
    return LensSpace(p=p, q=q, r=r, s=s)


def c2_to_r4(c2: torch.Tensor) -> torch.Tensor:
    return torch.stack([c2[..., 0].real, c2[..., 0].imag, c2[..., 1].real, c2[..., 1].imag], dim=-1)


def r4_to_c2(r4: torch.Tensor) -> torch.Tensor:
    return torch.stack([torch.complex(r4[..., 0], r4[..., 1]), torch.complex(r4[..., 2], r4[..., 3])], dim=-1)


# -------------------------
# Deck group
# -------------------------

def deck_apply(lens: LensSpace, z: torch.Tensor, k: int = 1) -> torch.Tensor:
    """Apply the k-th power of (z1, z2) -> (e^{2pi i/p} z1, e^{2pi i q/p} z2)."""
    k = int(k) % lens.p
    if k == 0:
        return z.clone()
    a1 = TWO_PI * k / lens.p
    a2 = TWO_PI * ((k * lens.q) % lens.p) / lens.p
    c1, s1, c2, s2 = math.cos(a1), math.sin(a1), math.cos(a2), math.sin(a2)
    w, x, y, zz = z.unbind(-1)
    return torch.stack([w * c1 - x * s1, w * s1 + x * c1, y * c2 - zz * s2, y * s2 + zz * c2], dim=-1)


def deck_orbit(lens: LensSpace, z: torch.Tensor) -> torch.Tensor:
    """All p deck images, stacked on a new leading axis."""
    return torch.stack([deck_apply(lens, z, k) for k in range(lens.p)], dim=0)


def quotient_equal(lens: LensSpace, a: torch.Tensor, b: torch.Tensor, tol: float = QUOTIENT_TOL) -> torch.Tensor:
    dist = torch.linalg.vector_norm(deck_orbit(lens, a) - b, dim=-1)
    return dist.min(dim=0).values <= tol


def fundamental_reduce(lens: LensSpace, chart: int, z: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Deck power k (per point) moving z into the fundamental domain of the chart,
    i.e. arg z2 in [0, 2pi/p) for chart 1 and arg z1 in [0, 2pi/p) for chart 2.
    Returns (k, deck_apply(z, k)).
    """
    _check_chart(chart)
    a1, a2 = _phases(z)
    a = wrap_angle(a2 if chart == 1 else a1)
    m = torch.floor(a * lens.p / TWO_PI).to(torch.int64).clamp(0, lens.p - 1)
    k = torch.remainder(-m * (lens.r if chart == 1 else 1), lens.p)
    orbit = deck_orbit(lens, z)
    index = k.unsqueeze(0).unsqueeze(-1).expand((1,) + tuple(z.shape))
    return k, torch.gather(orbit, 0, index).squeeze(0)


# -------------------------
# Heegaard charts
# -------------------------

def chart_lift(lens: LensSpace, chart: int, theta, rho, phi) -> torch.Tensor:
    """
    f_1 / f_2 with the brackets removed: a representative on S^3 of the
    image of (theta, rho e^{i phi}) in V_1 / V_2.
    """
    _check_chart(chart)
    theta, rho, phi = _t(theta), _t(rho), _t(phi)
    if torch.any((rho < 0.0) | (rho > 1.0)):
        raise GeometryError("rho must lie in [0, 1]")
    small = SQRT_HALF * rho
    big = torch.sqrt(1.0 - 0.5 * rho ** 2)
    if chart == 1:
        return _from_polar(small, phi + lens.r * theta / lens.p, big, theta / lens.p)
    return _from_polar(big, theta / lens.p, small, -phi + lens.q * theta / lens.p)


def _chart_inverse(lens: LensSpace, chart: int, z: torch.Tensor):
    a1, a2 = _phases(z)
    mod1, mod2 = _moduli2(z)
    if chart == 1:
        rho = torch.sqrt(2.0 * mod1).clamp(max=1.0)
        theta = wrap_angle(lens.p * wrap_angle(a2))
        phi = wrap_angle(a1 - lens.r * wrap_angle(a2))
    else:
        rho = torch.sqrt(2.0 * mod2).clamp(max=1.0)
        theta = wrap_angle(lens.p * wrap_angle(a1))
        phi = wrap_angle(lens.q * wrap_angle(a1) - a2)
    phi = torch.where(rho <= CORE_RADIUS, torch.zeros_like(phi), phi)
    return theta, rho, phi


def chart_inverse(lens: LensSpace, chart: int, z: torch.Tensor):
    """
    h_i: the chart coordinates (theta, rho, phi) of the fiber through z.
    The formulas are deck invariant, so no explicit reduction is needed:
    chart 1 uses theta = p arg z2 and phi = arg z1 - r arg z2,
    chart 2 uses theta = p arg z1 and phi = q arg z1 - arg z2.
    """
    _check_chart(chart)
    mod1, mod2 = _moduli2(z)
    inside = (mod1 if chart == 1 else mod2) <= 0.5 + UNIT_TOL
    if not torch.all(inside):
        raise GeometryError(f"point outside the closed region U_{chart}")
    return _chart_inverse(lens, chart, z)


def boundary_glue(lens: LensSpace, theta, phi):
    """The gluing matrix A applied to (theta, phi) on the boundary torus, mod 2pi."""
    theta, phi = _t(theta), _t(phi)
    return (
        wrap_angle(lens.r * theta + lens.p * phi),
        wrap_angle(lens.s * theta + lens.q * phi),
    )


def torus_to_sphere(lens: LensSpace, chart: int, coords: torch.Tensor) -> torch.Tensor:
    """
    chart_lift after converting (x, y) to polar. Written with rho e^{i phi} = x + iy
    so it stays smooth at the core circle, where it agrees with phi := 0.
    """
    point = TorusPoint(chart, coords)
    theta, x, y = point.theta, point.coords[..., 1], point.coords[..., 2]
    big = torch.sqrt((1.0 - 0.5 * (x ** 2 + y ** 2)).clamp(min=0.0))
    base = theta / lens.p
    if chart == 1:
        turn = lens.r * base
        c, s = torch.cos(turn), torch.sin(turn)
        return torch.stack(
            [
                SQRT_HALF * (x * c - y * s),
                SQRT_HALF * (x * s + y * c),
                big * torch.cos(base),
                big * torch.sin(base),
            ],
            dim=-1,
        )
    turn = lens.q * base
    c, s = torch.cos(turn), torch.sin(turn)
    return torch.stack(
        [
            big * torch.cos(base),
            big * torch.sin(base),
            SQRT_HALF * (x * c + y * s),
            SQRT_HALF * (x * s - y * c),
        ],
        dim=-1,
    )


def which_chart(z: torch.Tensor) -> torch.Tensor:
    mod1, _ = _moduli2(z)
    return torch.where(mod1 <= 0.5, 1, 2)


def sphere_to_torus(lens: LensSpace, z: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Global h_1 u h_2: chart labels and (theta, x, y) coordinates."""
    z = SpherePoint(z).r4
    charts = which_chart(z)
    coords = torch.empty(z.shape[:-1] + (3,), dtype=DTYPE)
    for chart in (1, 2):
        mask = charts == chart
        theta, rho, phi = _chart_inverse(lens, chart, z[mask])
        coords[mask] = torch.stack([theta, rho * torch.cos(phi), rho * torch.sin(phi)], dim=-1)
    return charts, coords


# -------------------------
# Uniform sampling
# -------------------------

def uniform_sphere(n: int, rng: Optional[np.random.Generator] = None) -> torch.Tensor:
    rng = np.random.default_rng() if rng is None else rng
    u = rng.standard_normal(size=(n, 4))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    return torch.from_numpy(u)


def uniform_torus(n: int, rng: Optional[np.random.Generator] = None) -> torch.Tensor:
    """theta uniform on [0, 2pi), (x, y) uniform on the disk (sqrt-radius polar)."""
    rng = np.random.default_rng() if rng is None else rng
    theta = rng.uniform(0.0, TWO_PI, size=n)
    radius = np.sqrt(rng.uniform(0.0, 1.0, size=n))
    angle = rng.uniform(0.0, TWO_PI, size=n)
    return torch.from_numpy(np.stack([theta, radius * np.cos(angle), radius * np.sin(angle)], axis=1))
