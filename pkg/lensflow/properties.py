"""
Numerical property suites behind `verify`: geometry, densities and flow.
Each check is a plain function of a seeded Generator that returns
(passed, detail); run_suite times them and wraps the outcome.
"""
import logging
import math
import time
import zlib
from dataclasses import dataclass
from typing import Callable, Dict, List, Tuple

import numpy as np
import torch

from .densities import (
    TORUS_VOLUME,
    PushforwardDensity,
    boltzmann_potential,
    estimate_normalizers,
    pushforward_logpdf,
    quaternion_multiply,
    rotation_from_quaternion,
    symmetrize_logpdf,
    vmf_logpdf,
)
from .experiments import build_target, builtin_experiment
from .flow import (
    FIX_CIRCLE,
    FIX_DISK,
    CouplingLayer,
    FlowTransform,
    PriorParams,
    disk_to_plane,
    log_model_density,
    plane_to_disk,
    prior_logpdf,
    prior_sample,
)
from .geometry import (
    DTYPE,
    TWO_PI,
    LensSpace,
    angle_distance,
    boundary_glue,
    c2_to_r4,
    chart_inverse,
    chart_lift,
    deck_apply,
    make_lens,
    quotient_equal,
    r4_to_c2,
    torus_to_sphere,
    uniform_sphere,
    uniform_torus,
    wrap_angle,
)

logger = logging.getLogger(__name__)

LENSES = ((3, 2), (7, 3), (12, 1), (2, 1))
SUITES = ("geometry", "densities", "flow")

FD_STEP = 1e-6
FD_RTOL = 1e-4

Check = Callable[[np.random.Generator], Tuple[bool, str]]
_REGISTRY: Dict[str, List[Tuple[str, Check]]] = {name: [] for name in SUITES}


@dataclass(frozen=True)
class PropertyResult:
    suite: str
    name: str
    passed: bool
    detail: str
    seconds: float

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.suite}.{self.name} ({self.seconds:.2f}s) {self.detail}"


def prop(suite: str):
    def decorator(fn: Check) -> Check:
        _REGISTRY[suite].append((fn.__name__.removeprefix("check_"), fn))
        return fn
    return decorator


def _lenses() -> List[LensSpace]:
    return [make_lens(p, q) for p, q in LENSES]


def _close(a: float, b: float, rtol: float = FD_RTOL) -> bool:
    return abs(a - b) <= rtol * max(1.0, abs(a), abs(b))


def fd_jacobian(fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, h: float = FD_STEP) -> torch.Tensor:
    """Central-difference Jacobian of a batched map (n, d_in) -> (n, d_out), shape (n, d_out, d_in)."""
    cols = []
    for j in range(x.shape[-1]):
        step = torch.zeros_like(x)
        step[..., j] = h
        cols.append((fn(x + step) - fn(x - step)) / (2.0 * h))
    return torch.stack(cols, dim=-1)


def fd_logdet(fn, x: torch.Tensor, h: float = FD_STEP) -> torch.Tensor:
    return torch.linalg.slogdet(fd_jacobian(fn, x, h)).logabsdet


# -------------------------
# Geometry
# -------------------------

@prop("geometry")
def check_deck_norm_and_order(rng, n: int = 10_000):
    z = uniform_sphere(n, rng)
    for lens in _lenses():
        w = z
        for _ in range(lens.p):
            w = deck_apply(lens, w, 1)
            drift = float((torch.linalg.vector_norm(w, dim=-1) - 1.0).abs().max())
            if drift > 1e-12:
                return False, f"{lens}: norm drift {drift:.2e}"
        err = float((w - z).abs().max())
        if err > 1e-12:
            return False, f"{lens}: g^p differs from identity by {err:.2e}"
    return True, f"{len(LENSES)} lenses, {n} points"


@prop("geometry")
def check_deck_freeness(rng, n: int = 10_000):
    z = uniform_sphere(n, rng)
    for lens in _lenses():
        for k in range(1, lens.p):
            gap = float(torch.linalg.vector_norm(deck_apply(lens, z, k) - z, dim=-1).min())
            if gap <= 1e-3:
                return False, f"{lens}: g^{k} moves a point by only {gap:.2e}"
    return True, "no fixed points"


@prop("geometry")
def check_gluing_determinant(rng):
    for lens in _lenses():
        if lens.det != 1:
            return False, f"{lens}: det A = {lens.det}"
    return True, "det A = 1"


def _chart_coords(rng, n: int, rho_min: float = 1e-3):
    theta = torch.from_numpy(rng.uniform(0.0, TWO_PI, n))
    rho = torch.from_numpy(rng.uniform(rho_min, 1.0, n))
    phi = torch.from_numpy(rng.uniform(0.0, TWO_PI, n))
    return theta, rho, phi


@prop("geometry")
def check_chart_roundtrip(rng, n: int = 1_000):
    theta, rho, phi = _chart_coords(rng, n)
    for lens in _lenses():
        for chart in (1, 2):
            t2, r2, p2 = chart_inverse(lens, chart, chart_lift(lens, chart, theta, rho, phi))
            err = max(
                float(angle_distance(t2, theta).max()),
                float((r2 - rho).abs().max()),
                float(angle_distance(p2, phi).max()),
            )
            if err > 1e-9:
                return False, f"{lens} chart {chart}: roundtrip error {err:.2e}"
    return True, "chart_inverse o chart_lift = id"


@prop("geometry")
def check_fiber_invariance(rng, n: int = 1_000):
    theta, rho, phi = _chart_coords(rng, n)
    for lens in _lenses():
        for chart in (1, 2):
            z = chart_lift(lens, chart, theta, rho, phi)
            base = chart_inverse(lens, chart, z)
            for k in range(1, lens.p):
                moved = chart_inverse(lens, chart, deck_apply(lens, z, k))
                err = max(float(angle_distance(a, b).max()) if i != 1 else float((a - b).abs().max())
                          for i, (a, b) in enumerate(zip(moved, base)))
                if err > 1e-9:
                    return False, f"{lens} chart {chart}: g^{k} changes the chart coordinates by {err:.2e}"
    return True, "chart_inverse is constant on fibers"


def check_gluing(lens: LensSpace, rng, n: int = 1_000, psi: Callable = c2_to_r4) -> Tuple[bool, str]:
    """
    Boundary points of V_1 and their A-images on V_2 must be quotient equal.
    Lifts are passed through C^2 and back with `psi`; a wrong identification
    breaks the match.
    """
    theta = torch.from_numpy(rng.uniform(0.0, TWO_PI, n))
    phi = torch.from_numpy(rng.uniform(0.0, TWO_PI, n))
    one = torch.ones(n, dtype=DTYPE)
    glued_theta, glued_phi = boundary_glue(lens, theta, phi)
    a = psi(r4_to_c2(chart_lift(lens, 1, theta, one, phi)))
    b = psi(r4_to_c2(chart_lift(lens, 2, glued_theta, one, glued_phi)))
    matched = quotient_equal(lens, a, b)
    if not torch.all(matched):
        return False, f"{lens}: {int((~matched).sum())} of {n} boundary points not identified"
    return True, f"{lens}: boundary identified"


@prop("geometry")
def check_gluing_consistency(rng):
    for lens in _lenses():
        ok, detail = check_gluing(lens, rng)
        if not ok:
            return ok, detail
    return True, "f1(theta, phi) ~ f2(A(theta, phi)) on every lens"


@prop("geometry")
def check_volume_element(rng, n: int = 200):
    """sqrt det(J^T J) of the torus-to-sphere lift is the constant 1/(2p)."""
    z = uniform_torus(n, rng)
    z[:, 1:] *= 0.95
    for lens in _lenses():
        for chart in (1, 2):
            jac = fd_jacobian(lambda c: torus_to_sphere(lens, chart, c), z)
            vol = torch.sqrt(torch.linalg.det(jac.transpose(-1, -2) @ jac))
            err = float((vol * 2 * lens.p - 1.0).abs().max())
            if err > 1e-6:
                return False, f"{lens} chart {chart}: volume element off by {err:.2e} (relative)"
    return True, "dvol = dtheta dx dy / (2p)"


# -------------------------
# Densities
# -------------------------

def _sphere_mass(logpdf, mu, kappa: float, n: int, rng) -> float:
    """
    MC integral over S^3 in tangent-normal coordinates x = t mu + sqrt(1-t^2) v,
    dvol = sqrt(1-t^2) dt dS^2. The proposal for u = (1-t)/2 mixes Beta(1, 2 kappa)
    with a uniform so both the peak and the tail are covered.
    """
    mu = np.asarray(mu, dtype=float)
    beta = 2.0 * kappa
    from_peak = rng.random(n) < 0.5
    u = np.where(from_peak, rng.beta(1.0, beta, n), rng.random(n))
    g_u = 0.5 * beta * (1.0 - u) ** (beta - 1.0) + 0.5
    t = 1.0 - 2.0 * u
    v = rng.standard_normal((n, 4))
    v -= (v @ mu)[:, None] * mu
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    s = np.sqrt(np.clip(1.0 - t * t, 0.0, None))
    x = torch.from_numpy(t[:, None] * mu + s[:, None] * v)
    f = torch.exp(logpdf(x)).numpy()
    # dt = 2 du, vol(S^2) = 4 pi
    return float(4.0 * math.pi * np.mean(f * s * 2.0 / g_u))


def _experiment_targets():
    out = []
    for name in ("exp1", "exp2"):
        config = builtin_experiment(name)
        lens = make_lens(*config.lens)
        out.append((name, lens, build_target(config.target, lens)))
    return out


@prop("densities")
def check_vmf_normalization(rng, n: int = 1_000_000):
    worst = 0.0
    for name, _, target in _experiment_targets():
        for comp in target.components:
            mass = _sphere_mass(lambda x: vmf_logpdf(x, comp.mu, comp.kappa), comp.mu, comp.kappa, n, rng)
            worst = max(worst, abs(mass - 1.0))
            if abs(mass - 1.0) > 0.01:
                return False, f"{name}: component kappa={comp.kappa} integrates to {mass:.4f}"
    return True, f"all components integrate to 1 (max deviation {worst:.4f})"


@prop("densities")
def check_mixture_normalization(rng, n: int = 1_000_000, chunks: int = 4):
    target = _experiment_targets()[0][2]
    means = [float(torch.exp(target.logpdf(uniform_sphere(n, rng))).mean()) for _ in range(chunks)]
    mass = 2.0 * math.pi ** 2 * float(np.mean(means))
    return abs(mass - 1.0) <= 0.01, f"exp1 mixture integrates to {mass:.4f}"


@prop("densities")
def check_symmetrized_invariance(rng, n: int = 10_000):
    for name, lens, target in _experiment_targets():
        x = uniform_sphere(n, rng)
        base = symmetrize_logpdf(lens, target, x)
        for k in range(1, lens.p):
            err = float((symmetrize_logpdf(lens, target, deck_apply(lens, x, k)) - base).abs().max())
            if err > 1e-9:
                return False, f"{name}: symmetrized density moves by {err:.2e} under g^{k}"
    return True, "symmetrized targets are deck invariant"


def _boltzmann_setup():
    config = builtin_experiment("boltz")
    return make_lens(*config.lens), config.target.boltzmann


@prop("densities")
def check_boltzmann_invariance(rng, n: int = 10_000):
    lens, params = _boltzmann_setup()
    q = uniform_sphere(n, rng)
    base = boltzmann_potential(q, params)
    g = torch.tensor([math.cos(math.pi / 6), math.sin(math.pi / 6), 0.0, 0.0], dtype=DTYPE)
    worst = float((boltzmann_potential(quaternion_multiply(g, q), params) - base).abs().max())
    for k in range(1, lens.p):
        worst = max(worst, float((boltzmann_potential(deck_apply(lens, q, k), params) - base).abs().max()))
    return worst <= 1e-9, f"max |U(gq) - U(q)| = {worst:.2e}"


@prop("densities")
def check_rotation_orthogonality(rng, n: int = 10_000):
    rot = rotation_from_quaternion(uniform_sphere(n, rng))
    eye = torch.eye(3, dtype=DTYPE)
    ortho = float((rot.transpose(-1, -2) @ rot - eye).abs().max())
    det = float((torch.linalg.det(rot) - 1.0).abs().max())
    return max(ortho, det) <= 1e-9, f"|R^T R - I| = {ortho:.2e}, |det R - 1| = {det:.2e}"


@prop("densities")
def check_pushforward_gluing(rng, n: int = 1_000):
    for name, lens, target in _experiment_targets():
        pf = PushforwardDensity(lens, target)
        theta = torch.from_numpy(rng.uniform(0.0, TWO_PI, n))
        phi = torch.from_numpy(rng.uniform(0.0, TWO_PI, n))
        glued_theta, glued_phi = boundary_glue(lens, theta, phi)
        a = pushforward_logpdf(pf, 1, torch.stack([theta, torch.cos(phi), torch.sin(phi)], dim=-1))
        b = pushforward_logpdf(pf, 2, torch.stack([glued_theta, torch.cos(glued_phi), torch.sin(glued_phi)], dim=-1))
        err = float((a - b).abs().max())
        if err > 1e-9:
            return False, f"{name}: pushforward jumps by {err:.2e} across the boundary"
    return True, "pushforward continuous across the glued boundary"


@prop("densities")
def check_normalizer_total(rng, n: int = 200_000):
    for name, lens, target in _experiment_targets():
        est = estimate_normalizers(lens, target, n, seed=int(rng.integers(2 ** 31)))
        se = math.hypot(est.stderr1, est.stderr2)
        if abs(est.total - 1.0) > 3.0 * se:
            return False, f"{name}: I1 + I2 = {est.total:.4f} (stderr {se:.4f})"
    return True, "I1 + I2 = 1 within 3 standard errors"


# -------------------------
# Flow
# -------------------------

def _random_flow(rng, n_pairs: int = 1) -> FlowTransform:
    flow = FlowTransform(n_pairs)
    with torch.no_grad():
        for p in flow.parameters():
            p.copy_(torch.from_numpy(rng.normal(0.0, 0.5, tuple(p.shape))))
    return flow


def _interior(rng, n: int, radius: float = 0.9) -> torch.Tensor:
    z = uniform_torus(n, rng)
    z[:, 1:] *= radius
    return z


@prop("flow")
def check_disk_logdets(rng, n: int = 200):
    w = _interior(rng, n)[:, 1:]
    v, analytic, _ = disk_to_plane(w)
    numeric = fd_logdet(lambda u: disk_to_plane(u)[0], w)
    if not torch.allclose(analytic, numeric, rtol=FD_RTOL, atol=FD_RTOL):
        return False, "disk_to_plane log-determinant disagrees with finite differences"
    _, analytic = plane_to_disk(v)
    numeric = fd_logdet(lambda u: plane_to_disk(u)[0], v)
    if not torch.allclose(analytic, numeric, rtol=FD_RTOL, atol=FD_RTOL):
        return False, "plane_to_disk log-determinant disagrees with finite differences"
    return True, "disk maps match finite differences"


@prop("flow")
def check_coupling_logdets(rng, n: int = 200):
    for kind in (FIX_CIRCLE, FIX_DISK):
        layer = CouplingLayer(kind)
        with torch.no_grad():
            for p in layer.parameters():
                p.copy_(torch.from_numpy(rng.normal(0.0, 0.5, tuple(p.shape))))
            x = torch.from_numpy(rng.normal(0.0, 1.0, (n, 3)))

            def mapped(u):
                theta, v, _ = layer(u[:, 0], u[:, 1:])
                return torch.cat([theta.unsqueeze(-1), v], dim=-1)

            analytic = layer(x[:, 0], x[:, 1:])[2]
            numeric = fd_logdet(mapped, x)
        if not torch.allclose(analytic, numeric, rtol=FD_RTOL, atol=FD_RTOL):
            return False, f"{kind} log-determinant disagrees with finite differences"
    return True, "coupling layers match finite differences"


@prop("flow")
def check_pipeline_logdets(rng, trials: int = 100):
    failures = 0
    for _ in range(trials):
        flow = _random_flow(rng, n_pairs=2)
        z = _interior(rng, 1)
        with torch.no_grad():
            analytic = float(flow(z, wrap=False).logdet[0])
            numeric = float(fd_logdet(lambda u: flow(u, wrap=False).coords, z)[0])
        failures += not _close(analytic, numeric)
    return failures == 0, f"{trials - failures}/{trials} random flows match finite differences"


def _smooth_target(out: torch.Tensor) -> torch.Tensor:
    # periodic in theta, so the final wrap does not affect it
    return 2.0 * torch.cos(out[..., 0]) - 3.0 * (out[..., 1] - 0.2) ** 2 - out[..., 2] ** 2


def _flow_loss(flow, prior, z) -> torch.Tensor:
    out, logdet, _ = flow(z)
    return (prior_logpdf(prior, z) - logdet - _smooth_target(out)).mean()


@prop("flow")
def check_backprop_gradients(rng, n: int = 64):
    flow = _random_flow(rng, n_pairs=1)
    prior = PriorParams()
    z = prior_sample(prior, n, rng)
    params = list(flow.parameters())
    grads = torch.autograd.grad(_flow_loss(flow, prior, z), params)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            flat, gflat = p.view(-1), g.reshape(-1)
            for i in range(flat.numel()):
                keep = float(flat[i])
                flat[i] = keep + FD_STEP
                up = float(_flow_loss(flow, prior, z))
                flat[i] = keep - FD_STEP
                down = float(_flow_loss(flow, prior, z))
                flat[i] = keep
                fd = (up - down) / (2.0 * FD_STEP)
                err = abs(fd - float(gflat[i])) / max(1e-2, abs(fd))
                worst = max(worst, err)
    return worst <= FD_RTOL, f"max relative gradient error {worst:.2e}"


@prop("flow")
def check_identity_at_zero_output(rng, n: int = 1_000):
    flow = _random_flow(rng, n_pairs=2)
    with torch.no_grad():
        for layer in flow.layers:
            for net in (layer.s, layer.t):
                net[2].weight.zero_()
                net[2].bias.zero_()
        z = prior_sample(PriorParams(), n, rng)
        out = flow(z)
    err = float((out.coords - z).abs().max())
    logdet = float(out.logdet.abs().max())
    return max(err, logdet) <= 1e-12, f"|F(z) - z| = {err:.2e}, |logdet| = {logdet:.2e}"


@prop("flow")
def check_output_in_domain(rng, n: int = 10_000):
    flow = _random_flow(rng, n_pairs=3)
    with torch.no_grad():
        out = flow(prior_sample(PriorParams(), n, rng)).coords
    theta_ok = bool(torch.all((out[:, 0] >= 0.0) & (out[:, 0] < TWO_PI)))
    disk_ok = bool(torch.all(out[:, 1] ** 2 + out[:, 2] ** 2 <= 1.0))
    return theta_ok and disk_ok, "outputs lie in S^1 x closed D^2"


@prop("flow")
def check_model_density_mass(rng, n: int = 400_000):
    """exp(log p_Z - logdet) pulled back through the exact inverse integrates to 1."""
    flow = _random_flow(rng, n_pairs=2)
    prior = PriorParams()
    y = uniform_torus(n, rng)
    with torch.no_grad():
        z = flow.inverse_unwrapped(y)
        z[:, 0] = wrap_angle(z[:, 0])
        density = torch.exp(log_model_density(flow, prior, z))
    mass = TORUS_VOLUME * float(density.mean())
    stderr = TORUS_VOLUME * float(density.std()) / math.sqrt(n)
    return abs(mass - 1.0) <= max(0.05, 5.0 * stderr), f"model density integrates to {mass:.4f} +- {stderr:.4f}"


@prop("flow")
def check_prior_normalization(rng, n: int = 1_000_000, chunks: int = 4):
    prior = PriorParams(5.0, 0.25)
    means = [float(torch.exp(prior_logpdf(prior, uniform_torus(n, rng))).mean()) for _ in range(chunks)]
    mass = TORUS_VOLUME * float(np.mean(means))
    return abs(mass - 1.0) <= 0.01, f"prior integrates to {mass:.4f}"


# -------------------------
# Runner
# -------------------------

def checks(suite: str) -> List[Tuple[str, str, Check]]:
    if suite == "all":
        names = SUITES
    elif suite in SUITES:
        names = (suite,)
    else:
        raise ValueError(f"unknown suite {suite!r}; expected one of {', '.join(SUITES + ('all',))}")
    return [(s, name, fn) for s in names for name, fn in _REGISTRY[s]]


def run_suite(suite: str, seed: int = 0) -> List[PropertyResult]:
    results = []
    for suite_name, name, fn in checks(suite):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, zlib.crc32(name.encode())])))
        started = time.perf_counter()
        try:
            passed, detail = fn(rng)
        except (ArithmeticError, ValueError, RuntimeError) as exc:
            passed, detail = False, f"raised {type(exc).__name__}: {exc}"
        result = PropertyResult(suite_name, name, bool(passed), detail, time.perf_counter() - started)
        log = logger.info if result.passed else logger.error
        log("%s", result)
        results.append(result)
    return results
