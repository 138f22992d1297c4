"""
Coupling flow F on S^1 x D^2 and its prior.

Pipeline: disk -> plane, alternating coupling layers on (theta in R, v in R^2),
then theta mod 2pi and plane -> disk. Every step has an analytic log-Jacobian.
Circle updates are lifts of circle diffeomorphisms and circle conditioners see
the centred angle, so F is a bijection of S^1 x D^2 and
log p_Z(z) - log|det J_F(z)| is the exact model log-density at F(z).
"""
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, NamedTuple, Optional, Tuple

import numpy as np
import torch
from torch import nn

from .densities import log_bessel_i
from .errors import GeometryError, NonFiniteError
from .geometry import DISK_TOL, DTYPE, TWO_PI, wrap_angle

logger = logging.getLogger(__name__)

HIDDEN = 64
FIX_CIRCLE = "fix-circle"
FIX_DISK = "fix-disk"
DISK_EDGE = 1.0 - 1e-12

CHECKPOINT_TENSORS = "flow.pt"
CHECKPOINT_MANIFEST = "manifest.json"

# a KL estimate further below zero than this many standard errors is flagged
KL_FLOOR_SIGMAS = 3.0


# -------------------------
# Conditioner networks
# -------------------------

def make_mlp(d_in: int, d_out: int, capped: bool) -> nn.Sequential:
    """Linear(d_in, 64) -> ReLU -> Linear(64, d_out) [-> Tanh]."""
    layers = [nn.Linear(d_in, HIDDEN, dtype=DTYPE), nn.ReLU(), nn.Linear(HIDDEN, d_out, dtype=DTYPE)]
    if capped:
        layers.append(nn.Tanh())
    return nn.Sequential(*layers)


def mlp_forward(mlp: nn.Sequential, u: torch.Tensor) -> torch.Tensor:
    if u.shape[-1] != mlp[0].in_features:
        raise ValueError(f"expected {mlp[0].in_features} inputs, got {u.shape[-1]}")
    return mlp(u)


# -------------------------
# Disk <-> plane
# -------------------------

def plane_to_disk(v: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """w = v / (1 + |v|), log|det| = -3 log(1 + |v|)."""
    norm = torch.linalg.vector_norm(v, dim=-1, keepdim=True)
    return v / (1.0 + norm), -3.0 * torch.log1p(norm.squeeze(-1))


def disk_to_plane(w: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    v = w / (1 - |w|), log|det| = -3 log(1 - |w|).
    Points with |w| past DISK_EDGE are pulled back onto it and flagged.
    """
    norm = torch.linalg.vector_norm(w, dim=-1, keepdim=True)
    clamped = (norm > DISK_EDGE).squeeze(-1)
    if torch.any(clamped):
        w = w * torch.where(norm > DISK_EDGE, DISK_EDGE / norm.clamp(min=DISK_EDGE), torch.ones_like(norm))
        norm = norm.clamp(max=DISK_EDGE)
    return w / (1.0 - norm), -3.0 * torch.log1p(-norm.squeeze(-1)), clamped


# -------------------------
# Coupling layers
# -------------------------

def centred_angle(theta: torch.Tensor) -> torch.Tensor:
    """theta reduced to [-pi, pi]; the seam sits opposite the prior's mode."""
    return theta - TWO_PI * torch.round(theta / TWO_PI)


def circle_scale(theta: torch.Tensor, s: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Lift of the circle map tan(theta'/2) = e^s tan(theta/2): slope e^s at 0,
    f(theta + 2pi) = f(theta) + 2pi, inverse is the same map with -s.
    log f' = s - log(cos^2(theta/2) + e^{2s} sin^2(theta/2)).
    """
    lam = torch.exp(s)
    shift = 2.0 * torch.atan((lam - 1.0) * torch.sin(theta) / ((1.0 + lam) + (1.0 - lam) * torch.cos(theta)))
    half = 0.5 * theta
    logdet = s - torch.log(torch.cos(half) ** 2 + lam ** 2 * torch.sin(half) ** 2)
    return theta + shift, logdet


class CouplingLayer(nn.Module):
    """
    fix-circle: v' = v * e^{s(theta)} + t(theta)            (s, t: 1 -> 2)
    fix-disk:   theta' = circle_scale(theta, s(v)) + t(v)   (s, t: 2 -> 1)
    """

    def __init__(self, kind: str):
        super().__init__()
        if kind not in (FIX_CIRCLE, FIX_DISK):
            raise ValueError(f"unknown coupling kind {kind!r}")
        self.kind = kind
        d_in, d_out = (1, 2) if kind == FIX_CIRCLE else (2, 1)
        self.s = make_mlp(d_in, d_out, capped=True)
        self.t = make_mlp(d_in, d_out, capped=False)

    def forward(self, theta: torch.Tensor, v: torch.Tensor):
        if self.kind == FIX_CIRCLE:
            cond = centred_angle(theta).unsqueeze(-1)
            s, t = self.s(cond), self.t(cond)
            return theta, v * torch.exp(s) + t, s.sum(dim=-1)
        s, t = self.s(v).squeeze(-1), self.t(v).squeeze(-1)
        scaled, logdet = circle_scale(theta, s)
        return scaled + t, v, logdet

    def inverse(self, theta: torch.Tensor, v: torch.Tensor):
        if self.kind == FIX_CIRCLE:
            cond = centred_angle(theta).unsqueeze(-1)
            s, t = self.s(cond), self.t(cond)
            return theta, (v - t) * torch.exp(-s), -s.sum(dim=-1)
        s, t = self.s(v).squeeze(-1), self.t(v).squeeze(-1)
        restored, logdet = circle_scale(theta - t, -s)
        return restored, v, logdet


def coupling_forward(layer: CouplingLayer, theta: torch.Tensor, v: torch.Tensor):
    return layer(theta, v)


class FlowOutput(NamedTuple):
    coords: torch.Tensor
    logdet: torch.Tensor
    clamped: torch.Tensor


class FlowTransform(nn.Module):
    def __init__(self, n_pairs: int = 6):
        super().__init__()
        if n_pairs < 1:
            raise ValueError(f"n_pairs must be >= 1, got {n_pairs}")
        self.n_pairs = n_pairs
        layers = []
        for _ in range(n_pairs):
            layers += [CouplingLayer(FIX_CIRCLE), CouplingLayer(FIX_DISK)]
        self.layers = nn.ModuleList(layers)

    def forward(self, z: torch.Tensor, wrap: bool = True) -> FlowOutput:
        theta = z[..., 0]
        v, logdet, clamped = disk_to_plane(z[..., 1:])
        for layer in self.layers:
            theta, v, ld = coupling_forward(layer, theta, v)
            logdet = logdet + ld
        w, ld = plane_to_disk(v)
        if wrap:
            theta = wrap_angle(theta)
        return FlowOutput(torch.cat([theta.unsqueeze(-1), w], dim=-1), logdet + ld, clamped)

    def inverse_unwrapped(self, out: torch.Tensor) -> torch.Tensor:
        """Exact inverse of forward(z, wrap=False)."""
        theta = out[..., 0]
        v, _, _ = disk_to_plane(out[..., 1:])
        for layer in reversed(self.layers):
            theta, v, _ = layer.inverse(theta, v)
        w, _ = plane_to_disk(v)
        return torch.cat([theta.unsqueeze(-1), w], dim=-1)


def flow_forward(flow: FlowTransform, z: torch.Tensor) -> FlowOutput:
    return flow(z)


# -------------------------
# Prior: von Mises x truncated normal on the disk
# -------------------------

@dataclass(frozen=True)
class PriorParams:
    kappa: float = 5.0
    sigma: float = 0.25

    def __post_init__(self):
        if self.kappa < 0:
            raise ValueError(f"prior kappa must be >= 0, got {self.kappa}")
        if self.sigma <= 0:
            raise ValueError(f"prior sigma must be > 0, got {self.sigma}")

    @property
    def log_norm(self) -> float:
        var = self.sigma ** 2
        circle = math.log(TWO_PI) + log_bessel_i(0, self.kappa)
        disk = math.log(TWO_PI * var) + math.log(-math.expm1(-1.0 / (2.0 * var)))
        return circle + disk


def prior_logpdf(prior: PriorParams, z: torch.Tensor) -> torch.Tensor:
    radius2 = z[..., 1] ** 2 + z[..., 2] ** 2
    if torch.any(radius2 > 1.0 + DISK_TOL):
        raise GeometryError("prior evaluated outside S^1 x D^2")
    return prior.kappa * torch.cos(z[..., 0]) - radius2 / (2.0 * prior.sigma ** 2) - prior.log_norm


def prior_sample(prior: PriorParams, n: int, rng: np.random.Generator, max_rounds: int = 100) -> torch.Tensor:
    """
    theta from numpy's von Mises sampler (Best-Fisher rejection) wrapped to
    [0, 2pi); (x, y) from an isotropic Gaussian, rejecting points off the disk.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    theta = np.mod(rng.vonmises(0.0, prior.kappa, size=n), TWO_PI)
    disk = np.empty((0, 2))
    for _ in range(max_rounds):
        need = n - disk.shape[0]
        if need <= 0:
            break
        draw = rng.normal(0.0, prior.sigma, size=(need + need // 2 + 16, 2))
        disk = np.concatenate([disk, draw[np.einsum("ij,ij->i", draw, draw) <= 1.0]])
    else:
        if disk.shape[0] < n:
            raise RuntimeError(f"disk rejection sampler gave up after {max_rounds} rounds")
    theta = np.where(theta >= TWO_PI, 0.0, theta)
    return torch.from_numpy(np.column_stack([theta, disk[:n]]))


# -------------------------
# Loss and gradients
# -------------------------

class KLTerms(NamedTuple):
    out: torch.Tensor
    log_model: torch.Tensor
    log_q: torch.Tensor
    clamped: int = 0

    @property
    def summands(self) -> torch.Tensor:
        return self.log_model - self.log_q


def kl_terms(flow: FlowTransform, prior: PriorParams, target_logpdf: Callable, z: torch.Tensor) -> KLTerms:
    """Per-sample log p_Z(z) - log|det J_F(z)| and log q(F(z)), plus the count of disk-edge clamps."""
    out, logdet, clamped = flow_forward(flow, z)
    log_model = prior_logpdf(prior, z) - logdet
    return KLTerms(out, log_model, target_logpdf(out), int(clamped.sum()))


def log_model_density(flow: FlowTransform, prior: PriorParams, z: torch.Tensor) -> torch.Tensor:
    """log p_Z(z) - log|det J_F(z)|, the model log-density at the sample F(z)."""
    _, logdet, _ = flow_forward(flow, z)
    return prior_logpdf(prior, z) - logdet


@dataclass
class GradientRecord:
    loss: float
    kl: float
    entropy: float
    entropy_weight: float
    grads: Dict[str, torch.Tensor]
    kl_stderr: float = 0.0
    clamped: int = 0


def flow_backward_gradients(
    flow: FlowTransform,
    prior: PriorParams,
    target_logpdf: Callable,
    batch: torch.Tensor,
    entropy_weight: float = 0.0,
) -> GradientRecord:
    """
    Reverse-mode gradients of KL - weight * H over one prior batch, where
    KL = E[log p_Z - log|det J| - log q(F(z))] and H = -E[log p_Z - log|det J|].
    The logged loss is rebuilt from the logged floats so the identity
    loss = kl - weight * entropy holds exactly.
    """
    terms = kl_terms(flow, prior, target_logpdf, batch)
    summands = terms.summands
    finite = torch.isfinite(summands)
    if not torch.all(finite):
        bad = batch[~finite][0].tolist()
        raise NonFiniteError(f"non-finite loss term at prior sample {bad}")
    kl = summands.mean()
    entropy = -terms.log_model.mean()
    loss = kl - entropy_weight * entropy
    names, params = zip(*flow.named_parameters())
    grads = torch.autograd.grad(loss, params)
    kl_value, entropy_value = kl.detach().item(), entropy.detach().item()
    return GradientRecord(
        loss=kl_value - entropy_weight * entropy_value,
        kl=kl_value,
        entropy=entropy_value,
        entropy_weight=entropy_weight,
        grads=dict(zip(names, grads)),
        kl_stderr=summands.detach().std().item() / math.sqrt(summands.numel()) if summands.numel() > 1 else 0.0,
        clamped=terms.clamped,
    )


# -------------------------
# Checkpoints
# -------------------------

def save_checkpoint(flow: FlowTransform, prior: PriorParams, directory) -> Path:
    """flow.pt (state dict) plus a manifest naming every tensor by layer, kind and shape."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().clone() for k, v in flow.state_dict().items()}
    tensor_path = directory / CHECKPOINT_TENSORS
    torch.save(state, tensor_path)

    layers = []
    for index, layer in enumerate(flow.layers):
        prefix = f"layers.{index}."
        layers.append({
            "index": index,
            "kind": layer.kind,
            "tensors": {k[len(prefix):]: list(v.shape) for k, v in state.items() if k.startswith(prefix)},
        })
    manifest = {
        "n_pairs": flow.n_pairs,
        "dtype": str(DTYPE).replace("torch.", ""),
        "prior": asdict(prior),
        "layers": layers,
        "sha256": hashlib.sha256(tensor_path.read_bytes()).hexdigest(),
    }
    (directory / CHECKPOINT_MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def load_checkpoint(directory) -> Tuple[FlowTransform, PriorParams]:
    directory = Path(directory)
    manifest = json.loads((directory / CHECKPOINT_MANIFEST).read_text())
    tensor_path = directory / CHECKPOINT_TENSORS
    digest = hashlib.sha256(tensor_path.read_bytes()).hexdigest()
    if digest != manifest["sha256"]:
        raise OSError(f"checkpoint {tensor_path} does not match its manifest hash")
    flow = FlowTransform(manifest["n_pairs"])
    for entry in manifest["layers"]:
        if flow.layers[entry["index"]].kind != entry["kind"]:
            raise OSError(f"layer {entry['index']} kind mismatch in {directory}")
    flow.load_state_dict(torch.load(tensor_path, weights_only=True))
    return flow, PriorParams(**manifest["prior"])
