"""
Reverse-KL training of one torus flow: initialization, annealed entropy
bonus, Adam updates and the per-epoch history.
"""
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, List, Sequence

import numpy as np
import torch
from torch import nn

from .errors import NonFiniteError, TrainingAborted
from .flow import KL_FLOOR_SIGMAS, FlowTransform, PriorParams, flow_backward_gradients, prior_sample
from .models import TrainConfig
from .utils.csv_files import write_csv

logger = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
MAX_CONSECUTIVE_FAILURES = 10
XAVIER_GAIN = 0.01

HISTORY_HEADERS = ["epoch", "loss", "kl", "entropy", "anneal_weight"]


def torus_seed(master_seed: int, chart: int) -> int:
    """Per-torus seed: fixed offset of the master seed by the chart index."""
    return int(master_seed) + int(chart)


def init_flow(config: TrainConfig, generator: torch.Generator) -> FlowTransform:
    """
    Zero biases; orthogonal hidden weights; Xavier-uniform (gain 0.01) for
    output layers, which all have at most two outputs.
    """
    flow = FlowTransform(config.n_pairs)
    with torch.no_grad():
        for module in flow.modules():
            if not isinstance(module, nn.Linear):
                continue
            if module.out_features <= 2:
                nn.init.xavier_uniform_(module.weight, gain=XAVIER_GAIN, generator=generator)
            else:
                nn.init.orthogonal_(module.weight, generator=generator)
            nn.init.zeros_(module.bias)
    return flow


def anneal_weight(beta0: float, t: int, T: int) -> float:
    if T <= 0:
        return 0.0
    return beta0 * max(0.0, 1.0 - t / T)


# -------------------------
# Adam
# -------------------------

class AdamState:
    """
    Moments and step count for a fixed, ordered parameter list, held by
    torch.optim.Adam. Non-finite gradients skip the step and are counted.
    """

    def __init__(self, params: Sequence[torch.Tensor], lr: float = 1e-3, betas=ADAM_BETAS, eps: float = ADAM_EPS):
        self.params = list(params)
        self.optimizer = torch.optim.Adam(self.params, lr=lr, betas=betas, eps=eps)
        self.skipped = 0

    @property
    def step_count(self) -> int:
        state = self.optimizer.state.get(self.params[0], {})
        return int(state.get("step", 0))


def adam_step(state: AdamState, grads: Sequence[torch.Tensor], lr: float = None) -> bool:
    """Apply one bias-corrected Adam update in place; returns False if skipped."""
    grads = list(grads)
    if len(grads) != len(state.params):
        raise ValueError(f"expected {len(state.params)} gradients, got {len(grads)}")
    for p, g in zip(state.params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} does not match parameter {tuple(p.shape)}")
    if not all(torch.all(torch.isfinite(g)) for g in grads):
        state.skipped += 1
        logger.warning("skipping Adam step: non-finite gradient (%d skipped so far)", state.skipped)
        return False
    if lr is not None:
        for group in state.optimizer.param_groups:
            group["lr"] = lr
    for p, g in zip(state.params, grads):
        p.grad = g.detach().clone()
    state.optimizer.step()
    state.optimizer.zero_grad(set_to_none=True)
    return True


# -------------------------
# Training loop
# -------------------------

@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float
    kl: float
    entropy: float
    anneal_weight: float


@dataclass
class TrainResult:
    flow: FlowTransform
    chart: int
    seed: int
    history: List[EpochRecord] = field(default_factory=list)
    failed_epochs: int = 0
    clamped: int = 0
    wall_time: float = 0.0

    @property
    def initial_kl(self) -> float:
        return self.history[0].kl if self.history else math.nan

    @property
    def final_kl(self) -> float:
        return self.history[-1].kl if self.history else math.nan

    @property
    def best_epoch(self) -> int:
        if not self.history:
            return -1
        return min(self.history, key=lambda r: r.kl).epoch


def train_torus(
    target_logpdf: Callable[[torch.Tensor], torch.Tensor],
    config: TrainConfig,
    prior: PriorParams,
    chart: int = 1,
) -> TrainResult:
    """
    Train F on one torus against log q_i: each epoch draws a fresh prior batch,
    takes the loss KL - anneal_weight * H on it and applies one Adam step.
    """
    seed = torus_seed(config.seed, chart)
    generator = torch.Generator().manual_seed(seed)
    rng = np.random.Generator(np.random.Philox(seed))
    flow = init_flow(config, generator)
    names = [name for name, _ in flow.named_parameters()]
    state = AdamState([p for _, p in flow.named_parameters()], lr=config.lr)
    result = TrainResult(flow=flow, chart=chart, seed=seed)

    started = time.perf_counter()
    consecutive = 0
    final_stderr = 0.0
    for epoch in range(config.epochs):
        weight = anneal_weight(config.beta0, epoch, config.T_anneal)
        batch = prior_sample(prior, config.batch, rng)
        try:
            record = flow_backward_gradients(flow, prior, target_logpdf, batch, weight)
        except NonFiniteError as exc:
            consecutive += 1
            result.failed_epochs += 1
            logger.warning("T%d epoch %d: %s", chart, epoch, exc)
            if consecutive >= MAX_CONSECUTIVE_FAILURES:
                raise TrainingAborted(
                    f"T{chart}: {consecutive} consecutive non-finite epochs (last at epoch {epoch})"
                ) from exc
            continue
        consecutive = 0
        if record.clamped:
            result.clamped += record.clamped
            logger.warning("T%d epoch %d: %d inputs clamped to the disk edge", chart, epoch, record.clamped)
        adam_step(state, [record.grads[name] for name in names])
        result.history.append(EpochRecord(epoch, record.loss, record.kl, record.entropy, weight))
        final_stderr = record.kl_stderr
        if config.log_every and epoch % config.log_every == 0:
            logger.info("T%d epoch %d loss=%.4f kl=%.4f weight=%.3f", chart, epoch, record.loss, record.kl, weight)

    result.wall_time = time.perf_counter() - started
    if result.history and result.final_kl < -KL_FLOOR_SIGMAS * final_stderr:
        logger.warning("T%d final kl=%.4f is below zero by more than %.0f standard errors (%.4f)",
                       chart, result.final_kl, KL_FLOOR_SIGMAS, final_stderr)
    logger.info("T%d done: final kl=%.4f in %.1fs", chart, result.final_kl, result.wall_time)
    return result


def write_history_csv(history: Sequence[EpochRecord], path):
    return write_csv(
        path,
        history,
        HISTORY_HEADERS,
        lambda r: [r.epoch, repr(r.loss), repr(r.kl), repr(r.entropy), repr(r.anneal_weight)],
    )
