"""
Built-in experiments, JSON config parsing and end-to-end runs:
normalizers -> two torus trainings -> evaluation -> artifacts.
"""
import json
import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, fields
from functools import partial
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .densities import (
    KIND_BOLTZMANN,
    KIND_VMF,
    BoltzmannDensity,
    BoltzmannParams,
    NormalizerEstimate,
    PushforwardDensity,
    TargetDensity,
    VmfComponent,
    VmfMixture,
    declare_symmetric,
    estimate_normalizers,
    normalized_target_logpdf,
)
from .errors import ConfigError
from .evaluation import (
    MetricsReport,
    count_modes,
    global_kl,
    kl_decomposition,
    local_kl,
    mode_count_stability,
    sample_model,
    summarize_seeds,
    top_percentile_filter,
    write_samples_csv,
    write_scatter_svg,
)
from .flow import PriorParams, load_checkpoint, save_checkpoint
from .geometry import LensSpace, make_lens
from .models import EvalConfig, ExperimentConfig, NormalizerConfig, TargetSpec, TrainConfig
from .training import TrainResult, train_torus, write_history_csv
from .utils.manifest import write_manifest

logger = logging.getLogger(__name__)

BUILTIN_NAMES = ("exp1", "exp2", "boltz")
SEED_STRIDE = 100

# offsets of the evaluation streams from the master seed
KL_STREAM = 1_000
GLOBAL_STREAM = 2_000
SAMPLE_STREAM = 3_000


# -------------------------
# Built-in experiments
# -------------------------

def _vmf(mu, kappa, weight) -> VmfComponent:
    return VmfComponent(mu=tuple(float(v) for v in mu), kappa=float(kappa), weight=float(weight))


def builtin_experiment(name: str) -> ExperimentConfig:
    pi = math.pi
    if name == "exp1":
        c1 = (1.0, 0.0, 0.0, 0.0)
        c2 = (math.cos(pi / 3), math.sin(pi / 3), 0.0, 0.0)
        b1 = (0.0, 0.0, 1.0, 0.0)
        b2 = (0.0, 0.0, math.cos(pi / 4), math.sin(pi / 4))
        b3 = (0.0, 0.0, math.cos(pi / 2), math.sin(pi / 2))
        components = (
            _vmf(c1, 35, 1 / 4), _vmf(c2, 35, 1 / 4),
            _vmf(b1, 35, 1 / 6), _vmf(b2, 35, 1 / 6), _vmf(b3, 35, 1 / 6),
        )
        return ExperimentConfig(name="exp1", lens=(3, 2), target=TargetSpec(KIND_VMF, components=components))
    if name == "exp2":
        c1 = (math.sqrt(2 / 3), 0.0, math.sqrt(1 / 3), 0.0)
        c2 = (math.sqrt(3 / 4) * math.cos(pi / 7), math.sqrt(3 / 4) * math.sin(pi / 7), math.sqrt(1 / 4), 0.0)
        b1 = (0.0, math.sqrt(1 / 4), math.sqrt(3 / 4), 0.0)
        b2 = (
            math.sqrt(1 / 7), math.sqrt(1 / 7),
            math.sqrt(5 / 7) * math.cos(4 * pi / 21), math.sqrt(5 / 7) * math.sin(4 * pi / 21),
        )
        # 1/3 (1/3, 2/3) on the c's and 2/3 (2/3, 1/3) on the b's
        components = (
            _vmf(c1, 65, 1 / 9), _vmf(c2, 55, 2 / 9),
            _vmf(b1, 65, 4 / 9), _vmf(b2, 80, 2 / 9),
        )
        return ExperimentConfig(name="exp2", lens=(7, 3), target=TargetSpec(KIND_VMF, components=components))
    if name == "boltz":
        params = BoltzmannParams(kappa=5.0, c=(1.0, 0.0, 0.0), V=20.0, x0=(1.0, 0.0, 0.0), y0=(0.0, 1.0, 0.0))
        return ExperimentConfig(
            name="boltz", lens=(12, 1), target=TargetSpec(KIND_BOLTZMANN, boltzmann=params, symmetric=True)
        )
    raise ConfigError(f"unknown experiment {name!r}; expected one of {', '.join(BUILTIN_NAMES)}")


# -------------------------
# Config parsing
# -------------------------

def _line_of(text: str, key: str) -> int:
    m = re.search(rf'"{re.escape(key)}"\s*:', text)
    return text.count("\n", 0, m.start()) + 1 if m else 1


def _record(cls, raw, text: str, block: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"block '{block}' must be an object", _line_of(text, block))
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key '{unknown[0]}' in block '{block}'", _line_of(text, unknown[0]))
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{block}': {exc}", _line_of(text, block)) from exc


def _per_torus(cls, raw, text: str, block: str):
    """A block is either shared by both tori or split as {"T1": ..., "T2": ...}."""
    if raw is None:
        return (cls(), cls())
    if isinstance(raw, dict) and set(raw) <= {"T1", "T2"} and raw:
        return tuple(_record(cls, raw.get(f"T{i}", {}), text, f"T{i}") for i in (1, 2))
    shared = _record(cls, raw, text, block)
    return (shared, shared)


def _target(raw, text: str) -> TargetSpec:
    if not isinstance(raw, dict):
        raise ConfigError("block 'target' must be an object", _line_of(text, "target"))
    kind = raw.get("kind")
    try:
        if kind == KIND_VMF:
            components = tuple(
                _vmf(c["mu"], c["kappa"], c["weight"]) for c in raw.get("components", [])
            )
            return TargetSpec(KIND_VMF, components=components, symmetric=bool(raw.get("symmetric", False)))
        if kind == KIND_BOLTZMANN:
            keys = ("kappa", "c", "V", "x0", "y0", "e2", "e3")
            params = {k: (tuple(raw[k]) if isinstance(raw[k], list) else raw[k]) for k in keys if k in raw}
            return TargetSpec(
                KIND_BOLTZMANN, boltzmann=BoltzmannParams(**params), symmetric=bool(raw.get("symmetric", False))
            )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid target: {exc}", _line_of(text, "target")) from exc
    raise ConfigError(f"unknown target kind {kind!r}", _line_of(text, "kind"))


def parse_config(text: str) -> ExperimentConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(exc.msg, exc.lineno) from exc
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    allowed = {"name", "lens", "target", "prior", "train", "eval", "normalizer"}
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"unknown block '{unknown[0]}'", _line_of(text, unknown[0]))
    for block in ("lens", "target"):
        if block not in doc:
            raise ConfigError(f"missing required block '{block}'")

    lens = doc["lens"]
    if not isinstance(lens, dict) or set(lens) != {"p", "q"}:
        raise ConfigError("block 'lens' must be {\"p\": int, \"q\": int}", _line_of(text, "lens"))
    try:
        make_lens(lens["p"], lens["q"])
    except ValueError as exc:
        raise ConfigError(str(exc), _line_of(text, "lens")) from exc

    return ExperimentConfig(
        name=str(doc.get("name", "custom")),
        lens=(int(lens["p"]), int(lens["q"])),
        target=_target(doc["target"], text),
        priors=_per_torus(PriorParams, doc.get("prior"), text, "prior"),
        train=_per_torus(TrainConfig, doc.get("train"), text, "train"),
        eval=_record(EvalConfig, doc.get("eval", {}), text, "eval"),
        normalizer=_record(NormalizerConfig, doc.get("normalizer", {}), text, "normalizer"),
    )


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def config_to_dict(config: ExperimentConfig) -> dict:
    target = config.target
    if target.kind == KIND_VMF:
        target_doc = {
            "kind": target.kind,
            "symmetric": target.symmetric,
            "components": [{"mu": list(c.mu), "kappa": c.kappa, "weight": c.weight} for c in target.components],
        }
    else:
        params = {k: v for k, v in asdict(target.boltzmann).items() if not k.startswith("_") and v is not None}
        target_doc = {"kind": target.kind, "symmetric": target.symmetric, **{k: list(v) if isinstance(v, tuple) else v for k, v in params.items()}}
    return {
        "name": config.name,
        "lens": {"p": config.lens[0], "q": config.lens[1]},
        "target": target_doc,
        "prior": {f"T{i + 1}": asdict(p) for i, p in enumerate(config.priors)},
        "train": {f"T{i + 1}": asdict(t) for i, t in enumerate(config.train)},
        "eval": asdict(config.eval),
        "normalizer": asdict(config.normalizer),
    }


# -------------------------
# Runs
# -------------------------

def build_target(spec: TargetSpec, lens: LensSpace, seed: int = 0) -> TargetDensity:
    if spec.kind == KIND_VMF:
        target = VmfMixture(spec.components)
    else:
        target = BoltzmannDensity(spec.boltzmann)
    if spec.symmetric:
        try:
            declare_symmetric(lens, target, rng=np.random.Generator(np.random.Philox(seed)))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    return target


def build_pushforward(config: ExperimentConfig, normalizers: NormalizerEstimate = None) -> PushforwardDensity:
    lens = make_lens(*config.lens)
    target = build_target(config.target, lens, config.normalizer.seed)
    if normalizers is None:
        normalizers = estimate_normalizers(lens, target, config.normalizer.n_mc, config.normalizer.seed)
    return PushforwardDensity(lens, target, normalizers)


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, stream])))


def train_both(config: ExperimentConfig, pf: PushforwardDensity, parallel: bool = True) -> Tuple[TrainResult, TrainResult]:
    """Both tori train independently; at most two workers."""
    def job(chart):
        return train_torus(partial(normalized_target_logpdf, pf, chart), config.train_config(chart), config.prior(chart), chart)

    if parallel:
        with ThreadPoolExecutor(max_workers=2) as pool:
            return tuple(pool.map(job, (1, 2)))
    return job(1), job(2)


def evaluate(config: ExperimentConfig, pf: PushforwardDensity, results: Sequence[TrainResult]):
    flows = [r.flow for r in results]
    seed = config.seed
    kls = [
        local_kl(flows[c - 1], config.prior(c), partial(normalized_target_logpdf, pf, c), config.eval.n_kl, _rng(seed, KL_STREAM + c))
        for c in (1, 2)
    ]
    w = pf.normalizers.weight
    glob = global_kl(flows, config.priors, pf, config.eval.n_kl, _rng(seed, GLOBAL_STREAM), w)
    samples = sample_model(flows, config.priors, pf, config.eval.n_samples, _rng(seed, SAMPLE_STREAM), w)
    top = top_percentile_filter(samples, config.eval.keep_fraction, config.eval.per_chart)
    report = MetricsReport(
        experiment=config.name,
        lens=config.lens,
        seed=seed,
        kl_T1=kls[0],
        kl_T2=kls[1],
        kl_global=glob,
        kl_decomposed=kl_decomposition(kls[0].value, kls[1].value, w),
        I1=pf.normalizers.I1,
        I2=pf.normalizers.I2,
        w=w,
        initial_kl=(results[0].initial_kl, results[1].initial_kl),
        mode_counts=count_modes(top, config.eval.mode_radius, config.eval.mode_min_count),
        mode_stability=mode_count_stability(top, min_count=config.eval.mode_min_count),
        sample_sizes={"n_kl": config.eval.n_kl, "n_samples": config.eval.n_samples, "n_mc": pf.normalizers.n_mc, "batch": config.train[0].batch},
    )
    return report, samples


def write_metrics(report: MetricsReport, path, normalizers: NormalizerEstimate) -> Path:
    doc = report.to_dict()
    doc["normalizers"] = asdict(normalizers)
    path = Path(path)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return path


def run_experiment(config: ExperimentConfig, run_dir, parallel: bool = True) -> MetricsReport:
    """
    One seed end to end. Writes metrics.json, history_T{1,2}.csv, samples.csv,
    checkpoint_T{1,2}/, scatter_T{1,2}.svg, config.json and manifest.json.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    pf = build_pushforward(config)
    results = train_both(config, pf, parallel)
    report, samples = evaluate(config, pf, results)

    (run_dir / "config.json").write_text(json.dumps(config_to_dict(config), indent=2, sort_keys=True))
    for result in results:
        write_history_csv(result.history, run_dir / f"history_T{result.chart}.csv")
        save_checkpoint(result.flow, config.prior(result.chart), run_dir / f"checkpoint_T{result.chart}")
        write_scatter_svg(samples, result.chart, run_dir / f"scatter_T{result.chart}.svg")
    write_samples_csv(samples, run_dir / "samples.csv")
    write_metrics(report, run_dir / "metrics.json", pf.normalizers)
    write_manifest(run_dir)
    logger.info("run %s written to %s", config.name, run_dir)
    return report


def run_seeds(config: ExperimentConfig, out_root, seeds: int = 1, parallel: bool = True) -> Tuple[Path, List[MetricsReport]]:
    """
    Repeat run_experiment over derived seeds (master + SEED_STRIDE * k).
    A single seed writes straight into the run directory; more seeds get
    seed_<k>/ subdirectories plus a summary.json with mean and std, and a root
    manifest over everything below it.
    """
    if seeds < 1:
        raise ValueError("seeds must be >= 1")
    run_dir = Path(out_root) / f"{config.name}-s{config.seed}"
    reports = []
    for k in range(seeds):
        seeded = config.with_seed(config.seed + SEED_STRIDE * k)
        target_dir = run_dir if seeds == 1 else run_dir / f"seed_{k}"
        reports.append(run_experiment(seeded, target_dir, parallel))
    if seeds > 1:
        summary = {row: {"mean": m, "std": s} for row, (m, s) in summarize_seeds(reports).items()}
        (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
        write_manifest(run_dir)
    return run_dir, reports


def format_table(reports: Sequence[MetricsReport]) -> str:
    """Summary rows: Flow-T1, Flow-T2, Flow-L(p;q) as mean +- std over seeds."""
    summary = summarize_seeds(reports)
    first = reports[0]
    p, q = first.lens
    lines = [f"KL (nats)      {first.experiment}  [L({p};{q}), seeds={len(reports)}, w={first.w:.3f}]"]
    for row, (mean, std) in summary.items():
        label = row.replace("L(p;q)", f"L({p};{q})")
        lines.append(f"{label:<14} {mean:.3f} +- {std:.3f}")
    lines.append(f"decomposition  {np.mean([r.kl_decomposed for r in reports]):.3f}")
    counts = ", ".join(f"({r.mode_counts[1]},{r.mode_counts[2]})" for r in reports)
    lines.append(f"modes (T1,T2)  {counts}")
    flagged = sorted({name for r in reports for name in r.below_zero})
    if flagged:
        lines.append(f"below zero     {', '.join(flagged)}")
    return "\n".join(lines)


def load_metrics(run_dir) -> Dict:
    return json.loads((Path(run_dir) / "metrics.json").read_text())


def load_reports(run_dir) -> List[MetricsReport]:
    """Reports of a single-seed run directory or of every seed_<k>/ below it."""
    dirs = run_dirs(run_dir)
    if not dirs:
        raise FileNotFoundError(f"no metrics.json under {run_dir}")
    return [MetricsReport.from_dict(load_metrics(d)) for d in dirs]


def run_dirs(run_dir) -> List[Path]:
    run_dir = Path(run_dir)
    if (run_dir / "metrics.json").is_file():
        return [run_dir]
    return sorted(run_dir.glob("seed_*"), key=lambda d: int(d.name.split("_")[1]))


def sample_run(run_dir, n: int, seed: int = 0, out_path=None) -> Path:
    """
    Fresh samples from a finished run: both checkpoints, the run's config for
    the target and its metrics for the normalizers (hence w).
    """
    run_dir = Path(run_dir)
    config = load_config(run_dir / "config.json")
    normalizers = NormalizerEstimate(**load_metrics(run_dir)["normalizers"])
    pf = build_pushforward(config, normalizers)
    flows, priors = [], []
    for chart in (1, 2):
        flow, prior = load_checkpoint(run_dir / f"checkpoint_T{chart}")
        flows.append(flow)
        priors.append(prior)
    samples = sample_model(flows, priors, pf, n, _rng(seed, SAMPLE_STREAM))
    out_path = Path(out_path) if out_path else run_dir / f"samples_n{n}_s{seed}.csv"
    write_samples_csv(samples, out_path)
    logger.info("%d samples from %s written to %s", n, run_dir, out_path)
    return out_path
