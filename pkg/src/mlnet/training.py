"""Run configuration, the training loop and hyperparameter sweeps."""
from __future__ import annotations

import configparser
import copy
import csv
import itertools
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DomainError, NumericError, ParseError
from .evaluate import (MetricsReport, evaluate_network, metrics_row, write_curve_csv,
                       write_metrics_csv)
from .memory import MemoryBank, build_neighbor_sets
from .model import Network, extract_features
from .nn_core import OptimizerState, inverse_schedule, sgd_nesterov_step
from .objectives import (MIXUP_MODES, LossWeights, ObjectiveContext, loss_total, sample_mix_coeff,
                         term_coefficients)
from .scenario import (SHIFT_KEYS, Dataset, ScenarioSpec, batch_iter, generate_scenario,
                       iterations_per_epoch, load_feature_csv, scenario_from_mapping)

log = logging.getLogger(__name__)

TRACE_HEADER = ["iter", "epoch", "l_cls", "l_ova", "l_oem", "l_nil", "l_cmm", "l_cc", "l_total", "lr"]


class DivergenceError(NumericError):
    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


@dataclass
class RunConfig:
    scenario: Optional[ScenarioSpec] = None
    data: List[str] = field(default_factory=list)
    split: Optional[Tuple[int, int, int]] = None
    weights: LossWeights = field(default_factory=LossWeights)
    tau: float = 10.0
    epsilon: float = 0.875
    neighborhood: str = "adaptive"
    knn_k: int = 5
    use_confidence: bool = True
    mixup: str = "cross"
    cc_stop_grad: bool = True
    cmm_heads_only: bool = False
    epochs: int = 50
    batch: int = 36
    lr_extractor: float = 0.001
    lr_heads: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    schedule_a: float = 10.0
    schedule_b: float = 0.75
    hidden: Tuple[int, ...] = (64,)
    feat_dim: int = 32
    activation: str = "tanh"
    threshold: float = 0.5
    seed: int = 0
    out: Optional[str] = None

    def validate(self) -> "RunConfig":
        if self.epochs < 1:
            raise DomainError("epochs must be >= 1")
        if self.batch < 1:
            raise DomainError("batch must be >= 1")
        if self.mixup not in MIXUP_MODES:
            raise DomainError(f"mixup must be one of {MIXUP_MODES}")
        if self.neighborhood not in ("adaptive", "knn"):
            raise DomainError("neighborhood must be adaptive or knn")
        if self.scenario is None and not self.data:
            raise DomainError("config needs a [scenario] section or [data] paths")
        if self.data and self.split is None:
            raise DomainError("[data] needs a split = shared/source_private/target_private")
        for p in self.data:
            if not Path(p).exists():
                raise DomainError(f"data file {p} does not exist")
        return self

    @property
    def setting(self) -> str:
        if self.scenario is not None:
            return self.scenario.setting
        s, m, n = self.split
        return {(False, False): "CDA", (True, False): "PDA", (False, True): "ODA",
                (True, True): "OPDA"}[(m > 0, n > 0)]

    def replace(self, **changes) -> "RunConfig":
        cfg = copy.deepcopy(self)
        for key, value in changes.items():
            if key in {f.name for f in fields(LossWeights)}:
                setattr(cfg.weights, key, value)
            elif key == "seed":
                cfg.seed = value
                if cfg.scenario is not None:
                    cfg.scenario.seed = value
            else:
                if not hasattr(cfg, key):
                    raise DomainError(f"unknown config key {key!r}")
                setattr(cfg, key, value)
        return cfg

    # text round-trip

    def to_text(self) -> str:
        parser = configparser.ConfigParser()
        if self.scenario is not None:
            sc = self.scenario
            parser["scenario"] = {
                "shared": sc.shared, "source_private": sc.source_private,
                "target_private": sc.target_private, "dim": sc.dim,
                "samples_per_class_source": _join(sc.samples_per_class_source),
                "samples_per_class_target": _join(sc.samples_per_class_target),
                "class_sep": repr(sc.class_sep), "spread": repr(sc.spread), "seed": sc.seed,
            }
            parser["shift"] = {k: repr(getattr(sc.shift, k)) for k in SHIFT_KEYS}
        if self.data:
            parser["data"] = {"paths": " ".join(self.data), "split": "/".join(map(str, self.split))}
        parser["loss"] = {f.name: repr(getattr(self.weights, f.name)) for f in fields(LossWeights)}
        parser["loss"].update({"mixup": self.mixup, "cc_stop_grad": str(self.cc_stop_grad).lower(),
                               "cmm_heads_only": str(self.cmm_heads_only).lower()})
        parser["memory"] = {"tau": repr(self.tau), "epsilon": repr(self.epsilon),
                            "neighborhood": self.neighborhood, "knn_k": self.knn_k,
                            "use_confidence": str(self.use_confidence).lower()}
        parser["train"] = {k: (repr(getattr(self, k)) if isinstance(getattr(self, k), float) else getattr(self, k))
                           for k in ("epochs", "batch", "lr_extractor", "lr_heads", "momentum", "weight_decay",
                                     "schedule_a", "schedule_b", "seed", "threshold")}
        parser["model"] = {"hidden": _join(list(self.hidden)), "feat_dim": self.feat_dim,
                           "activation": self.activation}
        if self.out is not None:
            parser["output"] = {"out": self.out}
        lines = []
        for section in parser.sections():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {v}" for k, v in parser[section].items())
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def from_text(cls, text: str, base: Optional["RunConfig"] = None) -> "RunConfig":
        parser = configparser.ConfigParser()
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ParseError(f"malformed config: {exc}") from exc
        return cls.from_parser(parser, base)

    @classmethod
    def from_file(cls, path, base: Optional["RunConfig"] = None) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ParseError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text, base)

    @classmethod
    def from_parser(cls, parser: configparser.ConfigParser, base: Optional["RunConfig"] = None) -> "RunConfig":
        cfg = copy.deepcopy(base) if base is not None else cls()
        known = {"scenario", "shift", "data", "loss", "memory", "train", "model", "output"}
        extra = set(parser.sections()) - known
        if extra:
            raise ParseError(f"unknown config sections: {sorted(extra)}")
        train_seed = parser.getint("train", "seed", fallback=cfg.seed) if parser.has_section("train") else cfg.seed
        if parser.has_section("scenario"):
            values = dict(parser["scenario"])
            if parser.has_section("shift"):
                values.update({f"shift_{k}": v for k, v in parser["shift"].items()})
            cfg.scenario = scenario_from_mapping(values, default_seed=train_seed)
        if parser.has_section("data"):
            sec = parser["data"]
            cfg.data = sec.get("paths", "").split()
            if "split" in sec:
                cfg.split = tuple(int(p) for p in sec["split"].replace("/", " ").split())
        try:
            for section, keys in _SECTION_KEYS.items():
                if not parser.has_section(section):
                    continue
                for key, raw in parser[section].items():
                    if key not in keys:
                        raise ParseError(f"unknown key {key!r} in [{section}]")
                    _assign(cfg, key, keys[key], raw, parser, section)
        except ValueError as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(f"malformed config value: {exc}") from exc
        return cfg


def _join(v):
    return str(v) if isinstance(v, int) else " ".join(map(str, v))


_SECTION_KEYS = {
    "loss": {"gamma": float, "beta1": float, "beta2": float, "eta": float, "alpha": float,
             "mixup": str, "cc_stop_grad": bool, "cmm_heads_only": bool},
    "memory": {"tau": float, "epsilon": float, "neighborhood": str, "knn_k": int, "use_confidence": bool},
    "train": {"epochs": int, "batch": int, "lr_extractor": float, "lr_heads": float, "momentum": float,
              "weight_decay": float, "schedule_a": float, "schedule_b": float, "seed": int, "threshold": float},
    "model": {"hidden": "ints", "feat_dim": int, "activation": str},
    "output": {"out": str},
}


def _assign(cfg, key, kind, raw, parser, section):
    if kind is bool:
        value = parser.getboolean(section, key)
    elif kind == "ints":
        value = tuple(int(p) for p in raw.replace(",", " ").split())
    else:
        value = kind(raw.strip())
    if key in {f.name for f in fields(LossWeights)}:
        setattr(cfg.weights, key, value)
    else:
        setattr(cfg, key, value)


@dataclass
class RunArtifacts:
    config: RunConfig
    network: Network
    report: MetricsReport
    trace: List[list]
    paths: Dict[str, Path] = field(default_factory=dict)

    def trace_column(self, name: str) -> np.ndarray:
        i = TRACE_HEADER.index(name)
        return np.array([row[i] for row in self.trace], dtype=np.float64)


def load_datasets(cfg: RunConfig) -> Tuple[Dataset, Dataset]:
    if cfg.scenario is not None:
        return generate_scenario(cfg.scenario)
    return load_feature_csv(cfg.data, cfg.split)


def fill_memory(net: Network, bank: MemoryBank, target: Dataset, chunk: int) -> None:
    """No-gradient pass writing every target feature into the bank."""
    for start in range(0, len(target), chunk):
        idx = np.arange(start, min(start + chunk, len(target)))
        bank.update(idx, extract_features(net, target.features[idx]))


def _dump_batch(out, it, epoch, batch, net):
    if out is None:
        return None
    path = Path(out) / f"divergence_iter{it}.npz"
    np.savez(path, iteration=it, epoch=epoch, source_x=batch.source_x, source_y=batch.source_y,
             target_x=batch.target_x, target_idx=batch.target_idx,
             **{f"param__{k}": v for k, v in net.params.items()})
    return path


def _train_step(net, bank, b, coefs, lam, partner, cfg, state):
    """Memory update, objective and one optimizer step for a paired batch."""
    bank.update(b.target_idx, extract_features(net, b.target_x))
    neighbors = build_neighbor_sets(bank, b.target_idx, cfg.use_confidence) if coefs["nil"] else {}
    ctx = ObjectiveContext(coefs, lambdas=lam, smm_partner=partner, bank=bank, neighbors=neighbors,
                           cc_stop_grad=cfg.cc_stop_grad, cmm_heads_only=cfg.cmm_heads_only)
    parts, grads = loss_total(net, b.source_x, b.source_y, b.target_x, b.target_idx, ctx)
    if not np.isfinite(parts.total):
        raise NumericError("non-finite loss")
    sgd_nesterov_step(net.params, grads, state)
    return parts, grads


def train_run(cfg: RunConfig, datasets: Optional[Tuple[Dataset, Dataset]] = None) -> RunArtifacts:
    """Train one network and evaluate it on the target domain.

    Every random choice (initialization, shuffling, mixup coefficients and
    partners) is drawn from one generator seeded with ``cfg.seed``.
    """
    cfg.validate()
    source, target = datasets if datasets is not None else load_datasets(cfg)
    k = source.num_known
    rng = np.random.default_rng(cfg.seed)
    net = Network.init(source.features.shape[1], k, cfg.hidden, cfg.feat_dim, cfg.activation,
                       seed=cfg.seed, rng=rng)
    bank = MemoryBank(len(target), cfg.feat_dim, cfg.tau, cfg.epsilon, cfg.neighborhood, cfg.knn_k)
    fill_memory(net, bank, target, cfg.batch)

    total_iters = cfg.epochs * iterations_per_epoch(len(source), len(target), cfg.batch)
    state = OptimizerState(cfg.lr_extractor, cfg.lr_heads, cfg.momentum, cfg.weight_decay, 0.0,
                           cfg.schedule_a, cfg.schedule_b)
    out = Path(cfg.out) if cfg.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    trace = []
    it = 0
    for epoch, b in batch_iter(source, target, cfg.batch, rng, cfg.epochs):
        state.progress = it / total_iters
        coefs = term_coefficients(cfg.weights, epoch, cfg.mixup)
        lam = sample_mix_coeff(rng, cfg.weights.alpha, cfg.batch)
        partner = rng.permutation(cfg.batch)

        try:
            with np.errstate(over="ignore", invalid="ignore"):
                parts, grads = _train_step(net, bank, b, coefs, lam, partner, cfg, state)
        except NumericError as exc:
            dump = _dump_batch(out, it, epoch, b, net)
            raise DivergenceError(f"{exc} at iteration {it} (epoch {epoch}); batch dumped to {dump}", dump) from exc
        lr = inverse_schedule(cfg.lr_extractor, state.progress, cfg.schedule_a, cfg.schedule_b)
        trace.append([it, epoch, parts.cls, parts.ova, parts.oem, parts.nil, parts.cmm, parts.cc, parts.total, lr])
        it += 1

    report = evaluate_network(net, target, cfg.threshold)
    arts = RunArtifacts(cfg, net, report, trace)
    if out is not None:
        arts.paths = write_artifacts(arts, out)
    return arts


def write_trace_csv(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for row in trace:
            w.writerow([row[0], row[1], *(repr(float(v)) for v in row[2:])])


def write_artifacts(arts: RunArtifacts, out: Path) -> Dict[str, Path]:
    paths = {
        "trace": out / "trace.csv",
        "metrics": out / "metrics.csv",
        "curve": out / "curve.csv",
        "checkpoint": out / "checkpoint.json",
        "config": out / "config.resolved.cfg",
    }
    write_trace_csv(paths["trace"], arts.trace)
    write_metrics_csv(paths["metrics"], [metrics_row(arts.report, arts.config.setting, arts.config.seed)])
    write_curve_csv(paths["curve"], arts.report.curve)
    arts.network.save(paths["checkpoint"])
    paths["config"].write_text(arts.config.to_text(), encoding="utf-8")
    return paths


# sweeps

SWEEP_HEADER = ["setting", "seed", "beta2", "eta", "epsilon", "status",
                "a_known", "a_unknown", "h_score", "accuracy", "ucr"]


def _grid_points(grid: Dict[str, Sequence]):
    keys = list(grid)
    for combo in itertools.product(*(grid[k] for k in keys)):
        yield dict(zip(keys, combo))


def _point_dir(point):
    return "run_" + "_".join(f"{k}={v}" for k, v in point.items())


def _run_point(args):
    cfg, point = args
    try:
        arts = train_run(cfg)
        return point, arts.report, "ok"
    except Exception as exc:  # recorded, the sweep carries on
        log.warning("sweep point %s failed: %s", point, exc)
        return point, None, f"failed: {type(exc).__name__}: {exc}"


def sweep(template: RunConfig, grid: Dict[str, Sequence], workers: int = 1, out=None) -> List[list]:
    """One isolated ``train_run`` per grid point; returns collated metric rows."""
    jobs = []
    for point in _grid_points(grid):
        cfg = template.replace(**point)
        base_out = out if out is not None else template.out
        cfg.out = str(Path(base_out) / _point_dir(point)) if base_out else None
        jobs.append((cfg, point))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_point, jobs))
    else:
        results = [_run_point(j) for j in jobs]

    rows = []
    for (cfg, _), (point, report, status) in zip(jobs, results):
        row = [cfg.setting, cfg.seed, repr(cfg.weights.beta2), repr(cfg.weights.eta), repr(cfg.epsilon), status]
        if report is not None:
            row += metrics_row(report, cfg.setting, cfg.seed)[2:]
        else:
            row += [""] * 5
        rows.append(row)
    base_out = out if out is not None else template.out
    if base_out:
        Path(base_out).mkdir(parents=True, exist_ok=True)
        with open(Path(base_out) / "sweep.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SWEEP_HEADER)
            w.writerows(rows)
    return rows
