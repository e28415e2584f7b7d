"""Synthetic domain-shift scenarios, feature CSV I/O and paired batch iteration.

Class ids follow one convention everywhere: ``0..shared-1`` are shared,
then the source-private ids, then the target-private ids. Known classes are
the source classes ``0..K-1`` with ``K = shared + source_private``.
"""
from __future__ import annotations

import configparser
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Sequence, Union

import numpy as np
from scipy.linalg import expm

from .errors import DomainError, ParseError

log = logging.getLogger(__name__)

SHARED, SOURCE_PRIVATE, TARGET_PRIVATE = "shared", "source_private", "target_private"


@dataclass
class ShiftSpec:
    """Affine source-to-target map plus extra target noise.

    ``rotation`` is the angle scale of a random rotation, ``scale_low`` /
    ``scale_high`` bound per-dimension scaling and ``translation`` is the
    std-dev of a random offset.
    """
    rotation: float = 0.8
    scale_low: float = 0.8
    scale_high: float = 1.25
    translation: float = 0.5
    noise: float = 0.5

    @classmethod
    def none(cls) -> "ShiftSpec":
        return cls(rotation=0.0, scale_low=1.0, scale_high=1.0, translation=0.0, noise=0.0)


@dataclass
class ScenarioSpec:
    shared: int
    source_private: int = 0
    target_private: int = 0
    dim: int = 16
    samples_per_class_source: Union[int, List[int]] = 100
    samples_per_class_target: Union[int, List[int]] = 100
    class_sep: float = 4.0
    spread: float = 1.0
    shift: ShiftSpec = field(default_factory=ShiftSpec)
    seed: int = 0

    def __post_init__(self):
        if self.shared < 1:
            raise DomainError("need at least one shared class")
        if self.source_private < 0 or self.target_private < 0:
            raise DomainError("class counts must be non-negative")

    @property
    def num_known(self) -> int:
        return self.shared + self.source_private

    @property
    def setting(self) -> str:
        return {(False, False): "CDA", (True, False): "PDA", (False, True): "ODA",
                (True, True): "OPDA"}[(self.source_private > 0, self.target_private > 0)]

    def class_roles(self) -> Dict[int, str]:
        return split_roles(self.shared, self.source_private, self.target_private)


def split_roles(shared: int, source_private: int, target_private: int) -> Dict[int, str]:
    roles = {}
    for c in range(shared):
        roles[c] = SHARED
    for c in range(shared, shared + source_private):
        roles[c] = SOURCE_PRIVATE
    for c in range(shared + source_private, shared + source_private + target_private):
        roles[c] = TARGET_PRIVATE
    return roles


@dataclass
class Dataset:
    features: np.ndarray  # (N, dim)
    labels: np.ndarray  # (N,) int
    domain: str
    class_roles: Dict[int, str]
    dropped: int = 0

    def __post_init__(self):
        forbidden = TARGET_PRIVATE if self.domain == "source" else SOURCE_PRIVATE
        bad = [c for c in np.unique(self.labels) if self.class_roles.get(int(c)) in (None, forbidden)]
        if bad:
            raise DomainError(f"{self.domain} dataset holds classes {bad} not allowed in that domain")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def num_known(self) -> int:
        return sum(r != TARGET_PRIVATE for r in self.class_roles.values())

    def eval_labels(self) -> np.ndarray:
        """Labels with every target-private class folded into UNKNOWN = K."""
        k = self.num_known
        return np.where(self.labels >= k, k, self.labels)

    def equals(self, other: "Dataset") -> bool:
        return (self.domain == other.domain and self.class_roles == other.class_roles
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.features, other.features))


def _counts(value, n):
    if isinstance(value, int):
        return [value] * n
    if len(value) != n:
        raise DomainError(f"expected {n} per-class counts, got {len(value)}")
    return list(value)


def _rotation(rng, dim, angle):
    if angle == 0:
        return np.eye(dim)
    a = rng.normal(size=(dim, dim))
    skew = (a - a.T) / 2.0
    skew /= np.linalg.norm(skew, 2)
    return expm(angle * skew)


def generate_scenario(spec: ScenarioSpec):
    """Gaussian class clusters; the target domain sees them through a random affine map."""
    if spec.dim < 2:
        raise DomainError("dim must be at least 2")
    rng = np.random.default_rng(spec.seed)
    roles = spec.class_roles()
    n_classes = len(roles)
    means = rng.normal(0.0, spec.class_sep, size=(n_classes, spec.dim))

    sh = spec.shift
    rot = _rotation(rng, spec.dim, sh.rotation)
    scale = rng.uniform(sh.scale_low, sh.scale_high, size=spec.dim)
    offset = rng.normal(0.0, sh.translation, size=spec.dim) if sh.translation else np.zeros(spec.dim)
    transform = rot * scale[None, :]

    source_classes = [c for c, r in roles.items() if r != TARGET_PRIVATE]
    target_classes = [c for c, r in roles.items() if r != SOURCE_PRIVATE]
    src_counts = _counts(spec.samples_per_class_source, len(source_classes))
    tgt_counts = _counts(spec.samples_per_class_target, len(target_classes))

    # one sample pool per class, shared by both domains, so that an identity
    # shift with no extra noise reproduces the source samples exactly
    n_src = dict(zip(source_classes, src_counts))
    n_tgt = dict(zip(target_classes, tgt_counts))
    pools = {}
    for c in range(n_classes):
        n = max(n_src.get(c, 0), n_tgt.get(c, 0))
        pools[c] = means[c] + spec.spread * rng.normal(size=(n, spec.dim))

    xs = [pools[c][:n_src[c]] for c in source_classes]
    ys = [np.full(n_src[c], c) for c in source_classes]
    xt, yt = [], []
    for c in target_classes:
        x = pools[c][:n_tgt[c]] @ transform.T + offset
        if sh.noise:
            x = x + sh.noise * rng.normal(size=x.shape)
        xt.append(x)
        yt.append(np.full(n_tgt[c], c))
    source = Dataset(np.vstack(xs), np.concatenate(ys).astype(np.int64), "source", roles)
    target = Dataset(np.vstack(xt), np.concatenate(yt).astype(np.int64), "target", roles)
    return source, target


def known_mixup_probability(k_source: int, k_target: int, k_shared: int) -> float:
    """Chance that a uniform (source label, target label) pair lands on one shared class."""
    if k_source < 1 or k_target < 1 or k_shared < 0 or k_shared > min(k_source, k_target):
        raise DomainError("need K, K' >= 1 and 0 <= K_s <= min(K, K')")
    return k_shared / (k_source * k_target)


# CSV I/O

def write_feature_csv(path, *datasets: Dataset) -> None:
    dim = datasets[0].features.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["domain", "label", *[f"f{i}" for i in range(dim)]])
        for ds in datasets:
            for x, y in zip(ds.features, ds.labels):
                w.writerow([ds.domain, int(y), *(repr(float(v)) for v in x)])


def load_feature_csv(paths, split: Sequence[int]):
    """Read ``domain,label,f0,...`` rows into (source, target) datasets.

    ``split`` is the (shared, source_private, target_private) class-count
    triple. Rows whose class cannot occur in their domain are dropped and
    counted in ``Dataset.dropped``.
    """
    if isinstance(paths, (str, Path)):
        paths = [paths]
    roles = split_roles(*split)
    rows = {"source": ([], []), "target": ([], [])}
    dropped = {"source": 0, "target": 0}
    dim = None
    for path in paths:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if not header:
                raise ParseError(f"{path} is empty", line=1)
            if header[:2] != ["domain", "label"] or len(header) < 3:
                raise ParseError(f"{path}: header must start with domain,label,f0", line=1)
            width = len(header)
            if dim is None:
                dim = width - 2
            elif width - 2 != dim:
                raise ParseError(f"{path}: feature width {width - 2} differs from {dim}", line=1)
            for lineno, rec in enumerate(reader, start=2):
                if not rec:
                    continue
                if len(rec) != width:
                    raise ParseError(f"{path}: expected {width} fields, got {len(rec)}", line=lineno)
                domain = rec[0]
                if domain not in rows:
                    raise ParseError(f"{path}: unknown domain tag {domain!r}", line=lineno)
                try:
                    label = int(rec[1])
                    feats = [float(v) for v in rec[2:]]
                except ValueError as exc:
                    raise ParseError(f"{path}: {exc}", line=lineno) from exc
                forbidden = TARGET_PRIVATE if domain == "source" else SOURCE_PRIVATE
                if roles.get(label) in (None, forbidden):
                    dropped[domain] += 1
                    continue
                rows[domain][0].append(feats)
                rows[domain][1].append(label)
    if dim is None:
        raise ParseError("no input files", line=None)
    out = []
    for domain in ("source", "target"):
        feats, labels = rows[domain]
        if dropped[domain]:
            log.warning("dropped %d %s rows with classes outside the %s label set",
                        dropped[domain], domain, domain)
        x = np.asarray(feats, dtype=np.float64).reshape(-1, dim)
        out.append(Dataset(x, np.asarray(labels, dtype=np.int64), domain, roles, dropped[domain]))
    return tuple(out)


# scenario config files

SCENARIO_KEYS = {
    "shared": int, "source_private": int, "target_private": int, "dim": int,
    "class_sep": float, "spread": float, "seed": int,
}
SHIFT_KEYS = {"rotation": float, "scale_low": float, "scale_high": float, "translation": float, "noise": float}


def _int_list(text):
    parts = [p for p in text.replace(",", " ").split() if p]
    return int(parts[0]) if len(parts) == 1 else [int(p) for p in parts]


def scenario_from_mapping(values: Dict[str, str], default_seed: int = 0) -> ScenarioSpec:
    """Build a spec from flat string key/values (shift keys may carry a ``shift_`` prefix)."""
    kw, shift = {}, {}
    for key, raw in values.items():
        key = key.strip().lower()
        try:
            if key in SCENARIO_KEYS:
                kw[key] = SCENARIO_KEYS[key](raw)
            elif key in ("samples_per_class_source", "samples_per_class_target"):
                kw[key] = _int_list(raw)
            elif key.removeprefix("shift_") in SHIFT_KEYS:
                name = key.removeprefix("shift_")
                shift[name] = SHIFT_KEYS[name](raw)
            elif key == "split":
                a, b, c = (int(p) for p in raw.replace("/", " ").split())
                kw.update(shared=a, source_private=b, target_private=c)
            else:
                raise ParseError(f"unknown scenario key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(f"bad value for {key!r}: {raw!r}") from exc
    if "shared" not in kw:
        raise ParseError("scenario needs 'shared' (or 'split')")
    kw.setdefault("seed", default_seed)
    return ScenarioSpec(shift=ShiftSpec(**shift), **kw)


def read_scenario_file(path, default_seed: int = 0) -> ScenarioSpec:
    text = Path(path).read_text(encoding="utf-8")
    parser = configparser.ConfigParser()
    if not text.lstrip().startswith("["):
        text = "[scenario]\n" + text
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ParseError(f"{path}: {exc}") from exc
    section = "scenario" if parser.has_section("scenario") else parser.sections()[0]
    values = dict(parser[section])
    if parser.has_section("shift"):
        values.update({f"shift_{k}": v for k, v in parser["shift"].items()})
    return scenario_from_mapping(values, default_seed)


# batching

@dataclass
class PairedBatch:
    source_x: np.ndarray
    source_y: np.ndarray
    target_x: np.ndarray
    target_idx: np.ndarray  # memory-bank rows of the target samples


def _epoch_order(rng, n, length):
    reps = -(-length // n)
    return np.concatenate([rng.permutation(n) for _ in range(reps)])[:length]


def iterations_per_epoch(n_source: int, n_target: int, batch: int) -> int:
    return max(n_source, n_target) // batch


def epoch_batches(source: Dataset, target: Dataset, batch: int, rng: np.random.Generator) -> Iterator[PairedBatch]:
    """One epoch of paired batches; the smaller domain wraps around."""
    ns, nt = len(source), len(target)
    if ns == 0 or nt == 0:
        raise DomainError("empty dataset")
    if not 1 <= batch <= min(ns, nt):
        raise DomainError(f"batch {batch} must be in [1, min(N_s, N_t) = {min(ns, nt)}]")
    iters = iterations_per_epoch(ns, nt, batch)
    order_s = _epoch_order(rng, ns, iters * batch)
    order_t = _epoch_order(rng, nt, iters * batch)
    for i in range(iters):
        s = order_s[i * batch:(i + 1) * batch]
        t = order_t[i * batch:(i + 1) * batch]
        yield PairedBatch(source.features[s], source.labels[s], target.features[t], t)


def batch_iter(source: Dataset, target: Dataset, batch: int, seed, epochs: int | None = None):
    """Stream ``(epoch, PairedBatch)`` with epochs counted from 1; endless if ``epochs`` is None."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    epoch = 1
    while epochs is None or epoch <= epochs:
        for b in epoch_batches(source, target, batch, rng):
            yield epoch, b
        epoch += 1
