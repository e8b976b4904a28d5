"""Training configuration, learning-rate schedule, P x K sampling, training and extraction."""

from __future__ import annotations

import hashlib
import json
import logging
import platform
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .bank import SPLIT_CODES, FeatureBank
from .ensemble import ConfigError, EnsembleModel, TrunkConfig, build, concat_features
from .inpattern import PatternSet, enumerate_full_combinatorial
from .losses import LossWeights, TripletBatchLayout, total_loss
from .ndcore import NumericError
from .optim import make_optimizer

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 40
    P: int = 8
    K: int = 4
    lr_start: float = 1e-3
    lr_base: float = 0.05
    warmup_epochs: int = 5
    milestones: Tuple[int, ...] = (20, 30)
    decay: float = 0.1
    optimizer: str = "sgd"
    momentum: float = 0.9
    weight_decay: float = 5e-4
    loss_weights: Tuple[float, float, float] = (1.0, 1.0, 0.0005)
    margin: float = 0.0
    squared_center: bool = False
    seed: int = 0
    depth: int = 3
    patterns: Optional[Tuple[str, ...]] = None     # None -> fully combinatorial at ``depth``
    trunk: Dict = field(default_factory=dict)
    random_erase: float = 0.0
    classifier_std: float = 0.01

    def __post_init__(self):
        self.milestones = tuple(self.milestones)
        self.loss_weights = tuple(self.loss_weights)
        if self.patterns is not None:
            self.patterns = tuple(self.patterns)
        try:
            self.trunk = TrunkConfig(**self.trunk).to_dict()     # canonical, fully spelled out
        except TypeError as exc:
            raise ConfigError(f"bad trunk config: {exc}") from None
        if self.warmup_epochs >= self.epochs:
            raise ConfigError("warmup_epochs must be smaller than epochs")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ConfigError("milestones must be strictly increasing")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        TripletBatchLayout(self.P, self.K)
        LossWeights(*self.loss_weights)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        def plain(v):
            if isinstance(v, (tuple, list)):
                return [plain(x) for x in v]
            if isinstance(v, dict):
                return {k: plain(x) for k, x in v.items()}
            return v
        return {k: plain(v) for k, v in asdict(self).items()}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def pattern_set(self) -> PatternSet:
        if self.patterns is None:
            return enumerate_full_combinatorial(self.depth)
        ps = PatternSet.from_strings(list(self.patterns))
        if ps.depth != self.depth:
            raise ConfigError(f"patterns have depth {ps.depth} but depth is {self.depth}")
        return ps

    def trunk_config(self) -> TrunkConfig:
        return TrunkConfig(**self.trunk)


PAPER_SCHEDULE = dict(lr_start=1.75e-6, lr_base=1.75e-4, warmup_epochs=10, milestones=(30, 55), decay=0.1)


def lr_at(cfg, epoch: float) -> float:
    """Linear warm-up from ``lr_start`` to ``lr_base``, then ``decay`` at each milestone."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    get = cfg.get if isinstance(cfg, dict) else lambda k: getattr(cfg, k)
    start, base, warm = get("lr_start"), get("lr_base"), get("warmup_epochs")
    if warm > 0 and epoch < warm:
        return start + (base - start) * epoch / warm
    passed = sum(1 for m in get("milestones") if epoch >= m)
    return base * get("decay") ** passed


def pk_batches(labels: np.ndarray, P: int, K: int, rng: np.random.Generator) -> List[np.ndarray]:
    """One epoch of P x K batches.

    Each identity's samples are shuffled and cut into chunks of K (the last
    chunk is topped up by resampling); batches draw P identities that still
    have chunks left until fewer than P remain.
    """
    chunks: Dict[int, List[np.ndarray]] = {}
    for ident in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == ident))
        if len(idx) < K:
            idx = np.concatenate([idx, rng.choice(idx, K - len(idx))])
        parts = [idx[i:i + K] for i in range(0, len(idx), K)]
        if len(parts[-1]) < K:
            parts[-1] = np.concatenate([parts[-1], rng.choice(idx, K - len(parts[-1]), replace=False)])
        chunks[int(ident)] = parts
    batches = []
    while True:
        alive = sorted(k for k, v in chunks.items() if v)
        if len(alive) < P:
            break
        chosen = rng.choice(alive, P, replace=False)
        batches.append(np.concatenate([chunks[int(c)].pop() for c in chosen]))
    return batches


def random_erase(x: np.ndarray, p: float, rng: np.random.Generator) -> np.ndarray:
    """Erase a random rectangle in each image with probability ``p`` (fill: per-image mean)."""
    if p <= 0:
        return x
    x = x.copy()
    B, C, H, W = x.shape
    for b in range(B):
        if rng.random() >= p:
            continue
        area = rng.uniform(0.02, 0.3) * H * W
        aspect = np.exp(rng.uniform(np.log(0.3), np.log(3.3)))
        h = min(H, max(1, int(round(np.sqrt(area * aspect)))))
        w = min(W, max(1, int(round(np.sqrt(area / aspect)))))
        y0, x0 = rng.integers(0, H - h + 1), rng.integers(0, W - w + 1)
        x[b, :, y0:y0 + h, x0:x0 + w] = x[b].mean(axis=(1, 2), keepdims=True)
    return x


@dataclass
class RunReport:
    config: dict
    epoch_losses: List[float] = field(default_factory=list)
    epoch_terms: List[Dict[str, float]] = field(default_factory=list)
    evals: Dict[str, dict] = field(default_factory=dict)
    environment: Dict[str, str] = field(default_factory=dict)
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def environment_fingerprint() -> Dict[str, str]:
    return {"python": platform.python_version(), "numpy": np.__version__,
            "machine": platform.machine(), "system": platform.system()}


def new_model(cfg: TrainConfig, num_classes: int) -> EnsembleModel:
    return build(cfg.trunk_config(), cfg.pattern_set(), seed=cfg.seed, num_classes=num_classes,
                 classifier_std=cfg.classifier_std)


def train(model: EnsembleModel, images: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
          report: Optional[RunReport] = None) -> RunReport:
    """Train ``model`` in place on ``images`` with identity ``labels`` in ``[0, num_classes)``.

    Raises :class:`NumericError` naming the epoch, head and loss term if a
    loss becomes non-finite.
    """
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ConfigError("empty training split")
    if labels.max() >= model.num_classes:
        raise ConfigError("labels exceed the model's class count")
    report = report or RunReport(config=cfg.to_dict(), environment=environment_fingerprint())
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
    weights = LossWeights(*cfg.loss_weights)
    opt = make_optimizer(cfg.optimizer, model.parameters(), cfg.lr_base, cfg.momentum, cfg.weight_decay)
    start = time.perf_counter()
    model.train()
    for epoch in range(cfg.epochs):
        opt.lr = lr_at(cfg, epoch)
        batches = pk_batches(labels, cfg.P, cfg.K, rng)
        if not batches:
            raise ConfigError(f"{len(np.unique(labels))} identities cannot fill a batch of P={cfg.P}")
        epoch_total, terms = 0.0, {"ce": 0.0, "triplet": 0.0, "center": 0.0}
        for idx in batches:
            x = random_erase(images[idx], cfg.random_erase, rng)
            y = labels[idx]
            opt.zero_grad()
            feats = model.forward_all(x)
            out = total_loss(feats, y, [c.params["weight"].data for c in model.classifiers],
                             [c.data for c in model.centroids], weights, cfg.margin, cfg.squared_center)
            for k, head_terms in enumerate(out.per_head):
                for name, value in head_terms.items():
                    if not np.isfinite(value):
                        raise NumericError(f"non-finite loss at epoch {epoch}, head {k}, term {name}")
            for k in range(model.m):
                model.classifiers[k].params["weight"].grad += out.dclassifiers[k]
                model.centroids[k].grad += out.dcentroids[k]
            model.backward_all(out.dfeatures)
            opt.step()
            epoch_total += out.total
            for head_terms in out.per_head:
                for name in terms:
                    terms[name] += head_terms[name]
        n = len(batches)
        report.epoch_losses.append(epoch_total / n)
        report.epoch_terms.append({k: v / n for k, v in terms.items()})
        log.info("epoch %d lr %.3g loss %.4f", epoch, opt.lr, epoch_total / n)
    report.seconds += time.perf_counter() - start
    return report


def extract_features(model: EnsembleModel, images: np.ndarray, batch_size: int = 128) -> List[np.ndarray]:
    """Per-head features for every image, eval mode, in input order."""
    model.eval()
    per_head: List[List[np.ndarray]] = [[] for _ in range(model.m)]
    for start in range(0, len(images), batch_size):
        for k, f in enumerate(model.forward_all(images[start:start + batch_size])):
            per_head[k].append(f)
    model.train()
    return [np.concatenate(p).astype(np.float32) for p in per_head]


def extract(model: EnsembleModel, images: np.ndarray, identity, camera, domain, split,
            batch_size: int = 128) -> FeatureBank:
    """Feature bank of concatenated head features with one segment per head."""
    per_head = extract_features(model, images, batch_size)
    split = np.asarray([SPLIT_CODES[s] if isinstance(s, str) else s for s in split], dtype=np.int32)
    return FeatureBank(concat_features(per_head), identity, camera, domain, split,
                       tuple(f.shape[1] for f in per_head))
