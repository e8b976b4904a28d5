"""Experiment drivers: train the variants, extract banks, reduce, evaluate, tabulate.

An :class:`Experiment` owns one configuration and memoises every trained
model by ``(seed, protocol mode, variant)``, so several ablations over the
same seeds share their training cost.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .bank import FeatureBank, normalize_segments
from .ensemble import ConfigError, EnsembleModel
from .reduce import fit_autoencoder, fit_pca, fit_random_projector
from .retrieval import EvalProtocol, EvalReport, evaluate_banks
from .synthdata import Dataset, Protocol, generate_dataset, make_protocol
from .training import RunReport, TrainConfig, extract, new_model, train

log = logging.getLogger(__name__)

ABLATION_KINDS = ("components", "depth", "reduction-curve", "concat-vs-average", "autoencoder")
VARIANTS = ("baseline", "self-ensemble", "fullcomb")
MODES = ("leave-one-out", "single-domain")


def _strict(cls, data: dict, what: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown {what} keys: {', '.join(unknown)}")
    return cls(**data)


@dataclass
class DataConfig:
    num_identities: int = 40
    num_domains: int = 4
    num_cameras: int = 2
    images_per: int = 4
    image_hw: Tuple[int, int] = (32, 16)
    train_fraction: float = 0.5
    style_strength: float = 2.0
    camera_strength: float = 0.0

    def __post_init__(self):
        self.image_hw = tuple(self.image_hw)

    @classmethod
    def from_dict(cls, data: dict) -> "DataConfig":
        return _strict(cls, data, "data config")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    target_domain: int = 3          # held out under leave-one-out
    source_domain: int = 0          # trained and tested under single-domain
    pca_dim: int = 64
    reduction_steps: int = 6        # d in {D, D/2, ..., D/2**(steps-1)}
    ae_epochs: int = 150
    ae_loss: str = "l2"
    ae_lr: float = 1e-3
    distance: str = "euclidean"
    normalize_heads: bool = False
    depths: Tuple[int, ...] = (0, 1, 2, 3)

    def __post_init__(self):
        if isinstance(self.data, dict):
            self.data = DataConfig.from_dict(self.data)
        if isinstance(self.train, dict):
            self.train = TrainConfig.from_dict(self.train)
        self.depths = tuple(self.depths)
        EvalProtocol(self.distance)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        return _strict(cls, data, "experiment config")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.to_dict() if hasattr(v, "to_dict") else (list(v) if isinstance(v, tuple) else v)
        return out


def desk_config(**overrides) -> ExperimentConfig:
    """The small configuration used by the acceptance experiments."""
    # final maps stay 16x8: at 8x4 the instance statistics are too coarse and IN heads collapse
    trunk = dict(image_hw=(32, 16), stem_width=16, stem_stride=1, stage_widths=(16, 32, 64),
                 stage_blocks=(1, 2, 2), stage_strides=(2, 1, 1))
    train_cfg = TrainConfig(epochs=30, warmup_epochs=3, milestones=(18, 25), optimizer="adam",
                            lr_base=2e-3, lr_start=2e-5, margin=0.3, trunk=trunk)
    # a quarter of the ids train; the rest make a larger, less noisy test set
    data = DataConfig(num_identities=68, train_fraction=0.25, images_per=2)
    cfg = ExperimentConfig(data=data, train=train_cfg)
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


def variant_config(base: TrainConfig, variant: str, depth: Optional[int] = None) -> TrainConfig:
    """Training config of one ablation cell.

    ``baseline`` is a single head (depth 0); ``self-ensemble`` clones
    ``2**depth`` heads that all keep batch norm only; ``fullcomb`` uses every
    IN pattern at ``depth``.
    """
    depth = base.depth if depth is None else depth
    data = base.to_dict()
    if variant == "baseline":
        data.update(depth=0, patterns=None)
    elif variant == "self-ensemble":
        data.update(depth=depth, patterns=["0" * depth] * (1 << depth))
    elif variant == "fullcomb":
        data.update(depth=depth, patterns=None)
    else:
        raise ConfigError(f"unknown variant {variant!r}")
    return TrainConfig.from_dict(data)


@dataclass
class TrainedRun:
    model: EnsembleModel
    report: RunReport
    train_bank: FeatureBank
    query_bank: FeatureBank
    gallery_bank: FeatureBank


def _bank(model, dataset: Dataset, index: np.ndarray) -> FeatureBank:
    m = dataset.manifest
    split = m.column("split")[index]
    return extract(model, dataset.images[index], m.column("identity")[index], m.column("camera")[index],
                   m.column("domain")[index], split)


def train_on_protocol(dataset: Dataset, protocol: Protocol, cfg: TrainConfig) -> TrainedRun:
    """Train on the protocol's training rows (labels remapped to ``0..C-1``) and extract banks."""
    ids = dataset.manifest.column("identity")[protocol.train]
    classes, labels = np.unique(ids, return_inverse=True)
    model = new_model(cfg, len(classes))
    report = train(model, dataset.images[protocol.train], labels, cfg)
    run = TrainedRun(model, report, _bank(model, dataset, protocol.train),
                     _bank(model, dataset, protocol.query), _bank(model, dataset, protocol.gallery))
    model.clear_caches()
    return run


class Experiment:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self._data: Dict[int, Dataset] = {}
        self._runs: Dict[tuple, TrainedRun] = {}

    def dataset(self, seed: int) -> Dataset:
        if seed not in self._data:
            self._data[seed] = generate_dataset(seed=seed, **self.cfg.data.to_dict())
        return self._data[seed]

    def protocol(self, seed: int, mode: str) -> Protocol:
        domain = self.cfg.target_domain if mode == "leave-one-out" else self.cfg.source_domain
        return make_protocol(self.dataset(seed).manifest, mode, domain)

    def run(self, seed: int, mode: str, variant: str, depth: Optional[int] = None) -> TrainedRun:
        depth = self.cfg.train.depth if depth is None else depth
        key = (seed, mode, variant, 0 if variant == "baseline" else depth)
        if key not in self._runs:
            base = TrainConfig.from_dict({**self.cfg.train.to_dict(), "seed": seed})
            cfg = variant_config(base, variant, depth)
            start = time.perf_counter()
            self._runs[key] = train_on_protocol(self.dataset(seed), self.protocol(seed, mode), cfg)
            log.info("trained %s in %.1fs", key, time.perf_counter() - start)
        return self._runs[key]

    # -- evaluation helpers --------------------------------------------------

    def _protocol(self) -> EvalProtocol:
        return EvalProtocol(self.cfg.distance)

    def _prep(self, bank: FeatureBank) -> FeatureBank:
        return normalize_segments(bank) if self.cfg.normalize_heads else bank

    def evaluate(self, run: TrainedRun, reducer: str = "none", d: Optional[int] = None,
                 seed: int = 0) -> EvalReport:
        """mAP of one trained run after an optional reduction fitted on its training bank."""
        tr, q, g = (self._prep(b) for b in (run.train_bank, run.query_bank, run.gallery_bank))
        if reducer == "average":
            q, g = (b.with_features(np.mean([b.segment(k) for k in range(len(b.segments))], axis=0))
                    for b in (q, g))
        elif reducer != "none":
            d = min(d or self.cfg.pca_dim, tr.dim)
            if reducer == "pca":
                model = fit_pca(tr, min(d, len(tr)))
            elif reducer == "rp":
                model = fit_random_projector(tr.dim, d, seed)
            elif reducer == "ae":
                model = fit_autoencoder(tr, d, self.cfg.ae_loss, self.cfg.ae_epochs, self.cfg.ae_lr, seed=seed)
            else:
                raise ConfigError(f"unknown reducer {reducer!r}")
            q, g = model.transform(q), model.transform(g)
        return evaluate_banks(q, g, self._protocol())


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

@dataclass
class AblationRow:
    kind: str
    cell: str
    mode: str
    values: List[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def std(self) -> float:
        return float(np.std(self.values))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "cell": self.cell, "mode": self.mode, "values": self.values,
                "mean": self.mean, "std": self.std}


@dataclass
class AblationTable:
    kind: str
    seeds: List[int]
    rows: List[AblationRow] = field(default_factory=list)
    plot: Dict[str, object] = field(default_factory=dict)
    seconds: float = 0.0

    def get(self, cell: str, mode: str) -> AblationRow:
        for row in self.rows:
            if row.cell == cell and row.mode == mode:
                return row
        raise KeyError((cell, mode))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "seeds": self.seeds, "rows": [r.to_dict() for r in self.rows],
                "plot": self.plot, "seconds": self.seconds}

    def format(self) -> str:
        lines = [f"{'cell':<28}{'mode':<16}{'mAP mean':>10}{'std':>8}"]
        for r in self.rows:
            lines.append(f"{r.cell:<28}{r.mode:<16}{100 * r.mean:>10.2f}{100 * r.std:>8.2f}")
        return "\n".join(lines)


def reduction_dims(D: int, steps: int) -> List[int]:
    return [max(1, D >> i) for i in range(steps)]


def run_ablation(kind: str, cfg: ExperimentConfig, seeds: Sequence[int],
                 experiment: Optional[Experiment] = None, out_dir=None) -> AblationTable:
    """Seed-averaged table of mAPs for one ablation kind.

    ``components``: baseline, uniform self-ensemble and FullComb-IN under
    both protocols (concatenated features reduced by PCA to ``pca_dim``).
    ``depth``: FullComb-IN at every depth in ``cfg.depths``.
    ``reduction-curve``: PCA and random projection of the FullComb-IN
    features at ``d = D, D/2, ...``.
    ``concat-vs-average``: concatenation against the coordinatewise mean.
    ``autoencoder``: PCA against the autoencoder at ``pca_dim``.
    """
    if kind not in ABLATION_KINDS:
        raise ConfigError(f"unknown ablation kind {kind!r}; expected one of {ABLATION_KINDS}")
    exp = experiment or Experiment(cfg)
    seeds = list(seeds)
    table = AblationTable(kind, seeds)
    start = time.perf_counter()
    cells: Dict[Tuple[str, str], List[float]] = {}

    def add(cell, mode, value):
        cells.setdefault((cell, mode), []).append(float(value))

    for seed in seeds:
        for mode in MODES:
            if kind == "components":
                for variant in VARIANTS:
                    add(variant, mode, exp.evaluate(exp.run(seed, mode, variant), "pca", seed=seed).mAP)
            elif kind == "depth":
                for depth in cfg.depths:
                    variant = "baseline" if depth == 0 else "fullcomb"
                    add(f"depth={depth}", mode,
                        exp.evaluate(exp.run(seed, mode, variant, depth), "pca", seed=seed).mAP)
            elif kind == "reduction-curve":
                run = exp.run(seed, mode, "fullcomb")
                for d in reduction_dims(run.train_bank.dim, cfg.reduction_steps):
                    add(f"pca d={d}", mode, exp.evaluate(run, "pca", d, seed).mAP)
                    add(f"rp d={d}", mode, exp.evaluate(run, "rp", d, seed).mAP)
            elif kind == "concat-vs-average":
                run = exp.run(seed, mode, "fullcomb")
                add("concat", mode, exp.evaluate(run).mAP)
                add("average", mode, exp.evaluate(run, "average").mAP)
            elif kind == "autoencoder":
                run = exp.run(seed, mode, "fullcomb")
                add(f"pca d={cfg.pca_dim}", mode, exp.evaluate(run, "pca", seed=seed).mAP)
                add(f"ae d={cfg.pca_dim}", mode, exp.evaluate(run, "ae", seed=seed).mAP)
    table.rows = [AblationRow(kind, cell, mode, vals) for (cell, mode), vals in cells.items()]
    if kind == "reduction-curve":
        dims = sorted({int(r.cell.split("=")[1]) for r in table.rows}, reverse=True)
        table.plot = {"x": "dim", "y": "mAP", "dims": dims, "series": {
            f"{method} {mode}": [table.get(f"{method} d={d}", mode).mean for d in dims]
            for method in ("pca", "rp") for mode in MODES}}
    table.seconds = time.perf_counter() - start
    if out_dir is not None:
        from .store import write_json
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / f"ablation-{kind}.json", table.to_dict())
        if table.plot:
            write_json(out / f"plot-{kind}.json", table.plot)
    return table
