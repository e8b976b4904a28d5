"""Self-ensemble feature extractor with one IN pattern per subhead.

A shared trunk feeds ``m`` heads.  Head 1 is the trunk's own tail; the
remaining heads are weight copies of that tail taken at build time, each
re-stamped with its own IN pattern.  Every head ends in global average
pooling and owns a classifier and a set of class centroids for training.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .grouped import GroupedHeads
from .inpattern import BottleneckBlock, INPattern, PatternSet
from .ndcore import (BatchNorm, Conv2d, DimensionError, GlobalAvgPool, Linear, Module, ReLU,
                     Sequential, Tensor)


class ConfigError(ValueError):
    """Raised when a model or training configuration is inconsistent."""


@dataclass
class TrunkConfig:
    in_channels: int = 3
    image_hw: Tuple[int, int] = (64, 32)
    stem_width: int = 16
    stem_stride: int = 2
    stage_widths: Tuple[int, ...] = (16, 32, 64, 64)
    stage_blocks: Tuple[int, ...] = (1, 1, 2, 2)
    stage_strides: Tuple[int, ...] = (1, 2, 2, 1)
    reduction: int = 4
    in_position: str = "pre_relu"

    def __post_init__(self):
        self.image_hw = tuple(self.image_hw)
        self.stage_widths = tuple(self.stage_widths)
        self.stage_blocks = tuple(self.stage_blocks)
        self.stage_strides = tuple(self.stage_strides)
        if not (len(self.stage_widths) == len(self.stage_blocks) == len(self.stage_strides)):
            raise ConfigError("stage_widths, stage_blocks and stage_strides must have equal length")

    @property
    def feature_dim(self) -> int:
        return self.stage_widths[-1]

    @property
    def num_blocks(self) -> int:
        return sum(self.stage_blocks)

    def block_specs(self) -> List[Tuple[int, int, int]]:
        """(in_channels, out_channels, stride) of every bottleneck in order."""
        specs, ch = [], self.stem_width
        for width, n, stride in zip(self.stage_widths, self.stage_blocks, self.stage_strides):
            for i in range(n):
                specs.append((ch, width, stride if i == 0 else 1))
                ch = width
        return specs

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass(frozen=True)
class SubheadSpec:
    clone_depth: int
    pattern: INPattern

    def __post_init__(self):
        if self.clone_depth != self.pattern.depth:
            raise ConfigError(f"clone depth {self.clone_depth} != pattern depth {self.pattern.depth}")


class Head(Module):
    """The cloned tail of the network: ``depth`` bottlenecks and global pooling."""

    def __init__(self, blocks: Sequence[BottleneckBlock], pattern: INPattern):
        super().__init__()
        self.blocks = list(blocks)
        for i, block in enumerate(self.blocks):
            self.add(f"block{i}", block)
        self.pool = self.add("pool", GlobalAvgPool())
        self.set_pattern(pattern)

    def set_pattern(self, pattern: INPattern) -> None:
        if pattern.depth != len(self.blocks):
            raise ConfigError(f"pattern {pattern} does not fit a head of depth {len(self.blocks)}")
        self.pattern = pattern
        for block, flag in zip(self.blocks, pattern.forward_order()):
            block.apply_in = flag

    def forward_blocks(self, x) -> List[np.ndarray]:
        acts = [x]
        for block in self.blocks:
            acts.append(block.forward(acts[-1]))
        return acts


class EnsembleModel(Module):
    def __init__(self, trunk_cfg: TrunkConfig, subheads: Sequence[SubheadSpec],
                 num_classes: int, seed: int = 0, classifier_std: float = 0.01):
        super().__init__()
        if not subheads:
            raise ConfigError("at least one subhead is required")
        depth = subheads[0].clone_depth
        if any(s.clone_depth > depth for s in subheads[1:]):
            raise ConfigError("head 1 must clone the deepest tail")
        if depth > trunk_cfg.num_blocks:
            raise ConfigError(f"pattern depth {depth} exceeds the {trunk_cfg.num_blocks} bottlenecks available")
        self.cfg = trunk_cfg
        self.subheads = list(subheads)
        self.num_classes = num_classes
        self.seed = seed
        rng = np.random.default_rng(seed)

        blocks = [BottleneckBlock(i, o, s, trunk_cfg.reduction, in_position=trunk_cfg.in_position, rng=rng)
                  for i, o, s in trunk_cfg.block_specs()]
        split = len(blocks) - depth
        stem = Sequential(Conv2d(trunk_cfg.in_channels, trunk_cfg.stem_width, 3,
                                 stride=trunk_cfg.stem_stride, padding=1, rng=rng),
                          BatchNorm(trunk_cfg.stem_width), ReLU())
        self.trunk = self.add("trunk", Sequential(stem, *blocks[:split]))
        tail = blocks[split:]

        self.heads: List[Head] = []
        for k, spec in enumerate(self.subheads):
            src = tail if k == 0 else copy.deepcopy(tail[depth - spec.clone_depth:])
            head = Head(src, spec.pattern)
            self.heads.append(self.add(f"heads.{k}", head))

        F = trunk_cfg.feature_dim
        self.classifiers: List[Linear] = []
        self.centroids: List[Tensor] = []
        for k in range(len(self.subheads)):
            clf = Linear(F, num_classes, bias=False, rng=rng, std=classifier_std)
            self.classifiers.append(self.add(f"classifiers.{k}", clf))
            self.params[f"centroids.{k}"] = Tensor(np.zeros((num_classes, F), np.float32))
            self.centroids.append(self.params[f"centroids.{k}"])
        self._acts: List[np.ndarray] = []
        self._grouped: Optional[GroupedHeads] = None
        self.grouped = True     # run equal-depth heads side by side (same result, faster)

    @property
    def m(self) -> int:
        return len(self.heads)

    @property
    def depth(self) -> int:
        return self.subheads[0].clone_depth

    @property
    def feature_dim(self) -> int:
        return self.cfg.feature_dim

    @property
    def patterns(self) -> List[str]:
        return [str(s.pattern) for s in self.subheads]

    def architecture(self) -> dict:
        return {"trunk": self.cfg.to_dict(), "patterns": self.patterns,
                "clone_depths": [s.clone_depth for s in self.subheads],
                "num_classes": self.num_classes, "feature_dim": self.feature_dim}

    def _check_input(self, x):
        c = self.cfg
        if x.ndim != 4 or x.shape[1:] != (c.in_channels, *c.image_hw):
            raise DimensionError(f"model expects input [B,{c.in_channels},{c.image_hw[0]},{c.image_hw[1]}],"
                                 f" got {x.shape}")

    def clear_caches(self) -> "EnsembleModel":
        self._acts = []
        return super().clear_caches()

    def _can_group(self) -> bool:
        return (self.grouped and self.m > 1 and self.depth > 0
                and all(s.clone_depth == self.depth for s in self.subheads)
                and all(b.pre_in_hook is None for h in self.heads for b in h.blocks))

    def forward_all(self, x) -> List[np.ndarray]:
        """Per-head features in canonical head order."""
        self._check_input(x)
        shared = self.trunk.forward(x)
        self._grouped = None
        if self._can_group():
            self._grouped = GroupedHeads(self.heads, self.training)
            return self._grouped.forward(shared)
        acts = self.heads[0].forward_blocks(shared)
        self._acts = acts
        feats = [self.heads[0].pool.forward(acts[-1])]
        for head, spec in zip(self.heads[1:], self.subheads[1:]):
            h_in = acts[self.depth - spec.clone_depth]
            out = h_in
            for block in head.blocks:
                out = block.forward(out)
            feats.append(head.pool.forward(out))
        return feats

    def backward_all(self, dfeats: Sequence[Optional[np.ndarray]]) -> np.ndarray:
        """Backpropagate per-head feature gradients (``None`` = no gradient for that head)."""
        if self._grouped is not None:
            return self.trunk.backward(self._grouped.backward(dfeats))
        depth = self.depth
        extra: Dict[int, np.ndarray] = {}
        for head, spec, df in zip(self.heads[1:], self.subheads[1:], dfeats[1:]):
            pos = depth - spec.clone_depth
            if df is None:
                continue
            d = head.pool.backward(df)
            for block in reversed(head.blocks):
                d = block.backward(d)
            extra[pos] = extra[pos] + d if pos in extra else d
        head1 = self.heads[0]
        if dfeats[0] is not None:
            d = head1.pool.backward(dfeats[0])
        else:
            d = np.zeros_like(self._acts[-1])
        for j in range(depth - 1, -1, -1):
            if j + 1 in extra:
                d = d + extra[j + 1]
            d = head1.blocks[j].backward(d)
        if 0 in extra:
            d = d + extra[0]
        return self.trunk.backward(d)

    def extract_blocks(self) -> List[BottleneckBlock]:
        return list(self.trunk.children.values())[1:] + self.heads[0].blocks


def build(trunk_cfg: TrunkConfig, patterns: PatternSet, seed: int = 0, num_classes: int = 2,
          classifier_std: float = 0.01) -> EnsembleModel:
    """Build an ensemble with one head per pattern, all cloned at the same depth."""
    specs = [SubheadSpec(patterns.depth, p) for p in patterns]
    return EnsembleModel(trunk_cfg, specs, num_classes, seed, classifier_std)


def forward_all(model: EnsembleModel, x) -> List[np.ndarray]:
    return model.forward_all(x)


def concat_features(per_head: Sequence[np.ndarray]) -> np.ndarray:
    """Concatenate per-head features along the last axis, preserving head order."""
    if len(per_head) == 0:
        raise ValueError("concat_features needs at least one head")
    return np.concatenate([np.asarray(f) for f in per_head], axis=-1)


def average_features(per_head: Sequence[np.ndarray]) -> np.ndarray:
    """Coordinatewise mean over heads; all heads must have the same width."""
    if len(per_head) == 0:
        raise ValueError("average_features needs at least one head")
    shapes = {np.shape(f) for f in per_head}
    if len(shapes) != 1:
        raise ValueError(f"average_features needs equal-length features, got {sorted(shapes)}")
    return np.mean(np.stack([np.asarray(f) for f in per_head]), axis=0)
