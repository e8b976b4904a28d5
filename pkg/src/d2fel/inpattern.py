"""Instance-normalization placement patterns and the bottleneck block that honours them.

Bottlenecks are counted backwards from the network output: bottleneck-1 is
the last block.  A pattern string lists bits deepest-first, so ``"011"``
means IN at the end of bottleneck-2 and bottleneck-1 but not bottleneck-3.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .ndcore import DEFAULT_EPS, BatchNorm, Conv2d, DimensionError, InstanceNorm, Module, ReLU

MAX_DEPTH = 8

IN_POSITIONS = ("pre_relu", "post_relu")


class CapacityError(ValueError):
    """Raised when a request would enumerate too many patterns."""


@dataclass(frozen=True)
class INPattern:
    depth: int
    mask: Tuple[bool, ...]  # mask[i] -> bottleneck-(i+1), i.e. index 0 is the last block

    def __post_init__(self):
        if self.depth < 0 or len(self.mask) != self.depth:
            raise ValueError(f"pattern mask length {len(self.mask)} != depth {self.depth}")

    @classmethod
    def from_string(cls, text: str) -> "INPattern":
        if any(ch not in "01" for ch in text):
            raise ValueError(f"pattern must be a string of 0/1, got {text!r}")
        return cls(len(text), tuple(ch == "1" for ch in reversed(text)))

    @classmethod
    def from_int(cls, value: int, depth: int) -> "INPattern":
        if not 0 <= value < (1 << depth) and not (depth == 0 and value == 0):
            raise ValueError(f"value {value} out of range for depth {depth}")
        return cls(depth, tuple(bool((value >> i) & 1) for i in range(depth)))

    @property
    def value(self) -> int:
        return sum(1 << i for i, bit in enumerate(self.mask) if bit)

    def applies_at(self, bottleneck: int) -> bool:
        """Whether IN follows bottleneck-``bottleneck`` (1-based from the output)."""
        return self.mask[bottleneck - 1]

    def forward_order(self) -> List[bool]:
        """Flags in execution order: bottleneck-depth first, bottleneck-1 last."""
        return list(reversed(self.mask))

    def __str__(self) -> str:
        return "".join("1" if b else "0" for b in reversed(self.mask))


@dataclass(frozen=True)
class PatternSet:
    depth: int
    patterns: Tuple[INPattern, ...]

    def __post_init__(self):
        if not self.patterns:
            raise ValueError("a pattern set needs at least one pattern")
        for p in self.patterns:
            if p.depth != self.depth:
                raise ValueError(f"pattern {p} has depth {p.depth}, expected {self.depth}")

    def __len__(self) -> int:
        return len(self.patterns)

    def __iter__(self):
        return iter(self.patterns)

    def __getitem__(self, i) -> INPattern:
        return self.patterns[i]

    @classmethod
    def from_strings(cls, texts: Sequence[str]) -> "PatternSet":
        pats = tuple(INPattern.from_string(t) for t in texts)
        return cls(pats[0].depth if pats else 0, pats)

    @classmethod
    def uniform(cls, depth: int, count: int, pattern: Optional[str] = None) -> "PatternSet":
        """``count`` heads that all share one pattern (default: no IN anywhere)."""
        p = INPattern.from_string(pattern) if pattern is not None else INPattern(depth, (False,) * depth)
        return cls(depth, (p,) * count)

    def is_full(self) -> bool:
        return sorted(p.value for p in self.patterns) == list(range(1 << self.depth))

    def strings(self) -> List[str]:
        return [str(p) for p in self.patterns]


def enumerate_full_combinatorial(depth: int) -> PatternSet:
    """All ``2**depth`` placements in ascending binary order; pattern 0 is no IN."""
    if depth < 0:
        raise ValueError("depth must be non-negative")
    if depth > MAX_DEPTH:
        raise CapacityError(f"depth {depth} exceeds the supported maximum of {MAX_DEPTH}")
    return PatternSet(depth, tuple(INPattern.from_int(v, depth) for v in range(1 << depth)))


class BottleneckBlock(Module):
    """Residual bottleneck: 1x1 -> BN -> ReLU -> 3x3 -> BN -> ReLU -> 1x1 -> BN, + shortcut, ReLU.

    With ``apply_in`` set, instance normalization runs once at the end of
    the block, after the residual join.  ``in_position="pre_relu"`` puts it
    between the join and the final ReLU; ``"post_relu"`` puts it after.
    ``pre_in_hook``, if set, is applied to the activation entering IN.
    """

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1, reduction: int = 4,
                 apply_in: bool = False, in_position: str = "pre_relu",
                 eps: float = DEFAULT_EPS, rng: Optional[np.random.Generator] = None):
        super().__init__()
        if in_position not in IN_POSITIONS:
            raise ValueError(f"in_position must be one of {IN_POSITIONS}")
        rng = rng or np.random.default_rng(0)
        mid = max(out_ch // reduction, 1)
        self.in_ch, self.out_ch, self.stride = in_ch, out_ch, stride
        self.conv1 = self.add("conv1", Conv2d(in_ch, mid, 1, rng=rng))
        self.bn1 = self.add("bn1", BatchNorm(mid, eps=eps))
        self.relu1 = self.add("relu1", ReLU())
        self.conv2 = self.add("conv2", Conv2d(mid, mid, 3, stride=stride, padding=1, rng=rng))
        self.bn2 = self.add("bn2", BatchNorm(mid, eps=eps))
        self.relu2 = self.add("relu2", ReLU())
        self.conv3 = self.add("conv3", Conv2d(mid, out_ch, 1, rng=rng))
        self.bn3 = self.add("bn3", BatchNorm(out_ch, eps=eps))
        self.downsample = stride != 1 or in_ch != out_ch
        if self.downsample:
            self.conv_d = self.add("conv_d", Conv2d(in_ch, out_ch, 1, stride=stride, rng=rng))
            self.bn_d = self.add("bn_d", BatchNorm(out_ch, eps=eps))
        self.relu_out = self.add("relu_out", ReLU())
        self.inorm = self.add("inorm", InstanceNorm(out_ch, eps=eps))
        self.apply_in = apply_in
        self.in_position = in_position
        self.pre_in_hook = None

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise DimensionError(f"bottleneck expects {self.in_ch} channels, got shape {x.shape}")
        out = self.relu1(self.bn1(self.conv1(x)))
        out = self.relu2(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        short = self.bn_d(self.conv_d(x)) if self.downsample else x
        s = out + short
        if self.apply_in and self.in_position == "pre_relu":
            s = self.inorm(self._hooked(s))
        y = self.relu_out(s)
        if self.apply_in and self.in_position == "post_relu":
            y = self.inorm(self._hooked(y))
        return y

    def _hooked(self, a):
        return a if self.pre_in_hook is None else self.pre_in_hook(a)

    def backward(self, dy):
        if self.apply_in and self.in_position == "post_relu":
            dy = self.inorm.backward(dy)
        ds = self.relu_out.backward(dy)
        if self.apply_in and self.in_position == "pre_relu":
            ds = self.inorm.backward(ds)
        dout = self.conv3.backward(self.bn3.backward(ds))
        dout = self.conv2.backward(self.bn2.backward(self.relu2.backward(dout)))
        dx = self.conv1.backward(self.bn1.backward(self.relu1.backward(dout)))
        if self.downsample:
            dx = dx + self.conv_d.backward(self.bn_d.backward(ds))
        else:
            dx = dx + ds
        return dx


def bottleneck_forward(block: BottleneckBlock, x: np.ndarray) -> np.ndarray:
    return block.forward(x)


def parse_patterns(texts: Iterable[str]) -> PatternSet:
    return PatternSet.from_strings(list(texts))
