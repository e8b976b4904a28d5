"""Reducing concatenated ensemble features: random projection, PCA and an autoencoder.

All transforms accept either a raw ``[N, D]`` array or a
:class:`~d2fel.bank.FeatureBank`; banks come back as banks with their
labels untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Union

import numpy as np
from scipy.optimize import brentq

from .bank import FeatureBank
from .ndcore import Linear, ReLU, Sequential
from .optim import Adam

ArrayOrBank = Union[np.ndarray, FeatureBank]


def _features(x: ArrayOrBank) -> np.ndarray:
    return x.features if isinstance(x, FeatureBank) else np.asarray(x)


def _wrap(x: ArrayOrBank, out: np.ndarray) -> ArrayOrBank:
    return x.with_features(out) if isinstance(x, FeatureBank) else out


# ---------------------------------------------------------------------------
# Johnson-Lindenstrauss planning
# ---------------------------------------------------------------------------

def _jl_denominator(eps: float) -> float:
    return 3 * eps ** 2 - 2 * eps ** 3


def jl_min_dim(n_points: int, eps: float) -> int:
    """Smallest ``d`` with ``d >= 24 ln N / (3 eps^2 - 2 eps^3)``."""
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    if n_points < 2:
        raise ValueError("need at least two points")
    return math.ceil(24 * math.log(n_points) / _jl_denominator(eps))


def jl_epsilon(n_points: int, dim: int) -> Optional[float]:
    """Distortion tolerance the bound certifies for ``dim`` output dims, or None if above 1."""
    if n_points < 2 or dim < 1:
        raise ValueError("need n_points >= 2 and dim >= 1")
    target = 24 * math.log(n_points) / dim
    if target >= 1.0:
        return None
    return brentq(lambda e: _jl_denominator(e) - target, 1e-12, 1.0)


def jl_plan(n_points: int, eps: float, dim: Optional[int] = None) -> Dict[str, object]:
    """Planner summary: the minimum dim for ``eps`` and, if given, the eps ``dim`` achieves."""
    plan: Dict[str, object] = {"n_points": n_points, "eps": eps, "min_dim": jl_min_dim(n_points, eps)}
    if dim is not None:
        plan["dim"] = dim
        plan["eps_at_dim"] = jl_epsilon(n_points, dim)
        plan["dim_sufficient"] = dim >= plan["min_dim"]
    return plan


def distortion(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Ratios ``||y_i - y_j||^2 / ||x_i - x_j||^2`` over all pairs ``i < j``."""
    def sq(a):
        a = np.asarray(a, dtype=np.float64)
        n2 = (a * a).sum(1)
        return n2[:, None] + n2[None, :] - 2 * a @ a.T
    iu = np.triu_indices(len(x), 1)
    return sq(y)[iu] / sq(x)[iu]


# ---------------------------------------------------------------------------
# random projection
# ---------------------------------------------------------------------------

@dataclass
class RandomProjector:
    D: int
    d: int
    seed: int
    U: np.ndarray
    scale: float

    def transform(self, x: ArrayOrBank) -> ArrayOrBank:
        feats = _features(x)
        if feats.shape[-1] != self.D:
            raise ValueError(f"projector expects dim {self.D}, got {feats.shape[-1]}")
        out = (feats.astype(np.float64) @ self.U) * self.scale
        return _wrap(x, out.astype(np.float32) if isinstance(x, FeatureBank) else out)

    def state(self) -> Dict[str, np.ndarray]:
        return {"U": self.U}

    def header(self) -> dict:
        return {"kind": "rp", "D": self.D, "d": self.d, "seed": self.seed, "scale": self.scale}


def fit_random_projector(D: int, d: int, seed: int = 0, scale: Optional[float] = None) -> RandomProjector:
    """Data-independent projector with ``U_ij ~ N(0, 1)``; output is ``scale * U^T x``.

    ``scale`` defaults to ``1/sqrt(d)`` so squared distances are preserved in
    expectation.
    """
    if not 1 <= d <= D:
        raise ValueError(f"need 1 <= d <= D, got d={d}, D={D}")
    U = np.random.default_rng(seed).standard_normal((D, d))
    return RandomProjector(D, d, seed, U, 1.0 / math.sqrt(d) if scale is None else scale)


def project(projector: RandomProjector, bank: ArrayOrBank) -> ArrayOrBank:
    return projector.transform(bank)


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------

@dataclass
class PcaModel:
    mean: np.ndarray            # [D]
    components: np.ndarray      # [d, D], rows orthonormal
    eigenvalues: np.ndarray     # [d], non-increasing
    total_variance: float

    @property
    def d(self) -> int:
        return self.components.shape[0]

    def transform(self, x: ArrayOrBank) -> ArrayOrBank:
        feats = _features(x)
        if feats.shape[-1] != self.mean.shape[0]:
            raise ValueError(f"PCA expects dim {self.mean.shape[0]}, got {feats.shape[-1]}")
        out = (feats.astype(np.float64) - self.mean) @ self.components.T
        return _wrap(x, out.astype(np.float32) if isinstance(x, FeatureBank) else out)

    def inverse_transform(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) @ self.components + self.mean

    def captured_variance(self, d: Optional[int] = None) -> float:
        d = self.d if d is None else d
        if self.total_variance == 0:
            return 1.0
        return float(self.eigenvalues[:d].sum() / self.total_variance)

    def truncate(self, d: int) -> "PcaModel":
        return PcaModel(self.mean, self.components[:d], self.eigenvalues[:d], self.total_variance)

    def state(self) -> Dict[str, np.ndarray]:
        return {"mean": self.mean, "components": self.components, "eigenvalues": self.eigenvalues}

    def header(self) -> dict:
        return {"kind": "pca", "D": int(self.mean.shape[0]), "d": self.d,
                "total_variance": self.total_variance}


def _fix_signs(components: np.ndarray) -> np.ndarray:
    # first nonzero coordinate of each component is made positive
    out = components.copy()
    for row in out:
        nz = np.flatnonzero(np.abs(row) > 1e-12)
        if len(nz) and row[nz[0]] < 0:
            row *= -1
    return out


def fit_pca(x: ArrayOrBank, d: int) -> PcaModel:
    """Top-``d`` principal axes of the (biased) sample covariance, via SVD of centred data."""
    X = _features(x).astype(np.float64)
    N, D = X.shape
    if not 1 <= d <= min(N, D):
        raise ValueError(f"need 1 <= d <= min(N, D) = {min(N, D)}, got {d}")
    mean = X.mean(axis=0)
    Xc = X - mean
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    eig = s ** 2 / N
    return PcaModel(mean, _fix_signs(vt[:d]), eig[:d], float((Xc ** 2).sum() / N))


def pca_transform(model: PcaModel, bank: ArrayOrBank) -> ArrayOrBank:
    return model.transform(bank)


# ---------------------------------------------------------------------------
# autoencoder baseline
# ---------------------------------------------------------------------------

@dataclass
class AutoEncoder:
    """Symmetric fully connected autoencoder ``D -> h -> d -> h -> D``.

    Inputs are centred by the training mean and divided by one global scale
    before encoding.  ``hidden=0`` drops the hidden layers (a linear map).
    """

    D: int
    d: int
    hidden: int
    loss: str
    mean: np.ndarray
    scale: float
    encoder: Sequential
    decoder: Sequential
    history: List[float] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.history[-1] if self.history else float("nan")

    def _prep(self, feats: np.ndarray) -> np.ndarray:
        if feats.shape[-1] != self.D:
            raise ValueError(f"autoencoder expects dim {self.D}, got {feats.shape[-1]}")
        return ((feats.astype(np.float64) - self.mean) / self.scale).astype(np.float32)

    def transform(self, x: ArrayOrBank) -> ArrayOrBank:
        self.encoder.eval()
        return _wrap(x, self.encoder.forward(self._prep(_features(x))))

    def reconstruct(self, x: np.ndarray) -> np.ndarray:
        self.encoder.eval()
        self.decoder.eval()
        z = self.decoder.forward(self.encoder.forward(self._prep(np.asarray(x))))
        return z * self.scale + self.mean

    def state(self) -> Dict[str, np.ndarray]:
        out = {"mean": self.mean}
        out.update({f"encoder.{k}": t.data for k, t in self.encoder.named_tensors()})
        out.update({f"decoder.{k}": t.data for k, t in self.decoder.named_tensors()})
        return out

    def header(self) -> dict:
        return {"kind": "ae", "D": self.D, "d": self.d, "hidden": self.hidden, "loss": self.loss,
                "scale": self.scale, "history": self.history}


def _ae_layers(D: int, d: int, hidden: int, rng) -> tuple:
    if hidden:
        enc = Sequential(Linear(D, hidden, rng=rng), ReLU(), Linear(hidden, d, rng=rng))
        dec = Sequential(Linear(d, hidden, rng=rng), ReLU(), Linear(hidden, D, rng=rng))
    else:
        enc = Sequential(Linear(D, d, rng=rng, std=1.0 / math.sqrt(D)))
        dec = Sequential(Linear(d, D, rng=rng, std=1.0 / math.sqrt(d)))
    return enc, dec


def build_autoencoder(D: int, d: int, loss: str = "l2", hidden: Optional[int] = None,
                      seed: int = 0, mean=None, scale: float = 1.0) -> AutoEncoder:
    if loss not in ("l1", "l2"):
        raise ValueError("loss must be 'l1' or 'l2'")
    hidden = int(round(math.sqrt(D * d))) if hidden is None else hidden
    enc, dec = _ae_layers(D, d, hidden, np.random.default_rng(seed))
    mean = np.zeros(D) if mean is None else np.asarray(mean, dtype=np.float64)
    return AutoEncoder(D, d, hidden, loss, mean, scale, enc, dec)


def fit_autoencoder(x: ArrayOrBank, d: int, loss: str = "l2", epochs: int = 100, lr: float = 1e-3,
                    batch_size: int = 64, hidden: Optional[int] = None, seed: int = 0) -> AutoEncoder:
    """Train an autoencoder on the rows of ``x`` with an L1 or L2 reconstruction loss."""
    X = _features(x).astype(np.float64)
    N, D = X.shape
    if N < 1:
        raise ValueError("need at least one training row")
    mean = X.mean(axis=0)
    scale = float(np.sqrt(((X - mean) ** 2).sum(axis=1).mean() / D)) or 1.0
    ae = build_autoencoder(D, d, loss, hidden, seed, mean, scale)
    Xs = ae._prep(X)
    params = ae.encoder.parameters() + ae.decoder.parameters()
    opt = Adam(params, lr)
    rng = np.random.default_rng(seed + 1)
    ae.encoder.train()
    ae.decoder.train()
    for _ in range(epochs):
        order = rng.permutation(N)
        total = 0.0
        for start in range(0, N, batch_size):
            xb = Xs[order[start:start + batch_size]]
            opt.zero_grad()
            rec = ae.decoder.forward(ae.encoder.forward(xb))
            diff = rec - xb
            if loss == "l2":
                value = float((diff ** 2).mean())
                grad = 2.0 * diff / diff.size
            else:
                value = float(np.abs(diff).mean())
                grad = np.sign(diff) / diff.size
            ae.encoder.backward(ae.decoder.backward(grad.astype(np.float32)))
            opt.step()
            total += value * len(xb)
        ae.history.append(total / N)
    return ae


REDUCERS = ("rp", "pca", "ae")
