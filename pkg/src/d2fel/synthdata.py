"""Seeded toy person-retrieval data spread over several style domains.

An image is rendered in two stages.  ``render_content`` draws the person
(identity colours and shape, camera viewpoint and jitter, sensor noise) on
a neutral background; ``apply_style`` then applies the domain look: gamma,
background texture, per-channel gain/bias and blur.  Because the stages are
separate, content from one domain can be re-styled as another.

Identities are private to a domain, as people are private to a real
benchmark.  Within a domain the first ``train_fraction`` of identities are
training identities; every remaining identity contributes one query image
per camera and the rest of its images to the gallery.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .ensemble import ConfigError

GENERATOR_VERSION = 1

SPLITS = ("train", "query", "gallery")


@dataclass(frozen=True)
class IdentitySpec:
    id: int
    hair: Tuple[float, float, float]
    torso: Tuple[float, float, float]
    torso_alt: Tuple[float, float, float]
    legs: Tuple[float, float, float]
    bag: Tuple[float, float, float]
    stripes: int          # 0 = plain torso, otherwise stripe period in rows
    torso_len: float      # fraction of image height
    width: float          # shoulder width as a fraction of image width
    has_bag: bool


@dataclass(frozen=True)
class DomainStyle:
    domain: int
    gain: Tuple[float, float, float]
    bias: Tuple[float, float, float]
    gamma: float
    backdrop: Tuple[float, float, float]
    texture_amp: float
    texture_freq: float
    texture_seed: int
    blur: int

    def __post_init__(self):
        if min(self.gain) <= 0:
            raise ValueError("domain gains must be positive")


@dataclass(frozen=True)
class CameraSpec:
    camera: int
    shift: int          # max horizontal jitter in pixels
    scale_jitter: float
    noise: float
    mirror: bool        # views the person from the other side
    gain: Tuple[float, float, float] = (1.0, 1.0, 1.0)   # colour response of the sensor
    bias: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.noise < 0:
            raise ValueError("camera noise must be non-negative")
        if min(self.gain) <= 0:
            raise ValueError("camera gains must be positive")


@dataclass(frozen=True)
class ImageRecord:
    index: int
    identity: int
    camera: int
    domain: int
    split: str


@dataclass
class DatasetManifest:
    records: List[ImageRecord]
    seed: int
    config: Dict
    version: int = GENERATOR_VERSION

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        if name == "split":
            return np.array([SPLITS.index(r.split) for r in self.records], dtype=np.int32)
        return np.array([getattr(r, name) for r in self.records], dtype=np.int32)


@dataclass
class Dataset:
    manifest: DatasetManifest
    images: np.ndarray                      # [N, 3, H, W] float32
    identities: List[IdentitySpec] = field(default_factory=list)
    styles: List[DomainStyle] = field(default_factory=list)
    cameras: Dict[Tuple[int, int], CameraSpec] = field(default_factory=dict)


@dataclass
class Protocol:
    mode: str
    domain: int
    train: np.ndarray
    query: np.ndarray
    gallery: np.ndarray


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def _color(rng) -> Tuple[float, float, float]:
    return tuple(float(v) for v in rng.uniform(0.05, 0.95, 3))


def draw_identity(seed: int, identity: int) -> IdentitySpec:
    rng = _rng(seed, 1, identity)
    return IdentitySpec(
        id=identity, hair=_color(rng), torso=_color(rng), torso_alt=_color(rng), legs=_color(rng),
        bag=_color(rng), stripes=int(rng.choice([0, 0, 3, 4, 6])),
        torso_len=float(rng.uniform(0.3, 0.42)), width=float(rng.uniform(0.45, 0.7)),
        has_bag=bool(rng.random() < 0.5))


def draw_domain_styles(seed: int, num_domains: int, strength: float = 1.0,
                       min_separation: float = 1.2) -> List[DomainStyle]:
    """Domain looks with biases pairwise separated by ``strength * min_separation`` in some channel."""
    rng = _rng(seed, 2)
    biases: List[np.ndarray] = []
    for _ in range(10_000):
        if len(biases) == num_domains:
            break
        b = rng.uniform(-2.0, 2.0, 3) * strength
        if all(np.abs(b - o).max() >= min_separation * strength for o in biases):
            biases.append(b)
    else:
        raise ConfigError("could not place well-separated domain styles")
    styles = []
    for d, b in enumerate(biases):
        r = _rng(seed, 3, d)
        gain = np.exp(r.uniform(np.log(0.6), np.log(1.6), 3) * strength)
        gamma = float(np.exp(r.uniform(np.log(0.6), np.log(1.6)) * strength))
        styles.append(DomainStyle(
            domain=d, gain=tuple(float(g) for g in gain), bias=tuple(float(v) for v in b),
            gamma=gamma, backdrop=_color(r), texture_amp=float(r.uniform(0.05, 0.25)),
            texture_freq=float(r.uniform(0.5, 3.0)), texture_seed=int(r.integers(2**31)),
            blur=int(r.integers(0, 2))))
    return styles


def draw_camera(seed: int, domain: int, camera: int, strength: float = 0.0) -> CameraSpec:
    """Camera geometry and noise; ``strength`` scales its per-channel colour response."""
    rng = _rng(seed, 4, domain, camera)
    spec = dict(camera=camera, shift=int(rng.integers(1, 4)), scale_jitter=float(rng.uniform(0.02, 0.08)),
                noise=float(rng.uniform(0.01, 0.05)), mirror=camera % 2 == 1)
    gain = np.exp(rng.uniform(-0.5, 0.5, 3) * strength)
    bias = rng.uniform(-0.5, 0.5, 3) * strength
    return CameraSpec(**spec, gain=tuple(float(g) for g in gain), bias=tuple(float(b) for b in bias))


def render_content(ident: IdentitySpec, cam: CameraSpec, rng: np.random.Generator,
                   hw: Tuple[int, int] = (64, 32)) -> Tuple[np.ndarray, np.ndarray]:
    """Draw the person on a neutral grey background.

    Returns ``(image [3,H,W] in [0,1], person_mask [H,W])``.
    """
    H, W = hw
    ys = (np.arange(H) + 0.5) / H
    xs = (np.arange(W) + 0.5) / W
    scale = 1.0 + rng.uniform(-cam.scale_jitter, cam.scale_jitter)
    cx = 0.5 + rng.integers(-cam.shift, cam.shift + 1) / W
    yy = (ys[:, None] - 0.5) / scale + 0.5
    xx = (xs[None, :] - cx) / scale + 0.5
    img = np.full((3, H, W), 0.5)
    mask = np.zeros((H, W), bool)

    def paint(region, color):
        for c in range(3):
            img[c][region] = color[c]
        mask[region] = True

    head_y, head_r = 0.1, 0.075
    head = ((yy - head_y) / head_r) ** 2 + ((xx - 0.5) / (head_r * 1.6)) ** 2 <= 1.0
    paint(head, (0.8, 0.65, 0.5))
    paint(head & (yy < head_y - 0.02), ident.hair)
    t0, t1 = 0.18, 0.18 + ident.torso_len
    half = ident.width / 2
    torso = (yy >= t0) & (yy < t1) & (np.abs(xx - 0.5) <= half)
    paint(torso, ident.torso)
    if ident.stripes:
        rows = np.floor(yy * H).astype(int)
        paint(torso & ((rows // ident.stripes) % 2 == 1), ident.torso_alt)
    legs = (yy >= t1) & (yy < 0.96) & (np.abs(xx - 0.5) <= half * 0.8) & (np.abs(xx - 0.5) >= 0.03)
    paint(legs, ident.legs)
    if ident.has_bag:
        side = -1.0 if cam.mirror else 1.0
        bx = 0.5 + side * (half + 0.1)
        bag = (np.abs(xx - bx) <= 0.1) & (yy >= t0 + 0.05) & (yy < t0 + 0.05 + 0.22)
        paint(bag, ident.bag)
    img += rng.normal(0.0, cam.noise, img.shape)
    return np.clip(img, 0.0, 1.0), mask


def _texture(style: DomainStyle, rng: np.random.Generator, hw: Tuple[int, int]) -> np.ndarray:
    H, W = hw
    ys, xs = np.meshgrid(np.arange(H) / H, np.arange(W) / W, indexing="ij")
    tex = np.zeros((H, W))
    for _ in range(3):
        fy, fx = rng.uniform(0.5, 1.5, 2) * style.texture_freq * 2 * np.pi
        phase = rng.uniform(0, 2 * np.pi)
        tex += np.sin(fy * ys + fx * xs + phase)
    return style.texture_amp * tex / 3.0


def _box_blur(img: np.ndarray, radius: int) -> np.ndarray:
    if radius <= 0:
        return img
    k = 2 * radius + 1
    pad = np.pad(img, ((0, 0), (radius, radius), (radius, radius)), mode="edge")
    out = np.zeros_like(img)
    H, W = img.shape[1:]
    for dy in range(k):
        for dx in range(k):
            out += pad[:, dy:dy + H, dx:dx + W]
    return out / (k * k)


def apply_style(content: np.ndarray, mask: np.ndarray, style: DomainStyle,
                rng: np.random.Generator, camera: CameraSpec = None) -> np.ndarray:
    """Apply a domain's look, then the camera's colour response; ``rng`` only drives the texture."""
    img = content ** style.gamma
    backdrop = np.asarray(style.backdrop)[:, None, None] + _texture(style, rng, content.shape[1:])
    img = np.where(mask[None], img, backdrop)
    img = img * np.asarray(style.gain)[:, None, None] + np.asarray(style.bias)[:, None, None]
    if camera is not None:
        img = img * np.asarray(camera.gain)[:, None, None] + np.asarray(camera.bias)[:, None, None]
    return _box_blur(img, style.blur)


def generate_dataset(num_identities: int = 50, num_domains: int = 4, num_cameras: int = 2,
                     images_per: int = 4, seed: int = 0, image_hw: Tuple[int, int] = (64, 32),
                     train_fraction: float = 0.5, style_strength: float = 1.0,
                     camera_strength: float = 0.0) -> Dataset:
    """Render ``num_identities`` people per domain, ``images_per`` images per camera.

    The result holds ``num_identities * num_domains * num_cameras * images_per``
    images.  Identity ids are global: domain ``d`` owns ids
    ``[d * num_identities, (d + 1) * num_identities)``.
    """
    n_train = int(round(num_identities * train_fraction))
    if num_cameras < 2:
        raise ConfigError("at least two cameras are needed for cross-camera queries")
    if images_per < 2:
        raise ConfigError("images_per must be >= 2")
    if n_train < 2 or num_identities - n_train < 1:
        raise ConfigError(f"{num_identities} identities cannot be split into >= 2 train and >= 1 test")
    if num_domains < 1:
        raise ConfigError("need at least one domain")
    hw = tuple(int(v) for v in image_hw)
    styles = draw_domain_styles(seed, num_domains, style_strength)
    cameras = {(d, c): draw_camera(seed, d, c, camera_strength)
               for d in range(num_domains) for c in range(num_cameras)}
    identities, records, images = [], [], []
    for d in range(num_domains):
        for local in range(num_identities):
            ident = draw_identity(seed, d * num_identities + local)
            identities.append(ident)
            is_train = local < n_train
            for c in range(num_cameras):
                for k in range(images_per):
                    index = len(records)
                    split = "train" if is_train else ("query" if k == 0 else "gallery")
                    rng = _rng(seed, 5, index)
                    content, mask = render_content(ident, cameras[d, c], rng, hw)
                    images.append(apply_style(content, mask, styles[d], rng, cameras[d, c]))
                    records.append(ImageRecord(index, ident.id, c, d, split))
    config = dict(num_identities=num_identities, num_domains=num_domains, num_cameras=num_cameras,
                  images_per=images_per, image_hw=list(hw), train_fraction=train_fraction,
                  style_strength=style_strength, camera_strength=camera_strength)
    manifest = DatasetManifest(records, seed, config)
    return Dataset(manifest, np.stack(images).astype(np.float32), identities, styles, cameras)


def make_protocol(manifest: DatasetManifest, mode: str, domain: int) -> Protocol:
    """Index lists for ``"leave-one-out"`` (``domain`` is the target) or ``"single-domain"``."""
    doms = manifest.column("domain")
    split = manifest.column("split")
    if domain not in set(doms.tolist()):
        raise ValueError(f"unknown domain {domain}")
    train_sel = split == SPLITS.index("train")
    if mode == "leave-one-out":
        train = np.flatnonzero(train_sel & (doms != domain))
    elif mode == "single-domain":
        train = np.flatnonzero(train_sel & (doms == domain))
    else:
        raise ValueError(f"unknown protocol mode {mode!r}")
    query = np.flatnonzero((split == SPLITS.index("query")) & (doms == domain))
    gallery = np.flatnonzero((split == SPLITS.index("gallery")) & (doms == domain))
    return Protocol(mode, domain, train, query, gallery)


def style_gap(dataset: Dataset) -> Tuple[float, float]:
    """(smallest between-domain gap, largest within-domain std) of per-image channel means.

    The gap between two domains is the largest per-channel difference of
    their mean channel means; the within-domain spread is the std of the
    per-image channel means.
    """
    means = dataset.images.mean(axis=(2, 3))
    doms = dataset.manifest.column("domain")
    ids = sorted(set(doms.tolist()))
    centers = {d: means[doms == d].mean(axis=0) for d in ids}
    spread = max(float(means[doms == d].std(axis=0).max()) for d in ids)
    gaps = [float(np.abs(centers[a] - centers[b]).max()) for i, a in enumerate(ids) for b in ids[i + 1:]]
    return min(gaps), spread
