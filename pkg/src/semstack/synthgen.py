"""Procedural masks, appearance renders and semantic stacks.

A mask is painted from random ellipses and rounded blobs, one shape family per
foreground class so that classes differ in geometry as well as intensity.  A
render maps the labels through per-class gray levels and then applies the
nuisance factors of a :class:`DomainParams`: per-render intensity jitter,
texture noise, a smooth multiplicative bias field, Gaussian blur and gamma.

On disk a dataset looks like::

    meta.json                 config echo, substream ids, split id lists
    masks/<id>.pgm            binary graymap (P5), one byte per label
    stacks/<id>/<k>.f32       training stack member k, raw little-endian float32, row-major
    images/<id>.f32           test image, same encoding
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .rng import Rng

DEFAULT_STACK_SIZE = 16

SPLITS = ("train", "test_source", "test_target")
_SPLIT_KEYS = {"train": 0, "test_source": 1, "test_target": 2}
_MASK_KEY, _RENDER_KEY = 0, 1


@dataclass(frozen=True)
class SegmentationMask:
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise ValueError("mask labels must be H x W")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(f"mask labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "labels", labels.astype(np.uint8))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def present(self) -> set[int]:
        return set(np.unique(self.labels).tolist())


@dataclass(frozen=True)
class MaskConfig:
    height: int = 64
    width: int = 64
    num_classes: int = 4
    shapes_per_class: int = 2

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.height < 16 or self.width < 16:
            raise ValueError("height and width must be >= 16")
        if self.shapes_per_class < 1:
            raise ValueError("shapes_per_class must be >= 1")


@dataclass(frozen=True)
class DomainParams:
    class_intensity: tuple[float, ...] = (0.1, 0.35, 0.6, 0.85)
    intensity_jitter: float = 0.08
    texture_noise_std: float = 0.05
    bias_field_strength: float = 0.15
    blur_sigma: float = 0.7
    gamma_range: tuple[float, float] = (0.8, 1.25)

    def __post_init__(self):
        object.__setattr__(self, "class_intensity", tuple(float(v) for v in self.class_intensity))
        object.__setattr__(self, "gamma_range", tuple(float(v) for v in self.gamma_range))

    def validate(self, num_classes: int | None = None) -> None:
        if num_classes is not None and len(self.class_intensity) != num_classes:
            raise ValueError(f"class_intensity needs {num_classes} values, got {len(self.class_intensity)}")
        if any(not 0.0 <= v <= 1.0 for v in self.class_intensity):
            raise ValueError("class_intensity values must lie in [0, 1]")
        for name in ("intensity_jitter", "texture_noise_std", "bias_field_strength", "blur_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        lo, hi = self.gamma_range
        if not 0 < lo <= hi:
            raise ValueError("gamma_range must satisfy 0 < lo <= hi")


def shifted_domain(src: DomainParams, permutation: tuple[int, ...]) -> DomainParams:
    """Target domain: permuted class intensities, doubled texture noise, stronger bias field."""
    if sorted(permutation) != list(range(len(src.class_intensity))):
        raise ValueError("permutation must reorder every class exactly once")
    return DomainParams(
        class_intensity=tuple(src.class_intensity[p] for p in permutation),
        intensity_jitter=src.intensity_jitter,
        texture_noise_std=2.0 * src.texture_noise_std,
        bias_field_strength=max(2.0 * src.bias_field_strength, 0.2),
        blur_sigma=src.blur_sigma,
        gamma_range=src.gamma_range,
    )


# -- masks ------------------------------------------------------------------

def _paint_shape(labels: np.ndarray, cls: int, gen: np.random.Generator) -> None:
    h, w = labels.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    scale = min(h, w) / 64.0
    cy, cx = gen.uniform(0.15, 0.85) * h, gen.uniform(0.15, 0.85) * w
    theta = gen.uniform(0, np.pi)
    style = (cls - 1) % 3
    if style == 0:  # large ellipse
        a, b = gen.uniform(9, 15) * scale, gen.uniform(6, 10) * scale
    elif style == 1:  # small rounded blob
        a = b = gen.uniform(4, 7) * scale
    else:  # elongated bar-like ellipse
        a, b = gen.uniform(11, 18) * scale, gen.uniform(2.2, 3.5) * scale
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    r = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    if style == 1:
        # lobed boundary for blobs
        ang = np.arctan2(v, u)
        lobes = int(gen.integers(3, 6))
        r = r / (1.0 + 0.25 * np.sin(lobes * ang + gen.uniform(0, 2 * np.pi)))
    labels[r <= 1.0] = cls


def gen_mask(rng: Rng, cfg: MaskConfig = MaskConfig()) -> SegmentationMask:
    """Background plus ``shapes_per_class`` random shapes per foreground class."""
    cfg.validate()
    gen = rng.generator()
    labels = np.zeros((cfg.height, cfg.width), dtype=np.uint8)
    order = [c for c in range(1, cfg.num_classes) for _ in range(cfg.shapes_per_class)]
    for c in gen.permutation(order):
        _paint_shape(labels, int(c), gen)
    for _ in range(10):
        missing = [c for c in range(1, cfg.num_classes) if not (labels == c).any()]
        if not missing:
            break
        for c in missing:
            _paint_shape(labels, c, gen)
    return SegmentationMask(labels, cfg.num_classes)


# -- rendering --------------------------------------------------------------

def render(mask: SegmentationMask, dp: DomainParams, rng: Rng) -> np.ndarray:
    """One H x W float32 image in [0, 1]; deterministic per (mask, dp, rng)."""
    dp.validate(mask.num_classes)
    gen = rng.generator()
    h, w = mask.labels.shape
    levels = np.asarray(dp.class_intensity, dtype=np.float64)
    if dp.intensity_jitter:
        levels = levels + gen.normal(0.0, dp.intensity_jitter, size=levels.shape)
    img = levels[mask.labels]
    if dp.texture_noise_std:
        img = img + gen.normal(0.0, dp.texture_noise_std, size=(h, w))
    if dp.bias_field_strength:
        yy, xx = np.mgrid[-1:1:h * 1j, -1:1:w * 1j]
        theta = gen.uniform(0, 2 * np.pi)
        curv = gen.uniform(-0.5, 0.5)
        ramp = np.cos(theta) * xx + np.sin(theta) * yy
        img = img * (1.0 + dp.bias_field_strength * (ramp + curv * (xx ** 2 + yy ** 2 - 2.0 / 3.0)))
    if dp.blur_sigma:
        img = gaussian_filter(img, dp.blur_sigma, mode="reflect")
    lo, hi = dp.gamma_range
    gamma = gen.uniform(lo, hi) if hi > lo else lo
    img = np.clip(img, 0.0, 1.0)
    if gamma != 1.0:
        img = img ** gamma
    return img.astype(np.float32)


@dataclass
class ImageStack:
    mask: SegmentationMask
    images: list[np.ndarray]
    seeds: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.images)


def gen_stack(mask: SegmentationMask, dp: DomainParams, n: int = DEFAULT_STACK_SIZE,
              rng: Rng = Rng(0)) -> ImageStack:
    """``n`` renders of one mask from independent substreams; member 0 is the original."""
    if n < 2:
        raise ValueError("a semantic stack needs at least 2 members")
    streams = [rng.child(k) for k in range(n)]
    return ImageStack(mask, [render(mask, dp, s) for s in streams], [s.stream for s in streams])


# -- datasets ---------------------------------------------------------------

@dataclass(frozen=True)
class DatasetConfig:
    height: int = 64
    width: int = 64
    num_classes: int = 4
    shapes_per_class: int = 2
    n_train: int = 200
    n_test_source: int = 50
    n_test_target: int = 50
    stack_size: int = DEFAULT_STACK_SIZE
    seed: int = 0
    source: DomainParams = DomainParams()
    target_permutation: tuple[int, ...] = (0, 2, 3, 1)
    target: DomainParams | None = None

    def mask_config(self) -> MaskConfig:
        return MaskConfig(self.height, self.width, self.num_classes, self.shapes_per_class)

    def target_domain(self) -> DomainParams:
        return self.target if self.target is not None else shifted_domain(self.source, tuple(self.target_permutation))

    def validate(self) -> None:
        self.mask_config().validate()
        for name in ("n_train", "n_test_source", "n_test_target"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.stack_size < 2:
            raise ValueError("stack_size must be >= 2")
        self.source.validate(self.num_classes)
        self.target_domain().validate(self.num_classes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["target_permutation"] = list(self.target_permutation)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown dataset keys: {sorted(unknown)}")
        d = dict(d)
        if "source" in d:
            d["source"] = _domain_from_dict(d["source"], "source")
        if d.get("target") is not None:
            d["target"] = _domain_from_dict(d["target"], "target")
        if "target_permutation" in d:
            d["target_permutation"] = tuple(d["target_permutation"])
        return cls(**d)


def _domain_from_dict(d: dict, where: str) -> DomainParams:
    known = {f.name for f in fields(DomainParams)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown {where} domain keys: {sorted(unknown)}")
    return DomainParams(**d)


@dataclass
class Dataset:
    config: DatasetConfig
    train: list[ImageStack]
    test_source: list[tuple[np.ndarray, SegmentationMask]]
    test_target: list[tuple[np.ndarray, SegmentationMask]]
    ids: dict[str, list[str]]
    mask_streams: dict[str, list[int]]

    def split(self, name: str) -> list[tuple[np.ndarray, SegmentationMask]]:
        if name == "train":
            return [(s.images[0], s.mask) for s in self.train]
        if name in ("test_source", "test_target"):
            return getattr(self, name)
        raise ValueError(f"unknown split {name!r}")


def _split_rngs(root: Rng, split: str, i: int) -> tuple[Rng, Rng]:
    key = _SPLIT_KEYS[split]
    return root.child(key, i, _MASK_KEY), root.child(key, i, _RENDER_KEY)


def gen_dataset(cfg: DatasetConfig, rng: Rng | None = None) -> Dataset:
    """Train stacks and both test splits; a pure function of ``(cfg, rng)``.

    ``rng`` defaults to the data substream of ``cfg.seed``.
    """
    cfg.validate()
    root = rng if rng is not None else Rng(cfg.seed).named("data")
    mcfg = cfg.mask_config()
    src, tgt = cfg.source, cfg.target_domain()
    ids: dict[str, list[str]] = {}
    streams: dict[str, list[int]] = {}
    train = []
    for i in range(cfg.n_train):
        mrng, rrng = _split_rngs(root, "train", i)
        train.append(gen_stack(gen_mask(mrng, mcfg), src, cfg.stack_size, rrng))
        streams.setdefault("train", []).append(mrng.stream)
    tests = {}
    for split, count, dp in (("test_source", cfg.n_test_source, src), ("test_target", cfg.n_test_target, tgt)):
        items = []
        for i in range(count):
            mrng, rrng = _split_rngs(root, split, i)
            mask = gen_mask(mrng, mcfg)
            items.append((render(mask, dp, rrng), mask))
            streams.setdefault(split, []).append(mrng.stream)
        tests[split] = items
    prefix = {"train": "train", "test_source": "src", "test_target": "tgt"}
    for split, count in (("train", cfg.n_train), ("test_source", cfg.n_test_source), ("test_target", cfg.n_test_target)):
        ids[split] = [f"{prefix[split]}_{i:04d}" for i in range(count)]
    return Dataset(cfg, train, tests["test_source"], tests["test_target"], ids, streams)


# -- persistence ------------------------------------------------------------

def write_pgm(path: Path, labels: np.ndarray) -> None:
    h, w = labels.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + np.ascontiguousarray(labels, dtype=np.uint8).tobytes())


def read_pgm(path: Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary graymap")
    w, h = int(tokens[1]), int(tokens[2])
    data = buf[pos + 1:pos + 1 + w * h]
    if len(data) != w * h:
        raise ValueError(f"{path}: truncated graymap")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


def write_f32(path: Path, img: np.ndarray) -> None:
    path.write_bytes(np.ascontiguousarray(img, dtype="<f4").tobytes())


def read_f32(path: Path, h: int, w: int) -> np.ndarray:
    return np.frombuffer(Path(path).read_bytes(), dtype="<f4").reshape(h, w).astype(np.float32)


def write_dataset(ds: Dataset, out: Path) -> list[Path]:
    """Write ``ds`` under ``out`` and return every file written, in a fixed order."""
    out = Path(out)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    (out / "stacks").mkdir(exist_ok=True)
    (out / "images").mkdir(exist_ok=True)
    written = []
    for sid, stack in zip(ds.ids["train"], ds.train):
        p = out / "masks" / f"{sid}.pgm"
        write_pgm(p, stack.mask.labels)
        written.append(p)
        d = out / "stacks" / sid
        d.mkdir(exist_ok=True)
        for k, img in enumerate(stack.images):
            p = d / f"{k}.f32"
            write_f32(p, img)
            written.append(p)
    for split in ("test_source", "test_target"):
        for sid, (img, mask) in zip(ds.ids[split], ds.split(split)):
            p = out / "masks" / f"{sid}.pgm"
            write_pgm(p, mask.labels)
            written.append(p)
            p = out / "images" / f"{sid}.f32"
            write_f32(p, img)
            written.append(p)
    meta = {
        "config": ds.config.to_dict(),
        "splits": ds.ids,
        "mask_streams": {k: [str(s) for s in v] for k, v in ds.mask_streams.items()},
        "stack_streams": {sid: [str(s) for s in st.seeds] for sid, st in zip(ds.ids["train"], ds.train)},
    }
    p = out / "meta.json"
    p.write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    written.append(p)
    return written


def read_dataset(root: Path) -> Dataset:
    root = Path(root)
    meta = json.loads((root / "meta.json").read_text())
    cfg = DatasetConfig.from_dict(meta["config"])
    h, w, k = cfg.height, cfg.width, cfg.num_classes
    train = []
    for sid in meta["splits"]["train"]:
        mask = SegmentationMask(read_pgm(root / "masks" / f"{sid}.pgm"), k)
        images = [read_f32(root / "stacks" / sid / f"{j}.f32", h, w) for j in range(cfg.stack_size)]
        train.append(ImageStack(mask, images, [int(s) for s in meta["stack_streams"][sid]]))
    tests = {}
    for split in ("test_source", "test_target"):
        tests[split] = [(read_f32(root / "images" / f"{sid}.f32", h, w),
                         SegmentationMask(read_pgm(root / "masks" / f"{sid}.pgm"), k))
                        for sid in meta["splits"][split]]
    streams = {s: [int(v) for v in vals] for s, vals in meta["mask_streams"].items()}
    return Dataset(cfg, train, tests["test_source"], tests["test_target"], meta["splits"], streams)
