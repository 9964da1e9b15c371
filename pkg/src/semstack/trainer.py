"""Losses and the two-image stacking training loop.

Each iteration takes the original image of a stack (member 0) plus one member
drawn uniformly from the rest, runs the network on both, and minimises::

    seg(logits_0) + seg(logits_1)
        + alpha_enc * D(enc_0, enc_1) + alpha_dec * D(dec_0, dec_1)

where ``D`` is the per-location cosine distance averaged over the feature map.
The ``mode`` switch reproduces the ablation ladder: ``baseline`` trains on the
original image alone, ``synth_only`` adds the second image without the
consistency terms, ``synth_enc``/``synth_enc_dec`` add them, and ``aug_only``
uses a photometrically jittered copy of the original instead of a stack member.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from . import diffcore as dc
from . import segnet
from .diffcore import NonFiniteError, Tensor
from .rng import Rng
from .synthgen import ImageStack, SegmentationMask

log = logging.getLogger(__name__)

MODES = ("baseline", "aug_only", "synth_only", "synth_enc", "synth_enc_dec")
# mode -> (use_synthetic, encoder consistency on, decoder consistency on)
MODE_FLAGS = {
    "baseline": (False, False, False),
    "aug_only": (False, True, False),
    "synth_only": (True, False, False),
    "synth_enc": (True, True, False),
    "synth_enc_dec": (True, True, True),
}
LOSS_COLUMNS = ("step", "epoch", "seg", "sc_enc", "sc_dec", "total")


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, record: dict):
        super().__init__(message)
        self.record = record


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "synth_enc"
    alpha_enc: float = 0.4
    alpha_dec: float = 0.0
    use_synthetic: bool = True
    epochs: int = 30
    batch_size: int = 4
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    base_channels: int = 16
    depth: int = 2
    dtype: str = "float32"

    def validate(self) -> None:
        if self.mode not in MODE_FLAGS:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.alpha_enc < 0 or self.alpha_dec < 0:
            raise ValueError("alpha_enc and alpha_dec must be >= 0")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and learning_rate > 0 required")
        if self.optimizer != "adam":
            raise ValueError("only the adam optimizer is supported")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        synth, enc, dec = MODE_FLAGS[self.mode]
        if (self.use_synthetic, self.alpha_enc > 0, self.alpha_dec > 0) != (synth, enc, dec):
            raise ValueError(
                f"mode {self.mode!r} needs use_synthetic={synth}, alpha_enc>0={enc}, alpha_dec>0={dec}; "
                f"got use_synthetic={self.use_synthetic}, alpha_enc={self.alpha_enc}, alpha_dec={self.alpha_dec}")

    def for_mode(self, mode: str) -> "TrainConfig":
        """This config re-targeted at ``mode``, with the loss weights the mode implies.

        Weights that a mode switches on keep their configured value; a
        switched-on decoder weight of 0 falls back to ``alpha_enc``.
        """
        if mode not in MODE_FLAGS:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        synth, enc, dec = MODE_FLAGS[mode]
        a_enc = (self.alpha_enc if self.alpha_enc > 0 else 0.4) if enc else 0.0
        a_dec = (self.alpha_dec if self.alpha_dec > 0 else a_enc) if dec else 0.0
        return replace(self, mode=mode, use_synthetic=synth, alpha_enc=a_enc, alpha_dec=a_dec)

    def net_config(self, num_classes: int) -> segnet.NetConfig:
        return segnet.NetConfig(num_classes=num_classes, base_channels=self.base_channels, depth=self.depth)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


# lighter encoder weight, for base trainers that already augment heavily
LIGHT_PRESET = {"alpha_enc": 0.1, "alpha_dec": 0.0}


@dataclass
class LossRecord:
    step: int
    seg: float
    sc_enc: float
    sc_dec: float
    total: float
    epoch: int = 0

    def row(self) -> dict:
        return {k: getattr(self, k) for k in LOSS_COLUMNS}


# -- losses -----------------------------------------------------------------

def _mask_array(mask) -> np.ndarray:
    if isinstance(mask, SegmentationMask):
        return mask.labels
    if isinstance(mask, (list, tuple)):
        return np.stack([_mask_array(m) for m in mask])
    return np.asarray(mask)


def seg_loss(logits: Tensor, mask) -> Tensor:
    """Cross-entropy plus ``1 - soft Dice`` averaged over the classes present in the mask.

    Accepts ``[K,H,W]`` logits with an ``[H,W]`` mask or a batch ``[N,K,H,W]``
    with ``[N,H,W]`` masks; the Dice term is computed per sample and averaged.
    """
    labels = _mask_array(mask).astype(np.int64)
    ce = dc.softmax_cross_entropy(logits, labels)
    k = logits.shape[-3]
    onehot = (labels[..., None, :, :] == np.arange(k)[:, None, None]).astype(logits.dtype)
    probs = dc.softmax(logits, axis=-3)
    inter = (probs * onehot).sum(axis=(-2, -1))
    denom = probs.sum(axis=(-2, -1)) + onehot.sum(axis=(-2, -1))
    dice = inter * 2.0 / denom
    present = onehot.sum(axis=(-2, -1)) > 0
    # weights average over present classes within a sample, then over samples
    nsamples = 1 if labels.ndim == 2 else labels.shape[0]
    weights = present / present.sum(axis=-1, keepdims=True) / nsamples
    mean_dice = (dice * weights.astype(logits.dtype)).sum()
    return ce + (1.0 - mean_dice)


def consistency_loss(feat_a: Tensor, feat_b: Tensor) -> Tensor:
    """Mean over spatial locations (and batch) of the channel cosine distance."""
    if feat_a.shape != feat_b.shape:
        raise ValueError(f"feature shapes differ: {feat_a.shape} vs {feat_b.shape}")
    return dc.cosine_distance(feat_a, feat_b, axis=-3).mean()


def total_loss(out_0: dict, out_1: dict, mask, cfg: TrainConfig) -> tuple[Tensor, LossRecord]:
    """Two segmentation losses plus the weighted consistency terms."""
    seg = seg_loss(out_0["logits"], mask) + seg_loss(out_1["logits"], mask)
    total = seg
    terms = {}
    for key, alpha, name in (("enc_feat", cfg.alpha_enc, "sc_enc"), ("dec_feat", cfg.alpha_dec, "sc_dec")):
        if alpha > 0:
            d = consistency_loss(out_0[key], out_1[key])
            total = total + d * alpha
        else:
            with dc.no_grad():
                d = consistency_loss(out_0[key], out_1[key])
        terms[name] = d.item()
    return total, LossRecord(step=0, seg=seg.item(), total=total.item(), **terms)


# -- optimisation -----------------------------------------------------------

class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)


def photometric_jitter(img: np.ndarray, gen: np.random.Generator) -> np.ndarray:
    """Contrast/brightness jitter plus a random Gaussian blur, clipped to [0, 1]."""
    out = (img - 0.5) * gen.uniform(0.8, 1.2) + 0.5 + gen.uniform(-0.1, 0.1)
    out = gaussian_filter(out.astype(np.float64), gen.uniform(0.0, 1.0), mode="reflect")
    return np.clip(out, 0.0, 1.0).astype(img.dtype)


class Trainer:
    """Holds parameters, optimizer state and step counters for one run."""

    def __init__(self, cfg: TrainConfig, params: segnet.NetParams):
        cfg.validate()
        self.cfg = cfg
        self.params = params
        self.opt = Adam(params.parameters(), lr=cfg.learning_rate)
        self.dtype = np.dtype(cfg.dtype)
        self.steps = 0
        self.forward_calls = 0
        self.last_step_forwards = 0
        self._sampling = Rng(cfg.seed).named("sampling")

    def _forward(self, images: list[np.ndarray]) -> dict[str, Tensor]:
        self.forward_calls += 1
        self.last_step_forwards += 1
        batch = np.stack(images)[:, None].astype(self.dtype, copy=False)
        return segnet.forward(self.params, Tensor(batch))

    def second_images(self, stacks: Sequence[ImageStack], gen: np.random.Generator) -> list[np.ndarray]:
        if self.cfg.mode == "aug_only":
            return [photometric_jitter(s.images[0], gen) for s in stacks]
        out = []
        for s in stacks:
            if len(s) < 2:
                raise ValueError("synthetic training needs stacks with at least 2 members")
            out.append(s.images[int(gen.integers(1, len(s)))])
        return out

    def step(self, stacks: ImageStack | Sequence[ImageStack], epoch: int = 0) -> LossRecord:
        if isinstance(stacks, ImageStack):
            stacks = [stacks]
        cfg = self.cfg
        self.last_step_forwards = 0
        masks = [s.mask for s in stacks]
        dc.zero_grad(self.params.parameters())
        out_0 = self._forward([s.images[0] for s in stacks])
        if cfg.use_synthetic or cfg.mode == "aug_only":
            gen = self._sampling.child(self.steps).generator()
            out_1 = self._forward(self.second_images(stacks, gen))
            loss, rec = total_loss(out_0, out_1, masks, cfg)
        else:
            loss = seg_loss(out_0["logits"], masks)
            rec = LossRecord(step=0, seg=loss.item(), sc_enc=0.0, sc_dec=0.0, total=loss.item())
        dc.backward(loss)
        self.opt.step()
        rec.step, rec.epoch = self.steps, epoch
        self.steps += 1
        return rec


def train_step(params: segnet.NetParams, stack: ImageStack | Sequence[ImageStack], cfg: TrainConfig,
               trainer: Trainer | None = None) -> tuple[segnet.NetParams, LossRecord]:
    """One optimizer update; pass ``trainer`` to keep Adam state across calls."""
    trainer = trainer or Trainer(cfg, params)
    rec = trainer.step(stack)
    return trainer.params, rec


@dataclass
class TrainResult:
    params: segnet.NetParams
    history: list[LossRecord] = field(default_factory=list)
    epoch_means: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None
    forward_calls: int = 0


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return Rng(seed).named("shuffle").child(epoch).generator().permutation(n)


def init_params(cfg: TrainConfig, num_classes: int) -> segnet.NetParams:
    return segnet.init(cfg.net_config(num_classes), Rng(cfg.seed).named("init"), dtype=np.dtype(cfg.dtype))


def train(cfg: TrainConfig, stacks: Sequence[ImageStack], out_dir: Path | None = None,
          num_classes: int | None = None) -> TrainResult:
    """Seeded epoch loop over ``stacks``; writes checkpoint and loss CSV when ``out_dir`` is given."""
    cfg.validate()
    if not stacks:
        raise ValueError("training set is empty")
    k = num_classes or stacks[0].mask.num_classes
    trainer = Trainer(cfg, init_params(cfg, k))
    result = TrainResult(trainer.params)
    for epoch in range(cfg.epochs):
        order = epoch_order(cfg.seed, epoch, len(stacks))
        recs = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [stacks[i] for i in order[start:start + cfg.batch_size]]
            try:
                rec = trainer.step(batch, epoch)
            except NonFiniteError as exc:
                diag = {"step": trainer.steps, "epoch": epoch, "error": str(exc),
                        "last": result.history[-1].row() if result.history else None}
                raise TrainingAborted(f"non-finite loss at step {trainer.steps}: {exc}", diag) from exc
            if not all(math.isfinite(v) for v in (rec.seg, rec.sc_enc, rec.sc_dec, rec.total)):
                raise TrainingAborted(f"non-finite loss at step {rec.step}", rec.row())
            recs.append(rec)
        result.history.extend(recs)
        means = {key: float(np.mean([getattr(r, key) for r in recs])) for key in ("seg", "sc_enc", "sc_dec", "total")}
        result.epoch_means.append({"epoch": epoch, **means})
        log.info("epoch %d/%d seg=%.4f sc_enc=%.4f sc_dec=%.4f total=%.4f", epoch + 1, cfg.epochs,
                 means["seg"], means["sc_enc"], means["sc_dec"], means["total"])
    result.forward_calls = trainer.forward_calls
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        result.checkpoint = out_dir / "model.ckpt"
        segnet.save(trainer.params, result.checkpoint)
        write_loss_csv(out_dir / "loss.csv", result.history)
    return result


def write_loss_csv(path: Path, history: Sequence[LossRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOSS_COLUMNS, lineterminator="\n")
        w.writeheader()
        for rec in history:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in rec.row().items()})


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
