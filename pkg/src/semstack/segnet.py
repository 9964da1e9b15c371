"""Tiny U-shaped segmentation network with tapped encoder/decoder features.

The network is a plain conv-relu U-Net without normalization layers:
``depth`` levels of (conv3x3-relu x2, maxpool2x) down, a bottleneck block,
then nearest-2x upsampling with skip concatenation back up.  The bottleneck
output is exposed as ``enc_feat``, the last decoder block output as
``dec_feat``, and a 1x1 convolution over ``dec_feat`` gives the logits.

Checkpoints are a small binary format::

    b"S2S2" | u16 version | u32 len | config JSON | u32 count |
    per tensor: u16 name len | name | u8 rank | u32 dims... | float32 LE data
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .rng import Rng

MAGIC = b"S2S2"
FORMAT_VERSION = 1


class CorruptCheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    num_classes: int = 4
    in_channels: int = 1
    base_channels: int = 16
    depth: int = 2

    def validate(self) -> None:
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.in_channels < 1 or self.base_channels < 1:
            raise ValueError("in_channels and base_channels must be positive")

    def check_input(self, h: int, w: int) -> None:
        m = 2 ** self.depth
        if h % m or w % m:
            raise ValueError(f"input {h}x{w} not divisible by 2**depth = {m}")

    def layer_shapes(self) -> dict[str, tuple[int, ...]]:
        """Kernel shapes in forward order; each kernel ``name.w`` has a bias ``name.b``."""
        shapes: dict[str, tuple[int, ...]] = {}
        ch = [self.base_channels * 2 ** level for level in range(self.depth + 1)]
        cin = self.in_channels
        for level in range(self.depth):
            shapes[f"enc{level}.conv1"] = (ch[level], cin, 3, 3)
            shapes[f"enc{level}.conv2"] = (ch[level], ch[level], 3, 3)
            cin = ch[level]
        shapes["mid.conv1"] = (ch[-1], cin, 3, 3)
        shapes["mid.conv2"] = (ch[-1], ch[-1], 3, 3)
        for level in reversed(range(self.depth)):
            shapes[f"dec{level}.conv1"] = (ch[level], ch[level + 1] + ch[level], 3, 3)
            shapes[f"dec{level}.conv2"] = (ch[level], ch[level], 3, 3)
        shapes["head"] = (self.num_classes, ch[0], 1, 1)
        return shapes


@dataclass
class NetParams:
    config: NetConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)
    init_seed: int = 0

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def astype(self, dtype) -> "NetParams":
        return NetParams(self.config, {k: Tensor(v.data.astype(dtype), requires_grad=True)
                                       for k, v in self.tensors.items()}, self.init_seed)

    def copy(self) -> "NetParams":
        return self.astype(next(iter(self.tensors.values())).dtype)


def init(cfg: NetConfig, rng: Rng, dtype=np.float32) -> NetParams:
    """He-scaled uniform weights, zero biases; a pure function of ``(cfg, rng)``."""
    cfg.validate()
    gen = rng.generator()
    tensors: dict[str, Tensor] = {}
    for name, shape in cfg.layer_shapes().items():
        fan_in = shape[1] * shape[2] * shape[3]
        bound = np.sqrt(6.0 / fan_in)
        w = gen.uniform(-bound, bound, size=shape)
        tensors[name + ".w"] = Tensor(w.astype(dtype), requires_grad=True)
        tensors[name + ".b"] = Tensor(np.zeros(shape[0], dtype=dtype), requires_grad=True)
    return NetParams(cfg, tensors, rng.seed)


def _block(params: NetParams, name: str, x: Tensor) -> Tensor:
    t = params.tensors
    x = dc.relu(dc.conv2d(x, t[name + ".conv1.w"], t[name + ".conv1.b"], padding=1))
    return dc.relu(dc.conv2d(x, t[name + ".conv2.w"], t[name + ".conv2.b"], padding=1))


def forward(params: NetParams, image: Tensor) -> dict[str, Tensor]:
    """Run the net on ``[C,H,W]`` or ``[N,C,H,W]`` input."""
    cfg = params.config
    if image.ndim not in (3, 4) or image.shape[-3] != cfg.in_channels:
        raise ValueError(f"expected [{cfg.in_channels},H,W] input, got {image.shape}")
    cfg.check_input(*image.shape[-2:])
    skips = []
    x = image
    for level in range(cfg.depth):
        x = _block(params, f"enc{level}", x)
        skips.append(x)
        x = dc.maxpool2x(x)
    enc = _block(params, "mid", x)
    x = enc
    for level in reversed(range(cfg.depth)):
        x = dc.concat_channels(dc.upsample_nearest2x(x), skips[level])
        x = _block(params, f"dec{level}", x)
    logits = dc.conv2d(x, params.tensors["head.w"], params.tensors["head.b"])
    return {"enc_feat": enc, "dec_feat": x, "logits": logits}


def argmax_labels(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    return np.argmax(logits, axis=-3).astype(np.uint8)


def predict(params: NetParams, image) -> np.ndarray:
    """Per-pixel argmax label map for an image ``[1,H,W]``/``[H,W]`` (or batched)."""
    arr = np.asarray(image.data if isinstance(image, Tensor) else image)
    dtype = next(iter(params.tensors.values())).dtype
    if arr.ndim == 2:
        arr = arr[None]
    with dc.no_grad():
        logits = forward(params, Tensor(arr.astype(dtype, copy=False)))["logits"]
    return argmax_labels(logits.data)


# -- checkpoint IO ----------------------------------------------------------

def to_bytes(params: NetParams) -> bytes:
    cfg = json.dumps({"net": asdict(params.config), "init_seed": params.init_seed},
                     sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<H", FORMAT_VERSION), struct.pack("<I", len(cfg)), cfg,
             struct.pack("<I", len(params.tensors))]
    for name, t in params.tensors.items():
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return b"".join(parts)


def from_bytes(buf: bytes, dtype=np.float32) -> NetParams:
    if buf[:4] != MAGIC:
        raise CorruptCheckpointError("bad checkpoint magic")
    try:
        (version,) = struct.unpack_from("<H", buf, 4)
        if version != FORMAT_VERSION:
            raise CorruptCheckpointError(f"unsupported checkpoint version {version}")
        (n,) = struct.unpack_from("<I", buf, 6)
        meta = json.loads(buf[10:10 + n])
        off = 10 + n
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", buf, off)
            name = buf[off + 2:off + 2 + ln].decode()
            off += 2 + ln
            (rank,) = struct.unpack_from("<B", buf, off)
            dims = struct.unpack_from(f"<{rank}I", buf, off + 1)
            off += 1 + 4 * rank
            size = int(np.prod(dims)) * 4
            if off + size > len(buf):
                raise CorruptCheckpointError("truncated tensor data")
            data = np.frombuffer(buf, dtype="<f4", count=size // 4, offset=off).reshape(dims)
            off += size
            tensors[name] = Tensor(data.astype(dtype), requires_grad=True)
        if off != len(buf):
            raise CorruptCheckpointError(f"{len(buf) - off} trailing bytes after tensor data")
        cfg = NetConfig(**meta["net"])
        init_seed = int(meta["init_seed"])
    except (struct.error, json.JSONDecodeError, UnicodeDecodeError, KeyError, TypeError) as exc:
        raise CorruptCheckpointError(str(exc)) from exc
    expected = {f"{k}.w": shape for k, shape in cfg.layer_shapes().items()}
    expected.update({f"{k}.b": shape[:1] for k, shape in cfg.layer_shapes().items()})
    if {k: v.shape for k, v in tensors.items()} != expected:
        raise CorruptCheckpointError("checkpoint tensors do not match its config")
    return NetParams(cfg, tensors, init_seed)


def save(params: NetParams, path) -> None:
    Path(path).write_bytes(to_bytes(params))


def load(path, dtype=np.float32) -> NetParams:
    return from_bytes(Path(path).read_bytes(), dtype)
