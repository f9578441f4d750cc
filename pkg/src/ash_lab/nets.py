"""Tiny convolutional networks: encoder/decoder, segmenter and discriminator.

Checkpoint container
--------------------
``save_arrays`` writes a byte-stable file::

    b"ASHCKPT1\\n"                      magic + format version
    uint64 little-endian               length N of the JSON header
    N bytes of UTF-8 JSON              {"meta": {...}, "tensors": [{"name", "shape", "offset"}]}
    raw float64 little-endian data     tensors in header order, C order

The header is written with sorted keys and no timestamps, so identical
weights always give identical bytes (and digests).
"""
from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .stylization import adain, content_loss, style_loss
from .tensor import DimensionError, Tensor

log = logging.getLogger(__name__)

MAGIC = b"ASHCKPT1\n"
N_CLASSES = 6


class Module:
    """Named-parameter container; subclasses register convs in ``__init__``."""

    frozen = False

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self._convs: dict[str, tuple[int, int]] = {}

    def add_conv(self, name: str, cin: int, cout: int, k: int, rng: np.random.Generator,
                 stride: int = 1, pad: int = 0, gain: float = 2.0) -> None:
        std = np.sqrt(gain / (cin * k * k))
        self.params[f"{name}.weight"] = Tensor(rng.standard_normal((cout, cin, k, k)) * std, requires_grad=True)
        self.params[f"{name}.bias"] = Tensor(np.zeros(cout), requires_grad=True)
        self._convs[name] = (stride, pad)

    def conv(self, name: str, x: Tensor) -> Tensor:
        stride, pad = self._convs[name]
        return T.conv2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"], stride, pad)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for n, p in self.params.items():
            if n not in state:
                raise KeyError(f"missing parameter {n!r}")
            arr = np.asarray(state[n], dtype=np.float64)
            if arr.shape != p.shape:
                raise DimensionError("load_state_dict", n, arr.shape, p.shape)
            p.data = arr.copy()

    def digest(self) -> str:
        h = hashlib.sha256()
        for n in sorted(self.params):
            h.update(n.encode())
            h.update(np.ascontiguousarray(self.params[n].data).tobytes())
        return h.hexdigest()

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError


class Encoder(Module):
    """3→16→32→64 channels, two stride-2 stages: output is C×H/4×W/4."""

    out_channels = 64

    def __init__(self, rng: np.random.Generator):
        super().__init__()
        self.add_conv("conv1", 3, 16, 3, rng, pad=1)
        self.add_conv("conv2", 16, 32, 4, rng, stride=2, pad=1)
        self.add_conv("conv3", 32, 64, 4, rng, stride=2, pad=1)

    def forward(self, image: Tensor) -> Tensor:
        image = T.as_tensor(image)
        if image.ndim != 3 or image.shape[0] != 3:
            raise DimensionError("encode", "channel", image.shape, "3×H×W")
        for axis, n in zip(("height", "width"), image.shape[1:]):
            if n % 4:
                raise DimensionError("encode", axis, n, "multiple of 4")
        h = T.relu(self.conv("conv1", image))
        h = T.relu(self.conv("conv2", h))
        return T.relu(self.conv("conv3", h))


class Decoder(Module):
    """Mirror of the encoder with nearest upsampling and a sigmoid output."""

    def __init__(self, rng: np.random.Generator):
        super().__init__()
        self.add_conv("conv1", 64, 32, 3, rng, pad=1)
        self.add_conv("conv2", 32, 16, 3, rng, pad=1)
        self.add_conv("conv3", 16, 3, 3, rng, pad=1, gain=1.0)

    def forward(self, features: Tensor) -> Tensor:
        features = T.as_tensor(features)
        if features.ndim != 3 or features.shape[0] != 64:
            raise DimensionError("decode", "channel", features.shape, "64×h×w")
        h = T.relu(self.conv("conv1", features))
        h = T.nearest_upsample(h, 2)
        h = T.relu(self.conv("conv2", h))
        h = T.nearest_upsample(h, 2)
        return T.sigmoid(self.conv("conv3", h))


class SegNet(Module):
    """Two-scale segmenter; coarse features are upsampled back to input size."""

    def __init__(self, rng: np.random.Generator, n_classes: int = N_CLASSES):
        super().__init__()
        self.n_classes = n_classes
        self.add_conv("conv1", 3, 16, 3, rng, pad=1)
        self.add_conv("conv2", 16, 32, 4, rng, stride=2, pad=1)
        self.add_conv("conv3", 32, 32, 4, rng, stride=2, pad=1)
        self.add_conv("classifier", 16 + 32, n_classes, 1, rng, gain=1.0)

    def logits(self, image: Tensor) -> Tensor:
        image = T.as_tensor(image)
        if image.ndim != 3 or image.shape[0] != 3:
            raise DimensionError("segment", "channel", image.shape, "3×H×W")
        h1 = T.relu(self.conv("conv1", image))
        h2 = T.relu(self.conv("conv2", h1))
        h3 = T.relu(self.conv("conv3", h2))
        up = T.nearest_upsample(h3, 4)
        return self.conv("classifier", T.concat([h1, up], axis=0))

    def forward(self, image: Tensor) -> Tensor:
        return T.softmax(self.logits(image), axis=0)

    def predict(self, image) -> np.ndarray:
        with T.no_grad():
            prob = self.forward(T.as_tensor(image)).data
        # argmax returns the lowest index on ties
        return prob.argmax(axis=0)


class Discriminator(Module):
    """Fully convolutional critic over probability maps (4 stride-2 convs)."""

    def __init__(self, rng: np.random.Generator, n_classes: int = N_CLASSES, slope: float = 0.2):
        super().__init__()
        self.slope = slope
        widths = [n_classes, 16, 32, 32, 1]
        for i in range(4):
            self.add_conv(f"conv{i + 1}", widths[i], widths[i + 1], 4, rng, stride=2, pad=1,
                          gain=1.0 if i == 3 else 2.0)

    def forward(self, prob: Tensor) -> Tensor:
        h = T.as_tensor(prob)
        for i in range(1, 4):
            h = T.leaky_relu(self.conv(f"conv{i}", h), self.slope)
        return T.sigmoid(self.conv("conv4", h))


def segment(image: Tensor, segnet: SegNet) -> Tensor:
    return segnet(image)


def discriminate(prob: Tensor, disc: Discriminator) -> Tensor:
    return disc(prob)


# -- checkpoint container -------------------------------------------------

def save_arrays(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> str:
    """Write named arrays; returns the sha256 of the written bytes."""
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True, separators=(",", ":")).encode()
    payload = MAGIC + struct.pack("<Q", len(header)) + header + b"".join(blobs)
    Path(path).write_bytes(payload)
    return hashlib.sha256(payload).hexdigest()


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path}: not an ash_lab checkpoint")
    (n,) = struct.unpack("<Q", raw[len(MAGIC) : len(MAGIC) + 8])
    start = len(MAGIC) + 8
    header = json.loads(raw[start : start + n])
    body = raw[start + n :]
    arrays = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return arrays, header["meta"]


def prefixed(prefix: str, state: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v for k, v in state.items()}


def unprefixed(prefix: str, arrays: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    p = prefix + "/"
    return {k[len(p):]: v for k, v in arrays.items() if k.startswith(p)}


# -- frozen stylization pair ----------------------------------------------

@dataclass
class EncoderDecoder:
    encoder: Encoder
    decoder: Decoder
    frozen: bool = False

    def freeze(self) -> None:
        self.frozen = True
        for m in (self.encoder, self.decoder):
            m.frozen = True
            m.set_requires_grad(False)

    def encode(self, image) -> Tensor:
        return self.encoder(image)

    def decode(self, features) -> Tensor:
        return self.decoder(features)

    def digest(self) -> str:
        return hashlib.sha256((self.encoder.digest() + self.decoder.digest()).encode()).hexdigest()

    def save(self, path: str | Path) -> str:
        arrays = {**prefixed("encoder", self.encoder.state_dict()), **prefixed("decoder", self.decoder.state_dict())}
        return save_arrays(path, arrays, {"kind": "encdec", "frozen": self.frozen})

    @classmethod
    def load(cls, path: str | Path) -> EncoderDecoder:
        arrays, meta = load_arrays(path)
        rng = np.random.default_rng(0)
        ed = cls(Encoder(rng), Decoder(rng))
        ed.encoder.load_state_dict(unprefixed("encoder", arrays))
        ed.decoder.load_state_dict(unprefixed("decoder", arrays))
        if meta.get("frozen", True):
            ed.freeze()
        return ed


@dataclass
class PretrainConfig:
    recon_iterations: int = 5000
    adain_iterations: int = 1500
    lr: float = 1e-3
    content_weight: float = 1.0
    style_weight: float = 1.0
    seed: int = 0


def _mae(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.abs(a - b).mean())


def pretrain_autoencoder(dataset: Sequence[np.ndarray], config: PretrainConfig | None = None) -> EncoderDecoder:
    """Fit the stylization pair, then freeze it.

    Stage one trains encoder and decoder on L1 reconstruction. Stage two
    holds the encoder fixed and tunes the decoder on reconstruction plus
    the AdaIN content/style objectives for random (content, style) pairs.
    """
    from .optim import Adam

    config = config or PretrainConfig()
    if len(dataset) < 500:
        raise ValueError(f"need at least 500 pretraining images, got {len(dataset)}")
    rng = np.random.default_rng(config.seed)
    ed = EncoderDecoder(Encoder(rng), Decoder(rng))
    opt_e, opt_d = Adam(ed.encoder, config.lr), Adam(ed.decoder, config.lr)

    early = []
    for it in range(config.recon_iterations):
        x = Tensor(dataset[rng.integers(len(dataset))])
        loss = T.absolute(ed.decode(ed.encode(x)) - x).mean()
        opt_e.zero_grad(), opt_d.zero_grad()
        loss.backward()
        opt_e.step(), opt_d.step()
        if it < 100:
            early.append(loss.item())
    if len(early) >= 100 and np.mean(early[75:100]) >= np.mean(early[:25]):
        log.warning("reconstruction loss did not decrease over the first 100 iterations")

    ed.encoder.set_requires_grad(False)
    for it in range(config.adain_iterations):
        c = Tensor(dataset[rng.integers(len(dataset))])
        s = Tensor(dataset[rng.integers(len(dataset))])
        fc, fs = ed.encode(c), ed.encode(s)
        target = adain(fc, fs)
        loss = T.absolute(ed.decode(fc) - c).mean()
        fo = ed.encode(ed.decode(target))
        loss = loss + config.content_weight * content_loss(fo, target) + config.style_weight * style_loss(fo, fs)
        opt_d.zero_grad()
        loss.backward()
        opt_d.step()

    ed.freeze()
    return ed


def reconstruction_error(ed: EncoderDecoder, images: Sequence[np.ndarray]) -> float:
    with T.no_grad():
        return float(np.mean([_mae(ed.decode(ed.encode(Tensor(x))).data, x) for x in images]))
