"""Encoders, decoders and heads, plus the bundle that ties them together.

The 28x28 encoder is

    conv(1->16, 3x3, s1, p1) -> BN -> ReLU -> maxpool 2x2/2      28 -> 14
    conv(16->8, 3x3, s2, p1) -> BN -> ReLU -> adaptive max 2x2    14 -> 7 -> 2
    flatten (32) -> dense(32 -> latent)

and the decoder mirrors it with transposed convolutions 2 -> 5 -> 15 -> 28.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .autodiff.nn import (
    AdaptiveMaxPool2d,
    BatchNorm2d,
    Conv2d,
    ConvTranspose2d,
    Dense,
    Flatten,
    MaxPool2d,
    Module,
    ReLU,
    Reshape,
    Sequential,
    Tanh,
)

CONV_LATENT_DIMS = (3, 10)
MLP_HIDDEN = 16
CHECKPOINT_MAGIC = b"DSCK"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ArchitectureSpec:
    kind: str  # "conv28" | "mlp"
    input_shape: tuple[int, ...]
    latent_dim: int
    hidden: tuple[int, ...] = (MLP_HIDDEN,)

    def __post_init__(self):
        if self.kind == "conv28":
            if tuple(self.input_shape) != (1, 28, 28):
                raise ConfigError(f"conv28 needs input shape (1, 28, 28), got {self.input_shape}")
            if self.latent_dim not in CONV_LATENT_DIMS:
                raise ConfigError(f"conv28 latent_dim must be one of {CONV_LATENT_DIMS}, got {self.latent_dim}")
        elif self.kind == "mlp":
            if len(self.input_shape) != 1 or self.input_shape[0] < 1:
                raise ConfigError(f"mlp needs a 1-D input shape, got {self.input_shape}")
            if self.latent_dim < 1:
                raise ConfigError(f"latent_dim must be positive, got {self.latent_dim}")
        else:
            raise ConfigError(f"unknown architecture kind {self.kind!r}; expected 'conv28' or 'mlp'")


def _check_latent(latent_dim: int) -> None:
    if latent_dim not in CONV_LATENT_DIMS:
        raise ConfigError(f"latent_dim must be one of {CONV_LATENT_DIMS}, got {latent_dim}")


def build_conv_encoder(latent_dim: int, rng: np.random.Generator) -> Sequential:
    _check_latent(latent_dim)
    return Sequential(
        Conv2d(1, 16, 3, stride=1, padding=1, rng=rng),
        BatchNorm2d(16),
        ReLU(),
        MaxPool2d(2, 2),
        Conv2d(16, 8, 3, stride=2, padding=1, rng=rng),
        BatchNorm2d(8),
        ReLU(),
        AdaptiveMaxPool2d(2, 2),
        Flatten(),
        Dense(32, latent_dim, rng),
    )


def build_conv_decoder(latent_dim: int, rng: np.random.Generator) -> Sequential:
    _check_latent(latent_dim)
    return Sequential(
        Dense(latent_dim, 32, rng),
        Reshape(8, 2, 2),
        ConvTranspose2d(8, 16, 3, stride=2, padding=0, rng=rng),
        ReLU(),
        BatchNorm2d(16),
        ConvTranspose2d(16, 8, 5, stride=3, padding=1, rng=rng),
        ReLU(),
        BatchNorm2d(8),
        ConvTranspose2d(8, 1, 2, stride=2, padding=1, rng=rng),
        Tanh(),
    )


def build_classifier(latent_dim: int, num_classes: int, rng: np.random.Generator) -> Sequential:
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    return Sequential(Dense(latent_dim, 5, rng), ReLU(), Dense(5, num_classes, rng))


def build_domain_classifier(latent_dim: int, rng: np.random.Generator) -> Dense:
    return Dense(latent_dim, 2, rng)


def build_mlp_pair(input_dim: int, latent_dim: int, rng: np.random.Generator,
                   hidden: int = MLP_HIDDEN) -> tuple[Sequential, Sequential]:
    """Vector encoder/decoder pair: dense -> ReLU -> dense, decoder ending in tanh."""
    if input_dim < 1:
        raise ConfigError(f"input_dim must be >= 1, got {input_dim}")
    encoder = Sequential(Dense(input_dim, hidden, rng), ReLU(), Dense(hidden, latent_dim, rng))
    decoder = Sequential(Dense(latent_dim, hidden, rng), ReLU(), Dense(hidden, input_dim, rng), Tanh())
    return encoder, decoder


def build_autoencoder(spec: ArchitectureSpec, rng: np.random.Generator) -> tuple[Sequential, Sequential]:
    if spec.kind == "conv28":
        return build_conv_encoder(spec.latent_dim, rng), build_conv_decoder(spec.latent_dim, rng)
    return build_mlp_pair(spec.input_shape[0], spec.latent_dim, rng, hidden=spec.hidden[0])


@dataclass
class ModelBundle:
    f_source: Module
    f_target: Module
    d_source: Module
    d_target: Module
    classifier: Module
    domain_classifier: Module
    latent_dim: int
    shared_embedding: bool
    specs: tuple[ArchitectureSpec, ArchitectureSpec] = field(default=None, repr=False)

    COMPONENTS = ("f_source", "f_target", "d_source", "d_target", "classifier", "domain_classifier")

    def modules(self) -> list[tuple[str, Module]]:
        """Distinct modules in a fixed order; a shared encoder/decoder is listed once."""
        out, seen = [], set()
        for name in self.COMPONENTS:
            m = getattr(self, name)
            if id(m) not in seen:
                seen.add(id(m))
                out.append((name, m))
        return out

    def named_parameters(self):
        for name, m in self.modules():
            yield from m.named_parameters(name + ".")

    def named_buffers(self):
        for name, m in self.modules():
            yield from m.named_buffers(name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> ModelBundle:
        for _, m in self.modules():
            m.train(mode)
        return self

    def eval(self) -> ModelBundle:
        return self.train(False)


def build_bundle(source: ArchitectureSpec, target: ArchitectureSpec, num_classes: int,
                 shared_embedding: bool, seed: int) -> ModelBundle:
    """Instantiate all six networks from one seed.

    With ``shared_embedding`` both domains use a single encoder and decoder,
    which requires identical source and target architectures.
    """
    if source.latent_dim != target.latent_dim:
        raise ConfigError(f"latent_dim differs between domains: {source.latent_dim} vs {target.latent_dim}")
    if shared_embedding and source != target:
        raise ConfigError("a shared embedding needs identical source and target architectures")
    rng = np.random.default_rng(seed)
    f_s, d_s = build_autoencoder(source, rng)
    if shared_embedding:
        f_t, d_t = f_s, d_s
    else:
        f_t, d_t = build_autoencoder(target, rng)
    latent = source.latent_dim
    return ModelBundle(
        f_source=f_s, f_target=f_t, d_source=d_s, d_target=d_t,
        classifier=build_classifier(latent, num_classes, rng),
        domain_classifier=build_domain_classifier(latent, rng),
        latent_dim=latent, shared_embedding=shared_embedding, specs=(source, target),
    )


def save_checkpoint(bundle: ModelBundle, path) -> None:
    """Write parameters and batch-norm buffers.

    Layout: ``DSCK`` magic, a little-endian uint32 header length, the UTF-8
    JSON header ``{"shared_embedding", "latent_dim", "entries": [{name, shape,
    offset}]}`` and finally the float32 little-endian payload. Offsets count
    bytes from the start of the payload.
    """
    entries, chunks, offset = [], [], 0
    arrays = [(n, p.data) for n, p in bundle.named_parameters()] + list(bundle.named_buffers())
    for name, arr in arrays:
        buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(buf)
        offset += len(buf)
    header = json.dumps({"shared_embedding": bundle.shared_embedding, "latent_dim": bundle.latent_dim,
                         "entries": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<I", len(header)) + header)
        for c in chunks:
            fh.write(c)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic {raw[:4]!r})")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + hlen])
    payload = raw[8 + hlen:]
    arrays = {}
    for e in header["entries"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
    return header, arrays


def load_checkpoint(bundle: ModelBundle, path) -> None:
    header, arrays = read_checkpoint(path)
    if header["shared_embedding"] != bundle.shared_embedding:
        raise ValueError("checkpoint and bundle disagree on shared_embedding")
    for name, p in bundle.named_parameters():
        p.data = arrays[name].astype(p.data.dtype).reshape(p.shape)
    for name, buf in bundle.named_buffers():
        buf[...] = arrays[name]
