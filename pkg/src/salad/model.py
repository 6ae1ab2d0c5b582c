"""Dense encoder/decoder with unit-sphere latents, plus the Adam optimizer.

The encoder maps a flattened image to a unit-norm latent vector through
leaky-ReLU dense layers; the decoder mirrors it back to pixel space with a
sigmoid output. Checkpoints are a small versioned binary container.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor

CHECKPOINT_MAGIC = b"SALADCKP"
CHECKPOINT_VERSION = 1


@dataclass
class Architecture:
    """Layer widths for the autoencoder.

    Encoder runs input_dim -> encoder_hidden... -> latent_dim; the decoder
    mirrors the encoder back to input_dim.
    """

    input_dim: int
    encoder_hidden: list[int]
    latent_dim: int
    leaky_slope: float = 0.01

    def encoder_sizes(self):
        return [self.input_dim, *self.encoder_hidden, self.latent_dim]

    def decoder_sizes(self):
        return [self.latent_dim, *reversed(self.encoder_hidden), self.input_dim]


@dataclass
class AutoencoderParams:
    arch: Architecture
    encoder: list[tuple[Tensor, Tensor]] = field(default_factory=list)
    decoder: list[tuple[Tensor, Tensor]] = field(default_factory=list)

    def all_tensors(self):
        out = []
        for w, b in [*self.encoder, *self.decoder]:
            out.append(w)
            out.append(b)
        return out

    def encoder_tensors(self):
        out = []
        for w, b in self.encoder:
            out.append(w)
            out.append(b)
        return out

    def zero_grad(self):
        for t in self.all_tensors():
            t.zero_grad()


def _xavier_layers(sizes, rng):
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = np.zeros(fan_out)
        layers.append((Tensor(w, requires_grad=True), Tensor(b, requires_grad=True)))
    return layers


def init_params(arch: Architecture, seed: int) -> AutoencoderParams:
    """Xavier-uniform weights, zero biases, reproducible from the seed."""
    rng = np.random.default_rng(seed)
    return AutoencoderParams(
        arch=arch,
        encoder=_xavier_layers(arch.encoder_sizes(), rng),
        decoder=_xavier_layers(arch.decoder_sizes(), rng),
    )


def encode(params: AutoencoderParams, x) -> Tensor:
    """Embed one flattened image on the unit sphere. Differentiable."""
    h = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64).reshape(-1))
    if h.data.shape != (params.arch.input_dim,):
        raise ValueError(f"encoder expects input of dim {params.arch.input_dim}, got {h.data.shape}")
    last = len(params.encoder) - 1
    for i, (w, b) in enumerate(params.encoder):
        h = (w @ h) + b
        if i < last:
            h = h.leaky_relu(params.arch.leaky_slope)
    return h.l2_normalize()


def decode(params: AutoencoderParams, z) -> Tensor:
    """Reconstruct a flattened image from a latent; sigmoid keeps pixels in (0,1)."""
    h = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float64))
    if h.data.shape != (params.arch.latent_dim,):
        raise ValueError(f"decoder expects latent of dim {params.arch.latent_dim}, got {h.data.shape}")
    last = len(params.decoder) - 1
    for i, (w, b) in enumerate(params.decoder):
        h = (w @ h) + b
        if i < last:
            h = h.leaky_relu(params.arch.leaky_slope)
    return h.sigmoid()


class Adam:
    """Adam with bias correction over a fixed list of parameter tensors."""

    def __init__(self, params, lr=1e-4, beta1=0.5, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.step_count += 1
        t = self.step_count
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ValueError("gradient shape does not match parameter shape")
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[i] / (1.0 - self.beta1 ** t)
            v_hat = self.v[i] / (1.0 - self.beta2 ** t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


# -- checkpoint serialization --------------------------------------------
#
# Layout: 8-byte magic, 1 version byte, u32 LE header length, JSON header
# (sorted keys), then the named float64 little-endian arrays in header order.
# The header records the architecture, optimizer scalars and step counter,
# an arbitrary JSON-compatible config blob, and each array's name and shape.


def _array_entries(params: AutoencoderParams, adam: Adam | None):
    entries = []
    for i, (w, b) in enumerate(params.encoder):
        entries.append((f"enc.{i}.w", w.data))
        entries.append((f"enc.{i}.b", b.data))
    for i, (w, b) in enumerate(params.decoder):
        entries.append((f"dec.{i}.w", w.data))
        entries.append((f"dec.{i}.b", b.data))
    if adam is not None:
        for i, (m, v) in enumerate(zip(adam.m, adam.v)):
            entries.append((f"adam.m.{i}", m))
            entries.append((f"adam.v.{i}", v))
    return entries


def save_checkpoint(path, params: AutoencoderParams, adam: Adam | None = None, config: dict | None = None):
    entries = _array_entries(params, adam)
    header = {
        "arch": {
            "input_dim": params.arch.input_dim,
            "encoder_hidden": list(params.arch.encoder_hidden),
            "latent_dim": params.arch.latent_dim,
            "leaky_slope": params.arch.leaky_slope,
        },
        "adam": None if adam is None else {
            "lr": adam.lr,
            "beta1": adam.beta1,
            "beta2": adam.beta2,
            "eps": adam.eps,
            "step_count": adam.step_count,
        },
        "config": config,
        "arrays": [{"name": name, "shape": list(a.shape)} for name, a in entries],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(bytes([CHECKPOINT_VERSION]))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, a in entries:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (params, adam_or_None, config_dict_or_None)."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        version = fh.read(1)[0]
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        arrays = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            arrays[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()

    arch = Architecture(
        input_dim=header["arch"]["input_dim"],
        encoder_hidden=list(header["arch"]["encoder_hidden"]),
        latent_dim=header["arch"]["latent_dim"],
        leaky_slope=header["arch"]["leaky_slope"],
    )
    n_enc = len(arch.encoder_sizes()) - 1
    n_dec = len(arch.decoder_sizes()) - 1
    params = AutoencoderParams(
        arch=arch,
        encoder=[(Tensor(arrays[f"enc.{i}.w"], requires_grad=True),
                  Tensor(arrays[f"enc.{i}.b"], requires_grad=True)) for i in range(n_enc)],
        decoder=[(Tensor(arrays[f"dec.{i}.w"], requires_grad=True),
                  Tensor(arrays[f"dec.{i}.b"], requires_grad=True)) for i in range(n_dec)],
    )
    adam = None
    if header["adam"] is not None:
        adam = Adam(params.all_tensors(), lr=header["adam"]["lr"],
                    beta1=header["adam"]["beta1"], beta2=header["adam"]["beta2"],
                    eps=header["adam"]["eps"])
        adam.step_count = header["adam"]["step_count"]
        adam.m = [arrays[f"adam.m.{i}"] for i in range(len(adam.params))]
        adam.v = [arrays[f"adam.v.{i}"] for i in range(len(adam.params))]
    return params, adam, header["config"]
