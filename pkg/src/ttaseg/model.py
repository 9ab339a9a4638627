"""Miniature promptable segmenter: ViT-style encoder, box-prompt encoder,
mask decoder with coarse and fine heads, and an IoU self-estimate head.

The decoder turns each image token into a 2x2 block of a coarse feature
map (one quarter the image side), reads the low-resolution mask straight
off that map, and upsamples it twice with learned 2x expansion stages for
the high-resolution mask. LoRA adapters can be attached to the attention
projections after pretraining; with zero-initialized B they leave the
forward pass bit-identical.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from math import isqrt

import numpy as np

from .synthdata import BoxPrompt
from .tensor import Tensor, as_tensor, concat, softmax

PROMPT_FREQS = 8
_LORA_BITS = {"q": 1, "k": 2, "v": 4, "o": 8}


def gelu(x: Tensor) -> Tensor:
    """tanh-form GELU; smooth, so finite-difference checks stay tight."""
    return x.gelu()


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 32
    encoder_blocks: int = 2
    attention_heads: int = 4
    lowres_size: int = 16
    highres_size: int = 64
    lora_rank: int = 4
    lora_targets: str = "qv"

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError("ModelConfig: image_size must be divisible by patch_size")
        grid = self.image_size // self.patch_size
        if self.lowres_size != 2 * grid:
            raise ValueError("ModelConfig: lowres_size must be twice the token grid side")
        if self.highres_size % self.lowres_size or self.highres_size != 4 * self.lowres_size:
            raise ValueError("ModelConfig: highres_size must be 4x lowres_size")
        if self.highres_size != self.image_size:
            raise ValueError("ModelConfig: highres_size must equal image_size")
        if self.embed_dim % self.attention_heads:
            raise ValueError("ModelConfig: embed_dim must be divisible by attention_heads")
        if self.lora_rank < 1:
            raise ValueError("ModelConfig: lora_rank must be positive")
        if not set(self.lora_targets) <= set("qkvo") or not self.lora_targets:
            raise ValueError("ModelConfig: lora_targets must be a nonempty subset of 'qkvo'")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def tokens(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size * self.patch_size

    @property
    def mlp_hidden(self) -> int:
        return 2 * self.embed_dim

    @property
    def head_dims(self) -> tuple:
        d = self.embed_dim
        return (max(d // 2, 4), max(d // 4, 4), max(d // 4, 4))

    @property
    def iou_hidden(self) -> int:
        return max(self.embed_dim // 2, 4)


@dataclass
class SegOutputs:
    """One forward pass: coarse mask logits, fine mask logits, IoU
    self-estimate in (0, 1), and the encoder token embedding."""

    m_low: Tensor
    m_high: Tensor
    s_iou: Tensor
    z: Tensor


_UP_POS = ("00", "01", "10", "11")


def _init_params(config: ModelConfig, rng: np.random.Generator) -> dict:
    d = config.embed_dim
    params = {}

    def w(name, out_dim, in_dim):
        params[name] = Tensor(rng.normal(0.0, in_dim**-0.5, (out_dim, in_dim)))

    def b(name, dim):
        params[name] = Tensor(np.zeros(dim))

    def ln(prefix):
        params[f"{prefix}.g"] = Tensor(np.ones(d))
        params[f"{prefix}.b"] = Tensor(np.zeros(d))

    w("patch_embed.w", d, config.patch_dim)
    b("patch_embed.b", d)
    params["pos_embed"] = Tensor(0.02 * rng.normal(size=(config.tokens, d)))
    for i in range(config.encoder_blocks):
        ln(f"enc{i}.ln1")
        for proj in "qkvo":
            w(f"enc{i}.attn.{proj}.w", d, d)
            b(f"enc{i}.attn.{proj}.b", d)
        ln(f"enc{i}.ln2")
        w(f"enc{i}.mlp.w1", config.mlp_hidden, d)
        b(f"enc{i}.mlp.b1", config.mlp_hidden)
        w(f"enc{i}.mlp.w2", d, config.mlp_hidden)
        b(f"enc{i}.mlp.b2", d)
    ln("ln_f")

    params["prompt.freq"] = Tensor(rng.normal(size=(PROMPT_FREQS, 4)))
    w("prompt.mlp.w1", config.mlp_hidden, 2 * PROMPT_FREQS)
    b("prompt.mlp.b1", config.mlp_hidden)
    w("prompt.mlp.w2", d, config.mlp_hidden)
    b("prompt.mlp.b2", d)

    for proj in "qkvo":
        w(f"dec.attn.{proj}.w", d, d)
        b(f"dec.attn.{proj}.b", d)
    w("dec.mlp.w1", config.mlp_hidden, d)
    b("dec.mlp.b1", config.mlp_hidden)
    w("dec.mlp.w2", d, config.mlp_hidden)
    b("dec.mlp.b2", d)
    w("dec.maskw.w", d, d)
    b("dec.maskw.b", d)
    w("dec.tok.w", d, d)
    b("dec.tok.b", d)

    d0, d1, d2 = config.head_dims
    for pos in _UP_POS:
        w(f"dec.up0.{pos}.w", d0, d)
        b(f"dec.up0.{pos}.b", d0)
        w(f"dec.up1.{pos}.w", d1, d0)
        b(f"dec.up1.{pos}.b", d1)
        w(f"dec.up2.{pos}.w", d2, d1)
        b(f"dec.up2.{pos}.b", d2)
    w("dec.lowhead.w", 1, d0)
    b("dec.lowhead.b", 1)
    w("dec.highhead.w", 1, d2)
    b("dec.highhead.b", 1)
    w("dec.iou.w1", config.iou_hidden, d)
    b("dec.iou.b1", config.iou_hidden)
    w("dec.iou.w2", 1, config.iou_hidden)
    b("dec.iou.b2", 1)
    return params


def lora_param_names(config: ModelConfig) -> list:
    names = []
    for i in range(config.encoder_blocks):
        for proj in config.lora_targets:
            names.append(f"enc{i}.attn.{proj}.lora_a")
            names.append(f"enc{i}.attn.{proj}.lora_b")
    return names


class SegModel:
    """Parameter container plus the forward computation."""

    def __init__(self, config: ModelConfig, params: dict):
        self.config = config
        self.params = params

    @classmethod
    def build(cls, config: ModelConfig, seed=0) -> "SegModel":
        rng = np.random.default_rng(seed if isinstance(seed, (list, tuple)) else [int(seed), 23])
        return cls(config, _init_params(config, rng))

    def clone(self) -> "SegModel":
        params = {}
        for name, p in self.params.items():
            t = Tensor(p.data)
            t.requires_grad = p.requires_grad
            params[name] = t
        return SegModel(self.config, params)

    @property
    def has_lora(self) -> bool:
        return any(name.endswith(".lora_a") for name in self.params)

    def attach_lora(self, seed=0):
        """Add rank-r adapters on the configured attention projections.

        A is small random, B is zero, so the adapted forward initially
        equals the base forward exactly.
        """
        if self.has_lora:
            raise ValueError("attach_lora: adapters already present")
        rng = np.random.default_rng(seed if isinstance(seed, (list, tuple)) else [int(seed), 29])
        d, r = self.config.embed_dim, self.config.lora_rank
        for i in range(self.config.encoder_blocks):
            for proj in self.config.lora_targets:
                self.params[f"enc{i}.attn.{proj}.lora_a"] = Tensor(0.02 * rng.normal(size=(r, d)))
                self.params[f"enc{i}.attn.{proj}.lora_b"] = Tensor(np.zeros((d, r)))

    def set_trainable(self, predicate):
        for name, p in self.params.items():
            p.requires_grad = bool(predicate(name))

    def trainable(self) -> dict:
        return {name: p for name, p in self.params.items() if p.requires_grad}

    # -- building blocks -------------------------------------------------

    def _linear(self, x: Tensor, prefix: str) -> Tensor:
        p = self.params
        out = x @ p[f"{prefix}.w"].transpose() + p[f"{prefix}.b"]
        a = p.get(f"{prefix}.lora_a")
        if a is not None:
            bb = p[f"{prefix}.lora_b"]
            out = out + (x @ a.transpose() @ bb.transpose()) * (1.0 / self.config.lora_rank)
        return out

    def _layer_norm(self, x: Tensor, prefix: str) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        return xc / ((var + 1e-5) ** 0.5) * self.params[f"{prefix}.g"] + self.params[f"{prefix}.b"]

    def _mlp(self, x: Tensor, prefix: str) -> Tensor:
        p = self.params
        h = gelu(x @ p[f"{prefix}.w1"].transpose() + p[f"{prefix}.b1"])
        return h @ p[f"{prefix}.w2"].transpose() + p[f"{prefix}.b2"]

    def _attention(self, q_in: Tensor, kv_in: Tensor, prefix: str) -> Tensor:
        h = self.config.attention_heads
        hd = self.config.embed_dim // h
        nq = q_in.shape[0]
        nk = kv_in.shape[0]

        def split(t, n):
            return t.reshape(n, h, hd).transpose(1, 0, 2)

        q = split(self._linear(q_in, f"{prefix}.q"), nq)
        k = split(self._linear(kv_in, f"{prefix}.k"), nk)
        v = split(self._linear(kv_in, f"{prefix}.v"), nk)
        att = softmax(q @ k.transpose(0, 2, 1) * (hd**-0.5), axis=-1)
        out = (att @ v).transpose(1, 0, 2).reshape(nq, self.config.embed_dim)
        return self._linear(out, f"{prefix}.o")

    def _upstage(self, f: Tensor, prefix: str):
        hh, ww, din = f.shape
        flat = f.reshape(hh * ww, din)
        parts = []
        dout = None
        for pos in _UP_POS:
            part = gelu(self._linear(flat, f"{prefix}.{pos}"))
            dout = part.shape[1]
            parts.append(part.reshape(hh, ww, 1, dout))
        merged = concat(parts, axis=2)
        return merged.reshape(hh, ww, 2, 2, dout).transpose(0, 2, 1, 3, 4).reshape(2 * hh, 2 * ww, dout)

    # -- public forward ----------------------------------------------------

    def encode(self, image) -> Tensor:
        """Image (3, S, S) -> token embedding (tokens, embed_dim)."""
        x = as_tensor(image)
        s = self.config.image_size
        if x.shape != (3, s, s):
            raise ValueError(f"encode: expected (3, {s}, {s}), got {x.shape}")
        g, p = self.config.grid, self.config.patch_size
        patches = x.reshape(3, g, p, g, p).transpose(1, 3, 2, 4, 0).reshape(g * g, self.config.patch_dim)
        tok = patches @ self.params["patch_embed.w"].transpose() + self.params["patch_embed.b"]
        tok = tok + self.params["pos_embed"]
        for i in range(self.config.encoder_blocks):
            y = self._layer_norm(tok, f"enc{i}.ln1")
            tok = tok + self._attention(y, y, f"enc{i}.attn")
            tok = tok + self._mlp(self._layer_norm(tok, f"enc{i}.ln2"), f"enc{i}.mlp")
        return self._layer_norm(tok, "ln_f")

    def encode_prompt(self, box: BoxPrompt) -> Tensor:
        """Box -> one prompt token (1, embed_dim) via Fourier features + MLP."""
        s = self.config.image_size
        coords = box.as_array()
        if coords.max() > s:
            raise ValueError(f"encode_prompt: box {coords} exceeds image bound {s}")
        if (box.x1 - box.x0) * (box.y1 - box.y0) <= 0:
            raise ValueError("encode_prompt: zero-area box")
        nb = Tensor((coords / s).reshape(1, 4))
        f = nb @ self.params["prompt.freq"].transpose() * (2.0 * np.pi)
        feats = concat([f.sin(), f.cos()], axis=1)
        h = gelu(feats @ self.params["prompt.mlp.w1"].transpose() + self.params["prompt.mlp.b1"])
        return h @ self.params["prompt.mlp.w2"].transpose() + self.params["prompt.mlp.b2"]

    def decode(self, z: Tensor, e: Tensor) -> SegOutputs:
        d = self.config.embed_dim
        if z.shape != (self.config.tokens, d) or e.shape != (1, d):
            raise ValueError(f"decode: shape mismatch z={z.shape} e={e.shape} for config {self.config}")
        qp = e + self._attention(e, z, "dec.attn")
        qp = qp + self._mlp(qp, "dec.mlp")
        wm = qp @ self.params["dec.maskw.w"].transpose() + self.params["dec.maskw.b"]
        u = z @ self.params["dec.tok.w"].transpose() + self.params["dec.tok.b"]
        gated = u * wm
        g = self.config.grid
        f16 = self._upstage(gated.reshape(g, g, d), "dec.up0")
        low = self.config.lowres_size
        m_low = (f16.reshape(low * low, -1) @ self.params["dec.lowhead.w"].transpose()
                 + self.params["dec.lowhead.b"]).reshape(low, low)
        f32 = self._upstage(f16, "dec.up1")
        f64 = self._upstage(f32, "dec.up2")
        high = self.config.highres_size
        m_high = (f64.reshape(high * high, -1) @ self.params["dec.highhead.w"].transpose()
                  + self.params["dec.highhead.b"]).reshape(high, high)
        ih = gelu(qp @ self.params["dec.iou.w1"].transpose() + self.params["dec.iou.b1"])
        s_iou = ((ih @ self.params["dec.iou.w2"].transpose() + self.params["dec.iou.b2"])
                 .reshape(()).sigmoid())
        return SegOutputs(m_low=m_low, m_high=m_high, s_iou=s_iou, z=z)

    def forward(self, image, box: BoxPrompt) -> SegOutputs:
        return self.decode(self.encode(image), self.encode_prompt(box))


def tokens_to_grid(z: Tensor) -> Tensor:
    """Reshape (tokens, dim) embeddings to a (dim, g, g) spatial grid."""
    n, d = z.shape
    g = isqrt(n)
    if g * g != n:
        raise ValueError(f"tokens_to_grid: {n} tokens is not a square grid")
    return z.transpose(1, 0).reshape(d, g, g)


# -- checkpoint format ------------------------------------------------------
#
# magic "TTAF", u32 version, u32 field count, then (u32 name_len, name,
# u32 value) config fields, u32 tensor count, then per tensor sorted by
# name: u32 name_len, name, u32 rank, u32 dims..., little-endian f64 data.

MAGIC = b"TTAF"
VERSION = 1


def _config_fields(model: SegModel) -> dict:
    c = model.config
    return {
        "attention_heads": c.attention_heads,
        "embed_dim": c.embed_dim,
        "encoder_blocks": c.encoder_blocks,
        "has_lora": int(model.has_lora),
        "highres_size": c.highres_size,
        "image_size": c.image_size,
        "lora_rank": c.lora_rank,
        "lora_targets": sum(_LORA_BITS[t] for t in c.lora_targets),
        "lowres_size": c.lowres_size,
        "patch_size": c.patch_size,
    }


def save_checkpoint(model: SegModel, path):
    out = [MAGIC, struct.pack("<I", VERSION)]
    fields = _config_fields(model)
    out.append(struct.pack("<I", len(fields)))
    for name in sorted(fields):
        enc = name.encode()
        out.append(struct.pack("<I", len(enc)) + enc + struct.pack("<I", fields[name]))
    names = sorted(model.params)
    out.append(struct.pack("<I", len(names)))
    for name in names:
        data = model.params[name].data
        enc = name.encode()
        out.append(struct.pack("<I", len(enc)) + enc)
        out.append(struct.pack("<I", data.ndim) + struct.pack(f"<{data.ndim}I", *data.shape))
        out.append(data.astype("<f8").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(out))


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise ValueError(f"checkpoint {self.path}: truncated")
        chunk = self.blob[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def name(self) -> str:
        return self.take(self.u32()).decode()


def load_checkpoint(path) -> SegModel:
    """Rebuild a model; every stored tensor must match the config-implied
    shape table exactly, and vice versa."""
    with open(path, "rb") as f:
        reader = _Reader(f.read(), path)
    if reader.take(4) != MAGIC:
        raise ValueError(f"checkpoint {path}: bad magic")
    version = reader.u32()
    if version != VERSION:
        raise ValueError(f"checkpoint {path}: unsupported version {version}")
    fields = {}
    for _ in range(reader.u32()):
        key = reader.name()
        fields[key] = reader.u32()
    targets = "".join(t for t, bit in _LORA_BITS.items() if fields["lora_targets"] & bit)
    config = ModelConfig(
        image_size=fields["image_size"],
        patch_size=fields["patch_size"],
        embed_dim=fields["embed_dim"],
        encoder_blocks=fields["encoder_blocks"],
        attention_heads=fields["attention_heads"],
        lowres_size=fields["lowres_size"],
        highres_size=fields["highres_size"],
        lora_rank=fields["lora_rank"],
        lora_targets=targets,
    )
    model = SegModel.build(config, seed=0)
    if fields["has_lora"]:
        model.attach_lora(seed=0)
    expected = {name: p.data.shape for name, p in model.params.items()}
    seen = set()
    for _ in range(reader.u32()):
        name = reader.name()
        rank = reader.u32()
        dims = tuple(reader.u32() for _ in range(rank))
        payload = reader.take(8 * int(np.prod(dims, dtype=np.int64)))
        if name not in expected:
            raise ValueError(f"checkpoint {path}: unexpected tensor {name!r}")
        if dims != expected[name]:
            raise ValueError(f"checkpoint {path}: tensor {name!r} has shape {dims}, expected {expected[name]}")
        arr = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
        model.params[name] = Tensor(arr)
        seen.add(name)
    missing = set(expected) - seen
    if missing:
        raise ValueError(f"checkpoint {path}: missing tensors {sorted(missing)}")
    return model
