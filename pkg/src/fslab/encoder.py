"""Miniature vision transformer used as the frozen image encoder.

Linear weights are stored ``(in, out)`` so a layer computes ``x @ W + b``.
Layer names follow ``block.{i}.mlp.c_fc`` / ``block.{i}.mlp.c_proj`` for the
two MLP projections, which are the only layers adapters may target.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass

import numpy as np

from fslab import tensor as T
from fslab.checkpoint import CheckpointError, read_container, write_container
from fslab.tensor import Tensor


# fixed input standardization applied before patch embedding
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 64
    num_blocks: int = 8
    num_heads: int = 4
    output_dim: int = 64
    seed: int = 0

    @property
    def mlp_hidden(self):
        return 4 * self.embed_dim

    @property
    def num_patches(self):
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self):
        return 3 * self.patch_size * self.patch_size

    def validate(self):
        for key, val in asdict(self).items():
            if key != "seed" and (not isinstance(val, int) or val <= 0):
                raise ConfigError(f"encoder {key} must be a positive integer, got {val!r}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        return self


class EncoderWeights:
    """Named frozen parameters of the encoder."""

    def __init__(self, config, params):
        self.config = config
        self.params = params

    def __getitem__(self, name):
        return self.params[name]

    def names(self):
        return list(self.params)

    def adaptable_layers(self):
        """Names of layers an adapter may wrap (MLP projections only)."""
        return [n[: -len(".weight")] for n in self.params if ".mlp.c_" in n and n.endswith(".weight")]

    def parameter_count(self):
        return sum(p.size for p in self.params.values())

    def checksum(self):
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def set_trainable(self, flag):
        for p in self.params.values():
            p.requires_grad = flag
            p.grad = None

    def save(self, path):
        header = {f"encoder.{k}": v for k, v in asdict(self.config).items()}
        write_container(path, {n: p.data for n, p in self.params.items()}, header)

    @classmethod
    def load(cls, path):
        header, arrays = read_container(path)
        try:
            cfg = EncoderConfig(**{k[len("encoder."):]: int(v) for k, v in header.items() if k.startswith("encoder.")})
        except TypeError as exc:
            raise CheckpointError(f"{path}: encoder header incomplete ({exc})") from exc
        cfg.validate()
        expected = init_encoder(cfg)
        params = {}
        for name, ref in expected.params.items():
            if name not in arrays:
                raise CheckpointError(f"{path}: missing array {name!r}")
            if arrays[name].shape != ref.shape:
                raise CheckpointError(f"{path}: {name} has shape {arrays[name].shape}, expected {ref.shape}")
            params[name] = Tensor(arrays[name], name=name)
        return cls(cfg, params)


def init_encoder(config):
    """Deterministic Gaussian(0, 0.02) init; layer-norm gain 1, bias 0."""
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x656E63]))
    d, hid = config.embed_dim, config.mlp_hidden
    std = 0.02

    def normal(*shape):
        return rng.normal(0.0, std, size=shape)

    params = {}

    def put(name, arr):
        params[name] = Tensor(np.asarray(arr, dtype=np.float64), name=name)

    put("patch_embed.weight", normal(config.patch_dim, d))
    put("patch_embed.bias", np.zeros(d))
    put("cls_token", normal(d))
    put("pos_embed", normal(config.num_patches + 1, d))
    for i in range(config.num_blocks):
        p = f"block.{i}"
        put(f"{p}.ln1.gain", np.ones(d))
        put(f"{p}.ln1.bias", np.zeros(d))
        put(f"{p}.attn.qkv.weight", normal(d, 3 * d))
        put(f"{p}.attn.qkv.bias", np.zeros(3 * d))
        put(f"{p}.attn.out.weight", normal(d, d))
        put(f"{p}.attn.out.bias", np.zeros(d))
        put(f"{p}.ln2.gain", np.ones(d))
        put(f"{p}.ln2.bias", np.zeros(d))
        put(f"{p}.mlp.c_fc.weight", normal(d, hid))
        put(f"{p}.mlp.c_fc.bias", np.zeros(hid))
        put(f"{p}.mlp.c_proj.weight", normal(hid, d))
        put(f"{p}.mlp.c_proj.bias", np.zeros(d))
    put("ln_final.gain", np.ones(d))
    put("ln_final.bias", np.zeros(d))
    put("proj.weight", normal(d, config.output_dim))
    return EncoderWeights(config, params)


def patchify(images, patch_size):
    """``(B, 3, H, W)`` -> ``(B, num_patches, 3 * p * p)`` in row-major patch order."""
    b, c, h, w = images.shape
    p = patch_size
    x = images.reshape(b, c, h // p, p, w // p, p).transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(b, (h // p) * (w // p), c * p * p))


def _as_batch(images, config):
    arr = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1:] != (3, config.image_size, config.image_size):
        raise T.DimensionError(
            f"expected images of shape (3, {config.image_size}, {config.image_size}), got {arr.shape[-3:] if arr.ndim >= 3 else arr.shape}"
        )
    return arr, single


def _mlp_linear(weights, name, x, adapters, training, rng):
    w, b = weights[f"{name}.weight"], weights[f"{name}.bias"]
    if adapters is not None and name in adapters:
        from fslab.lora import lora_forward

        return lora_forward(adapters[name], x, bias=b, training=training, rng=rng)
    return T.linear(x, w, b)


def _block(weights, i, x, adapters, training, rng):
    cfg = weights.config
    bsz, ntok, d = x.shape
    heads = cfg.num_heads
    dh = d // heads
    p = f"block.{i}"
    h = T.layer_norm(x, weights[f"{p}.ln1.gain"], weights[f"{p}.ln1.bias"])
    qkv = T.linear(h, weights[f"{p}.attn.qkv.weight"], weights[f"{p}.attn.qkv.bias"])
    qkv = T.transpose(T.reshape(qkv, (bsz, ntok, 3, heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    ctx = T.matmul(T.softmax(scores), v)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (bsz, ntok, d))
    x = x + T.linear(ctx, weights[f"{p}.attn.out.weight"], weights[f"{p}.attn.out.bias"])
    h = T.layer_norm(x, weights[f"{p}.ln2.gain"], weights[f"{p}.ln2.bias"])
    h = T.gelu(_mlp_linear(weights, f"{p}.mlp.c_fc", h, adapters, training, rng))
    h = _mlp_linear(weights, f"{p}.mlp.c_proj", h, adapters, training, rng)
    return x + h


def _embed(weights, arr):
    cfg = weights.config
    bsz = arr.shape[0]
    d = cfg.embed_dim
    arr = (arr - PIXEL_MEAN) / PIXEL_STD
    tokens = T.linear(Tensor(patchify(arr, cfg.patch_size)), weights["patch_embed.weight"], weights["patch_embed.bias"])
    cls = T.reshape(T.matmul(Tensor(np.ones((bsz, 1))), T.reshape(weights["cls_token"], (1, d))), (bsz, 1, d))
    x = T.concat([cls, tokens], axis=1)
    ntok = cfg.num_patches + 1
    x = T.reshape(x, (bsz, ntok * d)) + T.reshape(weights["pos_embed"], (ntok * d,))
    return T.reshape(x, (bsz, ntok, d))


def forward_features(weights, images, adapters=None, training=False, rng=None):
    """Run the trunk; returns the final layer-normed CLS feature ``(B, d_model)``."""
    arr, _ = _as_batch(images, weights.config)
    x = _embed(weights, arr)
    for i in range(weights.config.num_blocks):
        x = _block(weights, i, x, adapters, training, rng)
    x = T.layer_norm(x, weights["ln_final.gain"], weights["ln_final.bias"])
    return x[:, 0, :]


def project(weights, pooled):
    return T.l2_normalize(T.matmul(pooled, weights["proj.weight"]))


def pooled_feature(weights, adapters, image, training=False, rng=None):
    """Pre-projection CLS feature; not normalized. Accepts one image or a batch."""
    _, single = _as_batch(image, weights.config)
    out = forward_features(weights, image, adapters, training, rng)
    return out[0] if single else out


def encode_image(weights, adapters, image, training=False, rng=None):
    """Unit-norm embedding of one image ``(3, H, W)`` or a batch ``(B, 3, H, W)``."""
    _, single = _as_batch(image, weights.config)
    out = project(weights, forward_features(weights, image, adapters, training, rng))
    return out[0] if single else out


def embed_arrays(weights, adapters, images, batch_size=64, pooled=False):
    """Inference helper: numpy in, numpy out, no graph."""
    images = np.asarray(images, dtype=np.float64)
    outs = []
    with T.no_grad():
        for s in range(0, len(images), batch_size):
            feats = forward_features(weights, images[s:s + batch_size], adapters)
            outs.append((feats if pooled else project(weights, feats)).data)
    width = weights.config.embed_dim if pooled else weights.config.output_dim
    return np.concatenate(outs, axis=0) if outs else np.zeros((0, width))
