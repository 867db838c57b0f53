"""Low-rank adapters for the encoder's MLP projections.

With the frozen weight stored ``(d, k)`` (input width ``d``, output ``k``),
an adapter holds ``A`` of shape ``(r, d)`` and ``B`` of shape ``(k, r)`` and
computes ``x @ W0 + b + (alpha / r) * B @ (A @ x)``. The equivalent merged
weight in storage layout is ``W0 + (alpha / r) * (B @ A).T``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fslab import tensor as T
from fslab.checkpoint import CheckpointError, read_container, write_container
from fslab.encoder import ConfigError, EncoderWeights
from fslab.tensor import Tensor


@dataclass
class LoraConfig:
    rank: int = 4
    alpha: float | None = None  # None -> 2 * rank
    targets: tuple = ()
    dropout: float = 0.1
    init_seed: int = 0

    @property
    def scale_alpha(self):
        return float(2 * self.rank if self.alpha is None else self.alpha)

    def header(self):
        return {
            "lora.rank": str(self.rank),
            "lora.alpha": repr(self.scale_alpha),
            "lora.targets": ",".join(self.targets),
            "lora.dropout": repr(self.dropout),
            "lora.init_seed": str(self.init_seed),
        }


def last_blocks_targets(num_blocks, depth):
    """``c_fc`` and ``c_proj`` of the last ``depth`` blocks."""
    depth = min(depth, num_blocks)
    return tuple(
        f"block.{i}.mlp.{layer}" for i in range(num_blocks - depth, num_blocks) for layer in ("c_fc", "c_proj")
    )


def default_lora_config(n_shot, num_blocks, seed=0):
    """Rank 4 over the last 4 blocks up to 5 shots; rank 8 over the last 6 beyond."""
    if n_shot <= 5:
        return LoraConfig(rank=4, targets=last_blocks_targets(num_blocks, 4), init_seed=seed)
    return LoraConfig(rank=8, targets=last_blocks_targets(num_blocks, 6), init_seed=seed)


@dataclass
class LoraAdapter:
    layer_name: str
    W0: Tensor
    A: Tensor
    B: Tensor
    scaling: float
    dropout: float = 0.0

    @property
    def rank(self):
        return self.A.shape[0]

    def delta(self):
        """Weight update in ``(d, k)`` storage layout."""
        return self.scaling * (self.B.data @ self.A.data).T


@dataclass
class LoraSet:
    config: LoraConfig
    adapters: dict = field(default_factory=dict)

    def __contains__(self, name):
        return name in self.adapters

    def __getitem__(self, name):
        return self.adapters[name]

    def __iter__(self):
        return iter(self.adapters.values())

    def __len__(self):
        return len(self.adapters)

    def parameters(self):
        out = []
        for ad in self.adapters.values():
            out.extend((ad.A, ad.B))
        return out

    def trainable_count(self):
        return sum(p.size for p in self.parameters())

    def save(self, path):
        arrays = {}
        for name, ad in self.adapters.items():
            arrays[f"{name}.A"] = ad.A.data
            arrays[f"{name}.B"] = ad.B.data
        write_container(path, arrays, self.config.header())

    @classmethod
    def load(cls, path, weights):
        header, arrays = read_container(path)
        try:
            cfg = LoraConfig(
                rank=int(header["lora.rank"]),
                alpha=float(header["lora.alpha"]),
                targets=tuple(t for t in header["lora.targets"].split(",") if t),
                dropout=float(header["lora.dropout"]),
                init_seed=int(header["lora.init_seed"]),
            )
        except KeyError as exc:
            raise CheckpointError(f"{path}: missing LoRA header {exc}") from exc
        try:
            lset = inject(weights, cfg)
        except ConfigError as exc:
            raise CheckpointError(f"{path}: adapters incompatible with encoder ({exc})") from exc
        for name, ad in lset.adapters.items():
            for part in ("A", "B"):
                key = f"{name}.{part}"
                if key not in arrays:
                    raise CheckpointError(f"{path}: missing {key}")
                cur = getattr(ad, part)
                if arrays[key].shape != cur.shape:
                    raise CheckpointError(f"{path}: {key} shape {arrays[key].shape} != {cur.shape}")
                cur.data = np.array(arrays[key])
        return lset


def _resolve_targets(weights, targets):
    available = weights.adaptable_layers()
    resolved = []
    for t in targets:
        hits = [n for n in available if t in n]
        if not hits:
            raise ConfigError(f"LoRA target {t!r} matches no layer; available: {', '.join(available)}")
        resolved.extend(h for h in hits if h not in resolved)
    return resolved


def inject(weights: EncoderWeights, config: LoraConfig) -> LoraSet:
    """Create one adapter per matched layer: A ~ N(0, 0.02), B = 0."""
    if not isinstance(config.rank, int) or config.rank < 1:
        raise ConfigError(f"LoRA rank must be >= 1, got {config.rank!r}")
    if not config.targets:
        raise ConfigError("LoRA target list is empty")
    if not 0.0 <= config.dropout < 1.0:
        raise ConfigError(f"LoRA dropout must lie in [0, 1), got {config.dropout}")
    names = _resolve_targets(weights, config.targets)
    rng = np.random.default_rng(np.random.SeedSequence([config.init_seed, 0x6C6F7261]))
    r = config.rank
    lset = LoraSet(config)
    for name in names:
        w0 = weights[f"{name}.weight"]
        d, k = w0.shape
        if r > min(d, k) / 2:
            raise ConfigError(f"LoRA rank {r} too large for {name} ({d}x{k}); need r <= {min(d, k) // 2}")
        a = Tensor(rng.normal(0.0, 0.02, size=(r, d)), requires_grad=True, name=f"{name}.A")
        b = Tensor(np.zeros((k, r)), requires_grad=True, name=f"{name}.B")
        lset.adapters[name] = LoraAdapter(name, w0, a, b, config.scale_alpha / r, config.dropout)
    return lset


def lora_forward(adapter, x, bias=None, training=False, rng=None):
    """Frozen projection plus the scaled low-rank update; dropout hits only the update path."""
    x = T.as_tensor(x)
    d = adapter.W0.shape[0]
    if x.shape[-1] != d:
        raise T.DimensionError(f"adapter {adapter.layer_name} expects width {d}, got {x.shape}")
    single = x.ndim == 1
    if single:
        x = T.reshape(x, (1, d))
    base = T.linear(x, adapter.W0, bias)
    xin = T.dropout(x, adapter.dropout, rng, training=training and rng is not None)
    upd = T.matmul(T.matmul(xin, T.transpose(adapter.A)), T.transpose(adapter.B))
    out = base + upd * adapter.scaling
    return T.reshape(out, (out.shape[-1],)) if single else out


def merge(adapter):
    """Merged weight ``W0 + delta`` in storage layout."""
    return adapter.W0.data + adapter.delta()


def merged_encoder(weights, lset):
    """Copy of ``weights`` with every adapter folded into its base weight."""
    params = {n: Tensor(np.array(p.data), name=n) for n, p in weights.params.items()}
    for name, ad in lset.adapters.items():
        params[f"{name}.weight"] = Tensor(merge(ad), name=f"{name}.weight")
    return EncoderWeights(weights.config, params)
