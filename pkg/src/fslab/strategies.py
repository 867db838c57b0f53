"""Adaptation strategies, evaluation, and feature-space compactness.

Three strategies share one frozen encoder:

* prototypes: nearest normalized class mean, optionally fused with text priors;
* linear probe: a classification head on frozen features;
* LoRA: low-rank adapters plus heads, trained with cross-entropy alone
  (``lora_ce``) or cross-entropy plus a scheduled SupCon term (``lora_hybrid``).
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from fslab import tensor as T
from fslab.data import (
    AugmentLevel,
    DataError,
    augment_pixels,
    labels_of,
    random_batches,
    stack_pixels,
    stratified_batches,
    synth_dataset,
)
from fslab.checkpoint import read_container, write_container
from fslab.encoder import ConfigError, EncoderWeights, embed_arrays, forward_features, project
from fslab.lora import LoraConfig, LoraSet, default_lora_config, inject
from fslab.objectives import (
    ClassificationHead,
    ProjectionHead,
    cross_entropy_smoothed,
    default_projection_dim,
    hybrid_loss,
    supcon_loss,
)
from fslab.optim import AdamW
from fslab.rng import stream
from fslab.schedules import ScheduleSpec, lambda_at, lr_at, tau_at
from fslab.tensor import Tensor

STRATEGIES = ("prototype", "linear_probe", "lora_ce", "lora_hybrid")


class NumericFailure(ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, step, lr, lam, tau, loss):
        super().__init__(f"non-finite loss {loss} at step {step} (lr={lr:.3g}, lambda={lam:.3g}, tau={tau:.3g})")
        self.step, self.lr, self.lam, self.tau = step, lr, lam, tau


class UndefinedRatioError(ValueError):
    """Compactness ratio needs two or more distinct class centroids."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FusionConfig:
    alpha: float = 0.0
    templates: tuple = ("a photo of a {class}",)

    def validate(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"fusion weight must lie in [0, 1], got {self.alpha}")
        if len(self.templates) < 1:
            raise ConfigError("need at least one prompt template")
        return self


@dataclass
class TrainRunConfig:
    strategy: str = "linear_probe"
    n_shot: int = 5
    epochs: int = 15
    batch_size: int = 8
    sampler: str = "random"
    classes_per_batch: int = 8
    instances_per_class: int = 3
    label_smoothing: float = 0.2
    dropout: float = 0.3
    weight_decay: float = 0.1
    lora: LoraConfig | None = None
    lr_base: float = 1e-3
    lr_final: float = 1e-6
    warmup_fraction: float = 0.1
    tau_start: float = 0.2
    tau_end: float = 0.07
    lambda_start: float = 0.05
    lambda_end: float = 0.3
    lambda_warmup_fraction: float = 0.5
    lambda_shape: str = "ramp"
    augment: AugmentLevel = AugmentLevel.NONE
    projection_dim: int = 128
    projection_hidden: int = 128
    head_feature: str = "pooled"
    supcon_include_self: bool = False
    eval_every: int = 1
    seed: int = 0

    def validate(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.sampler not in ("random", "stratified"):
            raise ConfigError(f"unknown sampler {self.sampler!r}")
        if self.strategy == "lora_hybrid" and self.sampler != "stratified":
            raise ConfigError("lora_hybrid needs the stratified sampler so every batch has positive pairs")
        if self.strategy.startswith("lora") and self.lora is None:
            raise ConfigError(f"{self.strategy} needs a LoRA configuration")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not 0.0 <= self.label_smoothing <= 0.5:
            raise ConfigError("label_smoothing must lie in [0, 0.5]")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError("warmup_fraction must lie in [0, 1)")
        if self.head_feature not in ("pooled", "embedding"):
            raise ConfigError(f"unknown head_feature {self.head_feature!r}")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        return self

    def schedule(self, total_steps):
        total_steps = max(1, total_steps)
        warm = min(int(self.warmup_fraction * total_steps), total_steps - 1)
        return ScheduleSpec(
            total_steps=total_steps,
            warmup_steps=warm,
            lr_base=self.lr_base,
            lr_final=self.lr_final,
            tau_start=self.tau_start,
            tau_end=self.tau_end,
            lambda_start=self.lambda_start,
            lambda_end=self.lambda_end,
            lambda_warmup_fraction=self.lambda_warmup_fraction,
            lambda_shape=self.lambda_shape,
        ).validate()


# regularization by shot count: (batch, dropout, weight decay, smoothing, augment)
_PROBE_DEFAULTS = {
    1: (4, 0.5, 0.1, 0.2, AugmentLevel.LOW),
    3: (8, 0.4, 0.1, 0.2, AugmentLevel.NONE),
    5: (8, 0.3, 0.1, 0.2, AugmentLevel.NONE),
    10: (16, 0.25, 0.075, 0.15, AugmentLevel.LOW),
    20: (32, 0.25, 0.05, 0.1, AugmentLevel.NONE),
}


def default_run_config(strategy, n_shot, num_blocks=8, num_classes=None, seed=0):
    """Per-shot defaults following the reported regularization and capacity trends."""
    key = min(_PROBE_DEFAULTS, key=lambda k: (abs(k - n_shot), k))
    if strategy in ("linear_probe", "prototype"):
        bs, drop, wd, eps, aug = _PROBE_DEFAULTS[key]
        return TrainRunConfig(
            strategy=strategy, n_shot=n_shot, epochs=15, batch_size=bs, dropout=drop,
            weight_decay=wd, label_smoothing=eps, augment=aug, seed=seed,
        )
    low = n_shot <= 5
    cfg = TrainRunConfig(
        strategy=strategy,
        n_shot=n_shot,
        batch_size=8 if low else 16,
        dropout=0.1,
        weight_decay=0.05,
        label_smoothing=0.1,
        lora=default_lora_config(n_shot, num_blocks, seed=seed),
        # mild augmentation with a larger step; chosen on validation seeds
        augment=AugmentLevel.LOW,
        lr_base=3e-3,
        projection_dim=default_projection_dim(n_shot),
        seed=seed,
    )
    if strategy == "lora_ce":
        return replace(cfg, epochs=15 if low else 20, sampler="random")
    per_class = min(n_shot, 3) if low else 4
    cpb = 8 if num_classes is None else min(8, num_classes)
    return replace(cfg, epochs=20 if low else 30, sampler="stratified", classes_per_batch=cpb, instances_per_class=per_class)


# ---------------------------------------------------------------------------
# records and bundles
# ---------------------------------------------------------------------------


@dataclass
class MetricsRecord:
    strategy: str
    epochs: list = field(default_factory=list)  # dicts: epoch, train_loss, train_acc, test_acc, lr, tau, lambda, grad_norm
    steps: list = field(default_factory=list)  # dicts: step, epoch, loss, ce, supcon, lr, tau, lambda, grad_norm
    initial_accuracy: float | None = None
    final_accuracy: float | None = None
    wall_time: float = 0.0
    encoder_checksum_before: str = ""
    encoder_checksum_after: str = ""
    trainable_parameters: int = 0
    extra: dict = field(default_factory=dict)
    bundle: object = None

    @property
    def encoder_unchanged(self):
        return self.encoder_checksum_before == self.encoder_checksum_after


@dataclass
class ModelBundle:
    weights: object
    adapters: object = None
    head: ClassificationHead | None = None
    projection: ProjectionHead | None = None
    class_ids: list = field(default_factory=list)
    head_feature: str = "pooled"

    def features(self, pixels, training=False, rng=None):
        feats = forward_features(self.weights, pixels, self.adapters, training, rng)
        return project(self.weights, feats) if self.head_feature == "embedding" else feats

    def trainable(self):
        out = [] if self.adapters is None else self.adapters.parameters()
        if self.head is not None:
            out += self.head.parameters()
        if self.projection is not None:
            out += self.projection.parameters()
        return out


# ---------------------------------------------------------------------------
# prototypes
# ---------------------------------------------------------------------------


def _normalize(v):
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n < 1e-12:
        raise T.DegenerateVectorError("prototype has (near) zero norm")
    return v / n


def visual_prototype(embeddings):
    """Normalized mean of a class's support embeddings."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.ndim != 2 or len(embeddings) == 0:
        raise DataError("visual prototype needs at least one embedding")
    return _normalize(embeddings.mean(axis=0))


def textual_prototype(provider, class_id):
    return _normalize(np.asarray(provider.templates(class_id)).mean(axis=0))


def hybrid_prototype(p_img, p_text, alpha):
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"fusion weight must lie in [0, 1], got {alpha}")
    if alpha == 0.0:
        return np.array(p_img, dtype=np.float64)
    if alpha == 1.0:
        return np.array(p_text, dtype=np.float64)
    return _normalize((1.0 - alpha) * np.asarray(p_img) + alpha * np.asarray(p_text))


@dataclass
class PrototypeSet:
    class_ids: list
    image: np.ndarray  # (C, D)
    text: np.ndarray | None
    hybrid: np.ndarray
    alpha: float

    def __post_init__(self):
        for arr in (self.image, self.hybrid) + (() if self.text is None else (self.text,)):
            if not np.allclose(np.linalg.norm(arr, axis=1), 1.0, atol=1e-9):
                raise ValueError("stored prototypes must be unit vectors")


def build_prototypes(support_embeddings, support_labels, class_ids, provider=None, alpha=0.0):
    support_labels = np.asarray(support_labels)
    img = np.stack([visual_prototype(support_embeddings[support_labels == c]) for c in class_ids])
    if alpha > 0.0:
        if provider is None:
            raise DataError("fusion weight > 0 needs a text prior provider")
        txt = np.stack([textual_prototype(provider, c) for c in class_ids])
        hyb = np.stack([hybrid_prototype(i, t, alpha) for i, t in zip(img, txt)])
    else:
        txt = None
        if provider is not None and provider.mode != "none":
            txt = np.stack([textual_prototype(provider, c) for c in class_ids])
        hyb = img.copy()
    return PrototypeSet(list(class_ids), img, txt, hyb, alpha)


def classify_by_prototype(query_embedding, prototypes):
    """Class with the highest cosine similarity; ties go to the lowest class id."""
    q = np.asarray(query_embedding, dtype=np.float64)
    if len(prototypes.class_ids) == 0:
        raise DataError("empty prototype set")
    if q.shape[-1] != prototypes.hybrid.shape[1]:
        raise T.DimensionError(f"query width {q.shape[-1]} vs prototype width {prototypes.hybrid.shape[1]}")
    order = np.argsort(prototypes.class_ids, kind="stable")
    sims = (q @ prototypes.hybrid[order].T) / np.linalg.norm(q, axis=-1, keepdims=True)
    ids = np.asarray(prototypes.class_ids)[order]
    pick = ids[np.argmax(sims, axis=-1)]  # argmax returns the first maximum
    return int(pick) if np.ndim(pick) == 0 else pick


def _embed_items(weights, items, cache=None, adapters=None):
    if cache is None:
        return embed_arrays(weights, adapters, _preprocess(items))
    missing = [it for it in items if it.source_id not in cache]
    if missing:
        for it, e in zip(missing, embed_arrays(weights, adapters, _preprocess(missing))):
            cache[it.source_id] = e
    return np.stack([cache[it.source_id] for it in items])


def _preprocess(items):
    return np.stack([augment_pixels(it.pixels, AugmentLevel.NONE, None) for it in items])


def run_prototype_strategy(episode, provider, alpha, weights, cache=None):
    """Training-free nearest-prototype evaluation on the full query pool."""
    FusionConfig(alpha=alpha).validate()
    t0 = time.perf_counter()
    before = weights.checksum()
    sup = _embed_items(weights, episode.support, cache)
    qry = _embed_items(weights, episode.query, cache)
    protos = build_prototypes(sup, labels_of(episode.support), episode.class_ids, provider, alpha)
    pred = classify_by_prototype(qry, protos)
    acc = float(np.mean(pred == labels_of(episode.query)))
    after = weights.checksum()
    if before != after:
        raise RuntimeError("prototype strategy modified encoder weights")
    rec = MetricsRecord("prototype", initial_accuracy=acc, final_accuracy=acc,
                        wall_time=time.perf_counter() - t0,
                        encoder_checksum_before=before, encoder_checksum_after=after)
    rec.extra.update(alpha=alpha, n_shot=episode.n_shot, predictions=pred, provider=provider.mode if provider else "none")
    return rec


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def predict(bundle, pixels, batch_size=64):
    out = []
    with T.no_grad():
        for s in range(0, len(pixels), batch_size):
            logits = bundle.head(bundle.features(pixels[s:s + batch_size]))
            out.append(np.argmax(logits.data, axis=1))
    idx = np.concatenate(out) if out else np.zeros(0, dtype=int)
    return np.asarray(bundle.class_ids)[idx]


def evaluate(bundle, query_pool):
    """Top-1 accuracy of the classification head over ``query_pool``."""
    if len(query_pool) == 0:
        raise DataError("cannot evaluate on an empty query pool")
    pred = predict(bundle, _preprocess(query_pool))
    return float(np.mean(pred == labels_of(query_pool)))


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


def _plan(cfg, labels, epoch):
    if cfg.sampler == "stratified":
        return stratified_batches(labels, cfg.classes_per_batch, cfg.instances_per_class, cfg.seed, epoch=epoch)
    return random_batches(labels, cfg.batch_size, cfg.seed, epoch=epoch)


def _steps_per_epoch(cfg, n):
    if cfg.sampler == "stratified":
        return max(1, math.ceil(n / (cfg.classes_per_batch * cfg.instances_per_class)))
    return max(1, math.ceil(n / cfg.batch_size))


def _train(episode, cfg, weights, adapters, callback=None):
    cfg.validate()
    t0 = time.perf_counter()
    before = weights.checksum()
    class_ids = list(episode.class_ids)
    index_of = {c: i for i, c in enumerate(class_ids)}
    y_all = np.array([index_of[it.class_id] for it in episode.support])
    raw = stack_pixels(episode.support)
    hybrid = cfg.strategy == "lora_hybrid"

    feat_dim = weights.config.embed_dim if cfg.head_feature == "pooled" else weights.config.output_dim
    head = ClassificationHead.init(len(class_ids), feat_dim, stream(cfg.seed, "init", "head"), cfg.dropout)
    proj = None
    if hybrid:
        proj = ProjectionHead.init(feat_dim, cfg.projection_hidden, cfg.projection_dim, stream(cfg.seed, "init", "projection"))
    bundle = ModelBundle(weights, adapters, head, proj, class_ids, cfg.head_feature)
    params = bundle.trainable()
    opt = AdamW(params, weight_decay=cfg.weight_decay)
    spe = _steps_per_epoch(cfg, len(y_all))
    spec = cfg.schedule(cfg.epochs * spe)
    aug_rng = stream(cfg.seed, "augment")
    drop_rng = stream(cfg.seed, "dropout")
    frozen_trunk = adapters is None

    cached = query_feats = None
    if frozen_trunk:
        with T.no_grad():
            if cfg.augment is AugmentLevel.NONE:
                cached = bundle.features(_preprocess(episode.support)).data
            if episode.query:
                query_feats = bundle.features(_preprocess(episode.query)).data
    y_query = labels_of(episode.query) if episode.query else None

    def test_accuracy():
        if not episode.query:
            return None
        if query_feats is None:
            return evaluate(bundle, episode.query)
        with T.no_grad():
            idx = np.argmax(head(Tensor(query_feats)).data, axis=1)
        return float(np.mean(np.asarray(class_ids)[idx] == y_query))

    rec = MetricsRecord(cfg.strategy, encoder_checksum_before=before, trainable_parameters=sum(p.size for p in params))
    rec.initial_accuracy = test_accuracy()
    rec.epochs.append(dict(epoch=0, train_loss=None, train_acc=None, test_acc=rec.initial_accuracy,
                           lr=lr_at(spec, 0), tau=tau_at(spec, 0), lam=lambda_at(spec, 0), grad_norm=None))
    step = 0
    last_acc = rec.initial_accuracy
    for epoch in range(1, cfg.epochs + 1):
        losses, correct, seen, norms = [], 0, 0, []
        for batch in _plan(cfg, y_all, epoch):
            step += 1
            yb = y_all[batch]
            if cached is not None:
                feats = Tensor(cached[batch])
            else:
                pix = np.stack([augment_pixels(raw[i], cfg.augment, aug_rng) for i in batch])
                if frozen_trunk:
                    with T.no_grad():
                        feats = Tensor(bundle.features(pix).data)
                else:
                    feats = bundle.features(pix, training=True, rng=drop_rng)
            lr, tau, lam = lr_at(spec, step), tau_at(spec, step), lambda_at(spec, step)
            logits = head(feats, training=True, rng=drop_rng)
            ce = cross_entropy_smoothed(logits, yb, cfg.label_smoothing)
            sc = None
            loss = ce
            if hybrid:
                z = proj(feats)
                sc = supcon_loss(z, yb, tau, include_self=cfg.supcon_include_self)
                loss = hybrid_loss(ce, sc, lam)
            lval = loss.item()
            if not math.isfinite(lval):
                raise NumericFailure(step, lr, lam, tau, lval)
            opt.zero_grad()
            loss.backward()
            gn = T.global_norm([p.grad for p in params if p.grad is not None])
            opt.step(lr)
            losses.append(lval)
            norms.append(gn)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == yb))
            seen += len(batch)
            rec.steps.append(dict(step=step, epoch=epoch, loss=lval, ce=ce.item(),
                                  supcon=None if sc is None else sc.item(), lr=lr, tau=tau, lam=lam, grad_norm=gn))
            if callback is not None:
                callback(step, bundle)
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            last_acc = test_accuracy()
            test_acc = last_acc
        else:
            test_acc = None
        rec.epochs.append(dict(epoch=epoch, train_loss=float(np.mean(losses)), train_acc=correct / max(seen, 1),
                               test_acc=test_acc, lr=lr_at(spec, step), tau=tau_at(spec, step),
                               lam=lambda_at(spec, step), grad_norm=float(np.mean(norms))))
    rec.final_accuracy = last_acc
    rec.encoder_checksum_after = weights.checksum()
    if not rec.encoder_unchanged:
        raise RuntimeError("training modified frozen encoder weights")
    rec.wall_time = time.perf_counter() - t0
    rec.extra.update(n_shot=episode.n_shot, augment=cfg.augment.value, sampler=cfg.sampler,
                     total_steps=spec.total_steps, warmup_steps=spec.warmup_steps, lambda_shape=cfg.lambda_shape)
    rec.bundle = bundle
    return rec


def run_linear_probe(episode, config, weights, callback=None):
    """Train only a classification head on frozen encoder features."""
    if config.strategy != "linear_probe":
        raise ConfigError(f"run_linear_probe got strategy {config.strategy!r}")
    return _train(episode, config, weights, None, callback)


def run_lora(episode, config, weights, callback=None):
    """Train adapters and heads; the base encoder stays frozen."""
    if config.strategy not in ("lora_ce", "lora_hybrid"):
        raise ConfigError(f"run_lora got strategy {config.strategy!r}")
    config.validate()
    adapters = inject(weights, config.lora)
    rec = _train(episode, config, weights, adapters, callback)
    rec.extra["lora_trainable"] = adapters.trainable_count()
    return rec


# ---------------------------------------------------------------------------
# compactness
# ---------------------------------------------------------------------------


def _cos_dist_pairs(x):
    xn = x / np.linalg.norm(x, axis=1, keepdims=True)
    iu = np.triu_indices(len(x), 1)
    return 1.0 - (xn @ xn.T)[iu]


def pca_2d(x):
    xc = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    comps = vt[:2]
    # sign convention: largest-magnitude loading positive, for reproducible output
    signs = np.sign(comps[np.arange(len(comps)), np.argmax(np.abs(comps), axis=1)])
    signs[signs == 0] = 1.0
    out = xc @ (comps * signs[:, None]).T
    if out.shape[1] < 2:
        out = np.pad(out, ((0, 0), (0, 2 - out.shape[1])))
    return out


def compactness_report(embeddings, labels):
    """Intra-class spread over inter-centroid spread, both as mean cosine distance.

    ``intra`` pools every same-class pair across classes; ``inter`` averages
    over pairs of class centroids. Lower ``ratio`` means tighter clusters.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    classes = np.unique(y)
    if len(classes) < 2:
        raise UndefinedRatioError("compactness needs at least two classes")
    intra = [_cos_dist_pairs(x[y == c]) for c in classes if np.sum(y == c) >= 2]
    if not intra:
        raise UndefinedRatioError("compactness needs a class with at least two samples")
    intra = float(np.concatenate(intra).mean())
    centroids = np.stack([x[y == c].mean(axis=0) for c in classes])
    if np.any(np.linalg.norm(centroids, axis=1) < 1e-12):
        raise UndefinedRatioError("a class centroid is zero")
    inter = float(_cos_dist_pairs(centroids).mean())
    if inter <= 1e-12:
        raise UndefinedRatioError("inter-class distance is zero; ratio undefined")
    return {
        "intra": intra,
        "inter": inter,
        "ratio": intra / inter,
        "projection_2d": pca_2d(x),
        "projection_method": "pca (t-SNE substitute)",
        "num_classes": int(len(classes)),
        "num_samples": int(len(x)),
    }


# ---------------------------------------------------------------------------
# optional warm start
# ---------------------------------------------------------------------------


def pretrain_encoder(weights, steps, seed=0, num_classes=20, per_class=16, batch_size=32, lr=3e-4, class_offset=1000):
    """Short supervised pass over synthetic classes disjoint from the default task set.

    Updates encoder weights in place, then refreezes them.
    """
    if steps <= 0:
        return weights
    ds = synth_dataset(num_classes, per_class, weights.config.image_size, seed, class_offset=class_offset)
    items = ds.train + ds.val
    pix = stack_pixels(items)
    y = labels_of(items)
    head = ClassificationHead.init(num_classes, weights.config.embed_dim, stream(seed, "pretrain", "head"))
    weights.set_trainable(True)
    params = list(weights.params.values()) + head.parameters()
    opt = AdamW(params, weight_decay=0.01)
    rng = stream(seed, "pretrain", "batches")
    aug = stream(seed, "pretrain", "augment")
    try:
        for s in range(steps):
            idx = rng.choice(len(items), size=min(batch_size, len(items)), replace=False)
            batch = np.stack([augment_pixels(pix[i], AugmentLevel.LOW, aug) for i in idx])
            loss = cross_entropy_smoothed(head(forward_features(weights, batch)), y[idx], 0.1)
            opt.zero_grad()
            loss.backward()
            opt.step(lr * 0.5 * (1 + math.cos(math.pi * s / steps)))
    finally:
        weights.set_trainable(False)
    return weights


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_bundle(bundle, directory):
    """Writes ``encoder.fslw``, ``heads.fslw`` and, when adapted, ``adapters.fslw``."""
    os.makedirs(directory, exist_ok=True)
    bundle.weights.save(os.path.join(directory, "encoder.fslw"))
    if bundle.adapters is not None:
        bundle.adapters.save(os.path.join(directory, "adapters.fslw"))
    arrays = {}
    for head in (bundle.head, bundle.projection):
        if head is not None:
            arrays.update({p.name: p.data for p in head.parameters()})
    header = {
        "heads.class_ids": ",".join(map(str, bundle.class_ids)),
        "heads.feature": bundle.head_feature,
        "heads.dropout": repr(bundle.head.dropout if bundle.head is not None else 0.0),
    }
    write_container(os.path.join(directory, "heads.fslw"), arrays, header)


def load_bundle(directory):
    weights = EncoderWeights.load(os.path.join(directory, "encoder.fslw"))
    path = os.path.join(directory, "adapters.fslw")
    adapters = LoraSet.load(path, weights) if os.path.exists(path) else None
    bundle = ModelBundle(weights, adapters)
    path = os.path.join(directory, "heads.fslw")
    if os.path.exists(path):
        header, arrays = read_container(path)
        bundle.class_ids = [int(c) for c in header.get("heads.class_ids", "").split(",") if c]
        bundle.head_feature = header.get("heads.feature", "pooled")
        if "head.cls.W" in arrays:
            bundle.head = ClassificationHead(
                Tensor(arrays["head.cls.W"], requires_grad=True, name="head.cls.W"),
                Tensor(arrays["head.cls.b"], requires_grad=True, name="head.cls.b"),
                float(header.get("heads.dropout", "0")),
            )
        if "head.proj.W1" in arrays:
            bundle.projection = ProjectionHead(
                *(Tensor(arrays[f"head.proj.{n}"], requires_grad=True, name=f"head.proj.{n}") for n in ("W1", "b1", "W2", "b2"))
            )
    return bundle
