import math
from dataclasses import replace

import numpy as np
import pytest

from fslab import tensor as T
from fslab.data import AugmentLevel, DataError, LabeledImage, build_pools, labels_of, sample_episode, synth_dataset
from fslab.encoder import ConfigError, EncoderConfig, init_encoder
from fslab.lora import LoraConfig
from fslab.objectives import ClassificationHead
from fslab.priors import TextPriorProvider
from fslab.strategies import (
    FusionConfig,
    ModelBundle,
    PrototypeSet,
    TrainRunConfig,
    UndefinedRatioError,
    build_prototypes,
    classify_by_prototype,
    compactness_report,
    default_run_config,
    evaluate,
    hybrid_prototype,
    load_bundle,
    pca_2d,
    run_linear_probe,
    run_lora,
    run_prototype_strategy,
    _preprocess,
    save_bundle,
    textual_prototype,
    visual_prototype,
)
from fslab.tensor import Tensor

from conftest import TINY

R2 = math.sqrt(0.5)


@pytest.fixture(scope="module")
def episode():
    ds = synth_dataset(4, 12, 8, seed=0)
    tr, te = build_pools(ds, 5)
    return sample_episode(tr, te, 3, seed=0)


def _unit(*rows):
    a = np.array(rows, dtype=np.float64)
    return a / np.linalg.norm(a, axis=1, keepdims=True)


def _protos(rows, ids=None):
    h = _unit(*rows)
    return PrototypeSet(list(range(len(h))) if ids is None else ids, h, None, h, 0.0)


# prototypes ------------------------------------------------------------------------


def test_visual_prototype_examples():
    np.testing.assert_array_equal(visual_prototype([[0.6, 0.8]]), [0.6, 0.8])
    np.testing.assert_allclose(visual_prototype([[1.0, 0.0], [0.0, 1.0]]), [R2, R2], atol=1e-15)
    with pytest.raises(T.DegenerateVectorError):
        visual_prototype([[1.0, 0.0], [-1.0, 0.0]])
    with pytest.raises(DataError):
        visual_prototype(np.zeros((0, 2)))


def test_textual_prototype_examples():
    prov = TextPriorProvider("file", {0: np.array([[2.0, 0.0]]), 1: np.array([[1.0, 0.0], [0.0, 1.0]])}, 2)
    np.testing.assert_array_equal(textual_prototype(prov, 0), [1.0, 0.0])
    np.testing.assert_allclose(textual_prototype(prov, 1), [R2, R2], atol=1e-15)
    with pytest.raises(DataError):
        textual_prototype(TextPriorProvider.none(), 0)
    with pytest.raises(DataError):
        textual_prototype(prov, 3)


def test_hybrid_prototype_examples():
    a, b = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    np.testing.assert_array_equal(hybrid_prototype(a, b, 0.0), a)
    np.testing.assert_array_equal(hybrid_prototype(a, b, 1.0), b)
    np.testing.assert_allclose(hybrid_prototype(a, b, 0.5), [R2, R2], atol=1e-15)
    with pytest.raises(T.DegenerateVectorError):
        hybrid_prototype(a, -a, 0.5)
    with pytest.raises(ConfigError):
        hybrid_prototype(a, b, 1.5)


def test_fusion_config_validation():
    FusionConfig(alpha=0.7).validate()
    with pytest.raises(ConfigError):
        FusionConfig(alpha=-0.1).validate()
    with pytest.raises(ConfigError):
        FusionConfig(alpha=0.2, templates=()).validate()


def test_classify_examples():
    p = _protos([[1, 0], [0, 1]])
    assert classify_by_prototype(np.array([0.0, 1.0]), p) == 1
    # bisector of two orthogonal prototypes ties: lowest id wins
    assert classify_by_prototype(np.array([R2, R2]), p) == 0
    p_rev = _protos([[0, 1], [1, 0]], [1, 0])
    assert classify_by_prototype(np.array([R2, R2]), p_rev) == 0
    with pytest.raises(DataError):
        classify_by_prototype(np.ones(2), PrototypeSet([], np.zeros((0, 2)), None, np.zeros((0, 2)), 0.0))
    with pytest.raises(T.DimensionError):
        classify_by_prototype(np.ones(3), p)


def test_classify_matches_loop_oracle():
    rng = np.random.default_rng(0)
    ids = [4, 1, 3, 0, 2]
    protos = rng.normal(size=(5, 6))
    p = _protos(protos, ids=ids)
    q = rng.normal(size=(50, 6))
    got = classify_by_prototype(q, p)
    for qi, g in zip(q, got):
        best, best_sim = None, -np.inf
        for cid, row in sorted(zip(ids, p.hybrid)):
            s = float(qi @ row) / float(np.linalg.norm(qi))
            if s > best_sim:
                best, best_sim = cid, s
        assert g == best
    # scaling the query never changes the decision
    np.testing.assert_array_equal(classify_by_prototype(q * 7.5, p), got)


def test_prototype_set_requires_unit_norms():
    with pytest.raises(ValueError):
        PrototypeSet([0], np.array([[2.0, 0.0]]), None, np.array([[1.0, 0.0]]), 0.0)


def test_build_prototypes_needs_provider_for_fusion():
    emb = _unit([1, 0], [0, 1])
    with pytest.raises(DataError):
        build_prototypes(emb, [0, 1], [0, 1], None, 0.5)


def test_run_prototype_strategy(episode, tiny_encoder):
    before = tiny_encoder.checksum()
    rec = run_prototype_strategy(episode, None, 0.0, tiny_encoder)
    assert tiny_encoder.checksum() == before and rec.encoder_unchanged
    assert rec.trainable_parameters == 0
    # recount accuracy sample by sample
    pred = rec.extra["predictions"]
    truth = labels_of(episode.query)
    manual = sum(int(p == t) for p, t in zip(pred, truth)) / len(truth)
    assert rec.final_accuracy == manual
    assert 0.0 <= rec.final_accuracy <= 1.0


def test_prototype_with_priors_and_cache(episode, tiny_encoder):
    rng = np.random.default_rng(1)
    prov = TextPriorProvider("file", {c: rng.normal(size=(2, TINY.output_dim)) for c in episode.class_ids}, TINY.output_dim)
    cache = {}
    a = run_prototype_strategy(episode, prov, 0.5, tiny_encoder, cache)
    assert len(cache) == len(episode.support) + len(episode.query)
    b = run_prototype_strategy(episode, prov, 0.5, tiny_encoder, cache)
    assert a.final_accuracy == b.final_accuracy
    one = run_prototype_strategy(episode, prov, 1.0, tiny_encoder, cache)
    assert one.extra["alpha"] == 1.0


# compactness ---------------------------------------------------------------------------


def test_compactness_tight_orthogonal():
    emb = np.array([[1.0, 0, 0], [1.0, 0, 0], [0, 1.0, 0], [0, 1.0, 0]])
    rep = compactness_report(emb, [0, 0, 1, 1])
    assert rep["intra"] == 0.0 and rep["ratio"] == 0.0 and rep["inter"] == pytest.approx(1.0)


def test_compactness_errors():
    with pytest.raises(UndefinedRatioError):
        compactness_report(np.ones((4, 3)), [0, 0, 1, 1])
    with pytest.raises(UndefinedRatioError):
        compactness_report(np.eye(3), [0, 0, 0])


def _cos_dist(a, b):
    return 1.0 - float(a @ b) / (np.linalg.norm(a) * np.linalg.norm(b))


def test_compactness_matches_loop_oracle():
    emb = np.array([[1.0, 0.2], [0.8, 0.5], [-0.3, 1.0], [0.1, 0.9]])
    labels = [0, 0, 1, 1]
    intra = [_cos_dist(emb[0], emb[1]), _cos_dist(emb[2], emb[3])]
    c0, c1 = emb[:2].mean(0), emb[2:].mean(0)
    expected = np.mean(intra) / _cos_dist(c0, c1)
    rep = compactness_report(emb, labels)
    assert abs(rep["ratio"] - expected) < 1e-12
    assert rep["projection_2d"].shape == (4, 2)


def test_pca_matches_svd():
    x = np.random.default_rng(2).normal(size=(30, 5)) * [5, 3, 1, 0.5, 0.1]
    p = pca_2d(x)
    xc = x - x.mean(0)
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    ref = xc @ vt[:2].T
    np.testing.assert_allclose(np.abs(p), np.abs(ref), atol=1e-9)


# training -----------------------------------------------------------------------------


def _probe_cfg(**kw):
    base = TrainRunConfig(strategy="linear_probe", n_shot=3, epochs=2, batch_size=4, seed=0)
    return replace(base, **kw)


def test_zero_epoch_probe_is_init_head(episode, tiny_encoder):
    rec = run_linear_probe(episode, _probe_cfg(epochs=0), tiny_encoder)
    assert rec.final_accuracy == rec.initial_accuracy
    assert rec.final_accuracy == evaluate(rec.bundle, episode.query)
    assert rec.steps == []


def test_probe_trains_only_head(episode, tiny_encoder):
    before = tiny_encoder.checksum()
    rec = run_linear_probe(episode, _probe_cfg(epochs=3), tiny_encoder)
    assert tiny_encoder.checksum() == before and rec.encoder_unchanged
    assert rec.trainable_parameters == 4 * TINY.embed_dim + 4
    assert len(rec.epochs) == 4 and rec.epochs[0]["epoch"] == 0
    assert len(rec.steps) == 3 * math.ceil(12 / 4)
    for s in rec.steps:
        assert math.isfinite(s["loss"]) and s["grad_norm"] >= 0
    assert rec.final_accuracy == evaluate(rec.bundle, episode.query)


def test_probe_is_deterministic(episode, tiny_encoder):
    a = run_linear_probe(episode, _probe_cfg(augment=AugmentLevel.HIGH), tiny_encoder)
    b = run_linear_probe(episode, _probe_cfg(augment=AugmentLevel.HIGH), tiny_encoder)
    assert a.steps == b.steps and a.epochs[1:] == b.epochs[1:]


def _lora_cfg(strategy="lora_ce", **kw):
    base = TrainRunConfig(
        strategy=strategy, n_shot=3, epochs=1, batch_size=4, seed=0,
        lora=LoraConfig(rank=1, targets=("mlp.c_fc", "mlp.c_proj")),
        sampler="stratified" if strategy == "lora_hybrid" else "random",
        classes_per_batch=4, instances_per_class=2, projection_dim=4, projection_hidden=8,
    )
    return replace(base, **kw)


def test_lora_step_zero_matches_frozen_head(episode, tiny_encoder):
    rec = run_lora(episode, _lora_cfg(), tiny_encoder)
    probe = run_linear_probe(episode, _probe_cfg(epochs=0), tiny_encoder)
    assert rec.initial_accuracy == probe.initial_accuracy
    assert rec.encoder_unchanged
    assert rec.extra["lora_trainable"] == 4 * 1 * (8 + 32)


def test_lora_hybrid_logs_supcon(episode, tiny_encoder):
    rec = run_lora(episode, _lora_cfg("lora_hybrid", epochs=2), tiny_encoder)
    assert all(s["supcon"] is not None and math.isfinite(s["supcon"]) for s in rec.steps)
    taus = [s["tau"] for s in rec.steps]
    assert all(a >= b for a, b in zip(taus, taus[1:]))


def test_lambda_zero_equivalence(episode, tiny_encoder):
    traces = {}
    for strategy in ("lora_ce", "lora_hybrid"):
        cfg = _lora_cfg(strategy, epochs=2, sampler="stratified", lambda_start=0.0, lambda_end=0.0)
        snaps = []

        def cb(step, bundle):
            snaps.append([p.data.copy() for p in bundle.adapters.parameters() + bundle.head.parameters()])

        run_lora(episode, cfg, tiny_encoder, callback=cb)
        traces[strategy] = snaps
    assert len(traces["lora_ce"]) == len(traces["lora_hybrid"]) > 0
    for a, b in zip(traces["lora_ce"], traces["lora_hybrid"]):
        for x, y in zip(a, b):
            assert np.max(np.abs(x - y)) <= 1e-12


def test_config_guards(episode, tiny_encoder):
    with pytest.raises(ConfigError):
        run_lora(episode, _lora_cfg("lora_hybrid", sampler="random"), tiny_encoder)
    with pytest.raises(ConfigError):
        run_lora(episode, _lora_cfg(lora=None), tiny_encoder)
    with pytest.raises(ConfigError):
        run_linear_probe(episode, _lora_cfg(), tiny_encoder)


def test_default_run_configs():
    lp = default_run_config("linear_probe", 5)
    assert (lp.epochs, lp.batch_size, lp.dropout) == (15, 8, 0.3)
    hy = default_run_config("lora_hybrid", 3, num_classes=10)
    assert (hy.sampler, hy.classes_per_batch, hy.instances_per_class) == ("stratified", 8, 3)
    assert hy.classes_per_batch * hy.instances_per_class == 24
    assert hy.lora.rank == 4 and hy.projection_dim == 128
    hi = default_run_config("lora_hybrid", 20)
    assert hi.lora.rank == 8 and hi.projection_dim == 256 and hi.epochs == 30
    ce = default_run_config("lora_ce", 5)
    assert ce.sampler == "random" and ce.epochs == 15


def test_evaluate_on_random_labels():
    # untrained head on random labels scores near 1/C (3 sigma binomial band)
    cfg = EncoderConfig(image_size=8, patch_size=4, embed_dim=8, num_blocks=1, num_heads=2, output_dim=6)
    w = init_encoder(cfg)
    rng = np.random.default_rng(0)
    c, n = 5, 2000
    pool = [LabeledImage(rng.random((3, 8, 8)), int(rng.integers(c)), str(i)) for i in range(n)]
    head = ClassificationHead.init(c, 8, rng)
    bundle = ModelBundle(w, None, head, None, list(range(c)))
    acc = evaluate(bundle, pool)
    p = 1 / c
    assert abs(acc - p) < 3 * math.sqrt(p * (1 - p) / n)
    rng.shuffle(pool)
    assert evaluate(bundle, pool) == acc
    with pytest.raises(DataError):
        evaluate(bundle, [])


def test_evaluate_perfect_toy_bundle(episode, tiny_encoder):
    # one query per class; solve the head so each image's own logit is 1 and the rest 0
    lab = labels_of(episode.query)
    pool = [episode.query[int(np.flatnonzero(lab == c)[0])] for c in episode.class_ids]
    feats = ModelBundle(tiny_encoder).features(_preprocess(pool)).data
    head = ClassificationHead(Tensor(np.linalg.pinv(feats).T), Tensor(np.zeros(4)))
    bundle = ModelBundle(tiny_encoder, None, head, None, list(episode.class_ids))
    assert evaluate(bundle, pool) == 1.0


def test_bundle_round_trip(tmp_path, episode, tiny_encoder):
    rec = run_lora(episode, _lora_cfg("lora_hybrid"), tiny_encoder)
    save_bundle(rec.bundle, tmp_path / "ck")
    back = load_bundle(tmp_path / "ck")
    assert back.class_ids == rec.bundle.class_ids
    assert back.weights.checksum() == tiny_encoder.checksum()
    assert evaluate(back, episode.query) == evaluate(rec.bundle, episode.query)
    np.testing.assert_array_equal(back.projection.W2.data, rec.bundle.projection.W2.data)
