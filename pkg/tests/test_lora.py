import numpy as np
import pytest

from fslab import tensor as T
from fslab.checkpoint import CheckpointError
from fslab.encoder import ConfigError, EncoderConfig, encode_image, init_encoder
from fslab.lora import (
    LoraAdapter,
    LoraConfig,
    LoraSet,
    default_lora_config,
    inject,
    last_blocks_targets,
    lora_forward,
    merge,
    merged_encoder,
)
from fslab.tensor import Tensor


def _randomize(lset, seed):
    rng = np.random.default_rng(seed)
    for ad in lset:
        ad.A.data = rng.normal(size=ad.A.shape)
        ad.B.data = rng.normal(size=ad.B.shape)


def test_default_trainable_count():
    w = init_encoder(EncoderConfig())
    lset = inject(w, default_lora_config(5, 8))
    assert len(lset) == 8
    # 8 layers x r (d + k) with d_model 64 and hidden 256
    assert lset.trainable_count() == 8 * 4 * (64 + 256) == 10240


def test_last_blocks_targets():
    assert last_blocks_targets(8, 2) == (
        "block.6.mlp.c_fc", "block.6.mlp.c_proj", "block.7.mlp.c_fc", "block.7.mlp.c_proj",
    )


def test_default_config_by_shot():
    lo, hi = default_lora_config(3, 8), default_lora_config(10, 8)
    assert (lo.rank, len(lo.targets)) == (4, 8)
    assert (hi.rank, len(hi.targets)) == (8, 12)
    assert lo.scale_alpha == 8.0 and lo.dropout == 0.1


@pytest.mark.parametrize(
    "cfg",
    [
        LoraConfig(rank=1, targets=()),
        LoraConfig(rank=0, targets=("mlp.c_fc",)),
        LoraConfig(rank=1, targets=("attn.qkv",)),
        LoraConfig(rank=5, targets=("mlp.c_fc",)),  # r > min(8, 32) / 2
    ],
)
def test_inject_errors(tiny_encoder, cfg):
    with pytest.raises(ConfigError):
        inject(tiny_encoder, cfg)


def test_unmatched_target_lists_available(tiny_encoder):
    with pytest.raises(ConfigError, match="block.0.mlp.c_fc"):
        inject(tiny_encoder, LoraConfig(rank=1, targets=("nope",)))


def test_hand_computed_update():
    # W0 = I2, r = 1, alpha = 1, A = [[1, 0]], B = [[0], [1]]: adds x0 to coordinate 1
    ad = LoraAdapter("l", Tensor(np.eye(2)), Tensor([[1.0, 0.0]]), Tensor([[0.0], [1.0]]), scaling=1.0)
    np.testing.assert_array_equal(lora_forward(ad, Tensor([1.0, 0.0])).data, [1.0, 1.0])
    ad.B.data[:] = 0.0
    x = np.array([0.3, -2.0])
    np.testing.assert_array_equal(lora_forward(ad, Tensor(x)).data, x)


def test_scale_linearity(rng):
    w0 = rng.normal(size=(4, 6))
    a, b = rng.normal(size=(2, 4)), rng.normal(size=(6, 2))
    x = rng.normal(size=(3, 4))
    base = x @ w0
    outs = [lora_forward(LoraAdapter("l", Tensor(w0), Tensor(a), Tensor(b), s), Tensor(x)).data - base for s in (0.5, 1.0)]
    np.testing.assert_allclose(outs[1], 2 * outs[0], atol=1e-12)


def test_shape_mismatch(rng):
    ad = LoraAdapter("l", Tensor(np.eye(3)), Tensor(np.ones((1, 3))), Tensor(np.ones((3, 1))), 1.0)
    with pytest.raises(T.DimensionError):
        lora_forward(ad, Tensor(np.ones(4)))


def test_merge_matches_forward(tiny_encoder):
    lset = inject(tiny_encoder, LoraConfig(rank=2, targets=("mlp.c_fc", "mlp.c_proj")))
    for ad in lset:
        np.testing.assert_array_equal(merge(ad), ad.W0.data)
    _randomize(lset, 0)
    probe = np.random.default_rng(1)
    for ad in lset:
        x = probe.normal(size=(100, ad.W0.shape[0]))
        direct = lora_forward(ad, Tensor(x)).data
        merged = x @ merge(ad)
        assert np.max(np.abs(merged - direct)) < 1e-9
        np.testing.assert_allclose(merge(ad) - ad.delta(), ad.W0.data, atol=1e-12)


def test_delta_rank_bounded(tiny_encoder):
    lset = inject(tiny_encoder, LoraConfig(rank=2, targets=("mlp.c_fc", "mlp.c_proj")))
    _randomize(lset, 3)
    for ad in lset:
        s = np.linalg.svd(ad.delta(), compute_uv=False)
        assert np.all(s[ad.rank:] < 1e-9)


def test_merged_encoder_equivalence(tiny_encoder):
    lset = inject(tiny_encoder, LoraConfig(rank=2, targets=("mlp.c_fc", "mlp.c_proj")))
    _randomize(lset, 5)
    imgs = np.random.default_rng(2).random((20, 3, 8, 8))
    merged = merged_encoder(tiny_encoder, lset)
    a = encode_image(tiny_encoder, lset, imgs).data
    b = encode_image(merged, None, imgs).data
    assert np.max(np.abs(a - b)) < 1e-9
    # base weights untouched by merging
    assert not np.array_equal(merged["block.0.mlp.c_fc.weight"].data, tiny_encoder["block.0.mlp.c_fc.weight"].data)


def test_dropout_only_in_training(rng):
    ad = LoraAdapter("l", Tensor(np.eye(3)), Tensor(np.ones((1, 3))), Tensor(np.ones((3, 1))), 1.0, dropout=0.5)
    x = Tensor(np.ones((4, 3)))
    a = lora_forward(ad, x).data
    np.testing.assert_array_equal(a, lora_forward(ad, x, training=True, rng=None).data)
    assert not np.array_equal(a, lora_forward(ad, x, training=True, rng=np.random.default_rng(0)).data)


def test_save_load_round_trip(tmp_path, tiny_encoder):
    lset = inject(tiny_encoder, LoraConfig(rank=2, alpha=3.0, targets=("block.1.mlp",), init_seed=7))
    _randomize(lset, 9)
    lset.save(tmp_path / "a.fslw")
    back = LoraSet.load(tmp_path / "a.fslw", tiny_encoder)
    assert back.config.targets == lset.config.targets and back.config.scale_alpha == 3.0
    for name, ad in lset.adapters.items():
        np.testing.assert_array_equal(back[name].A.data, ad.A.data)
        np.testing.assert_array_equal(back[name].B.data, ad.B.data)
        assert back[name].scaling == ad.scaling
    other = init_encoder(EncoderConfig(image_size=8, patch_size=4, embed_dim=8, num_blocks=1, num_heads=2, output_dim=6))
    with pytest.raises(CheckpointError):
        LoraSet.load(tmp_path / "a.fslw", other)
