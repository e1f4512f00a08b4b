import numpy as np
import pytest

from utnet import attention as A
from utnet import tensor as T
from utnet.errors import ConfigError, DataError
from utnet.model import (
    ParamStore,
    ResidualBlock,
    TransformerDecoderBlock,
    TransformerEncoderBlock,
    UTNetConfig,
    build,
    load_checkpoint,
    save_checkpoint,
)
from utnet.tensor import Tensor

SMALL = UTNetConfig(base_channels=4)


def fwd(model, x, training=False):
    with T.no_grad():
        return model.forward(Tensor(x), training=training).data


def zero_params(store, predicate):
    for name, p in store.params.items():
        if predicate(name):
            p.data = np.zeros_like(p.data)


def test_residual_block_zero_weights_is_identity():
    store = ParamStore(np.random.default_rng(0))
    block = ResidualBlock(store, "b", 6, 6)
    zero_params(store, lambda n: "conv" in n)
    x = np.random.default_rng(1).standard_normal((2, 6, 5, 5))
    with T.no_grad():
        assert np.array_equal(block(Tensor(x), True).data, x)


def test_residual_block_stride_two_halves():
    store = ParamStore(np.random.default_rng(0))
    block = ResidualBlock(store, "b", 3, 5, stride=2)
    with T.no_grad():
        assert block(Tensor(np.zeros((1, 3, 8, 6))), True).shape == (1, 5, 4, 3)
    with pytest.raises(ConfigError):
        ResidualBlock(store, "c", 3, 3, stride=3)


def test_encoder_block_zero_attention_and_ffn_is_identity():
    store = ParamStore(np.random.default_rng(0))
    block = TransformerEncoderBlock(store, "t", 8, A.AttentionConfig(reduced_size=4), "enc1")
    zero_params(store, lambda n: n.endswith(".out") or n.endswith("ffn.w2") or n.endswith("ffn.b2"))
    x = np.random.default_rng(1).standard_normal((1, 8, 8, 8))
    with T.no_grad():
        out = block(Tensor(x)).data
    assert np.array_equal(out, x)


@pytest.mark.parametrize("size", [4, 8, 16])
def test_encoder_block_preserves_shape(size):
    store = ParamStore(np.random.default_rng(size))
    block = TransformerEncoderBlock(store, "t", 8, A.AttentionConfig(reduced_size=8), "enc")
    with T.no_grad():
        assert block(Tensor(np.ones((2, 8, size, size)))).shape == (2, 8, size, size)


def test_decoder_block_zero_attention_is_upsample_merge():
    store = ParamStore(np.random.default_rng(0))
    block = TransformerDecoderBlock(store, "d", 8, 16, A.AttentionConfig(reduced_size=4), "dec1")
    zero_params(store, lambda n: n.endswith(".out") or "ffn.w2" in n or "ffn.b2" in n)
    rng = np.random.default_rng(1)
    hi, lo = rng.standard_normal((1, 8, 8, 8)), rng.standard_normal((1, 16, 4, 4))
    with T.no_grad():
        out = block(Tensor(hi), Tensor(lo)).data
        merge = T.add(T.bilinear_resize(T.conv2d(Tensor(lo), block.reduce), 8, 8), Tensor(hi)).data
    assert out.shape == hi.shape and np.array_equal(out, merge)
    with pytest.raises(ConfigError):
        block(Tensor(hi), Tensor(rng.standard_normal((1, 16, 8, 8))))


def test_block_grad_checks():
    from utnet.gradcheck import REGISTRY

    for name in ("residual_block", "transformer_encoder_block", "transformer_decoder_block"):
        err, where = REGISTRY[name].run(1)
        assert err < 1e-5, (name, where)


# --- whole network


def test_config_rejects_bad_levels():
    for bad in ("0", "5", "12a", "11"):
        with pytest.raises(ConfigError):
            UTNetConfig(attention_levels=bad)
    with pytest.raises(ConfigError):
        UTNetConfig.from_dict({"depth": 3})


def test_default_census_in_range():
    census = build(UTNetConfig(), seed=0).census()
    assert 8_000_000 <= census["total"] <= 11_000_000
    assert census["attention"] > 0


def test_baseline_has_no_attention_and_equals_empty_levels():
    base = build(UTNetConfig(base_channels=8, baseline_mode=True), seed=3)
    empty = build(UTNetConfig(base_channels=8, attention_levels=""), seed=3)
    assert base.census()["attention"] == 0 and base.census()["transformer"] == 0
    assert list(base.params) == list(empty.params)
    for name in base.params:
        assert np.array_equal(base.params[name].data, empty.params[name].data)


def test_transformer_blocks_only_at_named_levels():
    model = build(UTNetConfig(base_channels=4, attention_levels="34"), seed=0)
    levels = {n.split(".")[1] for n in model.params if n.startswith("attn.")}
    assert levels == {"enc3", "enc4", "dec3"}


def test_same_seed_bit_identical_parameters():
    a, b = build(SMALL, seed=5), build(SMALL, seed=5)
    assert all(a.params[n].data.tobytes() == b.params[n].data.tobytes() for n in a.params)
    c = build(SMALL, seed=6)
    assert any(not np.array_equal(a.params[n].data, c.params[n].data) for n in a.params)


def test_forward_shape_determinism_and_simplex():
    model = build(SMALL, seed=0)
    x = np.random.default_rng(0).random((1, 1, 64, 64))
    out = fwd(model, x)
    assert out.shape == (1, 4, 64, 64)
    assert out.tobytes() == fwd(build(SMALL, seed=0), x).tobytes()
    p = T.softmax(Tensor(out), axis=1).data
    assert np.abs(p.sum(axis=1) - 1).max() < 1e-9


def test_forward_rejects_indivisible_size():
    with pytest.raises(DataError, match="multiple of 16"):
        fwd(build(SMALL, seed=0), np.zeros((1, 1, 40, 40)))


def test_skip_connections_pair_equal_sizes():
    model = build(SMALL, seed=0)
    with T.no_grad():
        x = T.conv2d(Tensor(np.zeros((1, 1, 32, 32))), model.stem, pad=1)
        sizes = []
        for stage in model.encoder:
            for block in stage:
                x = block(x, False)
            sizes.append(x.shape[2:])
    assert sizes == [(32 // 2**i, 32 // 2**i) for i in range(5)]


def test_eval_mode_uses_running_stats():
    model = build(SMALL, seed=0)
    x = np.random.default_rng(0).random((2, 1, 32, 32))
    before = fwd(model, x)
    fwd(model, x, training=True)  # updates running statistics
    assert not np.array_equal(before, fwd(model, x))


def test_efficient_forward_at_128_stays_under_standard_buffer():
    model = build(SMALL, seed=0)
    with A.track_buffers() as log:
        fwd(model, np.zeros((1, 1, 128, 128)))
    n1 = 64 * 64  # level 1 map of a 128 x 128 input
    standard_bytes = SMALL.attention.heads * n1 * n1 * 8
    budget = 64 * 2**20
    assert log.peak_bytes <= budget < standard_bytes


def test_full_model_grad_check():
    from utnet.gradcheck import REGISTRY

    err, where = REGISTRY["utnet_32x32"].run(0)
    assert err < 1e-4, where


def test_checkpoint_round_trip_bit_exact(tmp_path):
    model = build(UTNetConfig(base_channels=4, attention_levels="24"), seed=2)
    fwd(model, np.random.default_rng(0).random((2, 1, 32, 32)), training=True)
    save_checkpoint(model, tmp_path / "ck", epoch=3, lr=0.01)
    loaded, meta = load_checkpoint(tmp_path / "ck")
    assert meta["epoch"] == 3 and meta["config"]["attention_levels"] == "24"
    assert set(meta) >= {"config", "seed", "epoch", "lr", "census"}
    for n, p in model.params.items():
        assert p.data.tobytes() == loaded.params[n].data.tobytes()
    for n, b in model.buffers.items():
        assert b.tobytes() == loaded.buffers[n].tobytes()
    assert (tmp_path / "ck" / "tensors" / "attn.enc2.rel_h.json").exists()


def test_load_checkpoint_missing(tmp_path):
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path)
