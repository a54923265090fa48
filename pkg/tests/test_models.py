import numpy as np
import pytest

from capdet import tensor as T
from capdet.dataset import render
from capdet.models import (
    Architecture,
    ConfigError,
    ModelConfig,
    attention_layers,
    bridge,
    decode_logits,
    embed_patches,
    encode_image,
    encoder_stack,
    init_model,
    vocabulary,
    with_config,
)
from capdet.optim import Adam
from capdet.tensor import ShapeError, Tensor, backward

DEFAULT = ModelConfig()


@pytest.fixture(scope="module")
def qb():
    return init_model(DEFAULT, 7)


@pytest.fixture(scope="module")
def xattn():
    return init_model(with_config(DEFAULT, architecture=Architecture.CROSS_ATTN), 7)


def test_same_seed_same_bytes():
    a, b = init_model(DEFAULT, 7), init_model(DEFAULT, 7)
    assert list(a.params) == list(b.params)
    assert all(a.params[k].data.tobytes() == b.params[k].data.tobytes() for k in a.params)


def test_different_seed_differs(qb):
    other = init_model(DEFAULT, 8)
    assert qb.params["encoder.blocks.0.attn.W_q"].data.tobytes() != other.params["encoder.blocks.0.attn.W_q"].data.tobytes()


def test_init_statistics(qb):
    w = qb.params["encoder.blocks.0.mlp.W1"].data
    assert abs(w.std() - 0.02) < 0.002
    assert not qb.params["encoder.blocks.0.mlp.b1"].data.any()


def test_patch_count():
    assert DEFAULT.n_patches == 64


@pytest.mark.parametrize(
    "changes, message",
    [
        (dict(d_model=65), "divisible by n_heads"),
        (dict(image_size=30), "divisible by patch_size"),
        (dict(max_caption_len=2), "max_caption_len"),
        (dict(n_query_tokens=0), "n_query_tokens"),
    ],
)
def test_invalid_config(changes, message):
    with pytest.raises(ConfigError, match=message):
        init_model(ModelConfig(**changes), 0)


def test_mask_covers_parameters(qb):
    assert set(qb.trainable) == set(qb.params)
    with pytest.raises(ValueError):
        qb.set_trainable({"encoder.pos_embed": True})


def test_query_bridge_trainables(qb):
    names = set(qb.trainable_parameters())
    assert names == {k for k in qb.params if k.startswith("bridge.")}


def test_cross_attn_trainables(xattn):
    names = set(xattn.trainable_parameters())
    assert names and all(".cross_attn." in k or ".ln_x." in k for k in names)
    assert all(k.startswith("decoder.") for k in names)


def test_cross_attn_trainable_fraction(xattn):
    n = sum(p.data.size for p in xattn.trainable_parameters().values())
    assert n / xattn.num_parameters() < 0.15


def test_attention_weight_names_unique(qb):
    layers = attention_layers(qb.config)
    names = [layer.name_of(k) for layer in layers for k in ("W_q", "W_k", "W_v", "W_o")]
    assert len(names) == len(set(names))
    for layer in layers:
        shapes = {qb.params[layer.name_of(k)].shape for k in ("W_q", "W_k", "W_v", "W_o")}
        assert shapes == {(64, 64)}


def test_vocabulary():
    v = vocabulary(40)
    assert len(v) == 40 and v[:5] == ["[PAD]", "[BOS]", "[EOS]", "real", "fake"]


# ---------------------------------------------------------------- encoder


def test_encode_shape(qb):
    assert encode_image(qb, np.zeros((3, 32, 32), np.float32)).shape == (64, 64)


def test_zero_image_finite_and_deterministic(qb):
    a = encode_image(qb, np.zeros((3, 32, 32), np.float32)).data
    b = encode_image(qb, np.zeros((3, 32, 32), np.float32)).data
    assert np.isfinite(a).all() and a.tobytes() == b.tobytes()


def test_distinct_generators_distinct_encodings(qb):
    real = render("REAL", 42, "test", 0)
    fake = render("G-A", 42, "test", 0)
    diff = encode_image(qb, real).data - encode_image(qb, fake).data
    assert np.linalg.norm(diff) > 0


def test_wrong_image_shape(qb):
    with pytest.raises(ShapeError):
        encode_image(qb, np.zeros((3, 16, 16), np.float32))


def test_batch_axis_passes_through(qb, rng):
    imgs = rng.random((3, 3, 32, 32)).astype(np.float32)
    batch = encode_image(qb, imgs).data
    single = encode_image(qb, imgs[1]).data
    assert batch.shape == (3, 64, 64)
    np.testing.assert_allclose(batch[1], single, atol=1e-6)


def test_encoder_permutation_equivariant_without_positions(tiny_cfg, rng):
    m = init_model(tiny_cfg, 3)
    img = rng.random((1, 3, 8, 8)).astype(np.float32)
    x = embed_patches(m, img, positional=False)
    perm = rng.permutation(x.shape[1])
    out = encoder_stack(m, x).data
    out_perm = encoder_stack(m, Tensor(x.data[:, perm])).data
    np.testing.assert_allclose(out_perm, out[:, perm], atol=1e-5)


# ---------------------------------------------------------------- bridge


def test_query_bridge_shape(qb):
    enc = encode_image(qb, np.zeros((3, 32, 32), np.float32))
    assert bridge(qb, enc).shape == (8, 64)


def test_cross_attn_bridge_is_identity(xattn):
    enc = encode_image(xattn, np.zeros((3, 32, 32), np.float32))
    assert bridge(xattn, enc) is enc


def test_single_query_token():
    m = init_model(with_config(DEFAULT, n_query_tokens=1), 0)
    assert bridge(m, encode_image(m, np.zeros((3, 32, 32), np.float32))).shape == (1, 64)


# ---------------------------------------------------------------- decoder


def _ctx(model, rng):
    return bridge(model, encode_image(model, rng.random((3, 32, 32)).astype(np.float32)))


@pytest.mark.parametrize("t", [0, 1, 2])
def test_causality(qb, rng, t):
    ctx = _ctx(qb, rng)
    prefix = np.array([1, 3, 2])
    changed = prefix.copy()
    changed[t] = 17
    a = decode_logits(qb, ctx, prefix).data
    b = decode_logits(qb, ctx, changed).data
    assert np.array_equal(a[:t], b[:t])
    assert not np.array_equal(a[t:], b[t:])


def test_decoder_output_shape(qb, rng):
    assert decode_logits(qb, _ctx(qb, rng), [1, 4]).shape == (2, 40)


def test_empty_context_rejected(qb):
    with pytest.raises(ShapeError, match="non-empty context"):
        decode_logits(qb, Tensor(np.zeros((0, 64), np.float32)), [1])


@pytest.mark.parametrize("prefix", [[1, 3, 2, 0, 0], [1, 40], [], [-1]])
def test_bad_prefix(qb, rng, prefix):
    with pytest.raises(ValueError):
        decode_logits(qb, _ctx(qb, rng), prefix)


def test_logits_bit_identical(rng):
    img = rng.random((3, 32, 32)).astype(np.float32)
    runs = []
    for _ in range(2):
        m = init_model(DEFAULT, 5)
        runs.append(decode_logits(m, bridge(m, encode_image(m, img)), [1, 3, 2]).data.tobytes())
    assert runs[0] == runs[1]


# ---------------------------------------------------------------- frozen contract


@pytest.mark.parametrize("arch", list(Architecture))
def test_frozen_parameters_untouched(tiny_cfg, rng, arch):
    m = init_model(with_config(tiny_cfg, architecture=arch), 1)
    before = {k: p.data.tobytes() for k, p in m.params.items()}
    opt = Adam(m.trainable_parameters(), lr=1e-2)
    img = rng.random((2, 3, 8, 8)).astype(np.float32)
    for _ in range(5):
        opt.zero_grad()
        logits = decode_logits(m, bridge(m, encode_image(m, img)), np.array([[1, 3, 2], [1, 4, 2]]))
        loss = T.cross_entropy_logits(logits, np.array([[3, 2, 0], [4, 2, 0]]))
        backward(loss)
        for k, p in m.params.items():
            if not m.trainable[k]:
                assert p.grad is None or not p.grad.any()
        opt.step()
    changed = {k for k, p in m.params.items() if p.data.tobytes() != before[k]}
    assert changed and changed <= {k for k, v in m.trainable.items() if v}
