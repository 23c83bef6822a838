import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ddtl import checkpoint, dff
from ddtl.dff import DffArch
from ddtl.mmd import KernelSpec, domain_loss
from ddtl.numerics import tensor as T
from ddtl.numerics.tensor import ShapeError

from oracles import conv2d_loops, dense_loops, maxpool2_loops

SMALL = DffArch((1, 8, 8), (2, 3), hidden=6)

# encode() of the seeded SMALL model on (arange(64) % 7) / 7, frozen when the
# loop oracle and the vectorised path first agreed
GOLDEN_FEATURES = np.array([
    0.11014218205087412, 0.13077135031563572, 0.312732583110327,
    0.16247034645804687, 0.2495433330450263, 0.7361534025431873,
    0.1129183529446338, 0.0, 0.8717999863439974,
    1.1403011883307261, 1.0468028002137761, 1.7479729668859338])
GOLDEN_LOGITS = np.array([2.203108133159145, 2.236979864848444])


def golden_input():
    return (np.arange(64).reshape(1, 8, 8) % 7) / 7.0


def zero_params(arch):
    p = dff.init_params(arch, 0)
    for t in p:
        t.data[...] = 0.0
    return p


def test_arch_validation():
    with pytest.raises(ValueError):
        DffArch((1, 10, 8))
    with pytest.raises(ValueError):
        DffArch(num_classes=1)
    assert DffArch().feature_dim == 32 * 16 * 16
    assert DffArch.from_dict(SMALL.to_dict()) == SMALL


def test_init_is_seeded_and_fan_in_scaled():
    a, b, c = dff.init_params(SMALL, 3), dff.init_params(SMALL, 3), dff.init_params(SMALL, 4)
    for (n, x), (_, y), (_, z) in zip(a.named().items(), b.named().items(), c.named().items()):
        np.testing.assert_array_equal(x.data, y.data)
        if n.endswith(".w"):
            assert not np.array_equal(x.data, z.data)
            fan_in = int(np.prod(x.shape[1:]))
            assert np.abs(x.data).max() <= math.sqrt(6 / fan_in)
        else:
            assert not x.data.any()


# ---------------------------------------------------------------- forward

def test_encode_zero_input_zero_bias_gives_zero_features():
    p = dff.init_params(SMALL, 0)
    assert not dff.encode(np.zeros((1, 8, 8)), p.encoder, SMALL).data.any()


def test_encode_shapes():
    p = dff.init_params(SMALL, 0)
    f = dff.encode(np.zeros((5, 1, 8, 8)), p.encoder, SMALL)
    assert f.shape == (5, 3 * 2 * 2)
    with pytest.raises(ShapeError):
        dff.encode(np.zeros((1, 6, 8)), p.encoder, SMALL)


def test_encode_golden_and_oracle():
    p = dff.init_params(SMALL, 0)
    x = golden_input()
    f = dff.encode(x, p.encoder, SMALL).data[0]
    e = {k: v.data for k, v in p.encoder.items()}
    h = maxpool2_loops(np.maximum(conv2d_loops(x, e["conv1.w"], e["conv1.b"], 1, 1), 0))
    h = maxpool2_loops(np.maximum(conv2d_loops(h, e["conv2.w"], e["conv2.b"], 1, 1), 0))
    np.testing.assert_allclose(f, h.ravel(), atol=1e-12)
    np.testing.assert_allclose(f, GOLDEN_FEATURES, rtol=0, atol=1e-12)


def test_classify_golden_and_oracle():
    p = dff.init_params(SMALL, 0)
    c = {k: v.data for k, v in p.classifier.items()}
    logits = dff.classify(GOLDEN_FEATURES, p.classifier, SMALL).data
    hidden = np.maximum(dense_loops(GOLDEN_FEATURES, c["fc.w"], c["fc.b"]), 0)
    np.testing.assert_allclose(logits, dense_loops(hidden, c["out.w"], c["out.b"]), atol=1e-12)
    np.testing.assert_allclose(logits, GOLDEN_LOGITS, atol=1e-12)


def test_classify_zero_weights_returns_bias():
    p = zero_params(SMALL)
    p.classifier["out.b"].data[:] = [0.3, -1.2]
    logits = dff.classify(np.zeros(SMALL.feature_dim), p.classifier, SMALL).data
    assert logits.tolist() == [0.3, -1.2]
    with pytest.raises(ShapeError):
        dff.classify(np.zeros(5), p.classifier, SMALL)


def test_decode_shape_range_and_half_image(rng):
    p = dff.init_params(SMALL, 0)
    out = dff.decode(rng.uniform(-3, 3, (4, SMALL.feature_dim)), p.decoder, SMALL).data
    assert out.shape == (4, 1, 8, 8)
    assert np.all((out > 0) & (out < 1))
    flat = dff.decode(np.zeros(SMALL.feature_dim), zero_params(SMALL).decoder, SMALL).data
    assert np.all(flat == 0.5)
    with pytest.raises(ShapeError):
        dff.decode(np.zeros(7), p.decoder, SMALL)


def test_predict_is_argmax():
    p = zero_params(SMALL)
    p.classifier["out.b"].data[:] = [0.0, 1.0]
    assert dff.predict(np.zeros((3, 1, 8, 8)), p, SMALL).tolist() == [1, 1, 1]


# ---------------------------------------------------------------- losses

def test_reconstruction_loss_examples(rng):
    x = rng.uniform(0, 1, (2, 1, 2, 2))
    assert dff.reconstruction_loss([(x, x)]).item() == 0.0
    one = np.zeros((1, 1, 2, 2))
    assert dff.reconstruction_loss([(one, one + 0.5)]).item() == 0.25
    a = dff.reconstruction_loss([(one, one + 0.5)]).item()
    b = dff.reconstruction_loss([(x, x + 0.1)]).item()
    assert dff.reconstruction_loss([(one, one + 0.5), (x, x + 0.1)]).item() == pytest.approx(a + b, abs=1e-15)
    with pytest.raises(ValueError):
        dff.reconstruction_loss([(np.zeros((0, 1, 2, 2)), np.zeros((0, 1, 2, 2)))])
    with pytest.raises(ShapeError):
        dff.reconstruction_loss([(one, np.zeros((1, 1, 2, 3)))])


def test_classification_loss_examples():
    assert dff.classification_loss([0.0, 0.0], 0).item() == pytest.approx(math.log(2), abs=1e-15)
    expected = math.log(1 + math.exp(-1) + math.exp(-2))
    assert dff.classification_loss([1.0, 2.0, 3.0], 2).item() == pytest.approx(expected, abs=1e-12)
    assert abs(expected - 0.407606) < 1e-6
    assert dff.classification_loss([20.0, -20.0], 0).item() <= 1e-8
    with pytest.raises(ValueError):
        dff.classification_loss([0.0, 1.0], 2)


def test_classification_loss_batch_mean():
    logits = np.array([[0.0, 0.0], [1.0, 3.0]])
    single = [dff.classification_loss(row, y).item() for row, y in zip(logits, [0, 1])]
    assert dff.classification_loss(logits, [0, 1]).item() == pytest.approx(np.mean(single), abs=1e-15)


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=6), st.data())
def test_classification_loss_nonnegative_and_softmax_normalised(logits, data):
    label = data.draw(st.integers(0, len(logits) - 1))
    assert dff.classification_loss(logits, label).item() >= 0.0
    assert abs(T.softmax(T.Tensor(np.array(logits)), axis=-1).data.sum() - 1.0) <= 1e-12


def test_total_loss_examples():
    assert dff.total_loss(0.5, 0.2, 0.3).L == pytest.approx(1.0, abs=1e-15)
    assert dff.total_loss(1, 1, 1, (2, 0.5, 1)).L == 3.5
    assert dff.total_loss(0.4, 7.0, 0.1, (1, 0, 1)).L == pytest.approx(0.5, abs=1e-15)
    with pytest.raises(FloatingPointError, match="L_D"):
        dff.total_loss(0.1, float("nan"), 0.2)


# ---------------------------------------------------------------- gradient routing

def _grads_after(loss_of, rng):
    p = dff.init_params(SMALL, 1)
    xs = rng.uniform(0, 1, (3, 1, 8, 8))
    xt = rng.uniform(0, 1, (2, 1, 8, 8))
    T.backward(loss_of(p, xs, xt))
    return {g: [t.grad for t in getattr(p, g).values()] for g in ("encoder", "decoder", "classifier")}


def _any(grads):
    return any(g is not None and np.abs(g).sum() > 0 for g in grads)


def test_domain_loss_only_touches_encoder(rng):
    spec = KernelSpec((0.3,))
    g = _grads_after(lambda p, xs, xt: domain_loss(dff.encode(xs, p.encoder, SMALL),
                                                   dff.encode(xt, p.encoder, SMALL), spec), rng)
    assert _any(g["encoder"]) and not _any(g["decoder"]) and not _any(g["classifier"])


def test_reconstruction_loss_skips_classifier(rng):
    def loss(p, xs, xt):
        return dff.reconstruction_loss([(xs, dff.decode(dff.encode(xs, p.encoder, SMALL), p.decoder, SMALL))])
    g = _grads_after(loss, rng)
    assert _any(g["encoder"]) and _any(g["decoder"]) and not _any(g["classifier"])


def test_classification_loss_skips_decoder(rng):
    def loss(p, xs, xt):
        return dff.classification_loss(dff.classify(dff.encode(xt, p.encoder, SMALL), p.classifier, SMALL), [0, 1])
    g = _grads_after(loss, rng)
    assert _any(g["encoder"]) and _any(g["classifier"]) and not _any(g["decoder"])


# ---------------------------------------------------------------- checkpoint

def test_checkpoint_round_trip(tmp_path):
    p = dff.init_params(SMALL, 9)
    path = dff.save_params(tmp_path / "m.dff", p, SMALL)
    blob = path.read_bytes()
    assert blob[:4] == b"DFF1"
    q, arch = dff.load_params(path)
    assert arch == SMALL
    for (n, a), (m, b) in zip(p.named().items(), q.named().items()):
        assert n == m
        np.testing.assert_array_equal(a.data, b.data)
    dff.save_params(tmp_path / "again.dff", q, arch)
    assert (tmp_path / "again.dff").read_bytes() == blob


def test_checkpoint_rejects_corruption(tmp_path):
    path = dff.save_params(tmp_path / "m.dff", dff.init_params(SMALL, 0), SMALL)
    blob = path.read_bytes()
    (tmp_path / "bad_magic.dff").write_bytes(b"XXXX" + blob[4:])
    (tmp_path / "short.dff").write_bytes(blob[:-8])
    for name in ("bad_magic.dff", "short.dff"):
        with pytest.raises(checkpoint.CheckpointError):
            dff.load_params(tmp_path / name)


def test_checkpoint_values_are_little_endian_doubles(tmp_path):
    p = dff.init_params(SMALL, 2)
    blob = checkpoint.encode(checkpoint.DFF_MAGIC, SMALL.to_dict(), p.named())
    n_values = sum(t.data.size for t in p)
    tail = np.frombuffer(blob[-8 * n_values:], dtype="<f8")
    np.testing.assert_array_equal(tail, np.concatenate([t.data.ravel() for t in p.named().values()]))
