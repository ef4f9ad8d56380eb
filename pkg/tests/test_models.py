import numpy as np
import pytest

from itra import autograd as ag
from itra.errors import ConfigError, DimensionError, FormatError
from itra.losses import Forward, total_objective
from itra.models import (ModelSpec, ParamSet, forward, init_params, load_checkpoint,
                         save_checkpoint)

from conftest import rel_err

MNIST = dict(input_shape=(1, 28, 28), num_classes=10)


def test_same_seed_bit_identical():
    spec = ModelSpec("mlp", (5,), 3, (8, 4))
    a, b = init_params(spec, 3), init_params(spec, 3)
    assert a.params.keys() == b.params.keys()
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    c = init_params(spec, 4)
    assert not np.array_equal(a.params["classifier.weight"], c.params["classifier.weight"])


def test_biases_zero_and_bn_identity():
    spec = ModelSpec("mlp", (5,), 3, (8, 4), batchnorm=True)
    p = init_params(spec, 0)
    for name, v in p.params.items():
        if name.endswith(".bias") or name.endswith(".beta"):
            assert not v.any(), name
        if name.endswith(".gamma"):
            assert np.all(v == 1.0), name


def test_weights_uniform_fan_in():
    spec = ModelSpec("mlp", (400,), 2, (64,))
    w = init_params(spec, 0).params["extractor.0.weight"]
    bound = np.sqrt(6 / 400)
    assert w.size >= 10_000 and np.abs(w).max() <= bound
    se = bound / np.sqrt(3) / np.sqrt(w.size)
    assert abs(w.mean()) <= 3 * se
    assert w.var() == pytest.approx(bound ** 2 / 3, rel=0.05)


def test_extractor_classifier_partition():
    p = init_params(ModelSpec("cnn2", **MNIST), 0)
    ext, cls = set(p.extractor), set(p.classifier)
    assert ext and cls and not ext & cls and ext | cls == set(p.params)


def test_zero_weights_give_zero_outputs():
    spec = ModelSpec("mlp", (3,), 4, (5, 2))
    p = init_params(spec, 0)
    zero = ParamSet({k: np.zeros_like(v) for k, v in p.params.items()}, p.buffers, p.velocity)
    h, o = forward(zero, spec, np.random.default_rng(0).normal(size=(6, 3)))
    assert not h.data.any() and not o.data.any()


@pytest.mark.parametrize("kind,d", [("cnn2", 100), ("cnn5", 512)])
def test_cnn_shapes(kind, d):
    spec = ModelSpec(kind, **MNIST)
    assert spec.feature_dim == d
    h, o = forward(init_params(spec, 0), spec, np.zeros((2, 1, 28, 28)))
    assert h.shape == (2, d) and o.shape == (2, 10)


def test_features_are_post_relu():
    spec = ModelSpec("cnn2", **MNIST)
    h, _ = forward(init_params(spec, 1), spec, np.random.default_rng(0).normal(size=(3, 1, 28, 28)))
    assert h.data.min() >= 0


def test_eval_forward_is_per_sample(rng):
    spec = ModelSpec("mlp", (4,), 3, (6, 5), batchnorm=True)
    p = init_params(spec, 0)
    p.buffers = {k: v + rng.uniform(0.1, 1.0, v.shape) for k, v in p.buffers.items()}
    x = rng.normal(size=(7, 4))
    _, batch = forward(p, spec, x, "eval")
    singles = np.vstack([forward(p, spec, x[i:i + 1], "eval")[1].data for i in range(7)])
    assert np.allclose(batch.data, singles, atol=1e-14)


def test_train_mode_bn_uses_batch_stats_and_reports_running_stats(rng):
    spec = ModelSpec("mlp", (4,), 3, (6,), batchnorm=True)
    p = init_params(spec, 0)
    x = rng.normal(size=(16, 4)) * 3 + 2
    stats = {}
    h, _ = forward(p, spec, x, "train", stats_out=stats)
    assert stats and set(stats) == set(p.buffers)
    assert any(not np.array_equal(stats[k], p.buffers[k]) for k in stats)
    h2, _ = forward(p, spec, x, "eval")
    assert not np.allclose(h.data, h2.data)


def test_input_shape_mismatch():
    spec = ModelSpec("mlp", (4,), 3)
    with pytest.raises(DimensionError):
        forward(init_params(spec, 0), spec, np.zeros((2, 5)))


@pytest.mark.parametrize("kwargs", [
    dict(kind="resnet"), dict(kind="mlp", num_classes=1), dict(kind="mlp", hidden=()),
    dict(kind="cnn2", input_shape=(4,)), dict(kind="cnn5", input_shape=(1, 8, 8)),
])
def test_invalid_model_specs(kwargs):
    with pytest.raises(ConfigError):
        ModelSpec(**kwargs)


@pytest.mark.parametrize("kind,shape,method", [
    ("mlp", (3,), "baseline"), ("mlp", (3,), "itra"), ("mlp", (3,), "itra_c"),
    ("mlp", (3,), "center"), ("mlp", (3,), "lsr"), ("cnn2", (1, 16, 16), "itra"),
])
def test_parameter_gradients_match_finite_differences(kind, shape, method, monkeypatch):
    from conftest import freeze_bandwidths

    hidden = (5, 4) if kind == "mlp" else (6,)
    spec = ModelSpec(kind, shape, 3, hidden)
    params = init_params(spec, 2)
    rng = np.random.default_rng(5)
    # perturb biases off zero so relu kinks are not hit exactly
    params.params = {k: v + rng.normal(scale=0.05, size=v.shape) for k, v in params.params.items()}
    x1, x2 = rng.normal(size=(4, *shape)), rng.normal(size=(4, *shape))
    y1, y2 = np.array([0, 1, 2, 0]), np.array([2, 1, 0, 1])

    def loss(leaves):
        h1, o1 = forward(params, spec, x1, "train", leaves)
        h2, o2 = forward(params, spec, x2, "train", leaves)
        return total_objective(method, Forward(h1, o1, y1), Forward(h2, o2, y2), 0.6,
                               num_classes=3).total

    freeze_bandwidths(monkeypatch, lambda: loss(params.leaves()))
    leaves = params.leaves()
    ag.backward(loss(leaves))
    for name in sorted(params.params)[:4] + ["classifier.weight"]:
        base = params.params[name]

        def f(v, name=name):
            lv = params.leaves()
            lv[name] = ag.Tensor(v)
            return loss(lv).item()

        assert rel_err(leaves[name].grad, ag.finite_diff(f, base)) <= 1e-4, name


def test_checkpoint_round_trip(tmp_path, rng):
    spec = ModelSpec("cnn2", **MNIST, batchnorm=False)
    p = init_params(spec, 0)
    p.velocity = {k: rng.normal(size=v.shape) for k, v in p.params.items()}
    path = tmp_path / "ck.itra"
    save_checkpoint(path, p, spec, {"note": "x"})
    q, spec2, meta = load_checkpoint(path)
    assert spec2 == spec and meta == {"note": "x"}
    for group in ("params", "buffers", "velocity"):
        a, b = getattr(p, group), getattr(q, group)
        assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
    assert path.read_bytes()[:5] == b"ITRA1"


def test_checkpoint_rejects_corruption(tmp_path):
    spec = ModelSpec("mlp", (2,), 2)
    path = tmp_path / "ck.itra"
    save_checkpoint(path, init_params(spec, 0), spec)
    blob = path.read_bytes()
    (tmp_path / "bad_magic").write_bytes(b"XXXX1" + blob[5:])
    (tmp_path / "short").write_bytes(blob[:-16])
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(tmp_path / "bad_magic")
    with pytest.raises(FormatError, match="truncated"):
        load_checkpoint(tmp_path / "short")


def test_batchnorm_default_follows_architecture():
    assert ModelSpec("cnn5", **MNIST).batchnorm is True
    assert ModelSpec("cnn2", **MNIST).batchnorm is False
    assert ModelSpec("cnn5", **MNIST, batchnorm=False).batchnorm is False
    p = init_params(ModelSpec("cnn5", **MNIST), 0)
    assert any(k.endswith(".gamma") for k in p.params) and p.buffers
