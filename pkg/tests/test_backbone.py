import numpy as np
import pytest
import torch

from lear.backbone import (BackboneClassifier, DiagnosticModel, UnsupportedOperationError, build_model, cam,
                           cam_from_features, forward_features, planar_spec, predict, predict_proba, recalibrate_batch_norm,
                           split_validation,
                           tiny_spec, train_backbone, volumetric_spec)
from lear.core import HyperParams, ShapeError
from lear.layers import param_checksum


@pytest.fixture(scope="module")
def planar():
    return build_model(planar_spec(), seed=0).eval()


def test_planar_pyramid_sizes(planar):
    pyramid, probs = forward_features(planar, np.zeros((2, 28, 28, 1), np.float32))
    assert [v.shape[1:3] for v in pyramid.values()] == [(14, 14), (7, 7), (4, 4), (2, 2)]
    assert list(pyramid) == ["enc1", "enc2", "enc3", "enc4"]
    assert np.all(np.isfinite(probs))
    np.testing.assert_allclose(probs.sum(1), 1.0, atol=1e-6)


def test_planar_table_layout():
    spec = planar_spec()
    assert len(spec.conv_layers) == 8
    assert [c.stride for c in spec.conv_layers] == [1, 2] * 4
    m = DiagnosticModel(spec)
    drops = [mod.p for mod in m.head if isinstance(mod, torch.nn.Dropout)]
    assert drops == [0.5, 0.25]


def test_volumetric_bottleneck_shape():
    m = DiagnosticModel(volumetric_spec(width=1.0))
    assert m.tap_shapes()["bottleneck"] == ((3, 4, 3), 512)
    # a narrow copy runs the real forward pass at full resolution
    small = build_model(volumetric_spec(width=1 / 32), seed=0).eval()
    pyramid, _ = forward_features(small, np.zeros((1, 96, 114, 96, 1), np.float32))
    assert pyramid["bottleneck"].shape[1:4] == (3, 4, 3)
    assert pyramid["enc1"].shape[1:4] == (48, 57, 48)


def test_shape_mismatch(planar):
    with pytest.raises(ShapeError):
        forward_features(planar, np.zeros((1, 32, 32, 1), np.float32))
    with pytest.raises(ShapeError):
        predict_proba(planar, np.zeros((1, 28, 28, 2), np.float32))


def test_predict_agrees_with_forward_features(planar):
    x = np.random.default_rng(0).random((5, 28, 28, 1)).astype(np.float32)
    _, probs = forward_features(planar, x)
    assert np.array_equal(probs, predict_proba(planar, x))
    posts = predict(planar, x)
    assert len(posts) == 5
    for p, q in zip(posts, probs):
        assert abs(p.probs.sum() - 1) < 1e-9
        assert p.argmax() == q.argmax()


def test_batch_order_preserved(planar):
    x = np.random.default_rng(1).random((6, 28, 28, 1)).astype(np.float32)
    full = predict_proba(planar, x)
    rev = predict_proba(planar, x[::-1].copy())
    np.testing.assert_allclose(full, rev[::-1], atol=1e-6)
    single = np.concatenate([predict_proba(planar, x[i:i + 1]) for i in range(6)])
    np.testing.assert_allclose(full, single, atol=1e-6)


def test_one_batch_overfit():
    rng = np.random.default_rng(0)
    X = rng.random((32, 28, 28, 1)).astype(np.float32)
    y = rng.integers(0, 10, 32)
    params = HyperParams(epochs=100, batch_size=32, lr_cls=1e-3, decay=1.0)
    model, hist = train_backbone(X, y, planar_spec(), params, validation_fraction=0.0)
    assert hist.steps == 100
    acc = float(np.mean(predict_proba(model, X).argmax(1) == y))
    assert acc >= 0.99


def test_training_deterministic():
    rng = np.random.default_rng(0)
    X = rng.random((40, 4, 4, 1)).astype(np.float32)
    y = rng.integers(0, 2, 40)
    params = HyperParams(epochs=3, batch_size=8)
    a = train_backbone(X, y, tiny_spec(), params)
    b = train_backbone(X, y, tiny_spec(), params)
    assert a[1].train_loss == b[1].train_loss
    assert param_checksum(a[0]) == param_checksum(b[0])
    assert len(a[1].val_acc) == 3


def test_training_freezes_and_records():
    rng = np.random.default_rng(0)
    X = rng.random((20, 4, 4, 1)).astype(np.float32)
    model, hist = train_backbone(X, rng.integers(0, 2, 20), tiny_spec(), HyperParams(epochs=2, batch_size=5))
    assert not any(p.requires_grad for p in model.parameters())
    assert len(hist.train_loss) == len(hist.train_acc) == 2


def test_empty_dataset():
    with pytest.raises(ValueError):
        train_backbone(np.zeros((0, 4, 4, 1), np.float32), np.zeros(0, int), tiny_spec(), HyperParams())


def test_validation_split_fixed_by_seed():
    tr, va = split_validation(100, 3)
    assert len(va) == 10 and len(np.intersect1d(tr, va)) == 0
    tr2, va2 = split_validation(100, 3)
    assert np.array_equal(va, va2)
    assert not np.array_equal(va, split_validation(100, 4)[1])


def test_cam_uniform_and_hot_voxel():
    w = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    uniform = cam_from_features(torch.ones(1, 2, 3, 3), w, 0, (3, 3))
    assert np.all(uniform == uniform.flat[0])
    f = torch.zeros(1, 2, 5, 5)
    f[0, 0, 3, 1] = 1.0
    f[0, 1, 0, 0] = 7.0  # ignored: weight 0 for class 0
    heat = cam_from_features(f, w, 0, (5, 5))
    assert np.unravel_index(heat[0].argmax(), (5, 5)) == (3, 1)
    assert heat.min() == 0.0 and heat.max() == 1.0


def test_cam_range_and_head_check(planar):
    m = build_model(tiny_spec(3, (8, 8, 1)), seed=0).eval()
    heat = cam(m, np.random.default_rng(0).random((2, 8, 8, 1)).astype(np.float32), 1)
    assert heat.shape == (2, 8, 8)
    assert heat.min() >= 0.0 and heat.max() <= 1.0
    with pytest.raises(UnsupportedOperationError):
        cam(planar, np.zeros((1, 28, 28, 1), np.float32), 0)


def test_gradient_matches_finite_differences():
    torch.manual_seed(0)
    m = DiagnosticModel(tiny_spec(2, (4, 4, 1)), bn=False).double()
    x = torch.randn(3, 1, 4, 4, dtype=torch.float64)
    y = torch.tensor([0, 1, 1])

    def loss():
        return torch.nn.functional.cross_entropy(m(x), y)

    params = [p for p in m.parameters()]
    grads = torch.autograd.grad(loss(), params)
    eps = 1e-6
    fds, ans = [], []
    with torch.no_grad():
        for p, g in zip(params, grads):
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + eps
                up = loss().item()
                flat[i] = old - eps
                down = loss().item()
                flat[i] = old
                fds.append((up - down) / (2 * eps))
                ans.append(gflat[i].item())
    fds, ans = np.array(fds), np.array(ans)
    assert np.linalg.norm(fds - ans) / np.linalg.norm(ans) <= 1e-4


def test_estimator_wrapper():
    rng = np.random.default_rng(0)
    X = rng.random((20, 8, 8, 1)).astype(np.float32)
    y = np.arange(20) % 2
    clf = BackboneClassifier(params=HyperParams(epochs=1, batch_size=10))
    assert clf.get_params()["domain"] == "planar2d"
    clf.fit(X, y)
    assert clf.predict(X).shape == (20,)
    np.testing.assert_allclose(clf.predict_proba(X).sum(1), 1.0, atol=1e-6)


def test_recalibrated_statistics_are_dataset_moments():
    model = build_model(tiny_spec(3, (8, 8, 1)), seed=0)
    bn = next(m for m in model.modules() if isinstance(m, torch.nn.modules.batchnorm._BatchNorm))
    seen = []
    bn.register_forward_hook(lambda mod, args, out: seen.append(args[0].detach()))
    X = np.random.default_rng(0).random((24, 8, 8, 1)).astype(np.float32)
    recalibrate_batch_norm(model, X, batch_size=8)
    feats = torch.cat(seen)
    dims = [0] + list(range(2, feats.dim()))
    torch.testing.assert_close(bn.running_mean, feats.mean(dims), atol=1e-5, rtol=0)
