import csv

import numpy as np
import pytest
import torch

from lear.backbone import build_model, split_validation, tiny_spec
from lear.cmg import build_discriminator, build_generator
from lear.core import HyperParams
from lear.layers import param_checksum
from lear.trainer import (DivergenceError, IterationState, RunDirectory, augment_finetune, compute_guidance,
                          epoch_means, guidance_classes, iterate_lear, synthesize, train_cmg_phase, train_xga_phase)
from lear.xga import inject

K = 3
SHAPE = (8, 8, 1)


def small_params(**kw):
    base = dict(cmg_epochs=1, cmg_batch_size=8, xga_epochs=2, xga_batch_size=8, seed=3, r=1)
    return HyperParams(**{**base, **kw})


@pytest.fixture(scope="module")
def data():
    rng = np.random.default_rng(0)
    X = rng.random((40, *SHAPE)).astype(np.float32)
    y = np.arange(40) % K
    return X, y


def backbone():
    return build_model(tiny_spec(K, SHAPE), seed=0).freeze()


def stack(seed=1):
    enc = backbone()
    torch.manual_seed(seed)
    return enc, build_generator(enc), build_discriminator(enc)


def test_cmg_phase_logs_and_freezes_encoder(data, tmp_path):
    X, _ = data
    enc, gen, disc = stack()
    theta = param_checksum(enc)
    phi = param_checksum(gen)
    res = train_cmg_phase(enc, gen, disc, X, small_params(), log_path=tmp_path / "cmg.csv")
    assert res.steps == 5
    assert param_checksum(enc) == theta
    assert param_checksum(gen) != phi
    rows = list(csv.DictReader(open(tmp_path / "cmg.csv")))
    assert len(rows) == 5 and "total" in rows[0] and "cyc" in rows[0]
    assert all(np.isfinite(float(r["total"])) for r in rows)


def test_cmg_phase_step_cap(data):
    X, _ = data
    enc, gen, disc = stack()
    assert train_cmg_phase(enc, gen, disc, X, small_params(cmg_epochs=5), max_steps=3).steps == 3


def test_cmg_divergence_guard(data):
    X, _ = data
    enc, gen, disc = stack()
    with torch.no_grad():
        next(gen.parameters()).fill_(float("inf"))
    with pytest.raises(DivergenceError):
        train_cmg_phase(enc, gen, disc, X, small_params())


def test_cmg_phase_deterministic(data):
    X, _ = data
    logs = []
    for _ in range(2):
        enc, gen, disc = stack()
        logs.append(train_cmg_phase(enc, gen, disc, X, small_params()).log)
    assert logs[0] == logs[1]


def test_guidance_classes():
    assert guidance_classes(HyperParams(), 3) == (0, 2)
    assert guidance_classes(HyperParams(guidance_classes=(1, 0)), 3) == (1, 0)
    with pytest.raises(ValueError):
        guidance_classes(HyperParams(guidance_classes=(0, 5)), 3)


def test_compute_guidance_range(data):
    X, _ = data
    enc, gen, _ = stack()
    g = compute_guidance(enc, gen, X[:10], (0, K - 1), batch_size=4)
    assert g.shape == (10, 8, 8, 1)
    assert g.min() >= 0 and g.max() <= 1


def test_xga_phase_trains_only_omega(data, tmp_path):
    X, y = data
    enc, gen, disc = stack()
    model = inject(enc, 1, seed=0)
    before = dict(theta=param_checksum(enc), phi=param_checksum(gen), psi=param_checksum(disc),
                  omega=param_checksum(model.attention))
    res = train_xga_phase(model, gen, X, y, small_params(), log_path=tmp_path / "xga.csv")
    assert res.steps == 10
    assert param_checksum(enc) == before["theta"]
    assert param_checksum(gen) == before["phi"]
    assert param_checksum(disc) == before["psi"]
    assert param_checksum(model.attention) != before["omega"]
    assert len(epoch_means(res.log)) == 2
    header = next(csv.reader(open(tmp_path / "xga.csv")))
    assert header == ["step", "loss", "ce", "omega", "epoch"]


def test_iteration_state_modes():
    IterationState(1, "plain")
    IterationState(2, "xga")
    with pytest.raises(ValueError):
        IterationState(1, "xga")
    with pytest.raises(ValueError):
        IterationState(3, "plain")
    with pytest.raises(ValueError):
        IterationState(0, "plain")


def test_iterate_writes_run_directory(data, tmp_path):
    X, y = data
    run = RunDirectory(tmp_path / "run")
    res = iterate_lear(backbone(), X, y, small_params(), 2, run=run)
    assert [s.encoder_mode for s in res.history] == ["plain", "xga"]
    for k in (1, 2):
        for name in ("cmg", "disc", "xga"):
            assert (tmp_path / "run" / "checkpoints" / f"{name}_{k}.blob").exists()
            assert (tmp_path / "run" / "checkpoints" / f"{name}_{k}.manifest.json").exists()
        assert (tmp_path / "run" / "logs" / f"cmg_{k}.csv").exists()
        assert (tmp_path / "run" / "logs" / f"xga_{k}.csv").exists()
        assert 0 <= res.history[k - 1].metrics["val_acc"] <= 1
    c = res.history[1].checksums
    assert c["before"]["theta"] == c["after_xga"]["theta"] == res.history[0].checksums["before"]["theta"]


def test_iterate_rejects_zero_iterations(data):
    with pytest.raises(ValueError):
        iterate_lear(backbone(), *data, small_params(), 0)


def test_single_iteration_equals_two_phases(data):
    X, y = data
    params = small_params()
    res = iterate_lear(backbone(), X, y, params, 1)

    enc = backbone()
    tr, _ = split_validation(len(X), params.seed)
    torch.manual_seed(params.seed + 100)
    gen, disc = build_generator(enc), build_discriminator(enc)
    model = inject(enc, params.r, seed=params.seed + 107)
    cmg = train_cmg_phase(enc, gen, disc, X[tr], params, salt=11)
    xga = train_xga_phase(model, gen, X[tr], y[tr], params, salt=12)
    assert cmg.log == res.logs[1]["cmg"]
    assert xga.log == res.logs[1]["xga"]
    assert param_checksum(gen) == param_checksum(res.generator)
    assert param_checksum(model.attention) == param_checksum(res.xga.attention)


def test_cold_start_reinitializes(data):
    X, y = data
    warm = iterate_lear(backbone(), X, y, small_params(), 2)
    cold = iterate_lear(backbone(), X, y, small_params(warm_start=False), 2)
    assert warm.logs[1] == cold.logs[1]
    assert warm.logs[2]["cmg"] != cold.logs[2]["cmg"]


def test_synthesize_counts_and_targets(data):
    X, y = data
    enc, gen, _ = stack()
    Xs, ys = synthesize(enc, gen, X[:6], y[:6])
    assert len(Xs) == 6 * (K - 1)
    assert Xs.shape[1:] == SHAPE
    # every sample appears once per non-true target
    pairs = sorted(zip(np.tile(np.arange(6), K - 1), ys))
    assert all(t != y[i] for i, t in pairs)
    assert len(set(pairs)) == 6 * (K - 1)


def test_augment_leaves_source_untouched(data):
    X, y = data
    enc, gen, _ = stack()
    before = param_checksum(enc)
    res = augment_finetune(enc, gen, X[:9], y[:9], small_params(batch_size=9), epochs=1)
    assert len(res.X_synth) == 9 * (K - 1)
    assert len(res.X_synth) + 9 == 9 * K
    assert param_checksum(enc) == before == res.source_checksum
    assert param_checksum(res.model) != before
    assert res.history.steps == 3
