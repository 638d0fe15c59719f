# Copyright 2026 The lmk Authors
# SPDX-License-Identifier: Apache-2.0

import math

import numpy as np
import pytest

import lmk

SUITE = {"n_tasks": 2, "d": 8, "m": 10, "classes": 3, "signal_dim": 2, "n_train": 60, "n_eval": 30, "n_adapt": 30}
FINETUNE = {"rank": 3, "lora_alpha": 3.0, "steps": 30, "batch_size": 16}


@pytest.fixture(scope="module")
def run():
    return lmk.train_toy(SUITE, FINETUNE, seed=5)


def test_svd_reconstructs():
    x = np.random.default_rng(0).normal(size=(6, 4))
    u, s, v = lmk.svd(x)
    assert np.allclose(u @ np.diag(s) @ v.T, x, atol=1e-12)
    assert np.allclose(s, np.linalg.svd(x, compute_uv=False), atol=1e-12)


def test_effective_rank():
    assert lmk.effective_rank([2.0, 2.0, 2.0]) == pytest.approx(3.0)
    assert lmk.effective_rank([5.0]) == pytest.approx(1.0)
    with pytest.raises(Exception):
        lmk.effective_rank([0.0, 0.0])


def test_stch_closed_form():
    # rho_i |f_i - z_i| equal across tasks
    psi = lmk.stch_objective([1.0, 1.0], [0.0, 0.0], [0.5, 0.5], 1.0)
    assert psi == pytest.approx(0.5 + math.log(2.0), abs=1e-12)


def test_train_and_merge(run):
    assert run.task_ids == ["task0", "task1"]
    assert len(run.layer_ids) == 2
    assert all(0.0 < v <= 1.0 for v in run.references.values())

    ta = lmk.merge(run, "ta", {"lambda": 0.3})
    expected = [w + 0.3 * (run.delta(0, l) + run.delta(1, l)) for l, w in enumerate(run.base_weights())]
    for got, want in zip(ta["weights"], expected):
        assert np.allclose(got, want, rtol=0, atol=1e-12)

    tara = lmk.merge(run, "tara-b", preference=[0.7, 0.3], iters=5, seed=1)
    assert len(tara["phi"]) > 0
    assert len(tara["psi_trace"]) >= 1
    report = lmk.evaluate(run, tara["weights"], hits=[1, 2])
    assert set(report["joint"]) == {"hits@1", "hits@2"}
    assert len(report["tasks"]) == 2


def test_merge_rejects_bad_config(run):
    with pytest.raises(ValueError):
        lmk.merge(run, "ta", {"trim_fraction": 0.5})
    with pytest.raises(ValueError):
        lmk.merge(run, "nope")


def test_container_round_trip(run):
    again = lmk.load(run.container(), run.sidecar())
    assert again.task_ids == run.task_ids
    for a, b in zip(again.base_weights(), run.base_weights()):
        assert np.array_equal(a, b)
    with pytest.raises(lmk.ContainerError):
        lmk.load(run.container()[:20], run.sidecar())


def test_deterministic_training():
    a = lmk.train_toy(SUITE, FINETUNE, seed=9)
    b = lmk.train_toy(SUITE, FINETUNE, seed=9)
    assert a.container() == b.container()


def test_diagnostics(run):
    cov = lmk.coverage(run)
    assert cov["per_task_sum"] >= cov["aware_erank"] >= cov["agnostic_erank"]
    for row in lmk.xi(run):
        assert 0.0 <= row["xi"] <= 1.0
    assert lmk.kappa(run)


def test_sweep_order(run):
    prefs = [[1.0, 0.0], [0.5, 0.5], [0.0, 1.0]]
    pts = lmk.sweep(run, prefs, method="tara-a", iters=3)
    assert [p["preference"] for p in pts] == prefs


def test_isotonic_and_spearman():
    assert lmk.isotonic_increasing([1.0, 3.0, 2.0, 4.0]) == [1.0, 2.5, 2.5, 4.0]
    assert lmk.spearman([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
