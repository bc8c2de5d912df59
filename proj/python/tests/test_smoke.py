import math

import numpy as np
import pytest

import cmcl


def test_version():
    assert cmcl.__version__ == "0.1.0"


def test_orthonormal_closed_forms():
    eye = np.eye(2)
    lcl = cmcl.contrastive_loss(eye, eye, [0, 1], [1.0, 1.0], 1.0, flavor="lcl")
    licl = cmcl.contrastive_loss(eye, eye, [0, 1], [1.0, 1.0], 1.0, flavor="licl")
    assert lcl["loss"] == pytest.approx(-1.0, abs=1e-12)
    assert licl["loss"] == pytest.approx(-(1.0 - math.log(2.0)), abs=1e-12)
    assert lcl["grad_mu"].shape == (2, 2)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    mu, table = rng.normal(size=(5, 3)), rng.normal(size=(3, 3))
    labels, gamma = [0, 1, 2, 0, 1], [1.0, 0.8, 1.4]

    def f(m):
        return cmcl.contrastive_loss(m, table, labels, gamma, 0.5, negatives="all")["loss"]

    grad = cmcl.contrastive_loss(mu, table, labels, gamma, 0.5, negatives="all")["grad_mu"]
    h = 1e-6
    for i, j in [(0, 0), (2, 1), (4, 2)]:
        up, down = mu.copy(), mu.copy()
        up[i, j] += h
        down[i, j] -= h
        assert grad[i, j] == pytest.approx((f(up) - f(down)) / (2 * h), rel=1e-5, abs=1e-8)


def test_single_class_batch_is_skipped():
    r = cmcl.contrastive_loss(np.ones((3, 2)), np.eye(2), [1, 1, 1], [1.0, 1.0], 1.0)
    assert r["loss"] == 0.0
    assert r["skipped"] == 3


def test_cmcl_and_weights():
    r = cmcl.cmcl_loss([0.3, 0.4, 0.35], 0.02)
    assert r["total"] == pytest.approx(0.08, abs=1e-15)
    assert r["hinges"] == pytest.approx([0.08, 0.0])
    assert cmcl.class_weights([2, 6]) == pytest.approx([2.0, 2.0 / 3.0])
    with pytest.raises(cmcl.ValidationError):
        cmcl.class_weights([3, 0])


def test_corpus_and_metrics():
    c = cmcl.generate_corpus({"train_size": 40, "dev_size": 8, "test_size": 8, "seed": 3})
    assert [len(c[s]) for s in ("train", "dev", "test")] == [40, 8, 8]
    assert c == cmcl.generate_corpus({"train_size": 40, "dev_size": 8, "test_size": 8, "seed": 3})
    gold = [x["label"] for x in c["dev"]]
    report = cmcl.metrics(gold, gold, 4)
    assert report["accuracy"] == 1.0


def test_silhouette():
    pts = np.array([[1.0, 0.0], [2.0, 0.0], [0.0, 1.0], [0.0, 3.0]])
    assert cmcl.silhouette(pts, [0, 0, 1, 1])["score"] == pytest.approx(1.0)
    with pytest.raises(cmcl.ValidationError):
        cmcl.silhouette(pts, [0, 0, 0, 0])


def test_gradient_suite_and_cli(tmp_path):
    assert cmcl.gradient_suite(1)["pass"] is True
    code, out, _ = cmcl.run(["--version"])
    assert code == 0 and cmcl.__version__ in out
    code, _, err = cmcl.run(["gen-data", "--out", str(tmp_path), "--seed", "4"])
    assert code == 0, err
    assert (tmp_path / "manifest.json").exists()
    assert cmcl.run(["frobnicate"])[0] == 1
