import math

import numpy as np
import pytest

import gsbi


def test_manifold_step():
    q = np.array([0.0, 0.0, 0.0, 1.0])
    t = gsbi.project_to_tangent(q, np.array([0.3, -0.2, 0.1, 5.0]))
    assert abs(t @ q) < 1e-12
    assert abs(np.linalg.norm(gsbi.exp_map(q, t)) - 1.0) < 1e-12
    x, q2 = gsbi.riemannian_step(np.zeros(3), q, np.zeros(3), np.zeros(4))
    assert np.all(x == 0.0) and np.all(q2 == q)


def test_power_spherical():
    mu = np.array([0.0, 0.6, 0.0, 0.8])
    s = gsbi.ps_sample(mu, 8.0, 2000, seed=1)
    assert s.shape == (2000, 4)
    assert np.allclose(np.linalg.norm(s, axis=1), 1.0)
    assert (s @ mu).mean() > 0.7
    q = np.array([0.5, 0.5, 0.5, 0.5])
    assert gsbi.ps_log_density_grad(q, mu, 8.0) == pytest.approx(8.0 * mu / (1.0 + mu @ q))
    assert gsbi.orientation_prior_log_density(q) == pytest.approx(gsbi.orientation_prior_log_density(-q), abs=1e-9)


def test_log_mean_exp_and_wilson():
    assert gsbi.log_mean_exp([0.0, 0.0, 0.0, math.log(3.0)]) == pytest.approx(math.log(1.5), abs=1e-12)
    lo, hi = gsbi.wilson_interval(182, 200)
    assert lo < 0.91 < hi


def test_config():
    c = gsbi.Config("tractable", {"train.epochs": "2"})
    assert "train.epochs = 2" in c.to_text()
    with pytest.raises(gsbi.GsbiError):
        gsbi.Config("desk", {"nope": "1"})


def test_pipeline(tmp_path):
    c = gsbi.Config("desk", {"data.episodes": "6", "data.grasps_per_episode": "4", "train.epochs": "1",
                             "opt.n_init": "40", "opt.n_steps": "10"})
    c.seed = 4
    g = gsbi.generate(c, str(tmp_path / "d.gsbi"))
    assert g["grasps"] == 24
    t = gsbi.train(c, str(tmp_path / "d.gsbi"), str(tmp_path / "w.gsbw"))
    assert len(t["best_validation"]) == 4
    e = gsbi.Ensemble.load(str(tmp_path / "w.gsbw"))
    a = gsbi.infer(c, e, 1, "map")
    b = gsbi.infer(c, e, 1, "map")
    assert np.array_equal(a["position"], b["position"])
    assert len(a["trace"]) == 11
    m = gsbi.infer(c, e, 1, "mle")
    assert m["prior_term"] == 0.0


def test_quick_verify():
    checks = gsbi.verify(seed=1)
    assert {c["criterion"] for c in checks} == set(range(1, 10))
    assert all(c["status"] in ("pass", "skip") for c in checks)
