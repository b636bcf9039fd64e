import math

import numpy as np
import pytest

import moelab


def test_route_example_scores():
    # logits from an identity router reproduce probs [0.5, 0.3, 0.2] after softmax
    logits = np.log(np.array([[0.5, 0.3, 0.2]]))
    router = np.eye(3)
    experts = [np.eye(3) for _ in range(3)]
    state = moelab.route(router, experts, 2, logits)
    np.testing.assert_allclose(state["scores"], [[0.625, 0.375, 0.0]], atol=1e-15)
    assert state["selected"] == [[0, 1]]


def test_forward_shapes_and_mixture():
    rng = np.random.default_rng(0)
    router = rng.normal(size=(4, 3))
    experts = [rng.normal(size=(4, 2)) for _ in range(3)]
    x = rng.normal(size=(5, 4))
    y = moelab.forward(router, experts, 2, x)
    assert y.shape == (5, 2)
    scores = moelab.route(router, experts, 2, x)["scores"]
    expected = sum(scores[:, [j]] * (x @ experts[j]) for j in range(3))
    np.testing.assert_allclose(y, expected, rtol=1e-12, atol=1e-12)


def test_forward_backward_task_gradient_matches_numpy():
    rng = np.random.default_rng(1)
    router = rng.normal(size=(3, 2))
    experts = [rng.normal(size=(3, 2)) for _ in range(2)]
    x = rng.normal(size=(6, 3))
    t = rng.normal(size=(6, 2))
    w = moelab.LossWeights()
    w.alpha = w.beta = w.gamma = 0.0
    out = moelab.forward_backward(router, experts, 1, x, t, w)
    y = moelab.forward(router, experts, 1, x)
    assert out["l_h"] == pytest.approx(np.mean((y - t) ** 2), rel=1e-12)
    # k = 1 pins every score to one, so only the selected expert's map moves
    sel = [s[0] for s in moelab.route(router, experts, 1, x)["selected"]]
    g = 2.0 / y.size * (y - t)
    for j in range(2):
        rows = [i for i, s in enumerate(sel) if s == j]
        np.testing.assert_allclose(out["d_experts"][j], x[rows].T @ g[rows], atol=1e-12)
    np.testing.assert_array_equal(out["d_router"], np.zeros((3, 2)))


def test_dimension_mismatch_raises():
    with pytest.raises(ValueError):
        moelab.route(np.eye(3), [np.eye(3)] * 3, 2, np.ones((2, 4)))
    with pytest.raises(ValueError):
        moelab.route(np.eye(3), [np.eye(3)] * 3, 4, np.ones((2, 3)))


def test_metrics_hand_values():
    assert moelab.maxvio([1, 1, 1, 1]) == 0.0
    assert moelab.maxvio([4, 0, 0, 0]) == 3.0
    assert moelab.rmse([0, 0], [3, 4]) == pytest.approx(math.sqrt(12.5))
    pts = np.array([[0.0], [1.0], [10.0], [11.0]])
    assert moelab.silhouette(pts, [0, 0, 1, 1]) == pytest.approx((9.5 / 10.5 + 8.5 / 9.5) / 2)
    assert moelab.expert_overlap(np.array([[0.0], [1.0], [2.0], [3.0]]), [0, 1, 0, 1], 1) == 1.0
    assert moelab.routing_variance(np.array([[1.0, 0.0], [1.0, 0.0]])) == 0.25


def test_lemma_example():
    assert moelab.find_cycle(np.ones((2, 2))) == "r0-c0-r1-c1"
    assert moelab.find_cycle(moelab.balanced_support(4, 4, 1)) is None
    cert = moelab.certify_lemma1(2, 2, 2, 0.25)
    assert cert["passed"]
    assert cert["expected_variance"] == 0.0625
    np.testing.assert_allclose(cert["perturbed"], [[0.75, 0.25], [0.25, 0.75]])
    assert moelab.certify_lemma1(2, 4, 2, 0.1) is None


def test_gradcheck_passes():
    report = moelab.gradcheck(7)
    assert report["instances"] == 20
    assert report["passed"]
    assert report["max_rel_err"] <= 1e-5


def small_config():
    c = moelab.ExperimentConfig()
    c.update({"d": "6", "d_out": "3", "n": "4", "N_batch": "32", "steps": "15", "n_domains": "3"})
    return c


def test_train_records_and_determinism():
    c = small_config()
    records = moelab.train(c, 3)
    assert [r["step"] for r in records] == list(range(15))
    assert all(math.isfinite(r["total"]) for r in records)
    assert moelab.log_csv(c, 3) == moelab.log_csv(c, 3)
    assert moelab.log_csv(c, 3).splitlines()[0].startswith("step,loss_h,loss_aux")


def test_config_errors():
    c = moelab.ExperimentConfig()
    with pytest.raises(ValueError):
        c.update({"colour": "red"})
    c.ablation = moelab.Ablation.ONLY_AUX
    assert "ablation=only_aux" in c.to_text()
