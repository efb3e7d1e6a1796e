import numpy as np
import pytest

from softmpc.surrogate import (DenseNet, LipschitzBudget, SurrogateModel,
                               certify, load_model, save_model,
                               train_classifier, train_mode_model,
                               train_regressor)


def _toy_dataset(rng, n=400, d=6):
    thetas = rng.uniform(-2.0, 2.0, (n, d))
    # slack needed grows with the first coordinate shortfall
    needed = np.maximum(thetas[:, 0] + 0.5 * thetas[:, 1], 0.0)
    feasible = needed < 1.5
    slacks = np.where(feasible, needed, np.nan)[:, None]
    return thetas, feasible, slacks


def test_constant_target_learnable():
    rng = np.random.default_rng(0)
    thetas = rng.uniform(-1, 1, (300, 4))
    slacks = np.full((300, 1), 0.7)
    feasible = np.ones(300, dtype=bool)
    budget = LipschitzBudget(max_disturbance=10.0, max_state_step=1.0,
                             ceilings=np.array([5.0]))
    net, shift, scale, eps, stats = train_regressor(
        thetas, slacks, feasible, budget, epochs=2000, seed=1)
    assert eps <= 1e-3


def test_certified_bound_respects_budget():
    rng = np.random.default_rng(2)
    thetas, feasible, slacks = _toy_dataset(rng)
    budget = LipschitzBudget(max_disturbance=2.0, max_state_step=0.5,
                             ceilings=np.array([1.0]))  # tight cap: 0.4
    net, shift, scale, eps, stats = train_regressor(
        thetas, slacks, feasible, budget, epochs=400, seed=3)
    lip = net.lipschitz_per_output(scale)
    assert np.all(lip <= budget.caps() * (1 + 1e-9))


def test_sampled_quotient_never_exceeds_certificate():
    rng = np.random.default_rng(4)
    thetas, feasible, slacks = _toy_dataset(rng)
    budget = LipschitzBudget(max_disturbance=3.0, max_state_step=1.0,
                             ceilings=np.array([4.0]))
    model = train_mode_model("T", ("c0",), np.array([4.0]), thetas, feasible,
                             slacks, budget, epochs=400, seed=5)
    report = certify(model, n_pairs=100_000, seed=6)
    assert report["certified"]
    assert report["sampled_within_bound"]


def test_certify_examples_scaled_identity():
    # single linear layer 2*I: spectral bound per output is 2
    net = DenseNet([2.0 * np.eye(3)], [np.zeros(3)])
    model = SurrogateModel(
        mode_name="x", channels=("a", "b", "c"), ceilings=np.ones(3) * 9,
        regressor=net, classifier=DenseNet([np.ones((1, 3))], [np.zeros(1)]),
        input_shift=np.zeros(3), input_scale=np.ones(3),
        lipschitz_bound=np.full(3, 2.0), lipschitz_cap=np.full(3, 3.0),
        budget=LipschitzBudget(2.0, 1.0, np.full(3, 9.0)))
    rep = certify(model)
    np.testing.assert_allclose(rep["lipschitz"], 2.0)
    assert rep["certified"]
    model.lipschitz_cap = np.full(3, 1.0)
    rep = certify(model)
    assert not rep["certified"]
    assert rep["violations"] == ["a", "b", "c"]


def test_two_layer_product_rule():
    rng = np.random.default_rng(7)
    W1 = rng.normal(0, 1, (8, 5))
    W2 = rng.normal(0, 1, (2, 8))
    net = DenseNet([W1, W2], [np.zeros(8), np.zeros(2)])
    lip = net.lipschitz_per_output(np.ones(5))
    s1 = np.linalg.svd(W1, compute_uv=False)[0]
    rows = np.linalg.norm(W2, axis=1)
    np.testing.assert_allclose(lip, rows * s1, rtol=1e-12)


def test_rescale_uniform_scales_function():
    rng = np.random.default_rng(8)
    net = DenseNet.init(rng, (4, 16, 16, 2))
    x = rng.normal(0, 1, (20, 4))
    before = net.forward(x)
    net.rescale_uniform(0.25)
    after = net.forward(x)
    np.testing.assert_allclose(after, 0.25 * before, rtol=1e-10)


def test_classifier_separable_and_calibrated():
    rng = np.random.default_rng(9)
    thetas, feasible, slacks = _toy_dataset(rng, n=600)
    net, shift, scale, threshold, stats = train_classifier(
        thetas, feasible, seed=10)
    assert stats["accuracy_val"] >= 0.9
    assert stats["confusion_val"]["true_infeasible_pred_feasible"] == 0


def test_classifier_requires_both_classes():
    thetas = np.zeros((10, 3))
    with pytest.raises(ValueError, match="both classes"):
        train_classifier(thetas, np.ones(10, dtype=bool))


def test_label_flip_flips_predictions():
    rng = np.random.default_rng(11)
    thetas, feasible, _ = _toy_dataset(rng, n=500)
    net_a, shift, scale, thr_a, _ = train_classifier(thetas, feasible,
                                                     epochs=500, seed=12)
    net_b, _, _, thr_b, _ = train_classifier(thetas, ~feasible, epochs=500,
                                             seed=12, shift=shift, scale=scale)
    xn = (thetas - shift) / scale
    score_a = net_a.forward(xn)[:, 0]
    score_b = net_b.forward(xn)[:, 0]
    agree = np.mean((score_a > 0) == (score_b < 0))
    assert agree > 0.95


def test_infer_clamps_and_is_deterministic():
    rng = np.random.default_rng(13)
    thetas, feasible, slacks = _toy_dataset(rng)
    budget = LipschitzBudget(max_disturbance=3.0, max_state_step=1.0,
                             ceilings=np.array([0.1]))  # low ceiling: clamps
    model = train_mode_model("T", ("c0",), np.array([0.1]), thetas, feasible,
                             slacks, budget, epochs=300, seed=14)
    theta = thetas[0]
    s1, f1, t1 = model.infer(theta)
    s2, f2, _ = model.infer(theta)
    np.testing.assert_array_equal(s1, s2)
    assert f1 == f2
    assert np.all(s1 <= 0.1 + 1e-15)
    assert np.all(s1 >= 0.0)


def test_training_point_error_within_eps():
    rng = np.random.default_rng(15)
    thetas, feasible, slacks = _toy_dataset(rng, n=500)
    budget = LipschitzBudget(max_disturbance=3.0, max_state_step=1.0,
                             ceilings=np.array([4.0]))
    model = train_mode_model("T", ("c0",), np.array([4.0]), thetas, feasible,
                             slacks, budget, epochs=1200, seed=16)
    # a feasible training sample with zero target stays within the margin
    zero_idx = np.where(feasible & (slacks[:, 0] == 0.0))[0]
    assert zero_idx.size > 0
    pred = model.predict_slack(thetas[zero_idx[:20]])
    assert float(np.max(pred)) <= model.eps + 1e-9


def test_model_json_round_trip(tmp_path):
    rng = np.random.default_rng(17)
    thetas, feasible, slacks = _toy_dataset(rng)
    budget = LipschitzBudget(max_disturbance=3.0, max_state_step=1.0,
                             ceilings=np.array([4.0]))
    model = train_mode_model("E9", ("c0",), np.array([4.0]), thetas, feasible,
                             slacks, budget, epochs=200, seed=18)
    fname = str(tmp_path / "m.json")
    save_model(model, fname)
    loaded = load_model(fname)
    assert loaded.mode_name == "E9"
    assert loaded.threshold == model.threshold
    assert loaded.eps == model.eps
    x = rng.normal(0, 1, (5, thetas.shape[1]))
    np.testing.assert_array_equal(loaded.predict_slack(x), model.predict_slack(x))
    np.testing.assert_array_equal(loaded.classify_score(x), model.classify_score(x))
    # byte-identical re-save
    fname2 = str(tmp_path / "m2.json")
    save_model(loaded, fname2)
    assert (tmp_path / "m.json").read_bytes() == (tmp_path / "m2.json").read_bytes()


def test_admissible_disturbance_budget():
    budget = LipschitzBudget(max_disturbance=30.0, max_state_step=4.0,
                             ceilings=np.array([30.0, 6.0]))
    caps = budget.caps()
    model = SurrogateModel(
        mode_name="x", channels=("a", "b"), ceilings=budget.ceilings,
        regressor=DenseNet([np.eye(2)], [np.zeros(2)]),
        classifier=DenseNet([np.ones((1, 2))], [np.zeros(1)]),
        input_shift=np.zeros(2), input_scale=np.ones(2),
        eps=0.5, lipschitz_bound=caps, lipschitz_cap=caps, budget=budget)
    got = model.admissible_disturbance(state_step_norm=2.0)
    expected = min((30.0 - 0.5) / caps[0], (6.0 - 0.5) / caps[1]) - 2.0
    assert got == pytest.approx(expected)
