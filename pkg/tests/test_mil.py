import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from milsurv.bags import CaseBag, Slide
from milsurv.errors import NumericalError, ValidationError
from milsurv.mil import (
    AdamState,
    ArchConfig,
    Checkpoint,
    Ensemble,
    LrSchedule,
    MilModel,
    TrainConfig,
    adam_step,
    batch_cox_loss,
    best_checkpoint,
    cox_loss,
    ensemble_top,
    forward,
    grad,
    hyperparam_search,
    infer_case,
    init_model,
    sample_bag,
    select_checkpoint,
    train,
)
from milsurv.mil.model import EncoderParams
from milsurv.mil.search import sample_configs
from milsurv.mil.training import loss_and_grad
from milsurv.records import make_records
from milsurv.survival import concordance_arrays
from milsurv.synth import GeneratorConfig, generate

import oracles

NO_COV = {"age": 0.0, "stage": 0.0, "grade": 0.0, "sex": 0.0}


def linear_model(w, b=0.0):
    """One-layer identity encoder followed by the head (w, b)."""
    d = len(w)
    return MilModel(EncoderParams([np.eye(d)], [np.zeros(d)]), np.asarray(w, float), np.array([b]))


def case(patches, cid="c0", split_rows=None):
    patches = np.asarray(patches, float)
    coords = np.column_stack([np.arange(len(patches)), np.zeros(len(patches), int)])
    if split_rows is None:
        return CaseBag(cid, (Slide(cid + "s0", patches, coords),))
    a, b = patches[:split_rows], patches[split_rows:]
    return CaseBag(cid, (Slide(cid + "s0", a, coords[:split_rows]), Slide(cid + "s1", b, coords[split_rows:])))


# forward ----------------------------------------------------------------------


def test_forward_identity_single_patch():
    m = linear_model([0.5, -2.0, 1.0], b=0.25)
    out = forward(m, [[1.0, 2.0, 3.0]])
    assert out.case_score == pytest.approx(0.5 - 4.0 + 3.0 + 0.25)


def test_forward_identical_patches_and_zero_head():
    rng = np.random.default_rng(0)
    m = init_model(5, ArchConfig(2, 8, 1.5, 16), rng)
    x = rng.normal(size=(1, 5))
    assert forward(m, np.repeat(x, 7, axis=0)).case_score == pytest.approx(forward(m, x).case_score)
    m.head_w[:] = 0.0
    m.head_b[:] = 1.7
    assert forward(m, rng.normal(size=(9, 5))).case_score == 1.7


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 20))
def test_case_score_is_mean_of_patch_scores(seed, m):
    rng = np.random.default_rng(seed)
    model = init_model(4, ArchConfig(int(rng.integers(1, 4)), 6, 1.5, 12), rng)
    out = forward(model, rng.normal(size=(m, 4)))
    assert out.case_score == pytest.approx(out.patch_scores.mean(), abs=1e-12)


def test_forward_errors():
    m = linear_model([1.0, 1.0])
    with pytest.raises(ValidationError):
        forward(m, np.zeros((3, 4)))
    with pytest.raises(ValidationError):
        forward(m, np.zeros((0, 2)))


# sampling ---------------------------------------------------------------------


def test_sample_bag_examples():
    x = np.arange(32.0).reshape(16, 2)
    got = sample_bag(case(x), 16, np.random.default_rng(1))
    assert sorted(map(tuple, got.tolist())) == sorted(map(tuple, x.tolist()))
    one = sample_bag(case([[3.0, 4.0]]), 16, np.random.default_rng(2))
    assert one.shape == (16, 2) and np.all(one == [3.0, 4.0])
    a = sample_bag(case(x, split_rows=5), 8, np.random.default_rng(3))
    b = sample_bag(case(x, split_rows=5), 8, np.random.default_rng(3))
    assert np.array_equal(a, b)


def test_sample_bag_per_slide_and_empty():
    x = np.arange(20.0).reshape(10, 2)
    got = sample_bag(case(x, split_rows=3), 50, np.random.default_rng(0), per_slide=True)
    rows = {tuple(r) for r in x.tolist()}
    assert all(tuple(r) in rows for r in got.tolist())
    with pytest.raises(ValidationError, match="empty ROI"):
        sample_bag(case(np.zeros((0, 2))), 4, np.random.default_rng(0))


# loss -------------------------------------------------------------------------


def test_loss_examples():
    recs = make_records([1, 1, 2], [True, True, True])
    assert batch_cox_loss([0.0, 0.0, 0.0], recs) == pytest.approx(2 * math.log(3), abs=1e-12)
    single = make_records([5], [True])
    for s in (-3.0, 0.0, 11.0):
        assert batch_cox_loss([s], single) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValidationError, match="uninformative batch"):
        batch_cox_loss([0.0, 1.0], make_records([1, 2], [False, False]))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-50, 50))
def test_loss_shift_invariant(seed, c):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 12))
    t = rng.integers(1, 6, n)
    e = rng.random(n) < 0.6
    e[0] = True
    s = rng.normal(size=n)
    assert cox_loss(s + c, t, e)[0] == pytest.approx(cox_loss(s, t, e)[0], rel=1e-9, abs=1e-9)


# gradients --------------------------------------------------------------------


def random_instance(rng):
    d = int(rng.integers(2, 5))
    arch = ArchConfig(int(rng.integers(1, 4)), int(rng.integers(2, 5)), 1.5, 6)
    model = init_model(d, arch, rng)
    params = [rng.normal(size=p.shape) for p in model.parameters()]
    model = MilModel.from_parameters(params)
    b, n = int(rng.integers(2, 7)), int(rng.integers(1, 4))
    bags = rng.normal(size=(b, n, d))
    t = rng.integers(1, 5, b)
    e = rng.random(b) < 0.7
    e[0] = True
    return model, bags, t, e


def has_kink(model, bags):
    h = bags.reshape(-1, bags.shape[-1])
    ws, bs = model.encoder.weights, model.encoder.biases
    for i, (w, b) in enumerate(zip(ws, bs)):
        z = h @ w + b
        if i < len(ws) - 1 and np.any(np.abs(z) < 1e-3):
            return True
        h = np.maximum(z, 0.0)
    return False


def numeric_grad(model, bags, t, e, l2):
    def f(params):
        return loss_and_grad(MilModel.from_parameters(params), bags, t, e, l2)[0]

    return oracles.finite_difference(f, [p.copy() for p in model.parameters()])


def gradient_error(model, bags, t, e, l2):
    _, analytic = loss_and_grad(model, bags, t, e, l2)
    numeric = numeric_grad(model, bags, t, e, l2)
    scale = max(max(np.max(np.abs(a)) for a in analytic), 1.0)
    return max(np.max(np.abs(a - n)) for a, n in zip(analytic, numeric)) / scale


def gradient_errors(n_instances, seed=2024):
    """Errors on ``n_instances`` random instances away from ReLU kinks."""
    rng = np.random.default_rng(seed)
    errs = []
    while len(errs) < n_instances:
        model, bags, t, e = random_instance(rng)
        if has_kink(model, bags):
            continue
        errs.append(gradient_error(model, bags, t, e, float(rng.choice([0.0, 1e-3]))))
    return errs


def test_gradient_matches_finite_differences():
    assert max(gradient_errors(100)) < 1e-6


def test_head_bias_gradient_is_zero():
    rng = np.random.default_rng(5)
    for _ in range(20):
        model, bags, t, e = random_instance(rng)
        _, g = loss_and_grad(model, bags, t, e, 0.0)
        assert abs(g[-1][0]) < 1e-12


def test_grad_zero_event_batch():
    m = linear_model([1.0, 0.0])
    with pytest.raises(ValidationError):
        grad(m, np.ones((2, 1, 2)), make_records([1, 2], [False, False]))


# optimizer --------------------------------------------------------------------


def test_adam_zero_gradient_keeps_params():
    p = [np.array([1.0, -2.0])]
    st_ = AdamState([np.array([0.4, 0.4])], [np.array([0.1, 0.1])], 3)
    new_p, new_s = adam_step(p, [np.zeros(2)], st_, LrSchedule(0.1), 3)
    # the first moment is not zero, so only check the moments decay
    assert np.all(np.abs(new_s.m[0]) < 0.4) and np.all(new_s.v[0] < 0.1)
    fresh = AdamState.zeros_like(p)
    new_p, _ = adam_step(p, [np.zeros(2)], fresh, LrSchedule(0.1), 0)
    assert np.array_equal(new_p[0], p[0])


def test_adam_first_step_magnitude_is_lr():
    p = [np.array([1.0, 1.0, 1.0])]
    g = [np.array([3.0, -0.02, 1e3])]
    new_p, s = adam_step(p, g, AdamState.zeros_like(p), LrSchedule(0.01), 0)
    assert np.allclose(new_p[0] - p[0], -0.01 * np.sign(g[0]), rtol=1e-5)
    assert s.t == 1
    again, _ = adam_step(p, g, AdamState.zeros_like(p), LrSchedule(0.01), 0)
    assert np.array_equal(again[0], new_p[0])


def test_adam_errors():
    p = [np.zeros(2)]
    with pytest.raises(NumericalError, match="numerical blowup"):
        adam_step(p, [np.array([np.nan, 0.0])], AdamState.zeros_like(p), LrSchedule(), 0)
    with pytest.raises(ValidationError):
        adam_step(p, [np.zeros(3)], AdamState.zeros_like(p), LrSchedule(), 0)


def test_lr_schedule_staircase():
    s = LrSchedule(1.0, 10, 0.5)
    assert [s.at(k) for k in (0, 9, 10, 19, 20, 35)] == [1.0, 1.0, 0.5, 0.5, 0.25, 0.125]


# checkpoints ------------------------------------------------------------------


def ckpts(metrics):
    return [Checkpoint(i + 1, None, m) for i, m in enumerate(metrics)]


def test_select_checkpoint_examples():
    c = ckpts([0.6] * 12)
    assert select_checkpoint(c, 10).step == 12
    c = ckpts(np.linspace(0.5, 0.9, 15))
    assert select_checkpoint(c, 10).step == 15
    spike = ckpts([0.5] * 9 + [0.9] + [0.5] * 10)
    got = select_checkpoint(spike, 10).step
    assert 10 <= got <= 19  # every window holding the spike has the same mean; latest wins
    assert got == 19
    with pytest.raises(ValidationError):
        select_checkpoint(ckpts([0.5] * 3), 10)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.3, 0.9), min_size=3, max_size=25), st.integers(1, 3), st.integers(1, 10))
def test_select_checkpoint_stable_under_worse_tail(metrics, window, extra):
    c = ckpts(metrics)
    if len(c) < window:
        return
    best = select_checkpoint(c, window)
    best_mean = max(math.fsum(metrics[i - window + 1 : i + 1]) / window for i in range(window - 1, len(metrics)))
    # appending values far below every window mean keeps all new windows lower
    tail = ckpts(metrics + [0.0] * extra)
    assert select_checkpoint(tail, window).step == best.step
    assert best_mean > 0.0


def test_best_checkpoint_short_run():
    c = ckpts([0.5, 0.7, 0.6])
    best, w = best_checkpoint(c, 10)
    assert w == 3 and best.step == 3 and best.smoothed_metric == pytest.approx(0.6)
    with pytest.raises(ValidationError):
        best_checkpoint([], 10)


# ensemble and inference -------------------------------------------------------


def tune_bags(rng, n=12, d=2):
    return [case(rng.normal(size=(int(rng.integers(1, 6)), d)), f"t{i}") for i in range(n)]


def test_ensemble_examples():
    rng = np.random.default_rng(0)
    bags = tune_bags(rng)
    a = linear_model([1.0, 0.5])
    one = ensemble_top([(a, 0.7)], bags, k=1)
    x = rng.normal(size=(5, 2))
    raw = x @ a.head_w
    assert np.allclose(one.patch_scores(x), (raw - one.means[0]) / one.stds[0])

    same = ensemble_top([(a, 0.7), (a.copy(), 0.6)], bags, k=2)
    assert np.allclose(same.patch_scores(x), one.patch_scores(x))

    neg = linear_model([-1.0, -0.5])
    opp = ensemble_top([(a, 0.7), (neg, 0.6)], bags, k=2)
    assert np.allclose(opp.patch_scores(x), 0.0, atol=1e-12)


def test_ensemble_keeps_top_k():
    rng = np.random.default_rng(1)
    bags = tune_bags(rng)
    models = [linear_model([1.0, float(i)]) for i in range(4)]
    ens = ensemble_top(list(zip(models, [0.5, 0.8, 0.6, 0.8])), bags, k=2)
    assert ens.members[0] is models[1] and ens.members[1] is models[3]
    with pytest.raises(ValidationError):
        ensemble_top(list(zip(models, [0.5] * 4)), bags, k=5)
    with pytest.raises(ValidationError):
        Ensemble((), (), ())


def test_infer_case_properties():
    rng = np.random.default_rng(2)
    ens = ensemble_top([(linear_model([0.3, -1.0]), 0.7)], tune_bags(rng), k=1)
    x = rng.normal(size=(7, 2))
    res = infer_case(ens, case(x, split_rows=3))
    assert res.case_score == pytest.approx(res.patch_scores.mean())
    assert res.patch_scores.size == 7 and len(res.slide_ids) == 7
    dup = infer_case(ens, case(np.vstack([x, x])))
    assert dup.case_score == pytest.approx(res.case_score, abs=1e-12)
    assert infer_case(ens, case(x, split_rows=3)).case_score == res.case_score
    with pytest.raises(ValidationError, match="no tumor patches"):
        infer_case(ens, case(np.zeros((0, 2))))


# training ---------------------------------------------------------------------


def cohort(n=300, betas=None, seed=0):
    cfg = GeneratorConfig(n_cases=n, heatmaps=False, seed=seed, covariate_betas=NO_COV)
    if betas is not None:
        cfg = replace(cfg, prototype_risk_betas=betas)
    co = generate(cfg)
    return co.records, co.bags


SMALL_TRAIN = TrainConfig(total_steps=40, eval_every=10, batch_size=32, base_depth=8, max_depth=16,
                          rolling_window=2, learning_rate=5e-3)


def test_training_is_deterministic():
    recs, bags = cohort(120)
    a = train(recs, bags, SMALL_TRAIN)
    b = train(recs, bags, SMALL_TRAIN)
    assert [c.tune_metric for c in a.checkpoints] == [c.tune_metric for c in b.checkpoints]
    assert all(np.array_equal(p, q) for p, q in zip(a.model.parameters(), b.model.parameters()))
    assert len(a.log_rows) == 4


def test_resume_matches_uninterrupted():
    recs, bags = cohort(120)
    full = train(recs, bags, SMALL_TRAIN)
    half = train(recs, bags, replace(SMALL_TRAIN, total_steps=20))
    rest = train(recs, bags, SMALL_TRAIN, model=half.model, adam=half.adam, start_step=half.step)
    assert [c.step for c in rest.checkpoints] == [30, 40]
    assert all(np.array_equal(p, q) for p, q in zip(full.model.parameters(), rest.model.parameters()))


def test_loss_decreases_on_fixed_batch():
    recs, bags = cohort(200, seed=3)
    train_recs = [r for r in recs if r.split == "train"][:64]
    by_id = {b.case_id: b for b in bags}
    rng = np.random.default_rng(0)
    x = np.stack([sample_bag(by_id[r.case_id], 16, rng) for r in train_recs])
    t = np.array([r.time_months for r in train_recs])
    e = np.array([r.event for r in train_recs])
    model = init_model(x.shape[-1], ArchConfig(2, 16, 1.5, 32), np.random.default_rng(1))
    params = model.parameters()
    state = AdamState.zeros_like(params)
    losses = []
    for step in range(100):
        loss, g = loss_and_grad(MilModel.from_parameters(params), x, t, e, 0.0)
        losses.append(loss)
        params, state = adam_step(params, g, state, LrSchedule(1e-3), step)
    assert losses[-1] < losses[0]
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


def test_planted_signal_is_learned():
    recs, bags = cohort(600, seed=11)
    cfg = TrainConfig(total_steps=1500, eval_every=100, rolling_window=3, seed=1)
    res = train(recs, bags, cfg)
    assert res.checkpoints[-1].tune_metric > 0.65


def test_null_signal_stays_at_chance():
    recs, bags = cohort(1000, betas=(0.0,) * 8, seed=12)
    cfg = TrainConfig(total_steps=600, eval_every=100, rolling_window=3, seed=1)
    res = train(recs, bags, cfg)
    assert 0.45 <= res.checkpoints[-1].tune_metric <= 0.55


def test_train_needs_splits():
    recs, bags = cohort(60)
    with pytest.raises(ValidationError):
        train([r for r in recs if r.split != "tune"], bags, SMALL_TRAIN)


# search -----------------------------------------------------------------------


def test_search_single_config():
    recs, bags = cohort(120)
    res = hyperparam_search(recs, bags, {"learning_rate": (5e-3,)}, n_configs=1, seed=0, base=SMALL_TRAIN)
    assert len(res) == 1 and res[0].ok and res[0].config.learning_rate == 5e-3


def test_search_configs_deterministic():
    space = {"learning_rate": (1e-2, 1e-3, 1e-4), "n_layers": (1, 2, 3), "l2_weight": (0.0, 1e-4)}
    a = sample_configs(space, 10, seed=4, base=TrainConfig())
    assert a == sample_configs(space, 10, seed=4, base=TrainConfig())
    assert a != sample_configs(space, 10, seed=5, base=TrainConfig())
    with pytest.raises(ValidationError):
        sample_configs({}, 3, 0, TrainConfig())


def test_search_ranks_zero_lr_last():
    recs, bags = cohort(300, seed=2)
    base = replace(SMALL_TRAIN, total_steps=200, eval_every=20, rolling_window=3)
    res = hyperparam_search(recs, bags, {"learning_rate": (0.0, 5e-3)}, seed=0, base=base, exhaustive=True)
    assert [r.config.learning_rate for r in res] == [5e-3, 0.0]
    # lr = 0 never moves: every checkpoint scores the initial model
    assert res[1].score == pytest.approx(res[1].checkpoint.tune_metric)


def test_search_failure_ranked_last():
    recs, bags = cohort(120)
    base = replace(SMALL_TRAIN, total_steps=5)  # no checkpoint is ever taken
    res = hyperparam_search(recs, bags, {"learning_rate": (5e-3,)}, n_configs=1, base=base)
    assert not res[0].ok and "no checkpoints" in res[0].error


def test_tune_cindex_matches_direct_scoring():
    recs, bags = cohort(120)
    res = train(recs, bags, SMALL_TRAIN)
    tune = [r for r in recs if r.split == "tune"]
    by_id = {b.case_id: b for b in bags}
    scores = [forward(res.checkpoints[-1].model, by_id[r.case_id].all_patches()).case_score for r in tune]
    t = np.array([r.time_months for r in tune])
    e = np.array([r.event for r in tune])
    assert concordance_arrays(np.array(scores), t, e) == pytest.approx(res.checkpoints[-1].tune_metric)
