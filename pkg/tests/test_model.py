
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import away_from_kinks, gradient_errors, tiny_model
from sgad.errors import RejectedInputError, TrainingDivergedError
from sgad.model import (
    AutoencoderLearner,
    RepresentationLearner,
    Schedule,
    ScoreGuidedComposite,
    SgaeModel,
    SgLossConfig,
    TraceTarget,
    build_model,
    decomposed_loss,
    encoder_preset,
    epsilon_from_percentile,
    forward_batch,
    kl_score_loss,
    load_checkpoint,
    loss_and_grads,
    predict_scores,
    reconstruction_loss,
    save_checkpoint,
    score_guided_loss,
    total_loss,
    train,
)
from sgad.numerics import DenseLayer, MlpNetwork, init_mlp

DEFAULT = SgLossConfig()


def identity_model(d=3, variant="plain_ae", decoder_shift=None):
    enc = MlpNetwork([DenseLayer(np.eye(d), np.zeros(d), "linear")])
    shift = np.zeros(d) if decoder_shift is None else np.asarray(decoder_shift, float)
    dec = MlpNetwork([DenseLayer(np.eye(d), shift, "linear")])
    cfg = SgLossConfig(variant=variant)
    scorer = init_mlp([d, 4, cfg.scorer_outputs], np.random.default_rng(0)) if cfg.has_scorer else None
    return SgaeModel(enc, dec, scorer, cfg)


# -- configuration & construction ------------------------------------------


def test_config_validation():
    with pytest.raises(RejectedInputError):
        SgLossConfig(mu0=7.0, a=6.0)
    with pytest.raises(RejectedInputError):
        SgLossConfig(eps_p=1.0)
    with pytest.raises(RejectedInputError):
        SgLossConfig(variant="vae")
    with pytest.raises(RejectedInputError):
        SgLossConfig(lambda_a=-1)


def test_defaults():
    assert (DEFAULT.a, DEFAULT.lambda_se, DEFAULT.lambda_a, DEFAULT.mu0, DEFAULT.eps_p) == (6.0, 0.01, 18.0, 0.01, 0.8)


@pytest.mark.parametrize("d, expected", [(14, (20,)), (30, (20,)), (51, (40, 20)), (60, (40, 20)), (191, (80, 40, 20))])
def test_encoder_preset(d, expected):
    assert encoder_preset(d) == expected


def test_build_model_dims():
    m = build_model(51, SgLossConfig())
    assert m.encoder.sizes == [51, 40, 20]
    assert m.decoder.sizes == [20, 40, 51]
    assert m.scorer.sizes == [20, 20, 10, 1]
    m2 = build_model(5, SgLossConfig(variant="normal"), (8, 3), (4,))
    assert m2.scorer.sizes == [3, 4, 2]
    assert build_model(5, SgLossConfig(variant="plain_ae")).scorer is None


def test_init_order_shared_across_variants():
    a = build_model(6, SgLossConfig(variant="original"), seed=9)
    b = build_model(6, SgLossConfig(variant="plain_ae"), seed=9)
    for p, q in zip(a.encoder.parameters() + a.decoder.parameters(), b.encoder.parameters() + b.decoder.parameters()):
        assert p.tobytes() == q.tobytes()


def test_model_rejects_inconsistent_dims():
    enc = init_mlp([4, 3], np.random.default_rng(0))
    dec = init_mlp([3, 5], np.random.default_rng(0))
    with pytest.raises(RejectedInputError):
        SgaeModel(enc, dec, None, SgLossConfig(variant="plain_ae"))


# -- forward ---------------------------------------------------------------


def test_forward_shapes():
    m = build_model(7, SgLossConfig(), (6, 4), (5,))
    fp = forward_batch(m, np.random.default_rng(0).normal(size=(11, 7)))
    assert fp.z.shape == (11, 4)
    assert fp.x_tilde.shape == (11, 7)
    assert fp.scores.shape == (11,)
    assert fp.recon_error.shape == (11,)
    assert np.all(fp.recon_error >= 0)


def test_forward_rejects_bad_width():
    m = build_model(7, SgLossConfig(), (6, 4), (5,))
    with pytest.raises(RejectedInputError):
        forward_batch(m, np.ones((2, 6)))


def test_identity_autoencoder_has_zero_error():
    m = identity_model()
    x = np.random.default_rng(1).normal(size=(8, 3))
    assert np.all(forward_batch(m, x).recon_error == 0)


def test_recon_error_hand_norm():
    m = identity_model(decoder_shift=[3.0, 4.0, 0.0])
    fp = forward_batch(m, [[0.3, -1.0, 2.0]])
    assert fp.recon_error[0] == pytest.approx(5.0, abs=1e-12)


# -- losses ----------------------------------------------------------------


def test_reconstruction_loss_examples():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert reconstruction_loss(x, x) == 0.0
    assert reconstruction_loss(x, x + [[3, 4], [0, 0]]) == pytest.approx(2.5)
    with pytest.raises(RejectedInputError):
        reconstruction_loss(x, x[:1])


@given(st.floats(0, 50))
def test_reconstruction_loss_homogeneous(c):
    rng = np.random.default_rng(0)
    x, xt = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    base = reconstruction_loss(x, xt)
    assert reconstruction_loss(x, x + c * (xt - x)) == pytest.approx(c * base, rel=1e-12, abs=1e-12)


def test_epsilon_rank_convention():
    errors = np.arange(1.0, 11.0)
    eps = epsilon_from_percentile(errors, 0.8)
    assert eps == 8.0
    assert list(errors[errors < eps]) == [1, 2, 3, 4, 5, 6, 7]


def test_epsilon_ties_send_all_to_abnormal_branch():
    errors = np.full(9, 0.4)
    eps = epsilon_from_percentile(errors, 0.5)
    assert np.all(errors >= eps)


def test_epsilon_small_percentile_keeps_only_minimum_normal():
    errors = np.random.default_rng(0).permutation(np.linspace(0.1, 3.0, 20))
    eps = epsilon_from_percentile(errors, 1 / 20 + 1e-6)
    assert np.sum(errors < eps) == 1
    assert errors[errors < eps][0] == errors.min()


def test_epsilon_float_rank_guard():
    # 0.7 * 10 evaluates to 7.000000000000001
    assert epsilon_from_percentile(np.arange(1.0, 11.0), 0.7) == 7.0


def test_epsilon_rejects_empty():
    with pytest.raises(RejectedInputError):
        epsilon_from_percentile([], 0.5)


def test_score_guided_saturation_and_hand_value():
    assert score_guided_loss([DEFAULT.mu0] * 3, [0.1, 0.2, 0.3], eps=1.0, cfg=DEFAULT) == 0.0
    assert score_guided_loss([6.0, 9.0], [2.0, 3.0], eps=1.0, cfg=DEFAULT) == 0.0
    assert score_guided_loss([0.0], [5.0], eps=1.0, cfg=DEFAULT) == pytest.approx(108.0)


def test_decomposed_loss_examples():
    assert decomposed_loss([0.0, 1.0], [5.0, 6.0], 1.0, lambda_normal=1.0, lambda_abnormal=0.0) == 0.0
    assert decomposed_loss([DEFAULT.mu0 + 2], [0.1], 1.0, 1.0, 0.0, mu0=DEFAULT.mu0) == pytest.approx(2.0)


@settings(max_examples=200)
@given(
    st.lists(st.tuples(st.floats(-10, 10), st.floats(0, 5)), min_size=1, max_size=30),
    st.floats(0, 5),
    st.floats(0, 1),
    st.floats(0, 40),
)
def test_decomposed_equals_scaled_score_guided(rows, eps, lam_se, lam_a):
    s, e = map(np.array, zip(*rows))
    cfg = SgLossConfig(lambda_se=lam_se, lambda_a=lam_a)
    lhs = decomposed_loss(s, e, eps, lam_se, lam_se * lam_a, cfg.mu0, cfg.a)
    rhs = lam_se * score_guided_loss(s, e, eps, cfg)
    assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(rhs))


@given(st.lists(st.floats(-20, 20), min_size=2, max_size=20), st.integers(0, 19), st.floats(-20, 20))
def test_hinge_monotone_for_abnormal_branch(s, k, bump):
    s = np.array(s)
    k %= s.size
    errors = np.ones_like(s)  # all abnormal with eps = 0.5
    base = score_guided_loss(s, errors, 0.5, DEFAULT)
    s2 = s.copy()
    s2[k] += abs(bump)
    assert score_guided_loss(s2, errors, 0.5, DEFAULT) <= base + 1e-12


def test_normal_branch_minimum_at_mu0():
    grid = np.linspace(-3, 3, 601)
    vals = [score_guided_loss([v], [0.0], 1.0, DEFAULT) for v in grid]
    assert grid[int(np.argmin(vals))] == pytest.approx(DEFAULT.mu0, abs=0.006)
    assert score_guided_loss([DEFAULT.mu0], [0.0], 1.0, DEFAULT) == 0.0


def test_branch_change_affects_only_that_sample():
    rng = np.random.default_rng(0)
    s, e = rng.normal(size=10), rng.uniform(0, 2, size=10)
    eps = 1.0
    n = s.size
    per_sample = lambda si, ei: score_guided_loss([si], [ei], eps, DEFAULT)
    base = score_guided_loss(s, e, eps, DEFAULT)
    e2 = e.copy()
    e2[3] = 0.5 if e[3] >= eps else 1.5
    delta = score_guided_loss(s, e2, eps, DEFAULT) - base
    assert delta == pytest.approx((per_sample(s[3], e2[3]) - per_sample(s[3], e[3])) / n, abs=1e-12)


def test_kl_examples():
    cfg = SgLossConfig(variant="normal")
    assert kl_score_loss([0.0], [1.0], [0.0], 1.0, cfg) == pytest.approx(0.0, abs=1e-15)
    assert kl_score_loss([1.0], [1.0], [0.0], 1.0, cfg) == pytest.approx(0.5)
    assert kl_score_loss([7.0], [0.3], [2.0], 1.0, cfg) == 0.0
    with pytest.raises(RejectedInputError):
        kl_score_loss([0.0], [1.0], [0.0], 1.0, DEFAULT)


def test_kl_closed_form_against_quadrature():
    from scipy import integrate, stats

    mu, sigma = 0.7, 0.4
    p, q = stats.norm(mu, sigma), stats.norm(0, 1)
    kl, _ = integrate.quad(lambda t: p.pdf(t) * (p.logpdf(t) - q.logpdf(t)), -10, 10)
    cfg = SgLossConfig(variant="lognormal")
    assert kl_score_loss([mu], [sigma], [0.0], 1.0, cfg) == pytest.approx(kl, rel=1e-8)


def test_total_loss_without_regularizer_is_reconstruction_loss():
    rng = np.random.default_rng(2)
    for variant in ("original", "recon", "normal"):
        m = build_model(4, SgLossConfig(variant=variant, lambda_se=0.0), (5, 3), (4,), seed=1)
        x = rng.normal(size=(12, 4))
        assert total_loss(x, m) == pytest.approx(reconstruction_loss(x, forward_batch(m, x).x_tilde), rel=1e-15)


def test_plain_ae_identity_loss_zero():
    m = identity_model()
    assert total_loss(np.random.default_rng(0).normal(size=(5, 3)), m) == 0.0


@pytest.mark.parametrize("variant", ["original", "recon", "normal", "lognormal", "plain_ae"])
@pytest.mark.parametrize("seed", range(4))
def test_total_loss_gradients(variant, seed):
    rng = np.random.default_rng(seed)
    m = tiny_model(rng, variant)
    x = rng.normal(size=(40, m.input_dim))
    if variant == "recon":
        # keep errors straddling mu0 and a so both hinge pieces are active
        x *= 3.0
    x, eps = away_from_kinks(m, x)
    assert x.shape[0] >= 10
    errs = gradient_errors(m, x, eps)
    assert np.mean(errs < 1e-4) >= 0.99
    assert errs.max() < 1e-3


def test_recon_variant_scores_are_errors():
    m = build_model(3, SgLossConfig(variant="recon"), (4, 2), seed=0)
    x = np.random.default_rng(0).normal(size=(6, 3))
    np.testing.assert_array_equal(predict_scores(m, x), forward_batch(m, x).recon_error)


# -- prediction ----------------------------------------------------------


@pytest.mark.parametrize("variant", ["original", "normal", "plain_ae"])
def test_predict_batch_consistency(variant):
    m = build_model(5, SgLossConfig(variant=variant), (6, 3), (4,), seed=3)
    x = np.random.default_rng(3).normal(size=(9, 5))
    whole = predict_scores(m, x)
    rows = np.concatenate([predict_scores(m, x[i : i + 1]) for i in range(9)])
    np.testing.assert_allclose(whole, rows, rtol=1e-13, atol=1e-15)


def test_predict_plain_ae_identity_is_zero():
    m = identity_model()
    assert np.all(predict_scores(m, np.ones((4, 3))) == 0)


def test_predict_does_not_mutate():
    m = build_model(5, SgLossConfig(), (6, 3), (4,), seed=3)
    before = [p.copy() for p in m.parameters()]
    predict_scores(m, np.ones((3, 5)))
    assert all(np.array_equal(a, b) for a, b in zip(before, m.parameters()))


# -- training ------------------------------------------------------------


def blobs(n=400, d=3, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d))
    y = (rng.random(n) < 0.1).astype(int)
    x[y == 1] += 3.0
    return x, y


def test_training_reduces_reconstruction():
    x, _ = blobs()
    m = build_model(3, SgLossConfig(lambda_se=0.0), (3,), seed=0)
    m.encoder.layers[0].activation = "linear"
    before = reconstruction_loss(x, forward_batch(m, x).x_tilde)
    best, trace = train(m, x, x, Schedule(epochs=1, batch_size=32, learning_rate=1e-2, seed=0))
    assert reconstruction_loss(x, forward_batch(m, x).x_tilde) < before
    assert trace.epochs == 1


def test_training_is_deterministic():
    x, _ = blobs()
    runs = []
    for _ in range(2):
        m = build_model(3, SgLossConfig(), (6, 2), (4,), seed=5)
        best, trace = train(m, x, x[:100], Schedule(epochs=3, batch_size=64, seed=7, learning_rate=1e-3))
        runs.append((best, trace))
    (b1, t1), (b2, t2) = runs
    assert t1.train_loss == t2.train_loss and t1.val_loss == t2.val_loss
    assert all(p.tobytes() == q.tobytes() for p, q in zip(b1.parameters(), b2.parameters()))


def test_labels_do_not_influence_training():
    x, y = blobs()
    fields = np.random.default_rng(1).integers(0, 4, size=x.shape[0])
    params = []
    for labels in (y, np.random.default_rng(2).permutation(y)):
        m = build_model(3, SgLossConfig(), (6, 2), (4,), seed=5)
        best, _ = train(m, x, x[:100], Schedule(epochs=2, batch_size=64, seed=1), TraceTarget(x, labels, fields))
        params.append(b"".join(p.tobytes() for p in best.parameters()))
    assert params[0] == params[1]


def test_train_returns_lowest_validation_snapshot():
    x, _ = blobs()
    m = build_model(3, SgLossConfig(), (6, 2), (4,), seed=5)
    best, trace = train(m, x, x[:100], Schedule(epochs=5, batch_size=64, seed=1, learning_rate=1e-3))
    assert trace.best_epoch == int(np.argmin(trace.val_loss)) + 1
    assert total_loss(x[:100], best) == pytest.approx(min(trace.val_loss), rel=1e-12)


def test_oversized_batch_falls_back_to_full_batch(caplog):
    x, _ = blobs(n=50)
    m = build_model(3, SgLossConfig(), (4, 2), (3,), seed=0)
    with caplog.at_level("WARNING"):
        _, trace = train(m, x, x, Schedule(epochs=1, batch_size=1024))
    assert "exceeds" in caplog.text
    assert trace.epochs == 1


def test_epoch_scope_epsilon_runs():
    x, _ = blobs(n=100)
    m = build_model(3, SgLossConfig(), (4, 2), (3,), seed=0)
    _, trace = train(m, x, x, Schedule(epochs=2, batch_size=32, eps_scope="epoch"))
    assert trace.epochs == 2


def test_non_finite_loss_aborts_with_location():
    x, _ = blobs(n=64)
    m = build_model(3, SgLossConfig(), (4, 2), (3,), seed=0)
    for p in m.parameters():
        p[...] = 1e200
    with np.errstate(all="ignore"), pytest.raises(TrainingDivergedError) as info:
        train(m, x, x, Schedule(epochs=2, batch_size=16))
    assert info.value.epoch == 1 and info.value.batch == 0


def test_schedule_validation():
    with pytest.raises(RejectedInputError):
        Schedule(epochs=0)
    with pytest.raises(RejectedInputError):
        Schedule(batch_size=0)


# -- checkpoint & composition ------------------------------------------


@pytest.mark.parametrize("variant", ["original", "normal", "plain_ae"])
def test_checkpoint_round_trip_bitwise(tmp_path, variant):
    m = build_model(6, SgLossConfig(variant=variant, a=5.5), (7, 3), (4,), seed=2)
    for p in m.parameters():
        p += np.random.default_rng(0).normal(size=p.shape) * 1e-3 / 3.0
    save_checkpoint(m, tmp_path / "m.json")
    back = load_checkpoint(tmp_path / "m.json")
    assert back.config == m.config
    assert [l.activation for l in back.encoder.layers] == [l.activation for l in m.encoder.layers]
    assert all(p.tobytes() == q.tobytes() for p, q in zip(m.parameters(), back.parameters()))


def test_checkpoint_rejects_foreign_file(tmp_path):
    (tmp_path / "x.json").write_text('{"format": "other"}')
    with pytest.raises(RejectedInputError):
        load_checkpoint(tmp_path / "x.json")


def test_score_guided_composite_matches_sgae():
    m = build_model(4, SgLossConfig(), (5, 3), (4,), seed=0)
    learner = AutoencoderLearner(m)
    assert isinstance(learner, RepresentationLearner)
    comp = ScoreGuidedComposite(learner, m.scorer, m.config)
    x = np.random.default_rng(0).normal(size=(20, 4))
    np.testing.assert_array_equal(comp.scores(x), predict_scores(m, x))
    parts, _ = loss_and_grads(m, x)
    assert comp.total_loss(x, parts.recon) == pytest.approx(parts.total, rel=1e-14)


def test_composite_rejects_dim_mismatch():
    m = build_model(4, SgLossConfig(), (5, 3), (4,), seed=0)
    with pytest.raises(RejectedInputError):
        ScoreGuidedComposite(AutoencoderLearner(m), init_mlp([5, 1], np.random.default_rng(0)))
