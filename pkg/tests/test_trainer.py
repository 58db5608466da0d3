import numpy as np
import pytest

from streamproto.encoder import EncoderConfig, init_params
from streamproto.memory import MemoryConfig
from streamproto.objective import LossConfig
from streamproto.streams import EpisodeFrame, EpisodeSource, StreamConfig
from streamproto.trainer import (
    Adam,
    GradCheckConfig,
    NumericalError,
    TrainConfig,
    TrainState,
    evaluate,
    grad_check,
    learning_rate,
    train,
)

SMALL = StreamConfig(episode_length=12, num_contexts=1, max_classes_per_context=3, crp_concentration=2.0,
                     latent_dim=3, observation_dim=6, nuisance_std=0.5, world_seed=4)


def small_params(seed=0):
    return init_params(EncoderConfig("linear", 6, 3, seed=seed))


def test_adam_first_step_hand_evaluated():
    opt = Adam(lr=0.1)
    p = {"p": np.array(1.0)}
    g = {"p": 2 * p["p"]}
    new = opt.step(p, g)
    # m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
    assert float(new["p"]) == pytest.approx(1.0 - 0.1 * 2.0 / (2.0 + 1e-8), rel=1e-15)
    assert float(new["p"]) == pytest.approx(0.9, abs=1e-8)
    assert opt.m["p"].shape == p["p"].shape == opt.v["p"].shape


def test_learning_rate_schedule():
    cfg = TrainConfig(lr=1e-3, decay_steps=(40, 60), decay_factor=0.1)
    assert learning_rate(cfg, 0) == 1e-3
    assert learning_rate(cfg, 39) == 1e-3
    assert learning_rate(cfg, 40) == 1e-3 * 0.1
    assert learning_rate(cfg, 60) == 1e-3 * 0.1 ** 2
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(decay_factor=1.5)


def test_zero_steps_returns_initial_state():
    params = small_params()
    state = train(EpisodeSource(SMALL, 0), TrainConfig(total_steps=0), params, LossConfig(), MemoryConfig())
    assert state.step == 0 and state.adam.t == 0
    for k, v in params.arrays().items():
        assert state.params.arrays()[k].tobytes() == v.tobytes()


def test_training_is_deterministic():
    def run():
        return train(EpisodeSource(SMALL, 7), TrainConfig(total_steps=6), small_params(), LossConfig(), MemoryConfig())

    a, b = run(), run()
    for k in a.params.arrays():
        assert a.params.arrays()[k].tobytes() == b.params.arrays()[k].tobytes()


def test_resume_matches_uninterrupted():
    cfg = TrainConfig(total_steps=8)
    full = train(EpisodeSource(SMALL, 3), cfg, small_params(), LossConfig(), MemoryConfig())
    half = train(EpisodeSource(SMALL, 3), TrainConfig(total_steps=4), small_params(), LossConfig(), MemoryConfig())
    rest = train(EpisodeSource(SMALL, 3), cfg, small_params(), LossConfig(), MemoryConfig(), state=half)
    for k in full.params.arrays():
        assert full.params.arrays()[k].tobytes() == rest.params.arrays()[k].tobytes()


def test_fresh_memory_every_episode():
    seen = []
    from streamproto import trainer as tr

    original = tr.loss_and_grad

    def spy(frames, mem, params, config, *, alpha):
        seen.append(len(mem))
        return original(frames, mem, params, config, alpha=alpha)

    tr.loss_and_grad = spy
    try:
        train(EpisodeSource(SMALL, 0), TrainConfig(total_steps=3), small_params(), LossConfig(), MemoryConfig())
    finally:
        tr.loss_and_grad = original
    assert seen == [0, 0, 0]


def test_nan_loss_aborts_with_diagnostics():
    params = small_params()
    params.beta = float("nan")
    with pytest.raises(NumericalError, match="episode 0"):
        train(EpisodeSource(SMALL, 0), TrainConfig(total_steps=2), params, LossConfig(), MemoryConfig())


def test_on_step_rows_have_log_columns():
    rows = []
    train(EpisodeSource(SMALL, 0), TrainConfig(total_steps=2), small_params(), LossConfig(), MemoryConfig(),
          on_step=lambda s, r: rows.append(r))
    assert set(rows[0]) == {"step", "l_self", "l_ent", "l_new", "total", "p_new", "lr"}


def test_checkpoint_hook_interval():
    steps = []
    train(EpisodeSource(SMALL, 0), TrainConfig(total_steps=5, checkpoint_every=2), small_params(), LossConfig(),
          MemoryConfig(), on_checkpoint=lambda s: steps.append(s.step))
    assert steps == [2, 4]


# -- gradient check -------------------------------------------------------------------


def test_grad_check_identity_single_frame():
    rep = grad_check(GradCheckConfig(kind="identity", input_dim=4, episode_length=1))
    assert rep.max_rel_error < 1e-6


@pytest.mark.parametrize("stop", [False, True])
def test_grad_check_mlp_five_frames(stop):
    rep = grad_check(GradCheckConfig(kind="mlp", episode_length=5, stop_prototype_gradient=stop))
    assert rep.max_rel_error < 1e-4
    events = {b[0][0] for b in rep.branches[:-1]}
    assert events == {"create", "assign"}


def test_grad_check_through_eviction():
    rep = grad_check(GradCheckConfig(kind="linear", episode_length=5, capacity=1, require_mixed=False))
    assert rep.max_rel_error < 1e-4


def test_grad_check_catches_wrong_derivative():
    def corrupt(frames, params, grads):
        bad = dict(grads)
        bad["beta"] = grads["beta"] * 1.01 + 1e-3
        return bad

    rep = grad_check(GradCheckConfig(kind="linear", episode_length=3), grad_fn=corrupt)
    assert rep.max_rel_error > 1e-4


def test_grad_check_limits():
    with pytest.raises(ValueError):
        GradCheckConfig(input_dim=9)
    with pytest.raises(ValueError):
        GradCheckConfig(episode_length=6)


# -- evaluation ---------------------------------------------------------------------


def one_hot_episode(classes, dim=4):
    eye = np.eye(dim)
    return [EpisodeFrame(t, eye[c], eye[c], c) for t, c in enumerate(classes)]


def test_evaluate_perfect_embeddings():
    eps = [one_hot_episode([0, 1, 0, 1, 2, 2, 3]), one_hot_episode([3, 3, 1, 0])]
    # beta between the matching logit (-10) and the orthogonal one (0)
    params = init_params(EncoderConfig("identity", 4, 4), beta=-5.0)
    rep = evaluate(params, eps, "unsupervised", MemoryConfig())
    assert [r["ami"] for r in rep["episodes"]] == [1.0, 1.0]
    # at the initial beta only a high threshold separates the classes
    cold = evaluate(init_params(EncoderConfig("identity", 4, 4)), eps, "unsupervised", MemoryConfig())
    assert cold["ami"] < 1.0 and cold["ami_max"] == 1.0
    assert evaluate(params, eps, "supervised")["ap"] == 1.0


def test_evaluate_empty_and_unlabeled():
    params = init_params(EncoderConfig("identity", 4, 4))
    assert evaluate(params, [], "unsupervised") == {}
    ep = one_hot_episode([0, 1])
    ep[1].label = None
    with pytest.raises(ValueError):
        evaluate(params, [ep], "supervised")


def test_evaluate_parallel_matches_serial():
    params = small_params()
    eps = EpisodeSource(SMALL, 9).episodes(6)
    a = evaluate(params, eps, "unsupervised", workers=1)
    b = evaluate(params, eps, "unsupervised", workers=3)
    assert a == b


def test_memory_reset_between_eval_episodes():
    params = small_params()
    eps = EpisodeSource(SMALL, 9).episodes(4)
    together = evaluate(params, eps, "unsupervised")["episodes"]
    alone = [evaluate(params, [ep], "unsupervised")["episodes"][0] for ep in eps]
    assert together == alone


def test_trained_beats_random_on_separable_streams():
    stream = StreamConfig(episode_length=30, num_contexts=1, max_classes_per_context=4, crp_concentration=5.0,
                          latent_dim=4, observation_dim=8, nuisance_std=1.0, world_seed=2)
    test = EpisodeSource(stream, 500).episodes(10)
    p0 = init_params(EncoderConfig("linear", 8, 4, seed=1))
    trained = train(EpisodeSource(stream, 1), TrainConfig(total_steps=300), p0, LossConfig(), MemoryConfig()).params
    r0 = evaluate(p0, test, "unsupervised")["ami_max"]
    r1 = evaluate(trained, test, "unsupervised")["ami_max"]
    assert r1 > r0
