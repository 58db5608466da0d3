import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import direct_ami, hand_homogeneity_completeness, hand_walked_ap, pair_ari
from streamproto.encoder import EncoderConfig, encode_batch, init_params
from streamproto.memory import MemoryConfig
from streamproto.metrics import (
    RankedPrediction,
    ami,
    ami_max,
    ari,
    average_precision,
    contingency,
    default_alpha_grid,
    homogeneity_completeness,
    knn_readout,
    known_flags,
    linear_readout,
    supervised_readout,
    unsupervised_readout,
)
from streamproto.streams import EpisodeFrame

labels = st.lists(st.integers(0, 4), min_size=1, max_size=25)


def paired(draw_len=25):
    return st.integers(1, draw_len).flatmap(
        lambda n: st.tuples(st.lists(st.integers(0, 4), min_size=n, max_size=n),
                            st.lists(st.integers(0, 4), min_size=n, max_size=n)))


# -- contingency metrics -------------------------------------------------------


def test_contingency_sums():
    ct = contingency([0, 0, 1, 2], ["a", "b", "b", "b"])
    assert ct.n.sum() == ct.N == ct.a.sum() == ct.b.sum() == 4


def test_ami_examples():
    assert ami([0, 0, 1, 1, 2], [5, 5, 3, 3, 9]) == 1.0
    assert ami([0, 1, 2, 3], [0, 0, 0, 0]) == 0.0
    assert ami([0, 0, 1, 1], [0, 0, 0, 1]) == pytest.approx(direct_ami([0, 0, 1, 1], [0, 0, 0, 1]), abs=1e-12)
    with pytest.raises(ValueError):
        ami([0, 1], [0])


def test_ari_examples():
    assert ari([0, 1, 1, 2], [0, 1, 1, 2]) == 1.0
    assert ari([0, 1], [1, 0]) == 1.0
    assert ari([0, 0, 1, 1], [0, 0, 0, 1]) == pytest.approx(pair_ari([0, 0, 1, 1], [0, 0, 0, 1]), abs=1e-15)
    # 6 pairs: index 1, expected 0.5, max 1.5 -> 0.5 / 1.0
    assert pair_ari([0, 0, 1, 1], [0, 0, 0, 1]) == pytest.approx(0.0)


def test_homogeneity_completeness_examples():
    assert homogeneity_completeness([0, 1, 1], [4, 2, 2]) == (1.0, 1.0)
    assert homogeneity_completeness([0, 1], [0, 0]) == (0.0, 1.0)
    h, c = homogeneity_completeness([0, 0, 1, 1], [0, 1, 2, 2])
    assert h == 1.0
    assert c == pytest.approx(2 / 3, abs=1e-14)  # 1 - (ln2 / 2) / (3 ln2 / 2)


@given(paired())
def test_against_oracles(pair):
    u, v = pair
    assert ami(u, v) == pytest.approx(direct_ami(u, v), abs=1e-10)
    assert ari(u, v) == pytest.approx(pair_ari(u, v), abs=1e-12)
    h, c = homogeneity_completeness(u, v)
    hh, cc = hand_homogeneity_completeness(u, v)
    assert h == pytest.approx(hh, abs=1e-12) and c == pytest.approx(cc, abs=1e-12)


@given(paired(), st.permutations(range(5)), st.permutations(range(5)))
def test_relabeling_invariance(pair, pu, pv):
    u, v = pair
    u2, v2 = [pu[x] for x in u], [pv[x] for x in v]
    assert ami(u2, v2) == pytest.approx(ami(u, v), abs=1e-12)
    assert ari(u2, v2) == pytest.approx(ari(u, v), abs=1e-12)
    assert homogeneity_completeness(u2, v2) == pytest.approx(homogeneity_completeness(u, v), abs=1e-12)


@given(labels)
def test_identical_partitions(u):
    assert ami(u, u) == pytest.approx(1.0, abs=1e-12)
    assert ari(u, u) == pytest.approx(1.0, abs=1e-12)


def test_independent_partitions_average_zero(rng):
    amis, aris = [], []
    for _ in range(200):
        u = rng.integers(0, 4, size=60)
        v = rng.integers(0, 5, size=60)
        amis.append(ami(u, v))
        aris.append(ari(u, v))
    assert abs(np.mean(amis)) <= 0.05
    assert abs(np.mean(aris)) <= 0.05


def test_against_sklearn(rng):
    sk = pytest.importorskip("sklearn.metrics")
    for _ in range(50):
        n = int(rng.integers(2, 40))
        u, v = rng.integers(0, 5, size=n), rng.integers(0, 6, size=n)
        assert ami(u, v) == pytest.approx(sk.adjusted_mutual_info_score(u, v), abs=1e-10)
        assert ari(u, v) == pytest.approx(sk.adjusted_rand_score(u, v), abs=1e-12)


# -- average precision ------------------------------------------------------------


def preds_from(uhats, correct, known):
    return [RankedPrediction(u, 1 if c else 0, 1, k) for u, c, k in zip(uhats, correct, known)]


def test_ap_examples():
    assert average_precision(preds_from([0.3, 0.1, 0.2], [True] * 3, [True] * 3)) == 1.0
    assert average_precision(preds_from([0.3, 0.1, 0.2], [False] * 3, [True] * 3)) == 0.0
    correct = [True, False, True, False]
    known = [True, True, True, False]
    preds = preds_from([0.1, 0.2, 0.3, 0.9], correct, known)
    assert average_precision(preds) == pytest.approx(hand_walked_ap(correct, known), abs=1e-15)
    assert average_precision(preds) == pytest.approx(5 / 9, abs=1e-15)


def test_ap_sorts_by_uhat():
    # same items presented out of order give the same score
    correct = [True, False, True, False]
    known = [True, True, True, False]
    u = [0.1, 0.2, 0.3, 0.9]
    order = [3, 1, 0, 2]
    shuffled = preds_from([u[i] for i in order], [correct[i] for i in order], [known[i] for i in order])
    assert average_precision(shuffled) == pytest.approx(5 / 9)


def test_ap_no_known_instances_warns():
    with pytest.warns(UserWarning):
        assert average_precision(preds_from([0.5], [False], [False])) == 1.0
    with pytest.raises(ValueError):
        average_precision([])


def test_ap_strict_recall_mode_differs_only_in_denominator():
    preds = preds_from([0.1, 0.2, 0.3, 0.9], [True, False, True, False], [True, True, True, False])
    assert 0.0 <= average_precision(preds, strict_recall=True) <= 1.0
    allgood = preds_from([0.1, 0.2], [True, True], [True, True])
    assert average_precision(allgood, strict_recall=True) == 1.0


@given(st.lists(st.tuples(st.floats(0, 1), st.booleans()), min_size=1, max_size=20))
def test_ap_is_one_when_known_correct_items_rank_first(items):
    # known items sit below 0.5, unknown ones above, so no unknown can
    # interrupt the run of correct predictions
    preds = [RankedPrediction(u / 2 if k else 0.5 + u / 2 + 1e-9, 0, 0 if k else 1, k) for u, k in items]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert average_precision(preds) == 1.0


def test_known_flags():
    assert known_flags([3, 3, 1, 3, 1, 2]) == [False, True, False, True, True, False]


# -- readouts ------------------------------------------------------------------------


def frames_for(classes, dim=4):
    eye = np.eye(dim)
    return [EpisodeFrame(t, eye[c], eye[c], c) for t, c in enumerate(classes)]


IDENT = init_params(EncoderConfig("identity", 4, 4), beta=-5.0)


def test_unsupervised_alternating_classes():
    ep = frames_for([0, 1] * 5)
    pred = unsupervised_readout(ep, encode_batch, IDENT, 0.5)
    assert len(set(pred)) == 2
    assert ami([f.label for f in ep], pred) == 1.0


def test_unsupervised_alpha_limits():
    ep = frames_for([0, 1, 2, 0, 1, 1])
    params = init_params(EncoderConfig("identity", 4, 4))
    assert len(set(unsupervised_readout(ep, encode_batch, params, 1 - 1e-12))) == 1
    fresh = unsupervised_readout(ep, encode_batch, params, 1e-12)
    assert len(set(fresh)) == len(ep)
    assert ami([f.label for f in ep], fresh) == pytest.approx(0.0, abs=1e-12)


def test_unsupervised_identities_not_reused_after_eviction():
    ep = frames_for([0, 1, 2, 3, 0])
    pred = unsupervised_readout(ep, encode_batch, IDENT, 0.5, MemoryConfig(capacity=2))
    assert pred == [0, 1, 2, 3, 4]


def test_supervised_readout_examples():
    one = frames_for([2] * 6)
    preds = supervised_readout(one, encode_batch, IDENT)
    assert not preds[0].is_known
    assert all(p.correct for p in preds[1:])
    assert average_precision(preds) == 1.0
    two = frames_for([0, 1, 1, 0, 1, 0, 0, 1])
    assert average_precision(supervised_readout(two, encode_batch, IDENT)) == 1.0


def test_supervised_shuffled_control_is_lower(rng):
    classes = rng.integers(0, 4, size=40)
    ep = frames_for(classes)
    Z = encode_batch(np.stack([f.features for f in ep]), IDENT)
    good = average_precision(supervised_readout(ep, encode_batch, IDENT, embeddings=Z))
    bad = average_precision(supervised_readout(ep, encode_batch, IDENT, embeddings=Z[rng.permutation(len(Z))]))
    assert good == 1.0 and bad < good


def test_supervised_needs_labels():
    ep = frames_for([0, 1])
    ep[0].label = None
    with pytest.raises(ValueError):
        supervised_readout(ep, encode_batch, IDENT)


def test_ami_max_properties(rng):
    params = init_params(EncoderConfig("identity", 4, 4))
    eps = [frames_for(rng.integers(0, 4, size=15)) for _ in range(3)]
    noisy = [[EpisodeFrame(f.t, f.features + 0.4 * rng.standard_normal(4), f.view2, f.label) for f in ep]
             for ep in eps]
    single, a = ami_max(noisy, encode_batch, params, [0.6])
    plain = np.mean([ami([f.label for f in ep], unsupervised_readout(ep, encode_batch, params, 0.6)) for ep in noisy])
    assert a == 0.6 and single == pytest.approx(plain)
    coarse, _ = ami_max(noisy, encode_batch, params, default_alpha_grid(5))
    fine, _ = ami_max(noisy, encode_batch, params, default_alpha_grid(9))
    assert fine >= coarse  # 9-point grid contains the 5-point grid
    for alpha in default_alpha_grid(5):
        assert coarse >= ami_max(noisy, encode_batch, params, [alpha])[0]


def test_ami_max_separable_interior_interval():
    eps = [frames_for([0, 1, 2, 1, 0, 3, 3]), frames_for([1, 1, 0, 2])]
    best, alpha = ami_max(eps, encode_batch, IDENT)
    assert best == 1.0
    winners = [a for a in default_alpha_grid() if ami_max(eps, encode_batch, IDENT, [a])[0] == 1.0]
    assert len(winners) > 1 and 0.025 < np.median(winners) < 0.975


# -- offline probes -------------------------------------------------------------------


def blobs(rng, n_per=100, sigma=None):
    centers = np.eye(3)
    sigma = math.sqrt(2) / 6 if sigma is None else sigma
    X = np.concatenate([c + sigma * rng.standard_normal((n_per, 3)) for c in centers])
    y = np.repeat(np.arange(3), n_per)
    return X, y


def brute_knn(train_x, train_y, x, k):
    sims = []
    for i, t in enumerate(train_x):
        sims.append((-(t @ x) / (np.linalg.norm(t) * np.linalg.norm(x)), i))
    sims.sort()
    votes = {}
    for _, i in sims[:k]:
        votes[train_y[i]] = votes.get(train_y[i], 0) + 1
    top = max(votes.values())
    return min(lbl for lbl, v in votes.items() if v == top)


def test_knn_examples(rng):
    X, y = blobs(rng)
    assert knn_readout(X, y, X[:1], y[:1], 1) == 1.0
    uniform = np.array([0] * 7 + [1] * 3)
    Xu = rng.standard_normal((10, 3))
    assert knn_readout(Xu, uniform, Xu, uniform, 10) == pytest.approx(0.7)
    Xt, yt = blobs(rng, 50)
    acc = knn_readout(X, y, Xt, yt, 5)
    oracle = np.mean([brute_knn(X, y, x, 5) == t for x, t in zip(Xt, yt)])
    assert acc == pytest.approx(oracle) and acc >= 0.95
    with pytest.raises(ValueError):
        knn_readout(X[:0], y[:0], Xt, yt, 1)


def test_linear_readout_examples(rng):
    X = np.concatenate([rng.normal(2, 0.3, (50, 2)), rng.normal(-2, 0.3, (50, 2))])
    y = np.repeat([0, 1], 50)
    _, train_acc = linear_readout(X, y, X, y, return_train_accuracy=True)
    assert train_acc == 1.0
    Xb, yb = blobs(rng)
    Xt, yt = blobs(rng, 50)
    shuffled = linear_readout(Xb, rng.permutation(yb), Xt, yt)
    assert abs(shuffled - 1 / 3) <= 0.1
    assert abs(linear_readout(Xb, yb, Xt, yt) - knn_readout(Xb, yb, Xt, yt, 5)) <= 0.02
    with pytest.raises(ValueError):
        linear_readout(X, np.zeros(100), X, y)
