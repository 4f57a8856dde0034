import math
import random

import mpmath
import numpy as np
import pytest

from kbcurate.encoder import (
    EncoderModel,
    NumericError,
    Pair,
    TrainConfig,
    cosine_distance,
    encode,
    encode_many,
    featurize,
    loss_gradient,
    lr_schedule,
    margin_threshold,
    multimargin_loss,
    scale_by_idf,
    train,
    unigram_buckets,
)
from kbcurate.sampling import TrainingExample


def _mp_loss(dist, label, mu):
    theta = mpmath.acos(1 - mpmath.mpf(mu))
    gap = mpmath.mpf(dist) - theta if label == 1 else theta - mpmath.mpf(dist)
    return float(max(mpmath.mpf(0), gap) ** 2)


def classic_contrastive(dist, label, margin):
    """Two-margin contrastive loss with a zero positive margin."""
    return label * dist**2 + (1 - label) * max(0.0, margin - dist) ** 2


class TestLossValues:
    def test_positive_at_zero(self):
        assert multimargin_loss(0.0, 1, 0.0) == 0.0

    def test_negative_on_boundary(self):
        assert multimargin_loss(math.pi / 2, 0, 1.0) == pytest.approx(0.0, abs=1e-12)

    def test_positive_mu_02(self):
        got = multimargin_loss(1.0, 1, 0.2)
        assert got == pytest.approx(_mp_loss(1.0, 1, "0.2"), abs=1e-6)
        assert got == pytest.approx(0.1271, abs=1e-4)

    def test_negative_mu_08(self):
        got = multimargin_loss(0.5, 0, 0.8)
        assert got == pytest.approx(_mp_loss(0.5, 0, "0.8"), abs=1e-6)
        assert got == pytest.approx(0.7559, abs=1e-4)

    def test_mu_out_of_range(self):
        for mu in (-0.1, 2.1, float("nan")):
            with pytest.raises(ValueError):
                multimargin_loss(0.5, 1, mu)

    def test_bad_label(self):
        with pytest.raises(ValueError):
            multimargin_loss(0.5, 2, 0.5)

    def test_threshold_landmarks(self):
        assert margin_threshold(0.0) == 0.0
        assert margin_threshold(1.0) == pytest.approx(math.pi / 2)
        assert margin_threshold(2.0) == pytest.approx(math.pi)
        grid = np.linspace(0, 2, 201)
        assert np.all(np.diff(margin_threshold(grid)) > 0)

    def test_classic_reduction(self):
        rng = random.Random(0)
        for _ in range(500):
            mu_neg = rng.uniform(0, 2)
            margin = math.acos(1 - mu_neg)
            dist = rng.uniform(0, 2)
            assert multimargin_loss(dist, 1, 0.0) == pytest.approx(classic_contrastive(dist, 1, margin), abs=1e-12)
            assert multimargin_loss(dist, 0, mu_neg) == pytest.approx(classic_contrastive(dist, 0, margin), abs=1e-12)

    def test_non_negative_and_monotone(self):
        dists = np.linspace(0, 2, 101)
        for mu in (0.0, 0.2, 0.6, 1.0, 1.2):
            pos = [multimargin_loss(d, 1, mu) for d in dists]
            neg = [multimargin_loss(d, 0, mu) for d in dists]
            assert min(pos + neg) >= 0
            assert all(b >= a for a, b in zip(pos, pos[1:]))
            assert all(b <= a for a, b in zip(neg, neg[1:]))


class TestCosineDistance:
    def test_examples(self):
        v = np.array([0.3, -0.4])
        assert cosine_distance(v, v) == pytest.approx(0.0)
        assert cosine_distance([1, 0], [0, 1]) == 1.0
        assert cosine_distance([1, 0], [-1, 0]) == 2.0

    def test_zero_vector(self):
        with pytest.raises(ValueError):
            cosine_distance([0, 0], [1, 0])


class TestEncode:
    def test_deterministic_and_unit(self):
        m = EncoderModel.init(1024, 16, seed=1, scheme="gaussian")
        a, b = encode(m, "SMO L412F vismodegib"), encode(m, "SMO L412F vismodegib")
        assert np.array_equal(a, b)
        assert abs(np.linalg.norm(a) - 1) <= 1e-6

    def test_fallback(self):
        m = EncoderModel.init(1024, 16, seed=1, scheme="gaussian")
        for text in ("", "?!"):
            assert np.array_equal(encode(m, text), m.fallback)
        assert np.linalg.norm(m.fallback) == 1.0

    def test_batch_matches_single(self):
        m = EncoderModel.init(1024, 16, seed=2, scheme="gaussian")
        texts = ["a b c", "", "kinase inhibitor"]
        assert np.allclose(encode_many(m, texts), [encode(m, t) for t in texts])

    def test_feature_namespaces(self):
        idx, val = featurize("alpha beta gamma", 64, 13)
        n_uni = unigram_buckets(64)
        assert (idx < n_uni).sum() <= 3 and (idx >= n_uni).sum() <= 2
        assert np.all(val >= 1)

    def test_sublinear_tf(self):
        _, val = featurize("smo smo smo", 1 << 10, 13)
        assert 1 + math.log(3) in val.tolist()

    def test_lexical_init_identity(self):
        m = EncoderModel.init(64, 32, scheme="lexical")
        assert np.array_equal(m.weights[:32], np.eye(32))
        assert not m.weights[32:].any()

    def test_lexical_init_projected_rows(self):
        m = EncoderModel.init(256, 16, seed=3, scheme="lexical")
        n_uni = unigram_buckets(256)
        assert np.all(np.abs(m.weights[:n_uni]).sum(axis=1) == 1)

    def test_unknown_scheme(self):
        with pytest.raises(ValueError):
            EncoderModel.init(16, 4, scheme="orthogonal")

    def test_idf_scaling(self):
        m = EncoderModel.init(1 << 12, 8, seed=0, scheme="gaussian")
        before = m.weights.copy()
        texts = ["common rare"] + ["common"] * 9
        idf = scale_by_idf(m, texts, power=1.0)
        rare, common = (featurize(t, m.n_features, m.hash_seed)[0][0] for t in ("rare", "common"))
        assert idf[rare] > idf[common]
        ratio = np.linalg.norm(m.weights[rare]) / np.linalg.norm(before[rare])
        assert ratio == pytest.approx(idf[rare] / idf.max())

    def test_checkpoint_round_trip(self, tmp_path):
        m = EncoderModel.init(128, 8, seed=4, scheme="gaussian")
        m.save(tmp_path / "m.npz")
        again = EncoderModel.load(tmp_path / "m.npz")
        assert (again.n_features, again.dim, again.hash_seed) == (128, 8, m.hash_seed)
        assert np.array_equal(again.weights, m.weights)

    def test_checkpoint_bad_header(self, tmp_path):
        np.savez(tmp_path / "x.npz", format=np.array("other"), version=np.array(1))
        with pytest.raises(ValueError):
            EncoderModel.load(tmp_path / "x.npz")


VOCAB = [f"w{i}" for i in range(12)]


def _random_batch(rng, n):
    def text():
        return " ".join(rng.choice(VOCAB) for _ in range(rng.randint(1, 6)))

    return [Pair(text(), text(), rng.randint(0, 1), rng.choice([0.0, 0.2, 0.6, 0.8, 1.0, 1.2])) for _ in range(n)]


def _distances(model, batch, space):
    q = encode_many(model, [p.query_text for p in batch])
    d = encode_many(model, [p.doc_text for p in batch])
    cos = np.clip(np.einsum("ij,ij->i", q, d), -1, 1)
    return np.arccos(cos) if space == "angular" else 1 - cos


def _away_from_kinks(model, batch, space, gap=1e-3):
    dist = _distances(model, batch, space)
    theta = margin_threshold(np.array([p.mu for p in batch]))
    return np.all(np.abs(dist - theta) > gap) and np.all(np.abs(np.abs(1 - dist) - 1) > gap)


def _direct_loss(xq, xd, w, labels, mus, space):
    """Mean loss written straight from the definitions on dense features."""
    total = 0.0
    for a, b, label, mu in zip(xq, xd, labels, mus):
        u, v = a @ w, b @ w
        cos = u @ v / (np.linalg.norm(u) * np.linalg.norm(v))
        dist = math.acos(cos) if space == "angular" else 1 - cos
        theta = math.acos(1 - mu)
        total += (max(0.0, dist - theta) if label else max(0.0, theta - dist)) ** 2
    return total / len(labels)


def _numeric_gradient(model, batch, space, eps=1e-6):
    """Central differences of the direct loss over every weight."""
    xq = model.feature_matrix([p.query_text for p in batch]).toarray()
    xd = model.feature_matrix([p.doc_text for p in batch]).toarray()
    labels, mus = [p.label for p in batch], [p.mu for p in batch]
    w = model.weights.copy()
    g = np.zeros_like(w)
    live = np.flatnonzero(xq.any(axis=0) | xd.any(axis=0))
    for r in live:
        for j in range(w.shape[1]):
            old = w[r, j]
            w[r, j] = old + eps
            up = _direct_loss(xq, xd, w, labels, mus, space)
            w[r, j] = old - eps
            down = _direct_loss(xq, xd, w, labels, mus, space)
            w[r, j] = old
            g[r, j] = (up - down) / (2 * eps)
    # weights of features absent from the batch cannot move the loss
    return g


class TestGradient:
    @pytest.mark.parametrize("space", ["cosine", "angular"])
    def test_finite_differences(self, space):
        rng = random.Random(11)
        checked = seed = 0
        worst = 0.0
        while checked < 100 if space == "cosine" else checked < 20:
            seed += 1
            model = EncoderModel.init(32, 8, seed=seed, scheme="gaussian")
            batch = _random_batch(rng, rng.randint(1, 4))
            if not _away_from_kinks(model, batch, space):
                continue
            loss, grad = loss_gradient(model, batch, space)
            num = _numeric_gradient(model, batch, space)
            scale = max(np.linalg.norm(grad), np.linalg.norm(num))
            if scale < 1e-9:
                assert loss == pytest.approx(0.0, abs=1e-12)
            else:
                worst = max(worst, np.linalg.norm(grad - num) / scale)
            checked += 1
        assert worst <= 1e-4

    def test_inside_margin_zero(self):
        model = EncoderModel.init(64, 8, seed=1, scheme="gaussian")
        batch = [Pair("w1 w2", "w1 w2", 1, 0.0), Pair("w1 w2", "w1 w2", 0, 0.0)]
        loss, grad = loss_gradient(model, batch)
        assert loss == pytest.approx(0.0, abs=1e-20) and not np.abs(grad).max() > 1e-9

    def test_duplicate_mean_invariance(self):
        model = EncoderModel.init(64, 8, seed=1, scheme="gaussian")
        p = Pair("w1 w2", "w3", 1, 0.2)
        l1, g1 = loss_gradient(model, [p])
        l2, g2 = loss_gradient(model, [p, p])
        assert l1 == pytest.approx(l2) and np.allclose(g1, g2)

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            loss_gradient(EncoderModel.init(16, 4), [])


def _separable(n_queries=12):
    """Each query shares a planted token with its positive and none with its negatives."""
    rng = random.Random(5)
    filler = [f"f{i}" for i in range(30)]
    queries, docs, examples = {}, {}, []
    for i in range(n_queries):
        qid = f"q{i}"
        queries[qid] = f"topic{i} " + " ".join(rng.sample(filler, 2))
        docs[f"p{i}"] = f"topic{i} " + " ".join(rng.sample(filler, 4))
        examples.append(TrainingExample(qid, f"p{i}", 1, 0.0, 1, "kb", f"p{i}"))
        for j in range(3):
            docs[f"n{i}-{j}"] = f"topic{(i + j + 1) % n_queries} " + " ".join(rng.sample(filler, 4))
            examples.append(TrainingExample(qid, f"n{i}-{j}", 0, 1.0, 5, "random", f"p{i}"))
    return examples, queries, docs


class TestTrain:
    def test_loss_decreases(self):
        examples, queries, docs = _separable()
        model = EncoderModel.init(256, 16, seed=0, scheme="gaussian")
        res = train(model, examples, queries, docs, TrainConfig(batch_size=8, epochs=6, learning_rate=0.5))
        assert res.epoch_loss[-1] < res.epoch_loss[0]

    def test_zero_learning_rate(self):
        examples, queries, docs = _separable()
        model = EncoderModel.init(256, 16, seed=0, scheme="gaussian")
        res = train(model, examples, queries, docs, TrainConfig(epochs=2, learning_rate=0.0))
        assert np.array_equal(res.model.weights, model.weights)

    def test_zero_epochs(self):
        examples, queries, docs = _separable()
        model = EncoderModel.init(256, 16, seed=0, scheme="gaussian")
        res = train(model, examples, queries, docs, TrainConfig(epochs=0))
        assert np.array_equal(res.model.weights, model.weights) and res.epoch_loss == []

    def test_deterministic(self):
        examples, queries, docs = _separable()
        model = EncoderModel.init(256, 16, seed=0, scheme="gaussian")
        cfg = TrainConfig(batch_size=8, epochs=2, seed=3)
        a = train(model, examples, queries, docs, cfg)
        b = train(model, examples, queries, docs, cfg)
        assert np.array_equal(a.model.weights, b.model.weights) and a.epoch_loss == b.epoch_loss

    def test_input_not_modified(self):
        examples, queries, docs = _separable()
        model = EncoderModel.init(256, 16, seed=0, scheme="gaussian")
        before = model.weights.copy()
        train(model, examples, queries, docs, TrainConfig(epochs=1))
        assert np.array_equal(model.weights, before)

    def test_row_norm_limits(self):
        examples, queries, docs = _separable()
        model = EncoderModel.init(256, 16, seed=0, scheme="gaussian")
        init_norms = np.linalg.norm(model.weights, axis=1)
        cfg = TrainConfig(batch_size=8, epochs=3, learning_rate=2.0, row_norm_growth=1.0, max_row_norm=0.9)
        trained = train(model, examples, queries, docs, cfg).model.weights
        moved = np.any(trained != model.weights, axis=1)
        norms = np.linalg.norm(trained, axis=1)
        assert moved.sum() > 10
        assert np.all(norms[moved] <= np.minimum(init_norms, 0.9)[moved] + 1e-9)

    def test_non_finite_aborts(self):
        examples, queries, docs = _separable()
        model = EncoderModel.init(256, 16, seed=0, scheme="gaussian")
        model.weights[:] = np.nan
        with pytest.raises(NumericError):
            train(model, examples, queries, docs, TrainConfig(epochs=1))

    def test_trace(self, tmp_path):
        examples, queries, docs = _separable()
        model = EncoderModel.init(256, 16, seed=0, scheme="gaussian")
        res = train(model, examples, queries, docs, TrainConfig(batch_size=8, epochs=2))
        res.write_trace(tmp_path / "trace.csv")
        lines = (tmp_path / "trace.csv").read_text().splitlines()
        assert lines[0] == "epoch,step,loss,lr" and len(lines) == len(res.trace) + 1

    def test_config_validation(self):
        for bad in ({"batch_size": 0}, {"learning_rate": -1}, {"warmup": 2}, {"distance_space": "l2"},
                    {"max_row_norm": 0}, {"row_norm_growth": -1}):
            with pytest.raises(ValueError):
                TrainConfig(**bad)


class TestSchedule:
    def test_shape(self):
        lrs = [lr_schedule(s, 100, 1.0, 0.1) for s in range(100)]
        assert lrs[9] == 1.0 and lrs[0] == pytest.approx(0.1)
        assert all(b <= a for a, b in zip(lrs[9:], lrs[10:]))
        assert lrs[-1] == pytest.approx(1 / 90)

    def test_no_warmup(self):
        assert lr_schedule(0, 10, 0.5, 0.0) == 0.5

    def test_empty(self):
        assert lr_schedule(0, 0, 1.0, 0.1) == 0.0
