import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rns import tensor as T
from rns.corpus import NULL_ITEM, make_training_instances
from rns.model import (ABLATIONS, ConfigError, ModelConfig, Trace, ablate, apply_position, encode_all,
                       encode_document, encode_documents, forward, individual_pointer, init_params,
                       level_attention, load_checkpoint, param_shapes, parameter_count, pointer_index,
                       save_checkpoint, score, score_rows, union_attention)
from rns.tensor import Tensor
from rns.training import batch_arrays, bce_loss

from conftest import TINY, gradcheck_corpus
from fdcheck import check


def zero_params(config):
    return {k: Tensor(np.zeros(s), requires_grad=True) for k, s in param_shapes(config).items()}


class TestConfig:
    def test_defaults(self):
        c = ModelConfig()
        assert (c.d, c.K, c.n, c.L, c.alpha) == (25, 5, 10, 5, 0.1)
        assert c.filter_heights == (1, 3, 5, 7, 9) and c.filters_per_height == 2

    @pytest.mark.parametrize("bad", [
        dict(n=9),
        dict(d=0),
        dict(L=0),
        dict(doc_len=9),
        dict(filter_heights=(3, 3)),
        dict(use_union=False, use_individual=False),
        dict(alpha=-1.0),
    ])
    def test_rejects(self, bad):
        with pytest.raises(ConfigError):
            ModelConfig(**{"doc_len": 20, **bad}).validate()

    def test_dict_round_trip(self):
        c = ModelConfig(vocab_size=7, doc_len=30, filter_heights=(2, 4), n=4, use_position=False)
        assert ModelConfig.from_dict(c.to_dict()) == c

    def test_unknown_variant(self):
        with pytest.raises(ConfigError):
            ablate(ModelConfig(), "no-everything")


class TestEncodeDocument:
    def test_all_pad_zero_params(self):
        c = ModelConfig(vocab_size=5, doc_len=12, **{k: v for k, v in TINY.items() if k != "doc_len"})
        out = encode_document(np.zeros(12, dtype=int), "user", zero_params(c), c)
        np.testing.assert_array_equal(out.data, np.zeros(c.n))

    def test_hand_oracle_identity_single_filter(self):
        c = ModelConfig(vocab_size=4, doc_len=3, d=2, K=1, n=1, filter_heights=(1,))
        p = zero_params(c)
        p["item_word_emb"].data[:] = [[0, 0], [1, -3], [2, 0.5], [-1, -1]]
        p["item_aspect"].data[0] = np.eye(2)
        p["item_filter_h1"].data[:] = 1.0
        out = encode_document([3, 1, 2], "item", p, c).data
        # window sums: -2, -2, 2.5 -> relu -> max
        assert out.tolist() == [2.5]

    @pytest.mark.parametrize("n", [10, 25])
    def test_output_length(self, n):
        c = ModelConfig(vocab_size=30, doc_len=15, n=n, d=3, K=2)
        rng = np.random.default_rng(n)
        out = encode_document(rng.integers(0, 30, size=15), "user", init_params(c, 1), c)
        assert out.shape == (n,)

    def test_wrong_length(self):
        c = ModelConfig(vocab_size=5, **TINY)
        with pytest.raises(T.DimensionError):
            encode_document(np.zeros(11, dtype=int), "user", init_params(c), c)

    def test_batch_matches_single(self):
        c = ModelConfig(vocab_size=9, **TINY)
        p = init_params(c, 4)
        docs = np.random.default_rng(0).integers(0, 9, size=(3, 12))
        batch = encode_documents(docs, "item", p, c).data
        for b in range(3):
            np.testing.assert_allclose(batch[b], encode_document(docs[b], "item", p, c).data, rtol=0, atol=1e-14)

    def test_no_aspect_is_plain_embedding(self):
        c = ModelConfig(vocab_size=4, doc_len=3, d=2, K=3, n=1, filter_heights=(1,), use_aspects=False)
        p = zero_params(c)
        assert "user_aspect" not in p and p["user_filter_h1"].shape == (1, 1, 2, 1)
        p["user_word_emb"].data[:] = [[0, 0], [1, 1], [2, 2], [3, 3]]
        p["user_filter_h1"].data[:] = 1.0
        assert encode_document([1, 3, 2], "user", p, c).data.tolist() == [6.0]


class TestPosition:
    config = ModelConfig(vocab_size=4, doc_len=12, L=3, n=2, filter_heights=(1, 3))

    def test_zero_positions_identity(self):
        h = np.arange(6.0).reshape(3, 2)
        p = {"position": Tensor(np.zeros((3, 2)))}
        np.testing.assert_array_equal(apply_position(h, p, self.config).data, h)

    def test_disabled_is_identity(self):
        h = np.arange(6.0).reshape(3, 2)
        c = ablate(self.config, "no-position")
        np.testing.assert_array_equal(apply_position(h, {"position": Tensor(np.ones((3, 2)))}, c).data, h)

    def test_elementwise_addition(self):
        rng = np.random.default_rng(2)
        h, o = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
        np.testing.assert_array_equal(apply_position(h, {"position": Tensor(o)}, self.config).data, h + o)


class TestUnionAttention:
    def test_identical_history_uniform(self):
        h = np.tile([1.0, 2.0, -1.0], (5, 1))
        w, p = union_attention(h, [True] * 5, [0.3, 0.1, 2.0])
        np.testing.assert_allclose(w.data, np.full(5, 0.2), rtol=0, atol=1e-15)
        np.testing.assert_allclose(p.data, h[0], rtol=0, atol=1e-14)

    def test_single_unmasked(self):
        rng = np.random.default_rng(3)
        h = rng.normal(size=(4, 3))
        w, p = union_attention(h, [False, False, True, False], rng.normal(size=3))
        assert w.data.tolist() == [0.0, 0.0, 1.0, 0.0]
        np.testing.assert_array_equal(p.data, h[2])

    def test_orthogonal_candidate_uniform(self):
        h = np.array([[1.0, 0, 0], [2, 0, 0], [-5, 0, 0]])
        w, _ = union_attention(h, [True] * 3, [0.0, 1.0, 0.0])
        np.testing.assert_allclose(w.data, np.full(3, 1 / 3), rtol=0, atol=1e-15)

    def test_all_masked_error(self):
        with pytest.raises(ValueError):
            union_attention(np.ones((2, 2)), [False, False], [1.0, 1.0])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(0, 2**31 - 1))
    def test_weights_normalised_masked_zero(self, L, seed):
        rng = np.random.default_rng(seed)
        h = rng.normal(size=(L, 4))
        mask = rng.random(L) < 0.6
        mask[rng.integers(L)] = True
        q = rng.normal(size=4)
        w, p = union_attention(h, mask, q)
        assert abs(w.data.sum() - 1.0) < 1e-12
        assert np.all(w.data[~mask] == 0.0)
        # masked rows have no influence on p_s1
        h2 = h.copy()
        h2[~mask] = 1e6
        _, p2 = union_attention(h2, mask, q)
        np.testing.assert_array_equal(p2.data, p.data)


class TestIndividualPointer:
    h = np.arange(15.0).reshape(5, 3)

    def test_argmax(self):
        idx, vec = individual_pointer(self.h, [0.1, 0.2, 0.4, 0.2, 0.1])
        assert idx + 1 == 3
        np.testing.assert_array_equal(vec.data, self.h[2])

    def test_uniform_picks_most_recent(self):
        idx, _ = individual_pointer(self.h, np.full(5, 0.2))
        assert idx + 1 == 5

    def test_single_unmasked(self):
        mask = np.array([False, True, False, False, False])
        idx, _ = individual_pointer(self.h, [0, 1.0, 0, 0, 0], mask)
        assert idx == 1

    def test_masked_never_chosen(self):
        mask = np.array([True, True, False, False, False])
        idx, _ = individual_pointer(self.h, [0.0, 0.0, 0.0, 0.0, 0.0], mask)
        assert idx == 1

    @given(st.lists(st.floats(-20, 20), min_size=1, max_size=8), st.floats(0.01, 100))
    def test_scale_invariance(self, logits, c):
        z = np.array(logits)
        w1 = T.softmax(Tensor(z)).data
        w2 = T.softmax(Tensor(c * z)).data
        m = np.ones(len(z), dtype=bool)
        # exact ties may split under rounding, so compare on a clear winner only
        if np.sort(z)[-1] - (np.sort(z)[-2] if len(z) > 1 else -np.inf) > 1e-6:
            assert pointer_index(w1, m) == pointer_index(w2, m) == int(np.argmax(z))

    def test_gradient_only_through_selected(self):
        h = Tensor(np.random.default_rng(0).normal(size=(4, 3)), requires_grad=True)
        with T.Tape() as tape:
            _, vec = individual_pointer(h, [0.1, 0.5, 0.3, 0.1])
            loss = T.sum_all(vec)
        T.backward(tape, loss)
        expected = np.zeros((4, 3))
        expected[1] = 1.0
        np.testing.assert_array_equal(h.grad, expected)


class TestLevelAttention:
    def test_equal_levels(self):
        v = np.array([0.3, -1.0, 2.0])
        out = level_attention(v, v, [1.0, 2.0, 3.0])
        np.testing.assert_allclose(out.data, v, rtol=0, atol=1e-15)

    def test_no_individual_returns_union(self):
        a, b = np.array([1.0, 2.0]), np.array([5.0, 7.0])
        assert level_attention(a, b, [1.0, 1.0], use_individual=False).data.tolist() == a.tolist()

    def test_no_union_returns_individual(self):
        a, b = np.array([1.0, 2.0]), np.array([5.0, 7.0])
        assert level_attention(a, b, [1.0, 1.0], use_union=False).data.tolist() == b.tolist()

    def test_zero_candidate_midpoint(self):
        a, b = np.array([1.0, 4.0]), np.array([3.0, 0.0])
        np.testing.assert_allclose(level_attention(a, b, [0.0, 0.0]).data, [2.0, 2.0], rtol=0, atol=1e-15)

    def test_softmax_oracle(self):
        a, b, q = np.array([1.0, 0.0]), np.array([0.0, 1.0]), np.array([2.0, 1.0])
        beta1 = math.exp(2) / (math.exp(2) + math.exp(1))
        np.testing.assert_allclose(level_attention(a, b, q).data, [beta1, 1 - beta1], rtol=1e-14)


class TestScore:
    def test_sigma_one(self):
        s = score([1.0, 0.0], [0.0, 0.0], [1.0, 0.0], 0.1).item()
        assert abs(s - 0.7310585786300049) < 1e-15

    @given(st.lists(st.floats(-5, 5), min_size=3, max_size=3))
    def test_zero_alpha_zero_long_term(self, q):
        assert score([0.0] * 3, [1.0, 2.0, 3.0], q, 0.0).item() == 0.5

    def test_zero_alpha_ignores_short_term(self):
        a = score([1.0, -2.0], [9.0, 9.0], [0.5, 0.25], 0.0).item()
        b = score([1.0, -2.0], [-4.0, 3.0], [0.5, 0.25], 0.0).item()
        assert a == b

    def test_fusion_oracle(self):
        p_l, p_s, q = np.array([0.5, 1.0]), np.array([2.0, -1.0]), np.array([1.0, 3.0])
        z = (p_l + 0.3 * p_s) @ q
        assert abs(score(p_l, p_s, q, 0.3).item() - 1 / (1 + math.exp(-z))) < 1e-15


class TestForward:
    def setup_batch(self, corpus, config, n=6):
        inst = make_training_instances(corpus, config.L, 3, seed=0)[:n]
        return batch_arrays(inst)

    def test_scores_in_unit_interval(self, small_corpus, tiny_config):
        users, hist, cands = self.setup_batch(small_corpus, tiny_config)
        s = forward(small_corpus, users, hist, cands, init_params(tiny_config, 0), tiny_config).data
        assert s.shape == cands.shape
        assert np.all((s > 0) & (s < 1))

    def test_candidate_permutation(self, small_corpus, tiny_config):
        users, hist, cands = self.setup_batch(small_corpus, tiny_config)
        p = init_params(tiny_config, 1)
        perm = np.array([2, 0, 3, 1])
        a = forward(small_corpus, users, hist, cands, p, tiny_config).data
        b = forward(small_corpus, users, hist, cands[:, perm], p, tiny_config).data
        np.testing.assert_array_equal(a[:, perm], b)

    def test_cached_encoding_matches(self, small_corpus, tiny_config):
        users, hist, cands = self.setup_batch(small_corpus, tiny_config)
        p = init_params(tiny_config, 2)
        a = forward(small_corpus, users, hist, cands, p, tiny_config).data
        b = score_rows(encode_all(small_corpus, p, tiny_config), users, hist, cands, p, tiny_config).data
        np.testing.assert_allclose(a, b, rtol=1e-13, atol=0)

    def test_identical_history_docs_uniform_union(self, small_corpus, tiny_config):
        c = ablate(tiny_config, "no-position")
        p = init_params(c, 3)
        item = 5
        hist = np.full((2, c.L), item)
        cands = np.array([[1, 2, 3], [4, 6, 7]])
        trace = Trace()
        forward(small_corpus, np.array([0, 1]), hist, cands, p, c, trace)
        np.testing.assert_allclose(trace.union, np.full((6, c.L), 1 / c.L), rtol=0, atol=1e-15)

    def test_null_history_slots_ignored(self, small_corpus, tiny_config):
        p = init_params(tiny_config, 4)
        trace = Trace()
        hist = np.array([[NULL_ITEM, NULL_ITEM, 9]])
        s = forward(small_corpus, np.array([0]), hist, np.array([[3, 4]]), p, tiny_config, trace)
        assert np.all(trace.union[:, :2] == 0.0) and np.all(trace.pointer == 2)
        assert np.all(np.isfinite(s.data))

    def test_null_item_vector_is_zero(self, small_corpus, tiny_config):
        enc = encode_all(small_corpus, init_params(tiny_config, 0), tiny_config)
        assert np.all(enc.items.data[NULL_ITEM] == 0.0)


@settings(max_examples=15, deadline=None)
@given(
    d=st.integers(1, 4), K=st.integers(1, 3), per=st.integers(1, 2),
    heights=st.sets(st.integers(1, 4), min_size=1, max_size=3),
    L=st.integers(1, 4), extra=st.integers(1, 4), seed=st.integers(0, 1000),
    flags=st.tuples(st.booleans(), st.booleans(), st.booleans()),
)
def test_shape_audit(d, K, per, heights, L, extra, seed, flags):
    hs = tuple(sorted(heights))
    use_union, use_position, use_aspects = flags
    c = ModelConfig(vocab_size=6, doc_len=max(hs) + extra, d=d, K=K, n=per * len(hs), filter_heights=hs, L=L,
                    use_union=use_union, use_individual=True, use_position=use_position, use_aspects=use_aspects)
    p = init_params(c, seed)
    for name, shape in param_shapes(c).items():
        assert p[name].shape == shape
    rng = np.random.default_rng(seed)
    docs = rng.integers(0, 6, size=(3, c.doc_len))
    assert encode_documents(docs, "item", p, c).shape == (3, c.n)
    enc_items = Tensor(np.vstack([np.zeros((1, c.n)), rng.normal(size=(5, c.n))]))
    from rns.model import Encoded
    enc = Encoded(Tensor(rng.normal(size=(2, c.n))), enc_items, {0: 0, 1: 1}, {i: i for i in range(6)})
    hist = rng.integers(1, 6, size=(2, L))
    trace = Trace()
    out = score_rows(enc, np.array([0, 1]), hist, rng.integers(1, 6, size=(2, 3)), p, c, trace)
    assert out.shape == (2, 3)
    assert trace.union.shape == (6, L) and trace.pointer.shape == (6,)
    assert trace.beta is None or trace.beta.shape == (6, 2)


class TestParameters:
    base = ModelConfig(vocab_size=50, doc_len=20, d=6, K=3, n=10, L=5)

    def test_count_formula(self):
        c = self.base
        per_side = 50 * 6 + 3 * 6 * 6 + sum(2 * h * 6 * 3 + 2 for h in c.filter_heights)
        assert parameter_count(c) == 2 * per_side + 5 * 10

    def test_no_position_removes_L_n(self):
        assert parameter_count(self.base) - parameter_count(ablate(self.base, "no-position")) == 5 * 10

    def test_no_aspect_removes_transforms(self):
        full, flat = param_shapes(self.base), param_shapes(ablate(self.base, "no-aspect"))
        transforms = sum(int(np.prod(s)) for k, s in full.items() if k.endswith("_aspect"))
        assert transforms == 2 * 3 * 6 * 6
        assert not any(k.endswith("_aspect") for k in flat)
        # filters lose their aspect depth: K channels become one
        c = self.base.filters_per_height
        filt_drop = 2 * sum(c * h * 6 * (3 - 1) for h in self.base.filter_heights)
        assert parameter_count(self.base) - parameter_count(ablate(self.base, "no-aspect")) == transforms + filt_drop

    @pytest.mark.parametrize("variant", ["no-union", "no-individual"])
    def test_attention_ablations_keep_count(self, variant):
        assert parameter_count(ablate(self.base, variant)) == parameter_count(self.base)

    def test_shared_embedding(self):
        shared = ModelConfig(**{**self.base.to_dict(), "shared_word_emb": True})
        assert parameter_count(self.base) - parameter_count(shared) == 50 * 6

    def test_init_ranges(self):
        p = init_params(self.base, 0)
        assert np.all(p["user_bias_h3"].data == 0) and np.all(p["position"].data == 0)
        bound = math.sqrt(6 / (6 + 6))
        assert np.abs(p["item_aspect"].data).max() <= bound
        fbound = math.sqrt(6 / (3 * 6 * 3 + 2))
        assert np.abs(p["user_filter_h3"].data).max() <= fbound

    def test_init_deterministic(self):
        a, b = init_params(self.base, 11), init_params(self.base, 11)
        assert all(np.array_equal(a[k].data, b[k].data) for k in a)


class TestCheckpoint:
    def test_round_trip_bitwise(self, small_corpus, tiny_config, tmp_path):
        p = init_params(tiny_config, 8)
        path = tmp_path / "m.rnsm"
        save_checkpoint(path, p, tiny_config, {"epoch": 3})
        back, cfg, extra = load_checkpoint(path)
        assert cfg == tiny_config and extra == {"epoch": 3}
        for k in p:
            assert back[k].data.tobytes() == p[k].data.tobytes()
        inst = make_training_instances(small_corpus, tiny_config.L, 3, seed=0)[:5]
        users, hist, cands = batch_arrays(inst)
        a = forward(small_corpus, users, hist, cands, p, tiny_config).data
        b = forward(small_corpus, users, hist, cands, back, cfg).data
        assert a.tobytes() == b.tobytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x"
        path.write_bytes(b"XXXX" + bytes(32))
        with pytest.raises(ValueError, match="not a model checkpoint"):
            load_checkpoint(path)


@pytest.fixture(scope="module")
def gradcheck_setup():
    corpus = gradcheck_corpus()
    config = ModelConfig(vocab_size=20, **TINY)
    inst = make_training_instances(corpus, config.L, 3, seed=2)[:4]
    return corpus, config, batch_arrays(inst)


class TestEndToEndGradient:
    @pytest.mark.parametrize("variant", ["full", "no-union", "no-individual", "no-aspect"])
    def test_every_parameter(self, gradcheck_setup, variant):
        corpus, base, (users, hist, cands) = gradcheck_setup
        config = ablate(base, variant)
        params = init_params(config, 21)
        # nonzero positions so their gradient path is generic
        if "position" in params:
            params["position"].data[:] = np.random.default_rng(1).normal(scale=0.3, size=params["position"].shape)
        names = list(params)

        def build():
            s = forward(corpus, users, hist, cands, params, config)
            return bce_loss(s, params, lam=1e-2, reg_weight=0.5)

        for name in names:
            assert check(build, [params[name]]) < 1e-4, name


def test_variants_cover_ablation_table():
    assert set(ABLATIONS) == {"full", "no-individual", "no-union", "no-position", "no-aspect"}
