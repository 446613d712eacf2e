import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpgan.data import SemanticEmbedding
from mpgan.errors import DimensionMismatch, EmptyDocument, FormatError, RankError
from mpgan.text import Corpus, load_corpus, pca_fit, pca_reconstruct, pca_transform, tfidf
from oracles import svd_pca


def emb(x):
    return SemanticEmbedding(tuple(range(len(x))), np.asarray(x, dtype=np.float64), "denoised")


class TestTfidf:
    def test_single_term(self):
        out = tfidf(Corpus({0: ["a", "a"]}))
        assert out.vectors.tolist() == [[1.0]]

    def test_two_documents_hand_example(self):
        out = tfidf(Corpus({0: ["a", "b"], 1: ["a"]}))
        # idf(a) = ln(3/3) + 1 = 1, idf(b) = ln(3/2) + 1; pre-norm row 0 = [0.5, 0.5 * idf(b)]
        idf_b = math.log(1.5) + 1
        norm = math.hypot(0.5, 0.5 * idf_b)
        assert round(idf_b, 4) == 1.4055
        np.testing.assert_allclose(out.vectors[0], [0.5 / norm, 0.5 * idf_b / norm], rtol=0, atol=1e-12)
        assert np.round(out.vectors[0], 4).tolist() == [0.5797, 0.8148]
        assert out.vectors[1].tolist() == [1.0, 0.0]

    def test_vocabulary_sorted(self):
        c = Corpus({0: ["zeta", "alpha"], 1: ["mid"]})
        assert c.vocabulary == ("alpha", "mid", "zeta")

    def test_cub_scale_dimension(self):
        terms = [f"w{i:05d}" for i in range(7551)]
        docs = {c: terms[c::200] for c in range(200)}
        out = tfidf(Corpus(docs))
        assert out.dim == 7551

    def test_empty_document(self):
        with pytest.raises(EmptyDocument):
            Corpus({0: ["a"], 1: []})

    def test_fit_on_seen_only(self):
        c = Corpus({0: ["a", "b"], 1: ["a", "c"], 2: ["c", "d"]})
        out = tfidf(c, fit_classes=[0, 1])
        assert out.dim == 3  # a, b, c
        assert out.vectors[2, 2] == 1.0  # only "c" survives for class 2

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.lists(st.sampled_from("abcdefg"), min_size=1, max_size=12), min_size=1, max_size=6))
    def test_nonnegative_unit_rows_deterministic(self, docs):
        corpus = Corpus(dict(enumerate(docs)))
        a, b = tfidf(corpus), tfidf(corpus)
        assert (a.vectors >= 0).all()
        np.testing.assert_allclose(np.linalg.norm(a.vectors, axis=1), 1.0, atol=1e-12)
        assert a == b

    def test_load_corpus(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"classes": [{"id": 3, "tokens": ["small", "gray", "bird"]},
                                                {"id": 1, "tokens": ["red"]}]}))
        c = load_corpus(path)
        assert c.class_ids == (3, 1)
        path.write_text('{"classes": [{"tokens": []}]}')
        with pytest.raises(FormatError):
            load_corpus(path)


class TestPca:
    def test_cub_shaped_rank_bound(self, rng):
        x = rng.random((200, 7551))
        model = pca_fit(emb(x), 200)
        assert model.components.shape == (200, 7551)
        np.testing.assert_allclose(model.components @ model.components.T, np.eye(200), atol=1e-8)
        with pytest.raises(RankError):
            pca_fit(emb(x), 201)

    def test_rank_bound_small(self, rng):
        with pytest.raises(RankError):
            pca_fit(emb(rng.random((5, 3))), 4)
        with pytest.raises(RankError):
            pca_fit(emb(rng.random((5, 3))), 0)

    @pytest.mark.parametrize("n,dim", [(10, 6), (6, 10)])
    def test_lossless_in_subspace(self, rng, n, dim):
        k = 3
        basis = np.linalg.qr(rng.normal(size=(dim, k)))[0].T
        x = rng.normal(size=(n, k)) @ basis + rng.normal(size=dim)
        model = pca_fit(emb(x), k)
        z = pca_transform(model, emb(x)).vectors
        np.testing.assert_allclose(pca_reconstruct(model, z), x, atol=1e-8)

    def test_reconstruction_error_matches_oracle(self, rng):
        x = rng.normal(size=(10, 6))
        k = 3
        model = pca_fit(emb(x), k)
        _, comps, evals = svd_pca(x, k)
        recon = pca_reconstruct(model, pca_transform(model, emb(x)).vectors)
        err = ((recon - x) ** 2).sum()
        assert abs(err - evals[k:].sum() * (10 - 1)) <= 1e-8
        np.testing.assert_allclose(model.eigenvalues, evals[:k], atol=1e-8)
        # same subspace, same axes up to sign
        np.testing.assert_allclose(np.abs(model.components @ comps.T), np.eye(k), atol=1e-8)

    def test_gram_route_matches_oracle(self, rng):
        x = rng.normal(size=(8, 30))
        model = pca_fit(emb(x), 5)
        _, comps, evals = svd_pca(x, 5)
        np.testing.assert_allclose(np.abs(model.components @ comps.T), np.eye(5), atol=1e-8)
        np.testing.assert_allclose(model.eigenvalues, evals[:5], atol=1e-8)

    def test_zero_variance_directions_completed(self, rng):
        # 8 centred points span at most 7 directions; k = 8 needs one filler axis
        x = rng.normal(size=(8, 30))
        model = pca_fit(emb(x), 8)
        np.testing.assert_allclose(model.components @ model.components.T, np.eye(8), atol=1e-8)
        assert model.eigenvalues[-1] == 0.0

    def test_sign_convention(self, rng):
        model = pca_fit(emb(rng.normal(size=(12, 5))), 4)
        for row in model.components:
            assert row[np.argmax(np.abs(row))] > 0

    def test_mean_maps_to_zero(self, rng):
        x = rng.normal(size=(10, 6))
        model = pca_fit(emb(x), 3)
        z = pca_transform(model, emb(model.mean[None, :])).vectors
        np.testing.assert_allclose(z, 0.0, atol=1e-12)

    def test_decorrelated(self, rng):
        x = rng.normal(size=(10, 6)) @ rng.normal(size=(6, 6))
        model = pca_fit(emb(x), 4)
        z = pca_transform(model, emb(x)).vectors
        cov = np.cov(z, rowvar=False)
        off = cov - np.diag(np.diag(cov))
        assert np.abs(off).max() <= 1e-8
        np.testing.assert_allclose(np.diag(cov), model.eigenvalues, atol=1e-8)

    def test_full_rank_isometry(self, rng):
        x = rng.normal(size=(10, 6))
        model = pca_fit(emb(x), 6)
        z = pca_transform(model, emb(x)).vectors
        dx = np.linalg.norm(x[:, None] - x[None], axis=-1)
        dz = np.linalg.norm(z[:, None] - z[None], axis=-1)
        np.testing.assert_allclose(dz, dx, atol=1e-8)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 6))
    def test_projection_contracts(self, seed, k):
        r = np.random.default_rng(seed)
        x = r.normal(size=(10, 6))
        model = pca_fit(emb(x), k)
        a, b = r.normal(size=(2, 6))
        pa, pb = pca_transform(model, emb(np.stack([a, b]))).vectors
        assert np.linalg.norm(pa - pb) <= np.linalg.norm(a - b) + 1e-12

    def test_dimension_mismatch(self, rng):
        model = pca_fit(emb(rng.normal(size=(10, 6))), 3)
        with pytest.raises(DimensionMismatch):
            pca_transform(model, emb(rng.normal(size=(2, 5))))

    def test_output_stage(self, rng):
        model = pca_fit(emb(rng.random((6, 4))), 2)
        assert pca_transform(model, emb(rng.random((6, 4)))).stage == "denoised"
