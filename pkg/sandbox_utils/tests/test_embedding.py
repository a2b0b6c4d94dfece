"""compute_embedding_similarity: shapes, oracle equivalence, symmetry."""

import numpy as np
import pytest

from utils.embedding import compute_embedding_similarity, _embed


class TestSimilarity:
    def test_same_string_both_sides_is_one(self, mock_env):
        mock_env()
        matrix = compute_embedding_similarity(["hello"], ["hello"])
        assert matrix.shape == (1, 1)
        assert abs(matrix[0, 0] - 1.0) <= 1e-9

    def test_shape_is_len_a_by_len_b(self, mock_env):
        mock_env()
        matrix = compute_embedding_similarity(["a", "b"], ["x", "y", "z"])
        assert matrix.shape == (2, 3)

    def test_matches_double_loop_oracle(self, mock_env):
        mock_env()
        texts_a = [f"left {i}" for i in range(4)]
        texts_b = [f"right {j}" for j in range(5)]
        got = compute_embedding_similarity(texts_a, texts_b)

        raw_a = _embed(texts_a)
        raw_b = _embed(texts_b)
        for i in range(4):
            va = raw_a[i] / np.linalg.norm(raw_a[i])
            for j in range(5):
                vb = raw_b[j] / np.linalg.norm(raw_b[j])
                expected = float(sum(va[k] * vb[k] for k in range(len(va))))
                assert abs(got[i, j] - expected) <= 1e-9

    def test_self_similarity_has_unit_diagonal(self, mock_env):
        mock_env()
        texts = ["one", "two", "three"]
        matrix = compute_embedding_similarity(texts, texts)
        assert np.allclose(np.diag(matrix), 1.0, atol=1e-9)

    def test_values_bounded_by_one(self, mock_env):
        mock_env()
        matrix = compute_embedding_similarity(["p", "q", "r"], ["s", "t"])
        assert np.all(matrix <= 1.0 + 1e-9) and np.all(matrix >= -1.0 - 1e-9)

    def test_empty_list_rejected(self, mock_env):
        mock_env()
        with pytest.raises(ValueError, match="non-empty"):
            compute_embedding_similarity([], ["x"])
        with pytest.raises(ValueError, match="non-empty"):
            compute_embedding_similarity(["x"], [])
