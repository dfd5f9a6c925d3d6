import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amfc.cnn import capture_maps
from amfc.errors import ConfigurationError, DimensionError, FormatError
from amfc.featurespace import (
    EigRanking,
    Eigensystem,
    FeatureSpaceTransformer,
    LayerSpace,
    LayerSpaceBank,
    bank_from_bytes,
    bank_to_bytes,
    build_bank,
    collect_feature_matrix,
    eigendecompose,
    load_bank,
    maps_to_matrix,
    mean_vector,
    save_bank,
    select_basis,
)
from amfc.tensor import resize_bilinear

from helpers import rewrite_header


def svd_oracle(data):
    centred = data - data.mean(axis=0)
    _, s, vt = np.linalg.svd(centred, full_matrices=False)
    return s ** 2 / len(data), vt


def projector(rows):
    return rows.T @ rows


class TestCollect:
    def test_row_order(self):
        maps = np.arange(2 * 3 * 2 * 2, dtype=float).reshape(2, 3, 2, 2)
        X = maps_to_matrix(maps, 1)
        assert X.shape == (6, 4)
        for s in range(2):
            for k in range(3):
                np.testing.assert_array_equal(X.data[s * 3 + k], maps[s, k].ravel())

    def test_layer_one_native(self, mini_model, rng):
        X = collect_feature_matrix(mini_model, rng.random((2, 32, 32)), 1)
        assert X.shape == (2 * 8, 1024)

    def test_resize_to_previous_p(self, mini_model, rng):
        imgs = rng.random((2, 32, 32))
        X = collect_feature_matrix(mini_model, imgs, 3, prev_p=196)
        assert X.shape == (2 * 16, 196)
        maps = capture_maps(mini_model, imgs)[2]
        np.testing.assert_array_equal(X.data[17], resize_bilinear(maps[1, 1], 14, 14).ravel())

    def test_non_square_prev_p(self, mini_model, rng):
        with pytest.raises(ConfigurationError):
            collect_feature_matrix(mini_model, rng.random((1, 32, 32)), 2, prev_p=195)


class TestMean:
    def test_small(self):
        np.testing.assert_array_equal(mean_vector(np.array([[1.0, 2.0], [3.0, 4.0]])), [2.0, 3.0])

    def test_single_row(self):
        row = np.array([[0.1, -7.0, 3.5]])
        np.testing.assert_array_equal(mean_vector(row), row[0])

    def test_against_fsum(self, rng):
        X = rng.normal(size=(1000, 5))
        ref = np.array([math.fsum(X[::-1, j]) / 1000 for j in range(5)])
        np.testing.assert_allclose(mean_vector(X), ref, rtol=1e-12, atol=1e-15)


class TestEigendecompose:
    @pytest.mark.parametrize("method", ["snapshot", "direct"])
    def test_hand_covariance(self, method):
        eig = eigendecompose(np.array([[1.0, 2.0], [3.0, 4.0]]), method)
        assert eig.n_valid == 1
        top = eig.ranking.order[0]
        assert eig.values[top] == pytest.approx(2.0, rel=1e-12)
        np.testing.assert_allclose(eig.vectors[top], [1 / math.sqrt(2), 1 / math.sqrt(2)], atol=1e-12)

    def test_identical_rows(self):
        row = np.random.default_rng(0).random(7) * 0.1
        assert eigendecompose(np.tile(row, (3, 1))).n_valid == 0

    def test_snapshot_vs_svd(self, rng):
        X = rng.normal(size=(50, 200))
        eig = eigendecompose(X)
        lam, vt = svd_oracle(X)
        order = eig.ranking.order
        assert len(order) == 49
        np.testing.assert_allclose(eig.values[order], lam[:49], rtol=1e-8)
        for i, idx in enumerate(order):
            assert abs(abs(eig.vectors[idx] @ vt[i]) - 1) < 1e-8

    def test_subspace_matches_svd(self, rng):
        X = rng.normal(size=(30, 60))
        eig = eigendecompose(X, "snapshot")
        _, vt = svd_oracle(X)
        A = select_basis(eig, 10).basis
        assert np.linalg.norm(projector(A) - projector(vt[:10])) < 1e-6
        direct = select_basis(eigendecompose(X, "direct"), 10).basis
        assert np.linalg.norm(projector(A) - projector(direct)) < 1e-6

    def test_direct_when_tall(self, rng):
        X = rng.normal(size=(80, 10))
        eig = eigendecompose(X)
        lam, _ = svd_oracle(X)
        np.testing.assert_allclose(eig.values[eig.ranking.order], lam, rtol=1e-8)

    def test_rank_bound(self, rng):
        assert eigendecompose(rng.normal(size=(5, 30))).n_valid == 4

    def test_sign_convention(self, rng):
        eig = eigendecompose(rng.normal(size=(10, 20)))
        for idx in eig.ranking.order:
            v = eig.vectors[idx]
            assert v[np.abs(v).argmax()] > 0

    def test_too_few_rows(self):
        with pytest.raises(DimensionError):
            eigendecompose(np.ones((1, 4)))

    @settings(max_examples=20, deadline=None)
    @given(st.integers(3, 40), st.integers(2, 60), st.integers(0, 2 ** 31))
    def test_trace_completeness_and_orthonormality(self, v, n, seed):
        X = np.random.default_rng(seed).normal(size=(v, n))
        eig = eigendecompose(X)
        centred = X - X.mean(axis=0)
        trace = np.einsum("ij,ij->", centred, centred) / v
        assert eig.values[eig.ranking.order].sum() == pytest.approx(trace, rel=1e-8)
        A = eig.vectors[eig.ranking.order]
        assert np.abs(A @ A.T - np.eye(len(A))).max() < 1e-8
        # ranking is a permutation of the valid indices, descending
        assert sorted(eig.ranking.order) == list(np.flatnonzero(eig.ranking.valid))
        assert np.all(np.diff(eig.values[eig.ranking.order]) <= 0)


class TestSelect:
    def _eig(self):
        vectors = np.eye(3)
        values = np.array([1.0, 3.0, 2.0])
        order = np.array([1, 2, 0])
        return Eigensystem(values, vectors, EigRanking(order, np.ones(3, bool)))

    def test_first(self):
        space = select_basis(self._eig(), 2, "first_ranked")
        np.testing.assert_array_equal(space.basis, np.eye(3)[[1, 2]])
        np.testing.assert_array_equal(space.eigenvalues, [3.0, 2.0])

    def test_last(self):
        space = select_basis(self._eig(), 2, "last_ranked")
        np.testing.assert_array_equal(space.basis, np.eye(3)[[0, 2]])
        np.testing.assert_array_equal(space.eigenvalues, [1.0, 2.0])

    def test_random_reproducible(self, rng):
        eig = eigendecompose(rng.normal(size=(30, 40)))
        a = select_basis(eig, 9, "random", seed=5)
        b = select_basis(eig, 9, "random", seed=5)
        assert a.basis.tobytes() == b.basis.tobytes()
        assert not np.array_equal(a.basis, select_basis(eig, 9, "first_ranked").basis)

    def test_p_too_large_reports_count(self):
        with pytest.raises(ConfigurationError, match="3 valid"):
            select_basis(self._eig(), 4)

    def test_square_required_when_chained(self):
        with pytest.raises(ConfigurationError, match="perfect square"):
            select_basis(self._eig(), 2, feeds_successor=True)


@pytest.fixture(scope="module")
def samples():
    return np.random.default_rng(2).random((200, 32, 32))


@pytest.fixture(scope="module")
def bank(mini_model, samples):
    return build_bank(mini_model, samples, 200, [196, 144, 100, 64], "first_ranked", seed=1)


class TestBank:
    def test_shapes(self, bank):
        assert [s.n for s in bank.spaces] == [1024, 196, 144, 100]
        assert [s.p for s in bank.spaces] == [196, 144, 100, 64]
        assert bank.input_h == 32 and bank.output_dim == 64

    def test_orthonormal(self, bank):
        for s in bank.spaces:
            assert np.abs(s.basis @ s.basis.T - np.eye(s.p)).max() < 1e-8

    def test_first_ranked_descending(self, bank):
        for s in bank.spaces:
            assert np.all(np.diff(s.eigenvalues) <= 0)

    def test_provenance(self, bank, mini_model):
        assert bank.provenance["M"] == 200
        assert bank.provenance["model_hash"] == mini_model.digest()

    def test_rank_bound_error(self, mini_model, samples):
        # 2 samples x 8 kernels = 16 rows -> at most 15 valid pairs
        with pytest.raises(ConfigurationError, match="layer 1"):
            build_bank(mini_model, samples, 2, [16, 9])

    def test_non_square_interior(self, mini_model, samples):
        with pytest.raises(ConfigurationError):
            build_bank(mini_model, samples, 10, [15, 9])

    def test_deterministic_bytes(self, mini_model, samples):
        a = build_bank(mini_model, samples, 20, [49, 36], "random", seed=3)
        b = build_bank(mini_model, samples, 20, [49, 36], "random", seed=3)
        assert bank_to_bytes(a) == bank_to_bytes(b)

    def test_spectra_hook(self, mini_model, samples):
        spectra = []
        bank = build_bank(mini_model, samples, 20, [49, 36], spectra=spectra)
        assert len(spectra) == 2
        np.testing.assert_array_equal(spectra[0][:49], bank.spaces[0].eigenvalues)

    def test_chain_compatibility(self):
        a = LayerSpace(np.zeros(4), np.eye(4), np.ones(4))
        b = LayerSpace(np.zeros(9), np.eye(9)[:4], np.ones(4))
        with pytest.raises(DimensionError):
            LayerSpaceBank([a, b])

    def test_truncated(self, bank):
        half = bank.truncated(2)
        assert len(half) == 2 and half.output_dim == 144


class TestBankFormat:
    @pytest.fixture
    def small_bank(self, rng):
        s1 = LayerSpace(rng.normal(size=16), np.linalg.qr(rng.normal(size=(16, 9)))[0].T, rng.random(9))
        s2 = LayerSpace(rng.normal(size=9), np.linalg.qr(rng.normal(size=(9, 4)))[0].T, rng.random(4))
        return LayerSpaceBank([s1, s2], {"M": 3, "seed": 0})

    def test_round_trip(self, small_bank, tmp_path):
        save_bank(small_bank, tmp_path / "b.amfcb")
        back = load_bank(tmp_path / "b.amfcb")
        assert back.provenance == small_bank.provenance
        for x, y in zip(back.spaces, small_bank.spaces):
            assert x.mean.tobytes() == y.mean.tobytes()
            assert x.basis.tobytes() == y.basis.tobytes()
            assert x.eigenvalues.tobytes() == y.eigenvalues.tobytes()
        assert bank_to_bytes(back) == bank_to_bytes(small_bank)

    def test_bad_magic(self, small_bank):
        with pytest.raises(FormatError, match="magic"):
            bank_from_bytes(b"AMFCW1" + bank_to_bytes(small_bank)[6:])

    def test_truncated(self, small_bank):
        with pytest.raises(FormatError):
            bank_from_bytes(bank_to_bytes(small_bank)[:-3])

    def test_layer_count_mismatch(self, small_bank):
        def edit(h):
            h["layer_count"] = 3
        with pytest.raises(FormatError, match="3 layers"):
            bank_from_bytes(rewrite_header(bank_to_bytes(small_bank), edit))

    def test_shape_mismatch(self, small_bank):
        def edit(h):
            h["layers"][1]["n"] = 8
        with pytest.raises(FormatError):
            bank_from_bytes(rewrite_header(bank_to_bytes(small_bank), edit))


def test_transformer(mini_model, rng):
    X = rng.random((30, 32, 32))
    tr = FeatureSpaceTransformer(mini_model, n_samples=10, p_schedule=(49, 25), random_state=0)
    Z = tr.fit_transform(X)
    assert Z.shape == (30, 25)
    assert tr.n_features_out_ == 25
