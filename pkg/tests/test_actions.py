import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cagpy import kernels
from cagpy.actions import (ActionMatrix, _top_eigvecs, action_products, actions_cg, actions_eigen_oracle,
                           actions_random, actions_sparse_init, block_bounds, check_full_rank,
                           kernel_times_actions, mutual_information, numerical_rank, orthonormalize)
from cagpy.errors import ContractViolation, OracleTooLarge, RankDeficient
from cagpy.exact_gp import khat_dense
from cagpy.kernels import HyperParams, KernelSpec
from cagpy.metrics import grassmann_distance

from oracles import random_problem

SPEC = KernelSpec()


def problem(seed, n, d=2, noise=None):
    X, y, o, ls, s = random_problem(np.random.default_rng(seed), n, d, noise)
    return X, y, HyperParams.from_natural(o, ls, s)


def far_apart(n):
    """Inputs so far apart that the Matern Gram matrix is the identity times o^2."""
    return (np.arange(n) * 1e4)[:, None]


class TestActionMatrix:
    def test_dense_sparse_agree(self):
        S = actions_sparse_init(10, 3, 0)
        D = ActionMatrix.dense_from(S.dense())
        v = np.random.default_rng(0).standard_normal((10, 2))
        np.testing.assert_allclose(S.transpose_times(v), D.transpose_times(v), rtol=1e-14)
        np.testing.assert_allclose(S.gram(), D.gram(), rtol=1e-14, atol=1e-300)
        assert S.logdet_gram() == pytest.approx(D.logdet_gram(), rel=1e-12)

    def test_layout_validation(self):
        with pytest.raises(ContractViolation):
            ActionMatrix(4, cols=np.zeros((3, 2)))
        with pytest.raises(ContractViolation):
            ActionMatrix(4, bounds=np.array([0, 2, 2, 4]), values=np.ones(4))
        with pytest.raises(ContractViolation):
            ActionMatrix(4)

    @pytest.mark.parametrize("S", [actions_sparse_init(9, 4, 1), actions_random(9, 3, 1)], ids=["sparse", "dense"])
    def test_dict_round_trip(self, S):
        T = ActionMatrix.from_dict(S.to_dict())
        assert T.layout == S.layout
        np.testing.assert_array_equal(T.dense(), S.dense())

    def test_with_values_keeps_pattern(self):
        S = actions_sparse_init(12, 4, 2)
        T = S.with_values(np.arange(12.0) + 1)
        np.testing.assert_array_equal(T.bounds, S.bounds)
        np.testing.assert_array_equal(T.trainable(), np.arange(12.0) + 1)

    def test_rank_checks(self):
        with pytest.raises(RankDeficient):
            check_full_rank(ActionMatrix.dense_from(np.array([[1.0, 2.0], [1.0, 2.0], [0.0, 0.0]])))
        with pytest.raises(RankDeficient):
            check_full_rank(ActionMatrix.block_sparse(np.r_[1.0, 1.0, 0.0, 0.0], 2))
        assert numerical_rank(np.diag([1e-12, 1.0, 1e6])) == 3


class TestBlockSparse:
    def test_exact_division(self):
        S = actions_sparse_init(8, 4, 0)
        assert np.diff(S.bounds).tolist() == [2, 2, 2, 2]
        assert S.nnz == 8

    def test_remainder_goes_to_last_block(self):
        assert np.diff(block_bounds(10, 4)).tolist() == [2, 2, 2, 4]

    def test_gram_is_diagonal(self):
        G = actions_sparse_init(17, 5, 3).gram()
        assert np.count_nonzero(G - np.diag(np.diag(G))) == 0

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 500), st.data())
    def test_supports_partition(self, n, data):
        i = data.draw(st.integers(1, n))
        b = block_bounds(n, i)
        assert b[0] == 0 and b[-1] == n and b.size == i + 1
        sizes = np.diff(b)
        assert np.all(sizes[:-1] == n // i) and sizes[-1] == n // i + n % i

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 200), st.integers(0, 2 ** 31), st.data())
    def test_always_full_rank(self, n, seed, data):
        i = data.draw(st.integers(1, min(n, 30)))
        S = actions_sparse_init(n, i, seed)
        assert numerical_rank(S.dense()) == i

    def test_unit_scale_columns_on_average(self):
        norms = [np.diag(actions_sparse_init(400, 4, s).gram()) for s in range(200)]
        assert np.mean(norms) == pytest.approx(1.0, abs=0.05)


class TestCgActions:
    def test_zero_rhs_gives_empty_actions(self):
        X, _, p = problem(0, 10)
        S = actions_cg(SPEC, p, X, np.zeros(10), 5)
        assert S.is_empty and S.meta["empty"] and S.meta["realized_i"] == 0

    def test_scaled_identity_converges_in_one_step(self):
        p = HyperParams.from_natural(1.0, [1.0], 0.5)
        y = np.random.default_rng(1).standard_normal(6)
        S = actions_cg(SPEC, p, far_apart(6), y, 4)
        assert S.i == 1 and S.meta["realized_i"] == 1
        np.testing.assert_array_equal(S.cols[:, 0], y)

    def test_residuals_are_orthogonal(self):
        X, y, p = problem(2, 30)
        S = actions_cg(SPEC, p, X, y, 10, tol=0.0)
        Q = S.cols / np.linalg.norm(S.cols, axis=0)
        off = np.abs(Q.T @ Q - np.eye(S.i))
        assert off.max() < 1e-7

    def test_plain_cg_also_orthogonal_when_well_conditioned(self):
        X, y, p = problem(3, 30, noise=0.7)
        S = actions_cg(SPEC, p, X, y, 6, tol=0.0, reorthogonalize=False)
        Q = S.cols / np.linalg.norm(S.cols, axis=0)
        assert np.abs(Q.T @ Q - np.eye(6)).max() < 1e-7

    def test_solution_matches_dense_solve_at_full_budget(self):
        X, y, p = problem(4, 25, noise=0.5)
        S = actions_cg(SPEC, p, X, y, 100, tol=1e-12)
        assert S.i <= 25
        np.testing.assert_allclose(S.meta["solution"], np.linalg.solve(khat_dense(SPEC, p, X), y), rtol=1e-8)

    @pytest.mark.parametrize("seed", [5, 6, 7])
    def test_span_equals_krylov_space(self, seed):
        n = 20 + 20 * (seed - 5)
        X, y, p = problem(seed, n, noise=0.5)
        S = actions_cg(SPEC, p, X, y, 5, tol=0.0)
        Khat = khat_dense(SPEC, p, X)
        K = [y]
        for _ in range(4):
            K.append(Khat @ K[-1])
        assert grassmann_distance(np.column_stack(K), S.cols) < 1e-6

    def test_early_stop_records_realized_budget(self):
        X, y, p = problem(8, 40, noise=1.0)
        S = actions_cg(SPEC, p, X, y, 40, tol=1e-3)
        assert S.i == S.meta["realized_i"] < 40


class TestEigenOracle:
    def test_diagonal_matrix(self):
        U = _top_eigvecs(np.diag([3.0, 2.0, 1.0]), 2).cols
        np.testing.assert_array_equal(U, np.eye(3)[:, :2])

    def test_ties_follow_index_order(self):
        U = _top_eigvecs(np.diag([1.0, 5.0, 5.0, 5.0]), 2).cols
        np.testing.assert_array_equal(U, np.eye(4)[:, 1:3])

    def test_sign_normalization(self):
        X, _, p = problem(9, 30)
        U = actions_eigen_oracle(SPEC, p, X, 5).cols
        assert np.all(U[np.argmax(np.abs(U), axis=0), np.arange(5)] > 0)

    def test_full_budget_is_orthogonal_basis(self):
        X, _, p = problem(10, 15)
        U = actions_eigen_oracle(SPEC, p, X, 15)
        np.testing.assert_allclose(U.cols.T @ U.cols, np.eye(15), atol=1e-12)
        assert np.all(np.diff(U.meta["eigenvalues"]) <= 0)

    def test_cap(self):
        X, _, p = problem(11, 12)
        with pytest.raises(OracleTooLarge):
            actions_eigen_oracle(SPEC, p, X, 2, cap=10)

    def test_mutual_information_scalar_case(self):
        # far-apart inputs with o = sigma = 1 give Khat = 2 I
        p = HyperParams.from_natural(1.0, [1.0], 1.0)
        U = actions_eigen_oracle(SPEC, p, far_apart(2), 1)
        assert mutual_information(SPEC, p, far_apart(2), U) == pytest.approx(0.5 * math.log(2), rel=1e-12)
        assert 0.5 * math.log(2) == pytest.approx(0.34657359027997264)

    @pytest.mark.parametrize("i", [1, 2, 3])
    def test_eigen_actions_maximize_information(self, i):
        X, _, p = problem(12, 35)
        lam = np.sort(np.linalg.eigvalsh(khat_dense(SPEC, p, X)))[::-1]
        best = mutual_information(SPEC, p, X, actions_eigen_oracle(SPEC, p, X, i))
        assert best == pytest.approx(0.5 * (np.log(lam[:i]).sum() - i * math.log(p.noise_var)), abs=1e-10)
        for seed in range(200):
            assert mutual_information(SPEC, p, X, actions_random(35, i, seed)) <= best + 1e-10


class TestRandomActions:
    def test_seeded(self):
        np.testing.assert_array_equal(actions_random(7, 3, 4).cols, actions_random(7, 3, 4).cols)

    def test_square_full_rank(self):
        assert numerical_rank(actions_random(5, 5, 0).cols) == 5

    def test_different_seeds_give_different_spans(self):
        assert grassmann_distance(actions_random(20, 3, 0).cols, actions_random(20, 3, 1).cols) > 0.1

    def test_budget_checked(self):
        with pytest.raises(ContractViolation):
            actions_random(3, 4, 0)


class TestProducts:
    def setup_method(self):
        self.X, _, self.p = problem(13, 40)
        self.K = kernels.gram(SPEC, self.p, self.X)
        self.Khat = self.K + self.p.noise_var * np.eye(40)

    def test_identity_actions(self):
        A, KS, G = action_products(ActionMatrix.dense_from(np.eye(40)), SPEC, self.p, self.X)
        np.testing.assert_allclose(A, self.Khat, rtol=1e-12)
        np.testing.assert_allclose(KS, self.K, rtol=1e-12)
        np.testing.assert_array_equal(G, np.eye(40))

    def test_sparse_matches_dense(self):
        S = actions_sparse_init(40, 6, 0)
        Sd = S.dense()
        A, KS, G = action_products(S, SPEC, self.p, self.X)
        np.testing.assert_allclose(A, Sd.T @ self.Khat @ Sd, rtol=1e-10)
        np.testing.assert_allclose(KS, self.K @ Sd, rtol=1e-10)
        np.testing.assert_allclose(G, Sd.T @ Sd, rtol=1e-10)
        np.testing.assert_array_equal(A, A.T)

    @pytest.mark.parametrize("S", [actions_sparse_init(40, 5, 1), actions_random(40, 5, 1)], ids=["sparse", "dense"])
    def test_bilinear_scaling(self, S):
        A, KS, G = action_products(S, SPEC, self.p, self.X)
        A3, KS3, G3 = action_products(S.scaled(3.0), SPEC, self.p, self.X)
        np.testing.assert_allclose(A3, 9 * A, rtol=1e-12)
        np.testing.assert_allclose(KS3, 3 * KS, rtol=1e-12)
        np.testing.assert_allclose(G3, 9 * G, rtol=1e-12)

    def test_cross_rows(self):
        S = actions_sparse_init(40, 4, 2)
        Xs = np.random.default_rng(0).uniform(size=(7, 2))
        got = kernel_times_actions(S, SPEC, self.p, self.X, Xs)
        np.testing.assert_allclose(got, kernels.gram(SPEC, self.p, Xs, self.X) @ S.dense(), rtol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ContractViolation):
            action_products(actions_random(39, 2, 0), SPEC, self.p, self.X)


class TestOrthonormalize:
    def test_orthonormal_input_unchanged(self):
        Q, _ = np.linalg.qr(np.random.default_rng(0).standard_normal((10, 3)))
        np.testing.assert_allclose(np.abs(orthonormalize(ActionMatrix.dense_from(Q)).cols), np.abs(Q), atol=1e-12)

    def test_scaling_removed(self):
        np.testing.assert_allclose(orthonormalize(ActionMatrix.dense_from(2 * np.eye(4))).cols, np.eye(4), atol=1e-15)

    def test_span_and_orthonormality(self):
        S = actions_random(20, 5, 3)
        Q = orthonormalize(S).cols
        np.testing.assert_allclose(Q.T @ Q, np.eye(5), atol=1e-10)
        assert grassmann_distance(S.cols, Q) < 1e-8

    def test_rank_deficient(self):
        with pytest.raises(RankDeficient):
            orthonormalize(ActionMatrix.dense_from(np.ones((4, 2))))
