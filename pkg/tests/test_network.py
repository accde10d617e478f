import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dlcert.errors import AssumptionViolated, DegenerateSpectrum, InvalidInput
from dlcert.linalg import numerical_rank
from dlcert.network import (
    Dims,
    WeightStack,
    check_assumptions,
    forward_product,
    gradients,
    load_instance,
    load_weights,
    loss,
    loss_and_gradients,
    loss_change,
    make_instance,
    partial_products,
    product_range,
    residual_to_plain,
    save_instance,
    save_weights,
)
from dlcert.relaxed import optimal_loss, solve_full_rank
from helpers import fd_gradients, rand_case, rand_instance, split_product, zero_stack

widths = st.lists(st.integers(1, 5), min_size=3, max_size=5)
seeds = st.integers(0, 2**32 - 1)


class TestDims:
    def test_k_and_p(self):
        d = Dims((4, 2, 3, 2, 5), 10)
        assert (d.H, d.k, d.p, d.admissible_p) == (3, 2, 1, (1, 3))
        assert not d.full_bottleneck and Dims((3, 4, 2)).full_bottleneck

    def test_rejects_m_too_small(self):
        with pytest.raises(InvalidInput):
            Dims((5, 2, 3), 4)

    @pytest.mark.parametrize("d", [(3,), (3, 0, 2)])
    def test_rejects_bad_widths(self, d):
        with pytest.raises(InvalidInput):
            Dims(d)

    def test_params(self):
        assert Dims((3, 4, 2)).n_params == 3 * 4 + 4 * 2


class TestInstance:
    def test_validated(self):
        inst = rand_instance(0, 3, 2, 20)
        assert inst.validated and inst.scale >= 1

    def test_rank_deficient_x(self):
        X = np.ones((2, 5))
        with pytest.raises(AssumptionViolated):
            make_instance(X, np.random.default_rng(0).standard_normal((2, 5)))

    def test_duplicated_rows(self):
        rng = np.random.default_rng(0)
        X, Y = rng.standard_normal((3, 10)), rng.standard_normal((3, 10))
        Y[2] = Y[0]
        with pytest.raises(AssumptionViolated):
            check_assumptions(X, Y)

    def test_repeated_spectrum(self):
        # X = I, Y with equal singular values
        with pytest.raises(DegenerateSpectrum):
            make_instance(np.eye(3), np.diag([2.0, 2.0, 1.0]))

    def test_wide_output_trailing_zeros_not_compared(self):
        inst = rand_instance(5, 2, 4, 12)
        assert inst.validated and inst.spectrum[2] < 1e-10

    def test_unvalidated(self):
        assert not make_instance(np.eye(2), np.eye(2), validate=False).validated

    def test_sample_mismatch(self):
        with pytest.raises(InvalidInput):
            make_instance(np.eye(2), np.ones((2, 3)))


class TestWeightStack:
    def test_shape_chain(self):
        with pytest.raises(InvalidInput):
            WeightStack((np.ones((3, 2)), np.ones((2, 4))))

    def test_dims_mismatch(self):
        with pytest.raises(InvalidInput):
            WeightStack((np.ones((3, 2)),), Dims((2, 4)))

    def test_non_finite(self):
        with pytest.raises(InvalidInput):
            WeightStack((np.array([[np.nan]]),))

    def test_replace_is_one_based(self):
        W = zero_stack((2, 3, 2))
        assert np.all(W.replace(2, np.ones((2, 3))).W[1] == 1)


class TestForwardAndLoss:
    def test_identity(self):
        assert np.array_equal(forward_product(WeightStack((np.eye(3),) * 3)), np.eye(3))

    def test_zero_layer(self):
        W = WeightStack((np.ones((2, 2)), np.zeros((2, 2)), np.ones((2, 2))))
        assert not forward_product(W).any()

    def test_small_example(self):
        W = WeightStack((np.array([[1.0], [2.0]]), np.array([[3.0, 4.0]])))
        assert forward_product(W).tolist() == [[11.0]]

    def test_zero_product_loss(self):
        inst = rand_instance(1, 3, 2, 10)
        assert loss(zero_stack((3, 4, 2)), inst) == pytest.approx(0.5 * np.sum(inst.Y ** 2), rel=1e-15)

    def test_perfect_fit(self):
        Y = np.array([[1.0, 2.0], [3.0, 5.0]])
        inst = make_instance(np.eye(2), Y)
        assert loss(WeightStack((Y,)), inst) == 0.0

    def test_seed13_matches_loop_oracle(self, frozen):
        inst, W = rand_case(13, [3, 4, 2], 10)
        assert loss(W, inst) == pytest.approx(frozen["loss_seed13_d3-4-2_m10"], rel=1e-12)

    def test_product_range(self):
        inst, W = rand_case(3, [2, 3, 4, 2], 10)
        np.testing.assert_allclose(product_range(W, 2, 3), W[2] @ W[1])
        np.testing.assert_array_equal(product_range(W, 3, 2), np.eye(4))

    def test_incompatible(self):
        inst = rand_instance(1, 3, 2, 10)
        with pytest.raises(InvalidInput):
            loss(zero_stack((2, 2)), inst)


class TestGradients:
    def test_zero_at_closed_form_minimum(self):
        inst = rand_instance(2, 3, 2, 20)
        W = split_product(solve_full_rank(inst).R_star, (3, 4, 2))
        assert max(np.linalg.norm(g) for g in gradients(W, inst)) < 1e-10 * inst.scale

    def test_zero_stack(self):
        inst = rand_instance(2, 3, 2, 20)
        assert all(not g.any() for g in gradients(zero_stack((3, 4, 5, 2)), inst))

    def test_seed17_finite_differences(self):
        inst, W = rand_case(17, [3, 4, 2, 3], 15)
        for g, fd in zip(gradients(W, inst), fd_gradients(W, inst)):
            np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-8)

    def test_partial_products_h1(self):
        inst, W = rand_case(4, [3, 4, 2], 10)
        pp = partial_products(W, inst)
        np.testing.assert_array_equal(pp.A_at(1), W[1].T)
        np.testing.assert_array_equal(pp.B_at(2), W[0].T)
        assert np.array_equal(pp.A_at(2), np.eye(2)) and np.array_equal(pp.B_at(1), np.eye(3))

    def test_identity_stack_residual_zero(self):
        inst = make_instance(np.eye(2), np.diag([2.0, 1.0]), validate=False)
        W = WeightStack((np.eye(2), np.diag([2.0, 1.0])))
        assert not partial_products(W, inst).E.any()

    def test_seed19_partial_products_match_gradients(self):
        inst, W = rand_case(19, [3, 2, 4, 3], 12)
        pp = partial_products(W, inst)
        for i, g in enumerate(gradients(W, inst), start=1):
            np.testing.assert_allclose(pp.A_at(i) @ pp.E @ pp.B_at(i), g, rtol=1e-12, atol=1e-12)

    @given(seeds, widths)
    @settings(max_examples=30, deadline=None)
    def test_fd_property(self, seed, inner):
        d = [3] + inner[1:-1] + [2]
        inst, W = rand_case(seed % 1000, d, 8)
        for g, fd in zip(gradients(W, inst), fd_gradients(W, inst)):
            assert np.all(np.abs(g - fd) <= 1e-5 * np.abs(fd) + 1e-8)

    @given(seeds, widths)
    @settings(max_examples=30, deadline=None)
    def test_product_factorisation_and_rank_chain(self, seed, inner):
        d = [inner[0] + 1] + inner[1:-1] + [inner[-1] + 1]
        inst, W = rand_case(seed % 1000, d, 10)
        dims, pp = W.dims, partial_products(W, inst)
        p = dims.p
        if p == 0 or p == len(d) - 1:
            return
        P = forward_product(W)
        np.testing.assert_allclose(pp.A_at(p).T @ pp.B_at(p + 1).T, P, rtol=1e-10,
                                   atol=1e-10 * np.linalg.norm(P))
        ra = [numerical_rank(pp.A_at(i)) for i in range(1, p + 1)]
        rb = [numerical_rank(pp.B_at(i)) for i in range(p + 1, len(d))]
        assert ra == sorted(ra) and rb == sorted(rb, reverse=True)
        if numerical_rank(P) == dims.k:
            assert set(ra) | set(rb) == {dims.k}

    @given(seeds)
    @settings(max_examples=25, deadline=None)
    def test_relaxation_lower_bound(self, seed):
        inst, W = rand_case(seed % 500, [4, 2, 3], 12)
        assert loss(W, inst) >= optimal_loss(inst, 2).total - 1e-10


class TestLossChange:
    @given(seeds, st.floats(1e-8, 1.0))
    @settings(max_examples=30, deadline=None)
    def test_matches_direct_difference(self, seed, t):
        inst, W = rand_case(seed % 500, [3, 4, 2], 10)
        rng = np.random.default_rng(seed)
        steps = [t * rng.standard_normal(w.shape) for w in W.W]
        moved = WeightStack(tuple(w + s for w, s in zip(W.W, steps)))
        direct = loss(moved, inst) - loss(W, inst)
        assert loss_change(W, steps, inst) == pytest.approx(direct, rel=1e-6, abs=1e-10 * loss(W, inst))

    def test_resolves_below_loss_rounding(self):
        # a first-order change far below eps * L is still computed with the right sign
        inst, W = rand_case(8, [3, 4, 2], 10)
        _, grads = loss_and_gradients(W, inst)
        t = 1e-20
        delta = loss_change(W, [-t * g for g in grads], inst)
        gsq = sum(float(np.sum(g * g)) for g in grads)
        assert delta == pytest.approx(-t * gsq, rel=1e-6)


class TestResidual:
    def test_zero(self):
        W = residual_to_plain([np.zeros((3, 3))] * 2)
        assert all(np.array_equal(w, np.eye(3)) for w in W.W)

    def test_half_norm(self):
        V = np.diag([0.5, -0.5, 0.2])
        W = residual_to_plain([V])
        assert np.linalg.svd(W[0], compute_uv=False)[-1] >= 0.5

    def test_seed23_full_rank(self):
        rng = np.random.default_rng(23)
        V = []
        for _ in range(3):
            A = rng.standard_normal((4, 4))
            V.append(0.9 * A / np.linalg.norm(A, 2))
        assert numerical_rank(forward_product(residual_to_plain(V))) == 4

    def test_non_square(self):
        with pytest.raises(InvalidInput):
            residual_to_plain([np.zeros((2, 3))])


class TestFiles:
    def test_weights_round_trip(self, tmp_path):
        _, W = rand_case(6, [3, 4, 2], 10)
        save_weights(W, tmp_path / "w", m=10)
        assert json.loads((tmp_path / "w" / "dims.json").read_text()) == {"d": [3, 4, 2], "m": 10}
        assert sorted(p.name for p in (tmp_path / "w").iterdir()) == ["W1.csv", "W2.csv", "dims.json"]
        back = load_weights(tmp_path / "w")
        for a, b in zip(W.W, back.W):
            np.testing.assert_array_equal(a, b)

    def test_instance_round_trip(self, tmp_path):
        inst = rand_instance(6, 3, 2, 10)
        save_instance(inst, tmp_path / "i")
        back = load_instance(tmp_path / "i")
        assert back.validated
        np.testing.assert_array_equal(back.X, inst.X)
        np.testing.assert_array_equal(back.Y, inst.Y)
