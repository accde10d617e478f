import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dlcert.errors import InvalidInput, NoDeclaredInverse, WrongRegime
from dlcert.probe import (
    LayerMap,
    Pipeline,
    Sampler,
    arctan,
    check_theorem3,
    check_theorem4,
    compose_jacobian,
    custom,
    estimate_sigma_min_inf,
    excess_risk,
    frechet_directional,
    frechet_finite_difference,
    linear,
    load_pipeline,
    padding,
    realization_index,
    realize_pipeline,
    scaled,
    tanh,
    truncation,
    verify_layer,
    _fd_jacobian,
)
from dlcert.network import write_matrix_csv


def _rand(rng, *shape):
    return rng.standard_normal(shape)


def random_pipeline(seed, dims=(3, 4, 4, 2)):
    """Alternating linear and tanh layers: linear, tanh, linear, ..."""
    rng = np.random.default_rng(seed)
    layers = []
    for a, b in zip(dims, dims[1:]):
        layers.append(linear(_rand(rng, b, a) / np.sqrt(a)))
        layers.append(tanh(b))
    return Pipeline(tuple(layers[:-1])), rng


def tanh_target(seed, dx, dy):
    rng = np.random.default_rng(seed)
    return Pipeline((linear(_rand(rng, dy, dx)), tanh(dy)), check_widths=False)


class TestLayers:
    def test_constructors_verified(self):
        for h in (linear(np.arange(6.0).reshape(2, 3)), tanh(3), arctan(2),
                  padding(2, 4), truncation(4, 2)):
            assert verify_layer(h).ok

    def test_wrong_jacobian_rejected(self):
        with pytest.raises(InvalidInput, match="jacobian_rel_err"):
            custom(2, 2, lambda X: np.sin(X), lambda X: np.zeros((X.shape[0], 2, 2)), 1.0, True)

    def test_nonzero_at_origin_rejected(self):
        with pytest.raises(InvalidInput):
            custom(2, 2, lambda X: X + 1.0, lambda X: np.broadcast_to(np.eye(2), (X.shape[0], 2, 2)),
                   10.0, True)

    def test_growth_bound_enforced(self):
        with pytest.raises(InvalidInput):
            custom(2, 2, lambda X: 3 * X, lambda X: np.broadcast_to(3 * np.eye(2), (X.shape[0], 2, 2)),
                   1.0, True)

    def test_unknown_kind(self):
        with pytest.raises(InvalidInput):
            LayerMap(1, 1, "relu", lambda X: X, lambda X: X, 1.0, False)

    def test_inverses(self):
        u = np.array([0.3, -1.2, 2.0])
        assert np.allclose(tanh(3).invert(tanh(3).eval(u)), u)
        assert np.allclose(arctan(3).invert(arctan(3).eval(u)), u)
        assert np.all(np.isnan(tanh(1).invert(np.array([2.0]))))
        assert np.array_equal(padding(3, 5).invert(padding(3, 5).eval(u)), u)
        assert np.array_equal(truncation(5, 3).eval(truncation(5, 3).invert(u)), u)

    def test_no_inverse(self):
        h = custom(1, 1, lambda X: X ** 3 + X, lambda X: (3 * X ** 2 + 1)[:, :, None], 1e6, True)
        with pytest.raises(NoDeclaredInverse):
            h.invert(np.ones(1))

    def test_width_mismatch(self):
        with pytest.raises(InvalidInput):
            tanh(3).eval(np.ones(2))


class TestPipeline:
    def test_chain_mismatch(self):
        with pytest.raises(InvalidInput, match="chain"):
            Pipeline((tanh(2), tanh(3)))

    def test_narrow_width_rejected(self):
        with pytest.raises(InvalidInput, match="min"):
            Pipeline((truncation(3, 1), padding(1, 3)))

    def test_segment(self):
        p, _ = random_pipeline(0)
        x = np.ones(3)
        assert np.allclose(p.segment(2, len(p.layers), p.segment(1, 1, x)), p.eval(x))
        assert np.array_equal(p.segment(3, 2, x), x)


class TestComposeJacobian:
    def test_all_linear(self):
        rng = np.random.default_rng(1)
        A, B = _rand(rng, 4, 3), _rand(rng, 2, 4)
        p = Pipeline((linear(A), linear(B)))
        for x in (np.zeros(3), _rand(rng, 3) * 10):
            assert np.allclose(compose_jacobian(p, 1, x), B @ A, rtol=0, atol=1e-14)

    def test_tanh_at_zero(self):
        assert np.array_equal(compose_jacobian(Pipeline((tanh(3),)), 1, np.zeros(3)), np.eye(3))

    def test_seed71_finite_difference(self):
        rng = np.random.default_rng(71)
        p = Pipeline((linear(_rand(rng, 4, 3)), tanh(4)))
        x = _rand(rng, 3)
        J = compose_jacobian(p, 1, x)
        fd = _fd_jacobian(p.eval, x, 4)
        assert np.linalg.norm(J - fd) / np.linalg.norm(fd) < 1e-5

    def test_empty_suffix(self):
        p, _ = random_pipeline(0)
        assert np.array_equal(compose_jacobian(p, len(p.layers) + 1, np.ones(2)), np.eye(2))

    def test_dimension_mismatch(self):
        p, _ = random_pipeline(0)
        with pytest.raises(InvalidInput):
            compose_jacobian(p, 1, np.ones(4))

    @given(st.integers(0, 10_000), st.integers(2, 4))
    @settings(max_examples=30, deadline=None)
    def test_chain_rule_associativity(self, seed, cut):
        p, rng = random_pipeline(seed)
        x = _rand(rng, 3)
        head = Pipeline(p.layers[: cut - 1], check_widths=False)
        z = head.eval(x)
        full = compose_jacobian(p, 1, x)
        split = compose_jacobian(p, cut, z) @ compose_jacobian(head, 1, x)
        assert np.allclose(full, split, rtol=0, atol=1e-10 * max(1.0, np.linalg.norm(full)))


class TestSigmaMin:
    def test_linear_suffix(self):
        rng = np.random.default_rng(3)
        A = _rand(rng, 2, 3)
        p = Pipeline((linear(np.eye(3)), linear(A)))
        est = estimate_sigma_min_inf(p, 2, Sampler(50, 0))
        assert est == pytest.approx(np.linalg.svd(A, compute_uv=False)[-1], rel=1e-12)

    def test_realized_suffix(self):
        p = realize_pipeline(tanh_target(2, 3, 2), [3, 4, 3, 2])
        assert estimate_sigma_min_inf(p, 2, Sampler(1000, 0)) >= 1 - 1e-12

    def test_tanh_saturation(self):
        p = Pipeline((linear(np.eye(3)), tanh(3)))
        assert estimate_sigma_min_inf(p, 2, Sampler(200, 0, scale=10.0)) < 1e-3


class TestTheorem3:
    def test_realized_satisfied(self):
        p = realize_pipeline(tanh_target(4, 3, 2), [3, 5, 2])
        rep = check_theorem3(p, Sampler(500, 1), 0.5)
        assert rep.satisfied and rep.theorem == "T3" and rep.n_samples == 500

    def test_zero_layer_in_suffix(self):
        p = Pipeline((linear(np.eye(3)), linear(np.zeros((3, 3))), linear(np.ones((2, 3)))))
        rep = check_theorem3(p, Sampler(100, 0), 1e-6)
        assert rep.sigma_min_inf_estimate == 0 and not rep.satisfied

    def test_wrong_regime(self):
        with pytest.raises(WrongRegime):
            check_theorem3(Pipeline((linear(np.ones((3, 2))),)), Sampler(10), 0.1)

    def test_report_json(self):
        p = realize_pipeline(tanh_target(4, 3, 2), [3, 5, 2])
        data = check_theorem3(p, Sampler(20, 1), 0.5).to_json()
        assert "sampled" in data["note"]
        json.dumps(data)


def _t4_pipeline(prefix):
    # prefix on R^2 followed by a realized suffix 2 -> 3 at j = 2
    rng = np.random.default_rng(9)
    B = _rand(rng, 3, 2)
    return Pipeline((prefix, linear(B), padding(3, 4), truncation(4, 3)))


class TestTheorem4:
    def test_identity_prefix(self):
        rep = check_theorem4(_t4_pipeline(linear(np.eye(2))), 2, Sampler(300, 0), (1.0 - 1e-12, 1e-6))
        assert rep.satisfied
        assert rep.epsilons["epsilon1_estimate"] == pytest.approx(1.0, abs=1e-12)
        assert rep.invertibility_evidence < 1e-8

    def test_half_identity(self):
        rep = check_theorem4(_t4_pipeline(linear(0.5 * np.eye(2))), 2, Sampler(300, 0), (1e-6, 1e-6))
        assert rep.epsilons["epsilon1_estimate"] == pytest.approx(0.5, abs=1e-12)

    def test_arctan_prefix_large_scale(self):
        p = _t4_pipeline(arctan(2))
        small = check_theorem4(p, 2, Sampler(300, 0, scale=0.01), (0.5, 1e-6))
        large = check_theorem4(p, 2, Sampler(300, 0, scale=100.0), (0.5, 1e-6))
        assert large.epsilons["epsilon1_estimate"] < 0.05
        assert not large.satisfied
        assert small.epsilons["epsilon1_estimate"] > 0.99

    def test_no_inverse(self):
        cube = custom(2, 2, lambda X: X ** 3 + X, lambda X: np.einsum("ni,ij->nij", 3 * X ** 2 + 1, np.eye(2)),
                      1e7, True)
        with pytest.raises(NoDeclaredInverse):
            check_theorem4(_t4_pipeline(cube), 2, Sampler(10), (0.1, 0.1))

    def test_wrong_regime(self):
        with pytest.raises(WrongRegime):
            check_theorem4(Pipeline((linear(np.ones((2, 3))),)), 1, Sampler(10), (0.1, 0.1))
        with pytest.raises(WrongRegime):
            check_theorem4(_t4_pipeline(linear(np.eye(2))), 3, Sampler(10), (0.1, 0.1))


class TestFrechet:
    def _case(self, seed):
        p, rng = random_pipeline(seed)
        i = int(rng.integers(1, len(p.layers) + 1))
        layer = p.layers[i - 1]
        eta = Pipeline((linear(_rand(rng, layer.out_dim, layer.in_dim)), tanh(layer.out_dim)),
                       check_widths=False).as_layer()
        target = Pipeline((linear(_rand(rng, 2, 3)),), check_widths=False)
        return p, i, eta, target

    def test_zero_direction(self):
        p, i, _, target = self._case(0)
        layer = p.layers[i - 1]
        eta = linear(np.zeros((layer.out_dim, layer.in_dim)))
        assert frechet_directional(p, i, eta, target, Sampler(100, 0)).mean == 0.0

    def test_realized_target(self):
        target = tanh_target(5, 3, 2)
        p = realize_pipeline(target, [3, 4, 2])
        eta = linear(np.ones((4, 3)))
        est = frechet_directional(p, 1, eta, target, Sampler(500, 0))
        assert est.mean == 0.0 and est.stderr == 0.0

    def test_seed73(self):
        p, i, eta, target = self._case(73)
        s = Sampler(4096, 73)
        mc = frechet_directional(p, i, eta, target, s).mean
        fd = frechet_finite_difference(p, i, eta, target, s)
        assert abs(mc - fd) <= 1e-3 * abs(fd)

    @pytest.mark.parametrize("seed", range(20))
    def test_agreement(self, seed):
        p, i, eta, target = self._case(seed)
        s = Sampler(4096, seed)
        mc = frechet_directional(p, i, eta, target, s).mean
        fd = frechet_finite_difference(p, i, eta, target, s)
        assert abs(mc - fd) <= 1e-3 * abs(fd)

    def test_direction_shape(self):
        p, i, _, target = self._case(0)
        with pytest.raises(InvalidInput):
            frechet_directional(p, i, tanh(7), target, Sampler(10))


class TestRealize:
    def test_linear_332(self):
        A = np.random.default_rng(8).standard_normal((2, 3))
        p = realize_pipeline(linear(A), [3, 3, 2])
        X = Sampler(1000, 0).draw(3)
        assert np.array_equal(p.eval(X), linear(A).eval(X))

    def test_tanh_2432(self):
        target = tanh_target(1, 2, 2)
        p = realize_pipeline(target, [2, 4, 3, 2])
        rep = excess_risk(p, target, Sampler(1000, 0))
        assert rep.max_discrepancy == 0 and rep.excess == 0

    @pytest.mark.parametrize("seed", range(5))
    def test_properties(self, seed):
        target = tanh_target(seed, 3, 2)
        p = realize_pipeline(target, [3, 5, 4, 2])
        assert excess_risk(p, target, Sampler(1000, seed)).max_discrepancy == 0
        assert estimate_sigma_min_inf(p, 2, Sampler(1000, seed)) >= 1 - 1e-12
        for h in p.layers:
            assert np.all(h.eval(np.zeros(h.in_dim)) == 0)

    def test_index(self):
        assert realization_index([3, 3, 2]) == 1
        assert realization_index([2, 2, 3, 3]) == 2
        with pytest.raises(WrongRegime):
            realization_index([3, 1, 3])

    def test_dim_mismatch(self):
        with pytest.raises(InvalidInput):
            realize_pipeline(linear(np.ones((2, 3))), [4, 4, 2])


class TestExcessRisk:
    def test_doubled(self):
        target = tanh_target(6, 3, 2)
        p = realize_pipeline(target, [3, 3, 2])
        doubled = Pipeline(p.layers[:-1] + (scaled(p.layers[-1], 2.0),))
        s = Sampler(2000, 6)
        X = s.draw(3)
        direct = 0.5 * np.mean(np.sum(target.eval(X) ** 2, axis=1))
        assert excess_risk(doubled, target, s).excess == pytest.approx(direct, rel=1e-12)

    def test_single_sample(self):
        target = tanh_target(6, 3, 2)
        rep = excess_risk(Pipeline((linear(np.zeros((2, 3))),)), target, Sampler(1, 0))
        assert rep.high_variance and rep.n == 1 and rep.stderr == np.inf

    def test_sampler_validation(self):
        with pytest.raises(InvalidInput):
            Sampler(0)


class TestLoad:
    def test_round_trip(self, tmp_path):
        A = np.arange(6.0).reshape(3, 2) / 6
        write_matrix_csv(tmp_path / "A.csv", A)
        spec = {"layers": [{"kind": "linear", "matrix": "A.csv"}, {"kind": "tanh"},
                           {"kind": "padding", "out": 5}, {"kind": "truncation", "out": 3}]}
        (tmp_path / "p.json").write_text(json.dumps(spec))
        p = load_pipeline(tmp_path / "p.json")
        assert p.dims == (2, 3, 3, 5, 3)
        x = np.array([0.5, -1.0])
        assert np.allclose(p.eval(x), np.tanh(A @ x))

    def test_leading_width_needed(self, tmp_path):
        (tmp_path / "p.json").write_text(json.dumps([{"kind": "tanh"}]))
        with pytest.raises(InvalidInput):
            load_pipeline(tmp_path / "p.json")
        (tmp_path / "q.json").write_text(json.dumps({"input_dim": 2, "layers": [{"kind": "arctan"}]}))
        assert load_pipeline(tmp_path / "q.json").dims == (2, 2)
