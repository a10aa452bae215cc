import math

import numpy as np
import pytest

from profuse.autodiff import Rng
from profuse.expressiveness import (
    ArchitectureGraph, LinearFusionSpec, Node, SpecError, all_monomials, check_column_proportionality,
    early_graph, effective_early, effective_late, effective_pro, first_layer_feature_count, fit_residual,
    format_monomial, input_monomials, is_symmetric_family, late_graph, modality_degrees, monomial,
    pairwise_products, pro_graph, reachable_monomials, report, restrict, run_checks,
)
from profuse.models import EncoderSpec, FusionSpec, PredictorSpec, build_base, build_early
from profuse.training import predict


def jacobian(model, D):
    """Input-output matrix of a bias-free linear model, read off unit inputs."""
    eye = np.eye(2 * D)
    zero = predict(model, [np.zeros((1, D)), np.zeros((1, D))])
    out = predict(model, [eye[:, :D], eye[:, D:]]) - zero
    return out.T


class TestLinearBlocks:
    def test_hand_example(self):
        # d=1, D=2, K=2: F=[[1,2],[3,4]], W11=[5,6], W22=[7,8]
        s = LinearFusionSpec([[1.0, 2.0], [3.0, 4.0]], [[5.0, 6.0]], [[7.0, 8.0]])
        np.testing.assert_array_equal(effective_late(s), [[5, 6, 14, 16], [15, 18, 28, 32]])
        s2 = LinearFusionSpec(s.F, s.W11, s.W22, W12=[[1.0, 0.0]], W21=[[0.0, 1.0]])
        # early adds F11 W12 + F12 W22 on the right, F11 W11 + F12 W21 on the left
        np.testing.assert_array_equal(effective_early(s2), [[5, 8, 15, 16], [15, 22, 31, 32]])

    def test_early_without_cross_blocks_is_late(self):
        for i in range(50):
            s = LinearFusionSpec.random(Rng(i), D=3, d=2, K=3)
            np.testing.assert_allclose(effective_early(s), effective_late(s), rtol=0, atol=1e-12)

    def test_pro_without_backprojection_is_late_exactly(self):
        for i in range(200):
            s = LinearFusionSpec.random(Rng(i))
            assert np.array_equal(effective_pro(s), effective_late(s))

    def test_pro_hand_formula(self):
        r = Rng(7)
        s = LinearFusionSpec.random(r, D=2, d=1, K=2, backproject=True)
        (g11, g12), (g21, g22) = s.G
        first = np.block([[(1 + g11) * s.W11, g12 * s.W22], [g21 * s.W11, (1 + g22) * s.W22]])
        np.testing.assert_allclose(effective_pro(s), s.F @ first, rtol=1e-13)

    def test_shapes_validated(self):
        with pytest.raises(SpecError):
            LinearFusionSpec(np.ones((2, 2)), np.ones((1, 2)), np.ones((1, 3)))
        with pytest.raises(SpecError):
            LinearFusionSpec(np.ones((2, 3)), np.ones((1, 2)), np.ones((1, 2)))
        with pytest.raises(SpecError):
            LinearFusionSpec(np.ones((2, 2)), np.ones((1, 2)), np.ones((1, 2)), G=np.ones((1, 1)))


class TestAgainstModels:
    """The analyzer's effective matrices match Jacobians of the network code."""

    def test_late_model_jacobian(self):
        base = build_base([EncoderSpec(2, (1,), "linear"), EncoderSpec(2, (1,), "linear")], FusionSpec(),
                          PredictorSpec(2, (), "linear"), Rng(3))
        p = dict(base.named_parameters())
        s = LinearFusionSpec(p["pred.0.weight"].data.T, p["enc0.0.weight"].data.T, p["enc1.0.weight"].data.T)
        np.testing.assert_allclose(jacobian(base, 2), effective_late(s), atol=1e-12)
        assert check_column_proportionality(jacobian(base, 2), 2)[0]

    def test_early_model_jacobian(self):
        m = build_early([2, 2], (2,), PredictorSpec(2, (), "linear"), Rng(4), "linear")
        p = dict(m.named_parameters())
        W = p["body.0.weight"].data.T  # rows: fused feature, cols: [x1 | x2]
        s = LinearFusionSpec(p["pred.0.weight"].data.T, W[:1, :2], W[1:, 2:], W12=W[:1, 2:], W21=W[1:, :2])
        J = jacobian(m, 2)
        np.testing.assert_allclose(J, effective_early(s), atol=1e-12)
        assert not check_column_proportionality(J, 2)[0]


class TestColumnProportionality:
    def test_late_passes_dense_fails(self):
        late = [check_column_proportionality(effective_late(LinearFusionSpec.random(Rng(i))), 2, K=2)
                for i in range(1000)]
        dense = [check_column_proportionality(Rng(5000 + i).normal((2, 4)), 2) for i in range(1000)]
        assert all(ok for ok, _ in late)
        assert not any(ok for ok, _ in dense)

    def test_deviation_is_sine_of_angle(self):
        M = np.array([[1.0, 1.0, 1.0, 0.0], [0.0, 1.0, 0.0, 1.0]])
        ok, dev = check_column_proportionality(M, 2)
        assert not ok and dev == pytest.approx(1.0)
        ok, dev = check_column_proportionality(M[:, :2], 2)
        assert dev == pytest.approx(1 / math.sqrt(2))

    def test_zero_column_is_parallel(self):
        assert check_column_proportionality(np.array([[0.0, 1.0, 2.0, 4.0], [0.0, 3.0, 1.0, 2.0]]), 2)[0]

    def test_bad_layout(self):
        with pytest.raises(SpecError):
            check_column_proportionality(np.ones((2, 5)), 2)
        with pytest.raises(SpecError):
            check_column_proportionality(np.ones((2, 4)), 2, K=3)


class TestFitResidual:
    TARGET = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])

    def test_counterexample(self):
        late = fit_residual("late", self.TARGET, restarts=4, steps=800)
        early = fit_residual("early", self.TARGET, restarts=4, steps=800)
        pro = fit_residual("pro", self.TARGET, restarts=4, steps=800)
        assert late > 0.1 and early < 1e-6 and pro <= late

    def test_late_fits_its_own_matrices(self):
        T = effective_late(LinearFusionSpec.random(Rng(2)))
        assert fit_residual("late", T, restarts=3, steps=1500) < 1e-4

    def test_validation(self):
        with pytest.raises(ValueError):
            fit_residual("mid", self.TARGET)
        with pytest.raises(SpecError):
            fit_residual("late", np.ones((2, 3)))


class TestMonomials:
    def test_first_layer_enumeration(self):
        inputs = input_monomials(1, 2) | input_monomials(2, 2)
        early = restrict(pairwise_products(inputs), deg=2)
        late = restrict(pairwise_products(input_monomials(1, 2)) | pairwise_products(input_monomials(2, 2)), deg=2)
        assert len(early) == 10 == first_layer_feature_count(2, 2, "early")
        assert len(late) == 6 == first_layer_feature_count(2, 2, "late")

    @pytest.mark.parametrize("n,D", [(1, 3), (2, 3), (3, 2), (2, 5)])
    def test_counts_match_enumeration(self, n, D):
        inputs = frozenset().union(*(input_monomials(m, D) for m in range(1, n + 1)))
        per = frozenset().union(*(pairwise_products(input_monomials(m, D)) for m in range(1, n + 1)))
        assert len(restrict(pairwise_products(inputs), deg=2)) == first_layer_feature_count(n, D, "early")
        assert len(restrict(per, deg=2)) == first_layer_feature_count(n, D, "late")

    def test_count_validation(self):
        with pytest.raises(ValueError):
            first_layer_feature_count(0, 2, "early")
        with pytest.raises(ValueError):
            first_layer_feature_count(2, 2, "pro")

    def test_helpers(self):
        m = monomial((2, 1), (1, 2), (1, 1), (1, 1))
        assert m == ((1, 1), (1, 1), (1, 2), (2, 1))
        assert modality_degrees(m) == (3, 1) and not is_symmetric_family(m)
        assert format_monomial(m) == "X1_1*X1_1*X1_2*X2_1" and format_monomial(()) == "1"
        assert pairwise_products([((1, 1),)]) == {(), ((1, 1),), ((1, 1), (1, 1))}

    def test_all_monomials_count(self):
        # monomials of degree <= k in v variables: C(v + k, k)
        assert len(all_monomials(2, 4)) == math.comb(4 + 4, 4)

    @pytest.mark.parametrize("D", [1, 2, 3])
    def test_nesting_up_to_degree_four(self, D):
        L = restrict(reachable_monomials(late_graph(D), 4), max_degree=4)
        P = restrict(reachable_monomials(pro_graph(D), 4), max_degree=4)
        E = restrict(reachable_monomials(early_graph(D), 4), max_degree=4)
        assert L <= P <= E
        assert E == all_monomials(D, 4)  # two pairing layers reach every monomial up to degree 4

    def test_late_degree_four_is_symmetric(self):
        L = reachable_monomials(late_graph(3), 4)
        deg4 = restrict(L, deg=4)
        assert deg4 and all(is_symmetric_family(m) for m in deg4)
        # exhaustive: every symmetric degree-4 monomial is reachable
        assert deg4 == {m for m in restrict(all_monomials(3, 4), deg=4) if is_symmetric_family(m)}

    def test_asymmetric_monomial(self):
        m = monomial((1, 1), (1, 1), (1, 2), (2, 1))
        assert m not in reachable_monomials(late_graph(2), 4)
        assert m in reachable_monomials(early_graph(2), 4)
        assert m in reachable_monomials(pro_graph(2), 4)

    def test_single_pass_pro_is_late(self):
        assert reachable_monomials(pro_graph(2, unroll=1), 4) == reachable_monomials(late_graph(2), 4)

    def test_degree_cap_is_exact_below_cap(self):
        full = reachable_monomials(late_graph(2))
        assert restrict(full, max_degree=4) == reachable_monomials(late_graph(2), 4)
        assert max(len(m) for m in full) == 4


class TestGraphValidation:
    def test_unknown_op_and_node(self):
        with pytest.raises(SpecError):
            ArchitectureGraph([Node("x", "input", modality=1), Node("y", "relu", ("x",))], "y", 2)
        with pytest.raises(SpecError):
            ArchitectureGraph([Node("y", "linear", ("x",))], "y", 2)
        with pytest.raises(SpecError):
            ArchitectureGraph([Node("x", "input", modality=1)], "z", 2)

    def test_cycle_without_backprojection(self):
        nodes = [Node("a", "linear", ("b",)), Node("b", "linear", ("a",))]
        with pytest.raises(SpecError, match="cycle"):
            ArchitectureGraph(nodes, "a", 2)

    def test_feedback_needs_unroll(self):
        g = pro_graph(2)
        with pytest.raises(SpecError, match="unroll"):
            ArchitectureGraph(g.nodes, g.output, 2)
        with pytest.raises(SpecError):
            ArchitectureGraph(g.nodes, g.output, 2, unroll=0)

    def test_width_budget_not_modelled(self):
        with pytest.raises(NotImplementedError):
            reachable_monomials(late_graph(2), unlimited_width=False)


class TestReport:
    def test_all_checks_pass(self):
        checks = run_checks(n_random=200, fit_restarts=4, fit_steps=800)
        assert all(c.passed for c in checks), [c for c in checks if not c.passed]
        text = report(checks)
        assert text.count("[PASS]") == len(checks) and "C(nD, 2)" in text
