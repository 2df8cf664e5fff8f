import numpy as np
import pytest

from popdyn import (
    ConvergenceError,
    EmptyLearnerError,
    LearnerRule,
    StepSchedule,
    custom_risk,
    full_minimize,
    gradient_step,
    learner_avg_risk,
    quadratic_risk,
    step_size,
    verify_learner_risk_reducing,
)


class TestStepSize:
    def test_harmonic_at_origin(self):
        assert step_size(0, StepSchedule(form="harmonic", base=1.0)) == 1.0

    def test_harmonic_tenth_step(self):
        assert step_size(9, StepSchedule(form="harmonic", base=1.0)) == pytest.approx(0.1)

    def test_constant(self):
        sched = StepSchedule(form="constant", base=0.3)
        assert step_size(0, sched) == step_size(1000, sched) == 0.3

    def test_harmonic_partial_sums_diverge(self):
        # sum of 1/(t+1) up to 1e6 exceeds 10 (infinite-travel condition)
        t = np.arange(1_000_000)
        assert (1.0 / (t + 1)).sum() > 10.0

    def test_base_must_be_positive(self):
        with pytest.raises(ValueError):
            StepSchedule(base=0.0)


class TestGradientStep:
    def test_fixed_at_weighted_minimizer(self):
        risks = (quadratic_risk([0.0]), quadratic_risk([1.0]))
        beta = np.array([0.5, 0.5])
        col = np.array([1.0, 1.0])
        theta = np.array([0.5])
        out = gradient_step(theta, col, beta, risks, 0.1)
        assert np.allclose(out, theta)

    def test_hand_computed_step(self):
        risks = (quadratic_risk([0.0]),)
        out = gradient_step(np.array([1.0]), np.array([1.0]), np.array([1.0]),
                            risks, 0.25)
        assert out[0] == pytest.approx(0.5)

    def test_descent_lemma_on_random_instances(self):
        rng = np.random.default_rng(20)
        for _ in range(100):
            n, d = int(rng.integers(1, 5)), int(rng.integers(1, 4))
            risks = []
            max_eig = 0.0
            for _ in range(n):
                Q = rng.standard_normal((d, d))
                A = Q @ Q.T + 0.2 * np.eye(d)
                max_eig = max(max_eig, np.linalg.eigvalsh(A).max())
                risks.append(quadratic_risk(rng.uniform(-1, 1, d), A))
            beta = rng.dirichlet(np.ones(n)) if n > 1 else np.array([1.0])
            col = rng.uniform(0.1, 1.0, n)
            theta = rng.uniform(-2, 2, d)
            # descent holds for steps below 1/(2 max_eig) = 1/lambda_max(Hessian)
            gamma = 0.9 / (2 * max_eig)
            out = gradient_step(theta, col, beta, tuple(risks), gamma)
            assert verify_learner_risk_reducing(theta, out, col, beta,
                                                tuple(risks))

    def test_empty_learner_raises(self):
        risks = (quadratic_risk([0.0]),)
        with pytest.raises(EmptyLearnerError):
            gradient_step(np.array([1.0]), np.array([0.0]), np.array([1.0]),
                          risks, 0.1)


class TestFullMinimize:
    def test_symmetric_mean(self):
        risks = tuple(quadratic_risk([float(c)]) for c in (0, 1, 2))
        beta = np.full(3, 1 / 3)
        out = full_minimize(np.ones(3), beta, risks)
        assert out[0] == pytest.approx(1.0)

    def test_minority_closed_form(self):
        for beta in (0.1, 0.3, 0.45):
            phi = 7.0
            risks = (quadratic_risk([0.0]), quadratic_risk([phi]))
            out = full_minimize(np.ones(2), np.array([beta, 1 - beta]), risks)
            assert out[0] == pytest.approx((1 - beta) * phi, abs=1e-12)

    def test_pair_group_weighted_mean(self):
        rng = np.random.default_rng(21)
        for _ in range(50):
            b2, b3 = rng.uniform(0.05, 0.45, 2)
            p2, p3 = rng.uniform(-3, 3, 2)
            risks = (quadratic_risk([p2]), quadratic_risk([p3]))
            out = full_minimize(np.ones(2), np.array([b2, b3]) / (b2 + b3),
                                risks)
            expected = (b2 * p2 + b3 * p3) / (b2 + b3)
            assert out[0] == pytest.approx(expected, abs=1e-12)

    def test_newton_agrees_with_closed_form(self):
        rng = np.random.default_rng(22)
        for _ in range(50):
            n, d = int(rng.integers(1, 5)), int(rng.integers(1, 4))
            risks = []
            for _ in range(n):
                Q = rng.standard_normal((d, d))
                risks.append(quadratic_risk(rng.uniform(-1, 1, d),
                                            Q @ Q.T + 0.3 * np.eye(d)))
            beta = rng.dirichlet(np.ones(n)) if n > 1 else np.array([1.0])
            col = rng.uniform(0.1, 1.0, n)
            closed = full_minimize(col, beta, tuple(risks))
            newton = full_minimize(col, beta, tuple(risks), method="newton")
            assert np.abs(closed - newton).max() <= 1e-8

    def test_first_order_optimality(self):
        from popdyn import learner_gradient
        rng = np.random.default_rng(23)
        for _ in range(50):
            n, d = int(rng.integers(1, 5)), int(rng.integers(1, 3))
            risks = tuple(quadratic_risk(rng.uniform(-1, 1, d)) for _ in range(n))
            beta = rng.dirichlet(np.ones(n)) if n > 1 else np.array([1.0])
            col = rng.uniform(0.1, 1.0, n)
            out = full_minimize(col, beta, risks)
            g = learner_gradient(out, col, beta, risks)
            assert np.linalg.norm(g) <= 1e-9

    def test_identity_curvature_output_in_hull(self):
        rng = np.random.default_rng(24)
        for _ in range(50):
            n, d = int(rng.integers(2, 5)), 2
            centers = rng.uniform(-2, 2, (n, d))
            risks = tuple(quadratic_risk(c) for c in centers)
            beta = rng.dirichlet(np.ones(n))
            col = rng.uniform(0.05, 1.0, n)
            out = full_minimize(col, beta, risks)
            w = col * beta
            w = w / w.sum()
            assert np.abs(out - w @ centers).max() <= 1e-12

    def test_custom_risk_newton(self):
        quartic = custom_risk(
            1,
            value=lambda th: float(th[0] ** 4 + th[0] ** 2),
            gradient=lambda th: np.array([4 * th[0] ** 3 + 2 * th[0]]),
            hessian=lambda th: np.array([[12 * th[0] ** 2 + 2]]),
        )
        out = full_minimize(np.array([1.0]), np.array([1.0]), (quartic,),
                            method="newton", start=np.array([5.0]))
        assert abs(out[0]) <= 1e-9

    def test_newton_iteration_budget(self):
        quartic = custom_risk(
            1,
            value=lambda th: float(th[0] ** 4 + th[0] ** 2),
            gradient=lambda th: np.array([4 * th[0] ** 3 + 2 * th[0]]),
            hessian=lambda th: np.array([[12 * th[0] ** 2 + 2]]),
        )
        with pytest.raises(ConvergenceError):
            full_minimize(np.array([1.0]), np.array([1.0]), (quartic,),
                          method="newton", max_iterations=1,
                          start=np.array([50.0]))

    def test_empty_learner_raises(self):
        risks = (quadratic_risk([0.0]),)
        with pytest.raises(EmptyLearnerError):
            full_minimize(np.array([0.0]), np.array([1.0]), risks)

    def test_gradient_descent_converges_to_full_min(self):
        # harmonic schedule with base c: error contracts like T^(-2 lambda c);
        # identity curvature (lambda = 1) and c = 0.45 give T^(-0.9)
        rng = np.random.default_rng(25)
        risks = tuple(quadratic_risk(rng.uniform(-1, 1, 1)) for _ in range(3))
        beta = np.array([0.2, 0.5, 0.3])
        col = np.array([0.7, 0.2, 0.9])
        target = full_minimize(col, beta, risks)
        theta = target + 0.4
        for t in range(10_000):
            theta = gradient_step(theta, col, beta, risks, 0.45 / (t + 1))
        assert np.abs(theta - target).max() <= 1e-4


class TestVerifyLearnerRiskReducing:
    def test_full_minimize_output(self):
        rng = np.random.default_rng(26)
        risks = tuple(quadratic_risk(rng.uniform(-1, 1, 2)) for _ in range(3))
        beta = np.array([0.3, 0.3, 0.4])
        col = np.array([0.5, 0.1, 0.9])
        start = rng.uniform(-3, 3, 2)
        out = full_minimize(col, beta, risks)
        assert verify_learner_risk_reducing(start, out, col, beta, risks)

    def test_ascent_step_fails(self):
        risks = (quadratic_risk([0.0]),)
        beta = np.array([1.0])
        col = np.array([1.0])
        theta = np.array([1.0])
        worse = np.array([2.0])
        assert not verify_learner_risk_reducing(theta, worse, col, beta, risks)
        assert learner_avg_risk(col, beta, risks, worse) > learner_avg_risk(
            col, beta, risks, theta)


class TestRuleValidation:
    def test_inner_steps_positive(self):
        with pytest.raises(ValueError):
            LearnerRule(kind="repeated_gd", inner_steps=0)

    def test_tolerance_positive(self):
        with pytest.raises(ValueError):
            LearnerRule(kind="full_min", tolerance=0.0)

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            LearnerRule(kind="full_min", method="bfgs")
