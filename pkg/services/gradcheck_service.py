"""Oracle suites behind the ``gradcheck`` command."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import integrate, stats

from engine import RngStream, Tape, Tensor, constant, finite_difference_gradient, no_tape, ops, parameter, relative_error
from models.network_models import DropoutVariant
from models.report_models import CheckResult, GradcheckReport
from services.dropout_service import ForwardMode, kl_site, site_log_prior
from services.estimator_service import (
    GradientEstimate,
    arm_gradient,
    arm_independent_step,
    arm_sequential_step,
    reinforce_grad,
    reparam_gaussian_step,
)
from services.mlp_service import MlpClassifier, build_mlp_spec, log_likelihood
from services.oracle_service import exact_elbo_grad_bruteforce
from services.uncertainty_service import t_cdf

logger = logging.getLogger(__name__)

FD_TOLERANCE = 1e-5
TINY_INPUT = np.array([0.5, -1.0])
TINY_LABEL = 1

Estimator = Callable[[MlpClassifier, np.ndarray, np.ndarray, RngStream], GradientEstimate]


def tiny_network(
    variant: DropoutVariant = DropoutVariant.CONTEXTUAL_BERNOULLI,
    seed: int = 3,
    widths: Sequence[int] = (2, 3, 2),
    stages: Sequence[int] = (0, 1),
    t: float = 1.0,
) -> MlpClassifier:
    """Small net with t = 1 so encoder gradients are not scaled down."""
    spec = build_mlp_spec(widths, variant, stages, t=t, init_rate=0.3)
    return MlpClassifier(spec, RngStream(seed, (1,)))


@dataclass
class GradientMoments:
    mean: dict[str, np.ndarray]
    standard_error: dict[str, np.ndarray]
    covariance_trace: float


def gradient_moments(
    estimator: Estimator,
    model: MlpClassifier,
    x: np.ndarray,
    y: int,
    draws: int,
    batch: int = 1000,
    seed: int = 0,
    names: Sequence[str] = (),
) -> GradientMoments:
    """Batch-mean statistics of ``estimator`` over ``draws`` single-datum estimates.

    The datum is replicated ``batch`` times per step; each step's gradient is
    the mean of ``batch`` independent estimates. ``covariance_trace`` is per
    single-datum estimate, restricted to ``names`` when given.
    """
    steps = max(2, draws // batch)
    xs = np.repeat(np.asarray(x, dtype=np.float64).reshape(1, -1), batch, axis=0)
    ys = np.full(batch, int(y))
    samples: dict[str, list[np.ndarray]] = {}
    for step in range(steps):
        estimate = estimator(model, xs, ys, RngStream(seed, (step,)))
        for name, grad in estimate.grads.items():
            samples.setdefault(name, []).append(grad)
    stacked = {name: np.stack(values) for name, values in samples.items()}
    selected = names or list(stacked)
    trace = sum(float(np.sum(stacked[n].var(axis=0, ddof=1))) for n in selected) * batch
    return GradientMoments(
        mean={n: v.mean(axis=0) for n, v in stacked.items()},
        standard_error={n: v.std(axis=0, ddof=1) / np.sqrt(steps) for n, v in stacked.items()},
        covariance_trace=trace,
    )


def within_standard_errors(
    moments: GradientMoments, exact: dict[str, np.ndarray], sigmas: float = 3.0, atol: float = 1e-9
) -> tuple[bool, float]:
    """Coordinatewise |mean - exact| <= sigmas * se + atol; returns the worst z-score."""
    worst = 0.0
    ok = True
    for name, value in exact.items():
        gap = np.abs(moments.mean[name] - value)
        se = moments.standard_error[name]
        ok &= bool(np.all(gap <= sigmas * se + atol))
        z = np.where(se > 0, gap / np.maximum(se, 1e-300), np.where(gap > atol, np.inf, 0.0))
        worst = max(worst, float(np.max(z)) if z.size else 0.0)
    return ok, worst


def _primitive_cases(rng: RngStream) -> dict[str, tuple[Callable[..., Tensor], list[np.ndarray]]]:
    def away_from_zero(shape):
        values = rng.uniform(shape) + 0.2
        return values * np.where(rng.uniform(shape) < 0.5, -1.0, 1.0)

    a, b = rng.normal((3, 4)), rng.normal((3, 4))
    return {
        "matmul": (ops.matmul, [rng.normal((3, 4)), rng.normal((4, 2))]),
        "add_bias": (ops.add_bias, [a, rng.normal(4)]),
        "add": (ops.add, [a, b]),
        "sub": (ops.sub, [a, b]),
        "mul": (ops.mul, [a, b]),
        "scale": (lambda x: ops.scale(x, -1.7), [a]),
        "shift": (lambda x: ops.shift(x, 0.3), [a]),
        "leaky_relu": (lambda x: ops.leaky_relu(x, 0.1), [away_from_zero((3, 4))]),
        "relu": (ops.relu, [away_from_zero((3, 4))]),
        "sigmoid": (ops.sigmoid, [a]),
        "exp": (ops.exp, [a]),
        "log": (ops.log, [rng.uniform((3, 4)) + 0.5]),
        "sqrt": (ops.sqrt, [rng.uniform((3, 4)) + 0.5]),
        "clip": (lambda x: ops.clip(x, -0.5, 0.5), [np.array([[-0.9, -0.3, 0.2, 0.8], [0.1, -1.2, 0.45, -0.05]])]),
        "log_softmax": (ops.log_softmax, [a]),
        "reduce_sum": (lambda x: ops.reduce_sum(x, 1), [a]),
        "reduce_mean": (lambda x: ops.reduce_mean(x, 0), [a]),
        "broadcast": (lambda x: ops.broadcast(x, (2, 4, 3), (1,)), [rng.normal(4)]),
        "reshape": (lambda x: ops.reshape(x, (2, 6)), [a]),
        "take_rows": (lambda x: ops.take_rows(x, np.array([0, 2, 2, 1])), [a]),
    }


def check_primitive_adjoints(seed: int = 0) -> list[CheckResult]:
    rng = RngStream(seed, (21,))
    results = []
    for name, (fn, arrays) in _primitive_cases(rng).items():
        inputs = [parameter(v, f"{name}{i}") for i, v in enumerate(arrays)]
        with no_tape():
            weights = rng.normal(fn(*inputs).shape)

        def objective() -> float:
            with no_tape():
                return float(np.sum(fn(*inputs).data * weights))

        with Tape() as tape:
            loss = ops.reduce_sum(ops.mul(fn(*inputs), constant(weights)))
        tape.backward(loss)
        analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]
        numeric = finite_difference_gradient(objective, inputs)
        error = max(relative_error(g, n) for g, n in zip(analytic, numeric))
        results.append(CheckResult(name=f"adjoint:{name}", passed=error < FD_TOLERANCE, detail=f"rel err {error:.2e}"))
    return results


def check_decoder_gradient(seed: int = 0) -> CheckResult:
    """theta and eta gradients of the ARM step against differences with masks replayed."""
    model = tiny_network(seed=seed + 3)
    xs = np.array([[0.5, -1.0], [1.5, 0.25], [-0.3, 0.8]])
    ys = np.array([1, 0, 1])
    rng = RngStream(seed, (22,))
    estimate = arm_sequential_step(model, xs, ys, rng)
    with no_tape():
        trace = model.forward(xs, ForwardMode.SAMPLE, rng.child(0), with_pseudo=True).trace

    def loss() -> float:
        with no_tape():
            result = model.forward(xs, ForwardMode.REPLAY_MASKS, replay=trace)
            total = float(np.sum(log_likelihood(result.log_probs, ys).data))
            for draw in result.trace.draws:
                total += float(np.sum(site_log_prior(model.sites[draw.stage], draw).data))
        return -total / xs.shape[0]

    groups = model.parameter_groups()
    named = {**groups["theta"], **groups["eta"]}
    numeric = finite_difference_gradient(loss, list(named.values()))
    error = max(relative_error(estimate.grads[n], g) for n, g in zip(named, numeric))
    return CheckResult(name="decoder-and-prior-gradient", passed=error < FD_TOLERANCE, detail=f"rel err {error:.2e}")


def check_reparam_gradient(seed: int = 0) -> CheckResult:
    """Encoder and prior gradients of the Gaussian pathwise step with frozen noise."""
    model = tiny_network(DropoutVariant.CONTEXTUAL_GAUSSIAN, seed=seed + 5, widths=(3, 4, 2), t=0.5)
    xs = np.array([[0.5, -1.0, 0.2], [1.5, 0.25, -0.7]])
    ys = np.array([1, 0])
    rng = RngStream(seed, (23,))
    estimate = reparam_gaussian_step(model, xs, ys, rng)
    with no_tape():
        trace = model.forward(xs, ForwardMode.SAMPLE, rng.child(0)).trace

    def loss() -> float:
        with no_tape():
            result = model.forward(xs, ForwardMode.REPLAY_NOISE, replay=trace)
            total = float(np.sum(log_likelihood(result.log_probs, ys).data))
            for draw in result.trace.draws:
                total -= float(np.sum(kl_site(model.sites[draw.stage], draw.alpha).data))
        return -total / xs.shape[0]

    groups = model.parameter_groups()
    named = {**groups["phi"], **groups["eta"]}
    numeric = finite_difference_gradient(loss, list(named.values()))
    error = max(relative_error(estimate.grads[n], g) for n, g in zip(named, numeric))
    return CheckResult(name="reparam-gradient", passed=error < FD_TOLERANCE, detail=f"rel err {error:.2e}")


def check_arm_scalar_identity(draws: int = 1_000_000, seed: int = 0) -> CheckResult:
    """E[g_ARM] = sigma'(0) = 1/4 for r(z) = z at alpha = 0, t = 1."""
    pi = RngStream(seed, (24,)).uniform((draws, 1))
    g = arm_gradient(np.zeros(1), 1.0, lambda z: z[..., 0], pi)[:, 0]
    se = g.std(ddof=1) / np.sqrt(draws)
    gap = abs(g.mean() - 0.25)
    return CheckResult(name="arm-scalar-identity", passed=gap <= 3 * se, detail=f"mean {g.mean():.5f} se {se:.1e}")


def t_density_cdf(x: float, df: float) -> float:
    """Independent oracle: integrate the t density from 0 to |x|."""
    area, _ = integrate.quad(lambda u: stats.t.pdf(u, df), 0.0, abs(x), epsabs=1e-13, epsrel=1e-13)
    return 0.5 + area if x >= 0 else 0.5 - area


def check_t_cdf() -> list[CheckResult]:
    worst = 0.0
    for df in (1, 2, 5, 19, 200):
        for x in np.linspace(-4.0, 4.0, 33):
            worst = max(worst, abs(t_cdf(x, df) - t_density_cdf(x, df)))
    cauchy = max(abs(t_cdf(x, 1) - (0.5 + np.arctan(x) / np.pi)) for x in np.linspace(-4.0, 4.0, 33))
    return [
        CheckResult(name="t-cdf-quadrature", passed=worst < 1e-6, detail=f"max err {worst:.1e}"),
        CheckResult(name="t-cdf-cauchy", passed=cauchy < 1e-10, detail=f"max err {cauchy:.1e}"),
    ]


def check_enumeration(seed: int = 0) -> CheckResult:
    oracle = exact_elbo_grad_bruteforce(tiny_network(seed=seed + 3), TINY_INPUT, TINY_LABEL)
    gap = abs(oracle.branch_probability_sum - 1.0)
    return CheckResult(name="enumeration-probabilities", passed=gap < 1e-12, detail=f"|sum - 1| {gap:.1e}")


def check_unbiasedness(draws: int = 100_000, seed: int = 0) -> list[CheckResult]:
    """Estimator means against enumeration; independent ARM on a single site.

    Covariance traces of the encoder gradients are compared on the two-site
    network for both ARM variants against REINFORCE.
    """
    results = []
    cases = [
        ("reinforce", reinforce_grad, (0, 1)),
        ("arm-sequential", arm_sequential_step, (0, 1)),
        ("arm-independent", arm_independent_step, (1,)),
    ]
    traces = {}
    for name, estimator, stages in cases:
        model = tiny_network(seed=seed + 3, stages=stages)
        exact = exact_elbo_grad_bruteforce(model, TINY_INPUT, TINY_LABEL).grads
        phi = list(model.parameter_groups()["phi"])
        moments = gradient_moments(estimator, model, TINY_INPUT, TINY_LABEL, draws, seed=seed, names=phi)
        ok, worst = within_standard_errors(moments, exact)
        if stages == (0, 1):
            traces[name] = moments.covariance_trace
        results.append(CheckResult(name=f"unbiased:{name}", passed=ok, detail=f"worst z {worst:.2f}"))
    model = tiny_network(seed=seed + 3)
    phi = list(model.parameter_groups()["phi"])
    moments = gradient_moments(arm_independent_step, model, TINY_INPUT, TINY_LABEL, draws, seed=seed, names=phi)
    traces["arm-independent"] = moments.covariance_trace
    for name in ("arm-sequential", "arm-independent"):
        results.append(
            CheckResult(
                name=f"variance:{name}<reinforce",
                passed=traces[name] < traces["reinforce"],
                detail=f"arm {traces[name]:.3e} reinforce {traces['reinforce']:.3e}",
            )
        )
    return results


def run_gradcheck(quick: bool = False, seed: int = 0) -> GradcheckReport:
    draws = 20_000 if quick else 100_000
    checks = check_primitive_adjoints(seed)
    checks.append(check_decoder_gradient(seed))
    checks.append(check_reparam_gradient(seed))
    checks.append(check_arm_scalar_identity(100_000 if quick else 1_000_000, seed))
    checks.extend(check_t_cdf())
    checks.append(check_enumeration(seed))
    checks.extend(check_unbiasedness(draws, seed))
    for check in checks:
        log = logger.info if check.passed else logger.error
        log("%-32s %s  %s", check.name, "ok" if check.passed else "FAIL", check.detail)
    return GradcheckReport(checks=checks)
