"""Mapping particle filter engine.

One assimilation cycle: freeze the Gaussian-mixture prior (centers are the
deterministically advanced previous particles), then iterate

    g_l   = grad log posterior at particle l
    dKL_j = -(1/N_p) sum_l [ K(x_l, x_j) g_l + grad_source K(x_l, x_j) ]
    x_j  <- x_j + optimizer_step(-dKL_j direction)

with a synchronous (Jacobi-style) batch update, until a convergence
criterion or the iteration cap fires.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from mpfilter.core import ContractViolation, Ensemble
from mpfilter.kernels import GaussianKernel
from mpfilter.ssm import PriorMixture, StateSpaceModel, log_posterior_grad

OPTIMIZERS = ("sgd", "adadelta", "adam")
CRITERIA = ("neff", "grad_ratio", "max_iter")


class NonFiniteGradientError(RuntimeError):
    """A KL gradient turned non-finite during the mapping."""

    def __init__(self, particle: int, iteration: int, cycle: int | None = None):
        ctx = f"particle {particle}, iteration {iteration}"
        if cycle is not None:
            ctx = f"cycle {cycle}, " + ctx
        super().__init__(f"non-finite KL gradient at {ctx}")
        self.particle = particle
        self.iteration = iteration
        self.cycle = cycle


@dataclass
class MappingConfig:
    """Optimizer and stopping configuration for the mapping iterations."""

    optimizer: str = "adadelta"
    learning_rate: float = 0.03
    max_iterations: int = 50
    criterion: str = "neff"
    neff_threshold: float | None = None  # default 0.9 * N_p, set at run time
    grad_ratio_threshold: float = 0.07
    adadelta_rho: float = 0.95
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    track_neff: bool = False
    keep_trace: bool = False

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ContractViolation(f"unknown optimizer {self.optimizer!r}")
        if self.criterion not in CRITERIA:
            raise ContractViolation(f"unknown criterion {self.criterion!r}")
        if self.learning_rate <= 0.0:
            raise ContractViolation("learning rate must be > 0")
        if self.max_iterations < 1:
            raise ContractViolation("max_iterations must be >= 1")
        if not 0.0 < self.grad_ratio_threshold < 1.0:
            raise ContractViolation("grad_ratio_threshold must be in (0, 1)")

    def resolved_neff_threshold(self, n_particles: int) -> float:
        t = 0.9 * n_particles if self.neff_threshold is None else self.neff_threshold
        if not 0.0 < t <= n_particles:
            raise ContractViolation("neff threshold must be in (0, N_p]")
        return t


class SgdOptimizer:
    def __init__(self, cfg: MappingConfig, shape):
        self.lr = cfg.learning_rate

    def step(self, grads: np.ndarray) -> np.ndarray:
        return -self.lr * grads


class AdadeltaOptimizer:
    """Adadelta with the conditioning constant set by the learning rate.

    The update is ``-sqrt(E[dx^2] + lr^2) / sqrt(E[g^2] + lr^2) * g``: the
    standard RMS-ratio rule, with ``lr^2`` as the conditioning constant in
    both accumulators.  The first step per component then has magnitude
    ~``lr`` (with the tiny Zeiler constant the iteration never leaves its
    floor), while near a fixed point the denominator floor makes the step
    proportional to the gradient, so the iteration settles instead of
    jittering at a fixed step size.
    """

    def __init__(self, cfg: MappingConfig, shape):
        self.rho = cfg.adadelta_rho
        self.lr2 = cfg.learning_rate**2
        self.acc_grad = np.zeros(shape)
        self.acc_delta = np.zeros(shape)

    def step(self, grads: np.ndarray) -> np.ndarray:
        self.acc_grad = self.rho * self.acc_grad + (1.0 - self.rho) * grads**2
        delta = (
            -np.sqrt(self.acc_delta + self.lr2)
            / np.sqrt(self.acc_grad + self.lr2)
            * grads
        )
        self.acc_delta = self.rho * self.acc_delta + (1.0 - self.rho) * delta**2
        return delta


class AdamOptimizer:
    def __init__(self, cfg: MappingConfig, shape):
        self.lr = cfg.learning_rate
        self.b1 = cfg.adam_beta1
        self.b2 = cfg.adam_beta2
        self.eps = cfg.adam_eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, grads: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1.0 - self.b1) * grads
        self.v = self.b2 * self.v + (1.0 - self.b2) * grads**2
        m_hat = self.m / (1.0 - self.b1**self.t)
        v_hat = self.v / (1.0 - self.b2**self.t)
        return -self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(cfg: MappingConfig, shape):
    cls = {"sgd": SgdOptimizer, "adadelta": AdadeltaOptimizer, "adam": AdamOptimizer}
    return cls[cfg.optimizer](cfg, shape)


def optimizer_step(opt, cfg: MappingConfig, grads: np.ndarray) -> np.ndarray:
    """Position deltas for one iteration; rejects non-finite gradients."""
    grads = np.asarray(grads, dtype=float)
    bad = ~np.all(np.isfinite(grads), axis=-1)
    if np.any(bad):
        raise NonFiniteGradientError(particle=int(np.argmax(bad)), iteration=opt_iter(opt))
    return opt.step(grads)


def opt_iter(opt) -> int:
    return getattr(opt, "t", 0)


def kl_gradient_field(
    kernel: GaussianKernel,
    states: np.ndarray,
    logp_grads: np.ndarray,
    interactions: tuple[np.ndarray, np.ndarray] | None = None,
) -> np.ndarray:
    """Monte-Carlo KL divergence gradient at every particle.

    ``dKL(x_j) = -(1/N_p) sum_l [K(x_l, x_j) g_l - A^{-1}(x_l - x_j) K(x_l, x_j)]``
    The second term is the repulsion; with a single particle the field
    collapses to ``-g`` (the 3D-Var limit).
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    logp_grads = np.atleast_2d(np.asarray(logp_grads, dtype=float))
    if logp_grads.shape != states.shape:
        raise ContractViolation("logp_grads shape must match particle states")
    gram, sdiffs = kernel.interactions(states) if interactions is None else interactions
    n_p = states.shape[0]
    attract = gram.T @ logp_grads  # sum_l G[l, j] g_l
    repulse = -np.einsum("lj,ljk->jk", gram, sdiffs)  # sum_l grad_source(x_l, x_j)
    return -(attract + repulse) / n_p


def kl_hessian_field(
    kernel: GaussianKernel,
    states: np.ndarray,
    logp_grads: np.ndarray,
    interactions: tuple[np.ndarray, np.ndarray] | None = None,
) -> np.ndarray:
    """Hessian of the KL divergence at every particle, shape (N_p, N_x, N_x).

    Jacobian of :func:`kl_gradient_field` with respect to the evaluation
    particle (the dependence of its own log-posterior gradient on its
    position is not part of the transport Jacobian).
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    logp_grads = np.atleast_2d(np.asarray(logp_grads, dtype=float))
    gram, sdiffs = kernel.interactions(states) if interactions is None else interactions
    n_p, n_x = states.shape
    a_inv = kernel.bandwidth.inverse()
    # d/dx_j of K(x_l, x_j) = sdiffs[l, j] * G[l, j]
    grad_k = sdiffs * gram[:, :, None]
    outer = np.einsum("lk,ljm->jkm", logp_grads, grad_k)  # g_l (dK/dx_j)^T
    cross = np.einsum("lj,km->jkm", gram, a_inv) - np.einsum(
        "ljk,ljm,lj->jkm", sdiffs, sdiffs, gram
    )
    return -(outer + cross) / n_p


def check_convergence(
    cfg: MappingConfig,
    grad_norm_trace: list[float],
    neff_trace: list[float] | None = None,
    n_particles: int | None = None,
) -> bool:
    """Stopping decision after the latest iteration."""
    if not grad_norm_trace:
        raise ContractViolation("convergence check needs a nonempty trace")
    if cfg.criterion == "max_iter":
        return len(grad_norm_trace) >= cfg.max_iterations
    if cfg.criterion == "grad_ratio":
        initial = grad_norm_trace[0]
        if initial == 0.0:
            return True
        return grad_norm_trace[-1] / initial < cfg.grad_ratio_threshold
    # neff criterion
    if neff_trace is None or not neff_trace:
        raise ContractViolation(
            "neff criterion requires per-iteration weight diagnostics"
        )
    if n_particles is None:
        raise ContractViolation("neff criterion requires the particle count")
    return neff_trace[-1] >= cfg.resolved_neff_threshold(n_particles)


@dataclass
class MappingTrace:
    """Per-iteration record kept for the Jacobian density-transport route."""

    positions: list[np.ndarray] = field(default_factory=list)
    logp_grads: list[np.ndarray] = field(default_factory=list)
    epsilons: list[float] = field(default_factory=list)


@dataclass
class MappingResult:
    ensemble: Ensemble
    iterations: int
    grad_norm_trace: list[float]
    neff_trace: list[float]
    trace: MappingTrace | None = None


def _iteration_neff(ssm, prior, kernel, states, y) -> float:
    # local import: diagnostics imports the Hessian assembly from here
    from mpfilter.diagnostics import importance_report, kde_log_proposal

    log_q = kde_log_proposal(kernel, states)
    report = importance_report(ssm, prior, states, y, log_q, route="kde")
    return report.n_eff


def mapping_cycle(
    ssm: StateSpaceModel,
    prior: PriorMixture,
    forecast: Ensemble,
    y: np.ndarray,
    kernel: GaussianKernel,
    cfg: MappingConfig,
    cycle: int | None = None,
    diag_sink=None,
) -> MappingResult:
    """Transport the forecast ensemble toward the sequential posterior.

    The prior mixture stays frozen for the whole cycle; all particles are
    updated from the previous-iteration snapshot.  ``diag_sink``, when
    given, receives ``(iteration, mean_grad_norm, neff_or_nan)`` tuples.
    """
    states = forecast.states.copy()
    n_p = states.shape[0]
    opt = make_optimizer(cfg, states.shape)
    want_neff = cfg.track_neff or cfg.criterion == "neff"
    grad_norms: list[float] = []
    neffs: list[float] = []
    trace = MappingTrace() if cfg.keep_trace else None
    if trace is not None:
        trace.positions.append(states.copy())

    iterations = 0
    for i in range(cfg.max_iterations):
        try:
            logp_grads = log_posterior_grad(ssm, prior, states, y)
            interactions = kernel.interactions(states)
            field_vals = kl_gradient_field(kernel, states, logp_grads, interactions)
        except Exception as exc:
            raise type(exc)(
                f"mapping aborted at cycle {cycle}, iteration {i}: {exc}"
            ) from exc
        bad = ~np.all(np.isfinite(field_vals), axis=-1)
        if np.any(bad):
            raise NonFiniteGradientError(int(np.argmax(bad)), i, cycle)
        grad_norms.append(float(np.mean(np.linalg.norm(field_vals, axis=1))))

        deltas = opt.step(field_vals)
        states = states + deltas
        iterations = i + 1
        if trace is not None:
            trace.positions.append(states.copy())
            trace.logp_grads.append(logp_grads.copy())
            trace.epsilons.append(cfg.learning_rate if cfg.optimizer == "sgd" else float("nan"))

        neff = float("nan")
        if want_neff:
            neff = _iteration_neff(ssm, prior, kernel, states, y)
            neffs.append(neff)
        if diag_sink is not None:
            diag_sink(iterations, grad_norms[-1], neff)
        if cfg.criterion != "max_iter" and check_convergence(
            cfg, grad_norms, neffs if want_neff else None, n_p
        ):
            break

    return MappingResult(
        ensemble=Ensemble.equal_weight(states),
        iterations=iterations,
        grad_norm_trace=grad_norms,
        neff_trace=neffs,
        trace=trace,
    )
