"""Contraction constants of the reserve-retraining bound and a Monte Carlo check on a
strongly convex quadratic federation.

The simulated federation shares one Hessian ``H`` (spectrum in ``[mu, L]``) across
clients, so client drift ``grad phi_n - grad phi = H (theta* - theta_n*)`` is a
constant vector per client whose norm is set to at most ``zeta``. Adversarial
clients add a fixed-direction bias of norm ``Gamma`` to every local gradient; the
reserve gradient carries a fixed mismatch of norm ``eps_r`` plus isotropic noise.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np


@dataclass(frozen=True)
class TheoryParams:
    L: float = 1.0
    mu: float = 0.1
    sigma_g: float = 0.1
    zeta: float = 0.1
    sigma_r: float = 0.1
    eps_r: float = 0.005
    bias: float = 0.05  # Gamma
    rho: float = 0.5
    num_clients: int = 10
    m: int = 6
    tau: int = 5
    eta: float = 0.02
    gamma_r: float = 0.1
    r: int = 0
    c_s: float = 1.0
    a: float = 0.5

    def __post_init__(self):
        if not 0 < self.mu <= self.L:
            raise ValueError(f"need 0 < mu <= L, got mu={self.mu}, L={self.L}")
        if self.tau < 1 or self.r < 0:
            raise ValueError("need tau >= 1 and r >= 0")
        if not 0 < self.eta:
            raise ValueError("eta must be positive")
        if self.gamma_g > 1.0 / self.L + 1e-12:
            raise ValueError(f"gamma_g = eta*tau = {self.gamma_g} exceeds 1/L = {1.0 / self.L}")
        if not 0 < self.gamma_r <= 1.0 / self.L + 1e-12:
            raise ValueError(f"gamma_r = {self.gamma_r} must lie in (0, 1/L]")
        if not 0 < self.a < 1:
            raise ValueError("a must lie in (0, 1)")
        if not 1 <= self.m <= self.num_clients:
            raise ValueError("need 1 <= m <= N")
        if not 0 <= self.rho <= 1:
            raise ValueError("rho must lie in [0, 1]")
        for name in ("sigma_g", "zeta", "sigma_r", "eps_r", "bias", "c_s"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def gamma_g(self):
        return self.eta * self.tau

    @property
    def c_tau(self):
        return self.tau * (self.tau - 1) * self.eta ** 2 * self.L ** 2 / 2.0

    def c_g(self):
        return self.gamma_g / (2.0 * self.a) + self.L * self.gamma_g ** 2 / 2.0


def beta_moments(rho, num_clients, m):
    """``(E[beta], E[beta^2])`` for ``m`` clients drawn without replacement from ``N``
    of which exactly ``rho * N`` are adversarial."""
    if not 0 <= rho <= 1:
        raise ValueError("rho must lie in [0, 1]")
    if not 1 <= m <= num_clients:
        raise ValueError("need 1 <= m <= N")
    k = rho * num_clients
    if abs(k - round(k)) > 1e-9:
        raise ValueError(f"rho * N = {k} is not an integer")
    if num_clients == 1:
        return rho, rho ** 2
    second = rho ** 2 + rho * (1 - rho) * (num_clients - m) / (m * (num_clients - 1))
    return rho, second


def gradient_bias_bound(lipschitz, mixed_norm, dim, epsilon):
    """Chain-rule bound ``L_l * ||d/dX grad_theta l||_2 * sqrt(d) * eps``."""
    if min(lipschitz, mixed_norm, dim, epsilon) < 0:
        raise ValueError("all inputs must be >= 0")
    return lipschitz * mixed_norm * math.sqrt(dim) * epsilon


def contraction_constants(p):
    """``(q, C')`` of the round-wise bound, including the reserve mismatch term."""
    damp = (1.0 - p.mu * p.gamma_r) ** p.r
    q = (1.0 - p.mu * p.gamma_g) * damp
    _, beta2 = beta_moments(p.rho, p.num_clients, p.m)
    client = p.c_s * p.sigma_g ** 2 / p.m + p.c_tau * p.zeta ** 2 + beta2 * p.bias ** 2
    c_prime = (damp * p.c_g() * client
               + p.L * p.gamma_r ** 2 * p.r * p.sigma_r ** 2 / 2.0
               + damp * p.eps_r ** 2)
    return q, c_prime


# --------------------------------------------------------------------------- quadratic federation

@dataclass
class QuadraticFederation:
    hessian: np.ndarray
    theta_star: np.ndarray
    client_optima: np.ndarray  # [N, d]
    adversarial: np.ndarray  # bool [N]
    bias_vector: np.ndarray  # added to adversarial local gradients
    reserve_mismatch: np.ndarray  # added to every reserve gradient
    theta0: np.ndarray
    eigenvalues: np.ndarray = field(repr=False)

    @property
    def dim(self):
        return len(self.theta_star)

    @property
    def drift(self):
        """Per-client constant ``grad phi_n(theta) - grad phi(theta)``."""
        return (self.theta_star - self.client_optima) @ self.hessian

    def gap(self, theta):
        e = theta - self.theta_star
        return 0.5 * np.einsum("...i,ij,...j->...", e, self.hessian, e)

    @classmethod
    def build(cls, p, dim=10, seed=0, init_distance=1.0):
        """Random rotation of a spectrum spanning ``[mu, L]``; worst-case bias and mismatch
        along the flattest direction."""
        rng = np.random.default_rng(seed)
        eig = np.concatenate([[p.mu, p.L], rng.uniform(p.mu, p.L, size=max(dim - 2, 0))])[:dim]
        eig = np.sort(eig)
        basis, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        hessian = (basis * eig) @ basis.T
        hessian = 0.5 * (hessian + hessian.T)
        theta_star = rng.standard_normal(dim)
        n = p.num_clients
        drift = rng.standard_normal((n, dim))
        drift -= drift.mean(axis=0)
        norms = np.linalg.norm(drift, axis=1).max()
        drift = drift * (p.zeta / norms) if norms > 0 else drift * 0.0
        # grad phi_n - grad phi = H (theta* - theta_n*)
        client_optima = theta_star - np.linalg.solve(hessian, drift.T).T
        n_adv = int(round(p.rho * n))
        adversarial = np.zeros(n, dtype=bool)
        adversarial[rng.choice(n, size=n_adv, replace=False)] = True
        flat = basis[:, 0]
        start = rng.standard_normal(dim)
        theta0 = theta_star + init_distance * start / np.linalg.norm(start)
        return cls(hessian, theta_star, client_optima, adversarial, p.bias * flat,
                   p.eps_r * flat, theta0, eig)

    def check(self, p, tol=1e-9):
        """Raise if the instance violates the declared constants of ``p``."""
        eig = np.linalg.eigvalsh(self.hessian)
        if eig.min() < p.mu - tol or eig.max() > p.L + tol:
            raise ValueError(f"Hessian spectrum [{eig.min():.6g}, {eig.max():.6g}] outside "
                             f"[mu, L] = [{p.mu}, {p.L}]")
        if len(self.client_optima) != p.num_clients:
            raise ValueError("client count differs from the declared N")
        if np.linalg.norm(self.drift, axis=1).max() > p.zeta + tol:
            raise ValueError("client drift exceeds zeta")
        if abs(self.drift.mean(axis=0)).max() > tol:
            raise ValueError("client drift does not average to zero")
        if np.linalg.norm(self.bias_vector) > p.bias + tol:
            raise ValueError("injected adversarial bias exceeds Gamma")
        if np.linalg.norm(self.reserve_mismatch) > p.eps_r + tol:
            raise ValueError("reserve mismatch exceeds eps_r")
        if self.adversarial.sum() != round(p.rho * p.num_clients):
            raise ValueError("adversarial set size differs from rho * N")


def simulate(fed, p, rounds, trials, rng):
    """Optimality gaps ``[rounds + 1, trials]`` of the stochastic federated iteration."""
    d, n, m = fed.dim, p.num_clients, p.m
    h = fed.hessian
    theta = np.tile(fed.theta0, (trials, 1))
    gaps = np.empty((rounds + 1, trials))
    gaps[0] = fed.gap(theta)
    g_scale = p.sigma_g / math.sqrt(d)
    r_scale = p.sigma_r / math.sqrt(d)
    for t in range(rounds):
        chosen = np.argsort(rng.random((trials, n)), axis=1)[:, :m]
        optima = fed.client_optima[chosen]  # [trials, m, d]
        bias = fed.adversarial[chosen][..., None] * fed.bias_vector
        local = np.repeat(theta[:, None, :], m, axis=1)
        for _ in range(p.tau):
            grad = (local - optima) @ h + bias
            if g_scale:
                grad = grad + g_scale * rng.standard_normal(local.shape)
            local = local - p.eta * grad
        theta = local.mean(axis=1)
        for _ in range(p.r):
            grad = (theta - fed.theta_star) @ h + fed.reserve_mismatch
            if r_scale:
                grad = grad + r_scale * rng.standard_normal(theta.shape)
            theta = theta - p.gamma_r * grad
        gaps[t + 1] = fed.gap(theta)
    return gaps


@dataclass
class ContractionReport:
    q: float
    c_prime: float
    mean_gap: np.ndarray  # [rounds + 1]
    bound: np.ndarray  # [rounds]: q * mean_gap[t] + C'
    slack: np.ndarray  # [rounds]: 3 standard errors of gap[t+1] - q gap[t]
    params: TheoryParams | None = None

    @property
    def passed_rounds(self):
        return self.mean_gap[1:] <= self.bound + self.slack

    @property
    def passed(self):
        return bool(np.all(self.passed_rounds))

    def steady_state(self, tail=0.5):
        n = len(self.mean_gap) - 1
        return float(self.mean_gap[1 + int(n * (1 - tail)):].mean())

    def rows(self):
        for t in range(len(self.bound)):
            yield (t + 1, float(self.mean_gap[t + 1]), float(self.bound[t]), float(self.slack[t]),
                   bool(self.passed_rounds[t]))

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("round", "mean_gap", "bound", "slack", "pass"))
        for t, gap, bound, slack, ok in self.rows():
            w.writerow((t, f"{gap:.9e}", f"{bound:.9e}", f"{slack:.9e}", int(ok)))
        return buf.getvalue()

    def to_text(self):
        lines = [f"q = {self.q:.9g}   C' = {self.c_prime:.9g}   "
                 f"{'PASS' if self.passed else 'FAIL'}",
                 f"{'round':>5}  {'mean gap':>14}  {'bound':>14}  {'slack':>12}  result"]
        for t, gap, bound, slack, ok in self.rows():
            lines.append(f"{t:5d}  {gap:14.6e}  {bound:14.6e}  {slack:12.4e}  {'pass' if ok else 'FAIL'}")
        return "\n".join(lines) + "\n"


def verify_contraction(fed, p, rounds, trials, rng, z=3.0, check=True):
    """Monte Carlo check of ``E gap_{t+1} <= q E gap_t + C'`` at every round (``z`` SE slack).

    ``check=False`` skips the instance-vs-constants validation, which is how a
    deliberately understated constant is exercised.
    """
    if check:
        fed.check(p)
    q, c_prime = contraction_constants(p)
    gaps = simulate(fed, p, rounds, trials, rng)
    excess = gaps[1:] - q * gaps[:-1]
    se = excess.std(axis=1, ddof=1) / math.sqrt(trials) if trials > 1 else np.zeros(rounds)
    mean_gap = gaps.mean(axis=1)
    return ContractionReport(q, c_prime, mean_gap, q * mean_gap[:-1] + c_prime, z * se, p)


def exact_case_params(p):
    """Noise-free, drift-free, unpoisoned single client, one local step, no reserve."""
    return replace(p, sigma_g=0.0, zeta=0.0, sigma_r=0.0, eps_r=0.0, bias=0.0, rho=0.0,
                   num_clients=1, m=1, tau=1, r=0)


def verify_exact(p, rounds=50, dim=10, seed=0):
    """Exact gradient descent on one quadratic: ``gap_{t+1} <= (1 - mu*eta) gap_t`` with zero slack."""
    p = exact_case_params(p)
    fed = QuadraticFederation.build(p, dim, seed)
    report = verify_contraction(fed, p, rounds, 1, np.random.default_rng(seed))
    report.slack = np.zeros_like(report.slack)
    return report


def reserve_benefit(p, r, rounds, trials, seed, dim=10):
    """Steady-state mean gaps ``(r=0, r)`` on the same instance and noise seed."""
    fed = QuadraticFederation.build(p, dim, seed)
    base = verify_contraction(fed, replace(p, r=0), rounds, trials, np.random.default_rng(seed))
    with_reserve = verify_contraction(fed, replace(p, r=r), rounds, trials, np.random.default_rng(seed))
    return base.steady_state(), with_reserve.steady_state()


def measure_gradient_bias(arch, params, x, labels, spec, rng=None):
    """``||grad_theta l(poisoned) - grad_theta l(clean)||_2`` on the CNN in eval mode."""
    from . import attacks as A
    from . import model as M
    if spec.kind == "none":
        return 0.0
    rng = rng if rng is not None else np.random.default_rng(0)
    poisoned = A.poison_batch(arch, params, x, labels, spec, rng)
    clean = M.grad_params(arch, params, x, labels, mode="eval")
    dirty = M.grad_params(arch, params, poisoned, labels, mode="eval")
    return float(math.sqrt(sum(float(np.sum((dirty[k] - clean[k]) ** 2)) for k in clean)))
