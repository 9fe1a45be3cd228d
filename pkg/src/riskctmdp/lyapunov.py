"""Lyapunov drift certificates and the value bounds they imply."""

from dataclasses import dataclass

import numpy as np

from ._validation import check_positive
from .model import ValidationReport, Violation

__all__ = [
    "LyapunovCertificate",
    "CertificateError",
    "tabulated",
    "check_certificate",
    "certify_gaussian",
    "value_upper_bound",
    "log_value_bound",
    "second_moment_bound",
    "drift_bound",
    "truncated_lipschitz_constant",
    "limit_lipschitz_constant",
    "gaussian_v0_drift",
    "gaussian_v1_sq_drift",
]


class CertificateError(ValueError):
    """A certificate's constants violate the required inequalities."""


class _Tabulated:
    def __init__(self, coords, values):
        self.coords = np.asarray(coords, dtype=float)
        self.values = np.asarray(values, dtype=float)
        if self.coords.shape != self.values.shape:
            raise ValueError("tabulated function needs one value per coordinate")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        idx = np.argmin(np.abs(x[..., None] - self.coords), axis=-1)
        if not np.allclose(self.coords[idx], x, rtol=0, atol=1e-12):
            raise ValueError("tabulated function evaluated off its grid")
        return self.values[idx]


def tabulated(coords, values):
    """A state function given by its values at the grid coordinates."""
    return _Tabulated(coords, values)


@dataclass(frozen=True, eq=False)
class LyapunovCertificate:
    """Growth functions ``V0``, ``V1`` (callables of the state coordinate) and constants.

    ``V0``, ``rho0``, ``M0``, ``L0``, ``rho1`` bound the drift, the jump rates
    and the cost; ``V1``, ``rho2``, ``b1``, ``M1`` bound the drift of ``V1**2``.
    """

    V0: object
    V1: object
    rho0: float
    M0: float
    L0: float
    rho1: float
    rho2: float
    b1: float
    M1: float

    def __post_init__(self):
        for name in ("rho0", "M0", "rho1", "rho2"):
            check_positive(getattr(self, name), name)
        check_positive(self.L0, "L0", strict=False)
        check_positive(self.b1, "b1", strict=False)
        if not self.M1 >= 1:
            raise CertificateError(f"M1 must be >= 1, got {self.M1}")

    def constant_violations(self, alpha):
        """Names and (lhs, rhs) of the alpha-dependent inequalities that fail."""
        out = []
        bound = min(alpha, alpha**2 / self.rho0)
        if not self.rho1 < bound:
            out.append(("rho1 < min(alpha, alpha^2/rho0)", self.rho1, bound))
        if not self.rho2 < alpha:
            out.append(("rho2 < alpha", self.rho2, alpha))
        return out

    def require(self, alpha):
        bad = self.constant_violations(alpha)
        if bad:
            name, lhs, rhs = bad[0]
            raise CertificateError(f"certificate violates {name}: {lhs} vs {rhs}")

    def V0_on(self, space):
        return self._on(self.V0, space, "V0")

    def V1_on(self, space):
        return self._on(self.V1, space, "V1")

    @staticmethod
    def _on(fn, space, name):
        coords = getattr(fn, "coords", None)
        if coords is not None and (coords.shape != space.coords.shape or not np.allclose(coords, space.coords)):
            raise ValueError(f"{name} is tabulated on a different state grid")
        values = np.broadcast_to(np.asarray(fn(space.coords), dtype=float), space.coords.shape)
        if np.any(values < 1 - 1e-12):
            raise CertificateError(f"{name} must be >= 1 on every state")
        return np.array(values)

    def as_dict(self):
        return {k: getattr(self, k) for k in ("rho0", "M0", "L0", "rho1", "rho2", "b1", "M1")}


def check_certificate(model, cert, tol=None):
    """Check the drift, rate and cost inequalities at every grid state-action pair."""
    if tol is None:
        tol = 1e-5 if hasattr(model.kernel, "intensity") else 1e-8
    space = model.space
    v0 = cert.V0_on(space)
    v1 = cert.V1_on(space)
    coords = space.coords
    report = ValidationReport()

    for name, lhs, rhs in cert.constant_violations(model.alpha):
        report.violations.append(Violation(f"constants:{name}", -1, np.nan, -1, lhs, rhs))

    def add(check_id, lhs, rhs):
        lhs = np.asarray(lhs, dtype=float)
        rhs = np.broadcast_to(np.asarray(rhs, dtype=float), lhs.shape)
        bad = ~(lhs <= rhs + tol)
        for pos in zip(*np.nonzero(bad)):
            x = int(pos[0])
            a = int(pos[1]) if len(pos) > 1 else -1
            report.violations.append(Violation(check_id, x, coords[x], a, float(lhs[pos]), float(rhs[pos])))

    drift0 = model.kernel.apply(v0[None, :])[0]
    add("drift_V0", drift0, cert.rho0 * v0[:, None])
    add("rate_bound", model.exit_rates, cert.M0 * v0[:, None])
    add("cost_bound", model.cost, (cert.rho1 * np.log(v0) + cert.L0)[:, None])
    drift1 = model.kernel.apply((v1**2)[None, :])[0]
    add("drift_V1_sq", drift1, (cert.rho2 * v1**2 + cert.b1)[:, None])
    add("V0_sq_vs_V1", v0**2, cert.M1 * v1)
    return report


def certify_gaussian(sigma, M, rho1, alpha):
    """Certificate for the Gaussian jump model with ``lambda <= M (x^2 + 1)``.

    Uses ``V0 = x^2 + 1``, ``V1 = x^4 + 1``, ``rho0 = M sigma^2``, ``M0 = L0 = M``,
    ``rho2 = 3780 M (sigma^8 + sigma^6 + sigma^4 + sigma^2)``, ``b1 = 1``, ``M1 = 2``.
    """
    sigma = check_positive(sigma, "sigma")
    M = check_positive(M, "M")
    alpha = check_positive(alpha, "alpha")
    s2 = sigma**2
    poly = s2**4 + s2**3 + s2**2 + s2
    m_max = alpha / (3780 * poly)
    if not M < m_max:
        raise CertificateError(f"M < alpha/(3780(sigma^8+sigma^6+sigma^4+sigma^2)) fails: {M} >= {m_max}")
    rho1_max = min(alpha, alpha**2 / (M * s2))
    if not 0 < rho1 < rho1_max:
        raise CertificateError(f"0 < rho1 < min(alpha, alpha^2/(M sigma^2)) fails: rho1={rho1}, bound={rho1_max}")
    return LyapunovCertificate(
        V0=lambda x: np.asarray(x, dtype=float) ** 2 + 1.0,
        V1=lambda x: np.asarray(x, dtype=float) ** 4 + 1.0,
        rho0=M * s2,
        M0=M,
        L0=M,
        rho1=float(rho1),
        rho2=3780 * M * poly,
        b1=1.0,
        M1=2.0,
    )


def value_upper_bound(cert, alpha, theta, x):
    """``alpha^2/(alpha^2 - rho0 rho1 theta) * exp(theta L0/alpha) * V0(x)^(rho1 theta/alpha)``.

    ``x`` is a state coordinate (or array of them); ``theta`` broadcasts against it.
    """
    theta = np.asarray(theta, dtype=float)
    denom = alpha**2 - cert.rho0 * cert.rho1 * theta
    if np.any(denom <= 0):
        raise CertificateError("alpha^2 - rho0 rho1 theta must be > 0")
    v0 = np.asarray(cert.V0(x), dtype=float)
    return alpha**2 / denom * np.exp(theta * cert.L0 / alpha) * v0 ** (cert.rho1 * theta / alpha)


def log_value_bound(cert, alpha, x):
    """Upper bound on the optimal certainty-equivalent cost, uniform in theta."""
    v0 = np.asarray(cert.V0(x), dtype=float)
    return (
        np.log(alpha**2 / (alpha**2 - cert.rho0 * cert.rho1))
        + cert.L0 / alpha
        + cert.rho1 / alpha * np.log(v0)
    )


def second_moment_bound(cert, alpha, x):
    """Bound on ``E exp(2 int e^{-alpha t} c dt)``; also the theta-Lipschitz constant of the value."""
    v1 = np.asarray(cert.V1(x), dtype=float)
    return alpha * np.exp(2 * cert.L0 / alpha) / (alpha - cert.rho2) * cert.M1**2 * (v1**2 + cert.b1 / cert.rho2)


limit_lipschitz_constant = second_moment_bound


def drift_bound(cert, t, x):
    """``exp(rho0 t) V0(x)``, the bound on ``E V0(xi_t)``."""
    return np.exp(cert.rho0 * np.asarray(t, dtype=float)) * np.asarray(cert.V0(x), dtype=float)


def truncated_lipschitz_constant(n, alpha):
    """theta-Lipschitz constant ``2 e^{2n/alpha} (e^{n/alpha} - 1)`` of a truncated value (``inf`` on overflow)."""
    with np.errstate(over="ignore"):
        return 2 * np.exp(2 * n / alpha) * np.expm1(n / alpha)


def gaussian_v0_drift(lam, sigma):
    """``int V0 dq`` for ``V0 = x^2 + 1`` under the Gaussian jump kernel."""
    return np.asarray(lam, dtype=float) * sigma**2


def gaussian_v1_sq_drift(lam, x, sigma):
    """``int V1^2 dq`` for ``V1 = x^4 + 1`` under the Gaussian jump kernel."""
    x = np.asarray(x, dtype=float)
    s2 = sigma**2
    poly = (
        105 * s2**4
        + 420 * x**2 * s2**3
        + 210 * x**4 * s2**2
        + 6 * s2**2
        + 12 * s2 * x**2
        + 28 * x**6 * s2
    )
    return np.asarray(lam, dtype=float) * poly
