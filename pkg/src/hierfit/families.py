"""Response families: Normal (NO) and generalized gamma (GG).

The GG density uses the three-parameter form with ``z = (y/mu)**nu`` and
``theta = 1/(sigma**2 * nu**2)``::

    f(y) = |nu| * theta**theta * z**theta * exp(-theta*z) / (Gamma(theta) * y)

so that ``theta*z ~ Gamma(theta, 1)``.  At ``nu = 1`` this is the gamma
distribution with shape ``1/sigma**2`` and mean ``mu``.  ``mu`` is the scale
parameter; the distribution mean equals ``mu`` exactly only at ``nu = 1``
(see :func:`gg_moments` for the exact moments).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import DomainError, InvalidParamsError, MomentUndefinedError

NU_GUARD = 1e-4

FAMILIES = ("NO", "GG")

# default link per family parameter
DEFAULT_LINKS = {
    "NO": {"mu": "identity", "sigma": "log"},
    "GG": {"mu": "log", "sigma": "log", "nu": "identity"},
}


@dataclass(frozen=True)
class FamilyParams:
    mu: float
    sigma: float
    nu: float | None = None


def link_fun(link: str, x):
    if link == "identity":
        return np.asarray(x, dtype=float)
    if link == "log":
        return np.log(x)
    raise InvalidParamsError(f"unknown link {link!r}")


def link_inv(link: str, eta):
    if link == "identity":
        return np.asarray(eta, dtype=float)
    if link == "log":
        return np.exp(eta)
    raise InvalidParamsError(f"unknown link {link!r}")


def link_deriv(link: str, x):
    """d(parameter)/d(eta) evaluated at the parameter value x."""
    if link == "identity":
        return np.ones_like(np.asarray(x, dtype=float))
    if link == "log":
        return np.asarray(x, dtype=float)
    raise InvalidParamsError(f"unknown link {link!r}")


def _check_family(family: str):
    if family not in FAMILIES:
        raise InvalidParamsError(f"unknown family {family!r}")


def _validate(family: str, mu, sigma, nu):
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0) or not np.all(np.isfinite(sigma)):
        raise InvalidParamsError("sigma must be positive and finite")
    if family == "GG":
        if np.any(mu <= 0) or not np.all(np.isfinite(mu)):
            raise InvalidParamsError("GG requires mu > 0")
        if nu is None:
            raise InvalidParamsError("GG requires nu")
        nu = float(nu)
        if not np.isfinite(nu) or abs(nu) < NU_GUARD:
            raise InvalidParamsError(f"GG requires |nu| >= {NU_GUARD}")
        return mu, sigma, nu
    if not np.all(np.isfinite(mu)):
        raise InvalidParamsError("mu must be finite")
    return mu, sigma, None


def _gg_theta(sigma, nu):
    return 1.0 / (sigma**2 * nu**2)


def logpdf(family: str, mu, sigma, nu, y):
    """Log density, vectorized over y (and mu)."""
    _check_family(family)
    mu, sigma, nu = _validate(family, mu, sigma, nu)
    y = np.asarray(y, dtype=float)
    if family == "NO":
        return -0.5 * np.log(2 * np.pi * sigma**2) - (y - mu) ** 2 / (2 * sigma**2)
    if np.any(y <= 0):
        raise DomainError("GG support is y > 0")
    theta = _gg_theta(sigma, nu)
    logz = nu * (np.log(y) - np.log(mu))
    z = np.exp(logz)
    return (
        np.log(abs(nu))
        + theta * np.log(theta)
        + theta * logz
        - theta * z
        - special.gammaln(theta)
        - np.log(y)
    )


def pdf(family: str, mu, sigma, nu, y):
    return np.exp(logpdf(family, mu, sigma, nu, y))


def cdf(family: str, mu, sigma, nu, y):
    _check_family(family)
    mu, sigma, nu = _validate(family, mu, sigma, nu)
    y = np.asarray(y, dtype=float)
    if family == "NO":
        return special.ndtr((y - mu) / sigma)
    if np.any(y <= 0):
        raise DomainError("GG support is y > 0")
    theta = _gg_theta(sigma, nu)
    z = (y / mu) ** nu
    p = special.gammainc(theta, theta * z)
    return p if nu > 0 else 1.0 - p


def quantile(family: str, mu, sigma, nu, p):
    _check_family(family)
    mu, sigma, nu = _validate(family, mu, sigma, nu)
    p = np.asarray(p, dtype=float)
    if np.any(p <= 0) or np.any(p >= 1):
        raise DomainError("p must lie in (0, 1)")
    if family == "NO":
        return mu + sigma * special.ndtri(p)
    theta = _gg_theta(sigma, nu)
    q = p if nu > 0 else 1.0 - p
    z = special.gammaincinv(theta, q) / theta
    return mu * z ** (1.0 / nu)


def sample(family: str, mu, sigma, nu, n: int, rng: np.random.Generator):
    """n i.i.d. draws; deterministic given the generator state."""
    _check_family(family)
    mu, sigma, nu = _validate(family, mu, sigma, nu)
    if n < 0:
        raise InvalidParamsError("n must be >= 0")
    if n == 0:
        return np.empty(0)
    if family == "NO":
        return mu + sigma * rng.standard_normal(n)
    theta = _gg_theta(sigma, nu)
    g = rng.gamma(theta, size=n)
    return mu * (g / theta) ** (1.0 / nu)


def sample_at(family: str, mu_vec, sigma, nu, rng: np.random.Generator):
    """One draw per element of mu_vec (shared sigma/nu)."""
    _check_family(family)
    mu, sigma, nu = _validate(family, mu_vec, sigma, nu)
    n = mu.shape[0]
    if family == "NO":
        return mu + sigma * rng.standard_normal(n)
    theta = _gg_theta(sigma, nu)
    g = rng.gamma(theta, size=n)
    return mu * (g / theta) ** (1.0 / nu)


def gg_moments(mu, sigma, nu):
    """Exact mean and variance of the GG distribution."""
    mu, sigma, nu = _validate("GG", mu, sigma, nu)
    theta = _gg_theta(sigma, nu)
    if theta + 1.0 / nu <= 0 or theta + 2.0 / nu <= 0:
        raise MomentUndefinedError("gamma-function argument non-positive; moment undefined")

    def raw(k):
        return np.exp(
            special.gammaln(theta + k / nu) - special.gammaln(theta) - (k / nu) * np.log(theta)
        )

    mean = mu * raw(1)
    var = mu**2 * (raw(2) - raw(1) ** 2)
    return float(mean), float(var)


# ---------------------------------------------------------------------------
# Scores and working weights
# ---------------------------------------------------------------------------

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(200)
_GL_P = 0.5 * (_GL_NODES + 1.0)  # nodes on (0, 1)
_GL_W = 0.5 * _GL_WEIGHTS


def _gg_nu_weight(theta: float, nu: float) -> float:
    """E[(dl/dnu)^2] by Gauss-Legendre quadrature over g = theta*z ~ Gamma(theta)."""
    g = special.gammaincinv(theta, _GL_P)
    z = g / theta
    logz = np.log(g) - np.log(theta)
    bracket = (
        1.0
        - 2.0 * theta * (np.log(theta) + 1.0 + logz - z - special.psi(theta))
        + theta * logz * (1.0 - z)
    )
    return float(np.sum(_GL_W * bracket**2) / nu**2)


def score_and_weight(family: str, mu, sigma, nu, y, wrt: str, link: str | None = None):
    """First derivative of the log-likelihood w.r.t. the link-scale predictor
    of the requested parameter, plus a positive working weight.

    The weight is the expected squared score (Fisher weight), which is
    strictly positive on the parameter space.
    """
    _check_family(family)
    mu, sigma, nu = _validate(family, mu, sigma, nu)
    if link is None:
        link = DEFAULT_LINKS[family][wrt]
    y = np.asarray(y, dtype=float)

    if family == "NO":
        if wrt == "mu":
            dmu = link_deriv(link, mu)
            score = (y - mu) / sigma**2 * dmu
            weight = dmu**2 / sigma**2
            return score, np.broadcast_to(weight, score.shape).copy()
        if wrt == "sigma":
            dsig = link_deriv(link, sigma)
            dl_dsigma = ((y - mu) ** 2 - sigma**2) / sigma**3
            score = dl_dsigma * dsig
            weight = np.full_like(score, 2.0 * dsig**2 / sigma**2)
            return score, weight
        raise InvalidParamsError(f"Normal family has no parameter {wrt!r}")

    if np.any(y <= 0):
        raise DomainError("GG support is y > 0")
    theta = _gg_theta(sigma, nu)
    logz = nu * (np.log(y) - np.log(mu))
    z = np.exp(logz)
    if wrt == "mu":
        dmu = link_deriv(link, mu)
        score = theta * nu * (z - 1.0) / mu * dmu
        weight = theta * nu**2 / mu**2 * dmu**2
        return score, np.broadcast_to(weight, score.shape).copy()
    if wrt == "sigma":
        dsig = link_deriv(link, sigma)
        dl_dtheta = np.log(theta) + 1.0 + logz - z - special.psi(theta)
        score = dl_dtheta * (-2.0 * theta / sigma) * dsig
        w = 4.0 * theta**2 / sigma**2 * (special.polygamma(1, theta) - 1.0 / theta) * dsig**2
        return score, np.full_like(score, float(w))
    if wrt == "nu":
        dnu = link_deriv(link, nu)
        bracket = (
            1.0
            - 2.0 * theta * (np.log(theta) + 1.0 + logz - z - special.psi(theta))
            + theta * logz * (1.0 - z)
        )
        score = bracket / nu * dnu
        w = _gg_nu_weight(theta, nu) * float(np.asarray(dnu).ravel()[0]) ** 2
        return score, np.full_like(score, w)
    raise InvalidParamsError(f"unknown parameter {wrt!r}")


def working_response_jacobian(family: str, mu, sigma, nu, y, link: str | None = None):
    """d z_work / d y for the mu working response z = eta + score/weight."""
    _check_family(family)
    mu, sigma, nu = _validate(family, mu, sigma, nu)
    if link is None:
        link = DEFAULT_LINKS[family]["mu"]
    y = np.asarray(y, dtype=float)
    if family == "NO":
        # score = (y-mu)/sigma^2 * dmu, weight = dmu^2/sigma^2 -> dz/dy = 1/dmu
        return 1.0 / link_deriv(link, mu) * np.ones_like(y)
    # GG: score = theta*nu*(z-1)/mu*dmu, weight = theta*nu^2/mu^2*dmu^2
    # dz/dy = (dscore/dy)/weight = z/y * (mu/dmu); log link: dmu = mu -> z/y
    z = (y / mu) ** nu
    return z / y * (mu / link_deriv(link, mu))
