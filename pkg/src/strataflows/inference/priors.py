"""Prior helpers."""

import numpy as np
from scipy import optimize, special, stats


class PriorError(ValueError):
    pass


def invgamma_from_quantiles(lower, upper, mass=0.99):
    """Inverse-Gamma ``(alpha, beta)`` whose central ``mass`` interval is ``[lower, upper]``.

    Equal tail probabilities ``(1 - mass) / 2`` are placed below ``lower`` and
    above ``upper``.  ``beta`` is a scale on the inverse-gamma variable
    (``scipy.stats.invgamma(alpha, scale=beta)``).
    """
    if not (0 < lower < upper):
        raise PriorError("need 0 < lower < upper")
    if not (0 < mass < 1):
        raise PriorError("mass must lie in (0, 1)")
    if upper / lower - 1 < 1e-10:
        raise PriorError("interval too narrow to bracket a solution")
    tail = 0.5 * (1.0 - mass)

    def beta_for(alpha):
        # P(X <= lower) = Q(alpha, beta / lower) = tail
        return lower * special.gammainccinv(alpha, tail)

    def resid(log_alpha):
        a = np.exp(log_alpha)
        b = beta_for(a)
        # P(X >= upper) = P(alpha, beta / upper)
        return np.log(special.gammainc(a, b / upper)) - np.log(tail)

    lo = np.log(1e-3)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        flo = resid(lo)
        hi, fhi = lo, flo
        # expand the bracket upward until the residual changes sign
        while np.isfinite(fhi) and np.sign(fhi) == np.sign(flo) and hi < np.log(1e8):
            lo, flo = hi, fhi
            hi += 0.5
            fhi = resid(hi)
    if not (np.isfinite(flo) and np.isfinite(fhi)) or np.sign(flo) == np.sign(fhi):
        raise PriorError(f"no inverse-gamma solution bracketable for [{lower}, {upper}]")
    la = optimize.brentq(resid, lo, hi, xtol=1e-14, rtol=1e-14, maxiter=500)
    alpha = float(np.exp(la))
    beta = float(beta_for(alpha))
    d = stats.invgamma(alpha, scale=beta)
    got = d.cdf(upper) - d.cdf(lower)
    if abs(got - mass) > 1e-6 * mass:
        raise PriorError(f"inverse-gamma fit missed the target mass ({got} vs {mass})")
    return alpha, beta


def invgamma_mode(alpha, beta):
    return beta / (alpha + 1.0)
