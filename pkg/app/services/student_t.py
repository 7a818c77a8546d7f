"""Student t distribution helpers built on the regularized incomplete beta function."""
import math

from scipy.special import betainc, betaincinv, gammaln

NEWTON_TOL = 1e-10
NEWTON_MAX_ITER = 50


def t_pdf(t: float, df: float) -> float:
    log_norm = gammaln((df + 1) / 2) - gammaln(df / 2) - 0.5 * math.log(df * math.pi)
    return math.exp(log_norm - (df + 1) / 2 * math.log1p(t * t / df))


def t_upper_tail(t: float, df: float) -> float:
    """P(T > t)"""
    x = df / (df + t * t)
    tail = 0.5 * float(betainc(df / 2, 0.5, x))
    return tail if t >= 0 else 1.0 - tail


def t_cdf(t: float, df: float) -> float:
    return 1.0 - t_upper_tail(t, df)


def t_quantile(p: float, df: float) -> float:
    """Quantile of Student's t: the value q with P(T <= q) = p.

    Starts from the incomplete-beta inversion and polishes with Newton steps
    on the upper tail, which keeps precision for p close to 1.
    """
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must lie in (0, 1), got {p}")
    if df <= 0:
        raise ValueError(f"degrees of freedom must be positive, got {df}")
    if p == 0.5:
        return 0.0
    if p < 0.5:
        return -t_quantile(1.0 - p, df)

    tail = 1.0 - p
    x = float(betaincinv(df / 2, 0.5, 2.0 * tail))
    if x <= 0.0:
        return math.inf
    t = math.sqrt(df * (1.0 - x) / x)

    for _ in range(NEWTON_MAX_ITER):
        density = t_pdf(t, df)
        if density <= 0.0:
            break
        step = (t_upper_tail(t, df) - tail) / density
        t += step
        if abs(step) <= NEWTON_TOL * max(1.0, abs(t)):
            break
    return t


def t_critical(alpha: float, df: float) -> float:
    """Two-sided critical value at level alpha"""
    return t_quantile(1.0 - alpha / 2.0, df)
