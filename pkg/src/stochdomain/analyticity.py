"""Size of the complex analyticity region and the constants derived from it.

Given the invertibility margin ``delta_tilde`` of the domain map, the
spatial dimension ``d`` and the diffusion bounds, this module evaluates
the admissible radius ``beta``, the positivity constants ``B, C, D,
epsilon`` of the remapped coefficient on the complex region, the
polyellipse parameters ``tau, sigma`` and the resulting sparse-grid
rate exponents, together with the tolerance-driven work model.

All functions are pure and work on floats.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

from .errors import InfeasibleRegionError, ParameterError

BETA_POLICIES = ("min", "lemma", "theorem")
GAMMA_FORMS = ("statement", "proof")
D_FORMS = ("proof", "statement")


def _check_delta(delta_tilde: float, d: int) -> None:
    if not (0.0 < delta_tilde < 1.0):
        raise ParameterError(f"delta_tilde must lie in (0, 1), got {delta_tilde}")
    if int(d) != d or d < 1:
        raise ParameterError(f"d must be a positive integer, got {d}")


def gamma(delta_tilde: float, d: int, form: str = "statement") -> float:
    """Auxiliary ratio entering the radius condition.

    ``form="statement"`` uses ``2 delta^2`` in the numerator,
    ``form="proof"`` uses ``2 delta^d``; the two agree for ``d = 2``.
    """
    _check_delta(delta_tilde, d)
    s = (2.0 - delta_tilde) ** d
    if form == "statement":
        lead = 2.0 * delta_tilde**2
    elif form == "proof":
        lead = 2.0 * delta_tilde**d
    else:
        raise ParameterError(f"unknown gamma form {form!r}; expected one of {GAMMA_FORMS}")
    return (lead + s) / (delta_tilde**d + s)


def _radius(delta_tilde: float, d: int, g: float) -> float:
    # delta * log g / (d + log g); -inf when g <= 0
    if g <= 0.0:
        return -math.inf
    lg = math.log(g)
    return delta_tilde * lg / (d + lg)


def beta_bound(delta_tilde: float, d: int, gamma_form: str = "statement") -> dict:
    """Both radius conditions.

    Returns ``beta_lemma`` (built on ``log gamma``), ``beta_thm`` (built on
    ``log(2 - gamma)``), the common second term ``sqrt(1 + delta^2/2) - 1``
    and ``gamma`` itself.  Either bound may be non-positive; no clipping
    is applied.
    """
    g = gamma(delta_tilde, d, gamma_form)
    second = math.sqrt(1.0 + delta_tilde**2 / 2.0) - 1.0
    return {
        "gamma": g,
        "beta_lemma": min(_radius(delta_tilde, d, g), second),
        "beta_thm": min(_radius(delta_tilde, d, 2.0 - g), second),
        "second_term": second,
    }


def select_beta_max(bounds: dict, policy: str = "min") -> float:
    """Pick the working radius bound from :func:`beta_bound` output."""
    if policy == "min":
        return min(bounds["beta_lemma"], bounds["beta_thm"])
    if policy == "lemma":
        return bounds["beta_lemma"]
    if policy == "theorem":
        return bounds["beta_thm"]
    raise ParameterError(f"unknown beta policy {policy!r}; expected one of {BETA_POLICIES}")


def alpha(beta: float, delta_tilde: float, d: int) -> float:
    """``2 - exp(d beta / (delta - beta))``; positive iff ``beta < delta log2/(d + log2)``."""
    if not (0.0 <= beta < delta_tilde):
        raise ParameterError(f"need 0 <= beta < delta_tilde, got beta={beta}, delta_tilde={delta_tilde}")
    return 2.0 - math.exp(d * beta / (delta_tilde - beta))


def lemma_constants(
    beta: float,
    delta_tilde: float,
    d: int,
    a_min: float = 1.0,
    a_max: float = 1.0,
    d_form: str = "proof",
) -> dict:
    """Bounds ``B <= lambda_min(Re G^-1)``, ``lambda_max(Re G^-1) <= D``,
    ``sigma_max(Im G^-1) <= C`` on the complex region and
    ``epsilon = 1 / ((1 + (C/B)^2) D)``.

    Raises
    ------
    InfeasibleRegionError
        If ``B <= 0``; a smaller ``beta`` is needed.
    """
    _check_delta(delta_tilde, d)
    if not (0.0 < a_min <= a_max):
        raise ParameterError(f"need 0 < a_min <= a_max, got {a_min}, {a_max}")
    dt = delta_tilde
    a = alpha(beta, dt, d)
    if a <= 0.0:
        raise InfeasibleRegionError(
            f"alpha = {a:.3g} <= 0 at beta = {beta:.3g}; reduce beta below "
            f"{dt * math.log(2) / (d + math.log(2)):.6g}"
        )
    s = (2.0 - dt) ** d
    im_bound = 2.0 * beta * (2.0 + beta - dt)
    B = (dt ** (d + 1) * a * (dt - 2.0 * beta) - im_bound * (1.0 - a) * s) / (
        a_max * s**2 * (2.0 - a) ** 2
    )
    if B <= 0.0:
        raise InfeasibleRegionError(f"B = {B:.3g} <= 0 at beta = {beta:.3g}; choose a smaller beta")
    scale = a_min * dt ** (2 * d) * a**2
    if d_form == "proof":
        D = (s * (2.0 - a) * (2.0 - dt + beta) ** 2 + s * (1.0 - a) * im_bound) / scale
    elif d_form == "statement":
        D = (s * (2.0 - a) * (2.0 - dt + beta) ** 2 + (1.0 - dt) ** d * (2.0 - a) * im_bound) / scale
    else:
        raise ParameterError(f"unknown D form {d_form!r}; expected one of {D_FORMS}")
    C = (s * (2.0 - a) * im_bound + s * (1.0 - a) * ((2.0 - dt + beta) ** 2 + beta**2)) / scale
    eps = 1.0 / ((1.0 + (C / B) ** 2) * D)
    return {"alpha": a, "B": B, "C": C, "D": D, "epsilon": eps}


def rate_parameters(beta: float, delta_tilde: float, n_s: int, c2_tilde: float | None = None) -> dict:
    """Polyellipse parameters and sparse-grid rate exponents.

    ``mu3`` is only returned when ``c2_tilde`` is given (it then uses
    ``delta_star = (e log 2 - 1) / c2_tilde``).
    """
    if delta_tilde >= 1.0:
        raise ParameterError("tau is undefined for delta_tilde >= 1 (unbounded region)")
    if n_s < 1:
        raise ParameterError(f"n_s must be >= 1, got {n_s}")
    tau = beta / (1.0 - delta_tilde)
    sigma_hat = math.log(math.sqrt(tau**2 + 1.0) + tau)
    sigma = sigma_hat / 2.0
    denom = 1.0 + math.log(2.0 * n_s)
    out = {"tau": tau, "sigma_hat": sigma_hat, "sigma": sigma, "mu2": math.log(2.0) / (n_s * denom)}
    if c2_tilde is not None:
        ds = delta_star(c2_tilde)
        out["delta_star"] = ds
        out["mu3"] = sigma * ds * c2_tilde / denom
    return out


def delta_star(c2_tilde: float) -> float:
    return (math.e * math.log(2.0) - 1.0) / c2_tilde


# External Clenshaw-Curtis Smolyak constants.  They come from the standard
# isotropic error analysis of nested CC grids and only feed overlay curves.


def default_c2_tilde(sigma: float) -> float:
    return 1.0 + math.sqrt(math.pi / (2.0 * sigma)) / math.log(2.0)


def default_c1(sigma: float, d_star: float) -> float:
    ln2 = math.log(2.0)
    c_sigma = 2.0 / (math.exp(sigma) - 1.0)
    a = math.exp(
        d_star
        * sigma
        * (1.0 / (sigma * ln2**2) + 1.0 / (ln2 * math.sqrt(2.0 * sigma)) + 2.0 * default_c2_tilde(sigma))
    )
    return 4.0 * c_sigma * a / (math.e * d_star * sigma)


def q_constant(sigma: float, n_s: int, d_star: float, c1: float, c2_tilde: float) -> float:
    if c1 == 1.0:
        raise ParameterError("C1 = 1 makes the prefactor singular")
    return c1 / math.exp(sigma * d_star * c2_tilde) * max(1.0, c1) ** n_s / abs(1.0 - c1)


def predicted_error(
    eta: float,
    sigma: float,
    n_s: int,
    q_scale: float = 1.0,
    d_star: float | None = None,
    c1: float | None = None,
    c2_tilde: float | None = None,
) -> float:
    """Subexponential sparse-grid bound ``Q eta^mu3 exp(-N sigma / 2^(1/N) eta^mu2)``.

    ``q_scale`` multiplies the prefactor (e.g. the norm of the QoI
    functional).  Missing external constants fall back to the defaults.
    """
    if eta < 1:
        raise ParameterError(f"eta must be >= 1, got {eta}")
    if sigma <= 0.0:
        raise ParameterError("sigma must be positive")
    c2_tilde = default_c2_tilde(sigma) if c2_tilde is None else c2_tilde
    d_star = delta_star(c2_tilde) if d_star is None else d_star
    c1 = default_c1(sigma, d_star) if c1 is None else c1
    denom = 1.0 + math.log(2.0 * n_s)
    mu2 = math.log(2.0) / (n_s * denom)
    mu3 = sigma * d_star * c2_tilde / denom
    pref = q_scale * q_constant(sigma, n_s, d_star, c1, c2_tilde)
    return pref * eta**mu3 * math.exp(-n_s * sigma / 2.0 ** (1.0 / n_s) * eta**mu2)


@dataclass(frozen=True)
class WorkParams:
    """Model constants of the tolerance-to-work estimate.

    ``f_min``/``f_max`` bound the singular values of the map Jacobian
    (``delta_tilde`` and ``2 - delta_tilde`` by default).
    """

    delta_tilde: float
    sigma: float
    d: int = 2
    a_min: float = 1.0
    C_D: float = 1.0
    D_2: float = 1.0
    l: float = 1.0
    C_FE: float = 1.0
    C_gamma: float = 1.0
    D_gamma: float = 1.0
    r: float = 1.0
    D_3: float = 1.0
    q: float = 1.0
    D_1: float = 1.0
    C_SG: float = 1.0
    C_T: float = 1.0
    rho_ratio: float = 1.0
    c1: float | None = None
    c2_tilde: float | None = None
    n_s: int | None = None

    @property
    def f_min(self) -> float:
        return self.delta_tilde

    @property
    def f_max(self) -> float:
        return 2.0 - self.delta_tilde


def work_model(tol: float, params: WorkParams) -> dict:
    """Dimensions, mesh size, knot count and total work reaching ``tol``.

    ``params.n_s`` pins the stochastic dimension; otherwise the truncation
    requirement decides it.
    """
    if tol <= 0.0:
        raise ParameterError("tol must be positive")
    p = params
    n_s_req = math.ceil((p.D_2 * tol / p.C_D) ** (-1.0 / p.l))
    n_s = p.n_s if p.n_s is not None else max(1, n_s_req)
    fe_den = 3.0 * p.C_FE * p.a_min * p.f_min**p.d * p.f_max**-2 * p.C_gamma * p.D_gamma
    h = (tol / fe_den) ** (1.0 / (2.0 * p.r))
    n_h = math.ceil(p.D_3 * (tol / fe_den) ** (-p.d / (2.0 * p.r)))
    c2 = default_c2_tilde(p.sigma) if p.c2_tilde is None else p.c2_tilde
    c1 = default_c1(p.sigma, delta_star(c2)) if p.c1 is None else p.c1
    c_f = c1 / abs(1.0 - c1)
    big_f = max(1.0, c1)
    # evaluate in logs: F^{N_s} overflows quickly
    log_base = (
        math.log(3.0 * p.rho_ratio * p.C_SG * p.C_T * c_f)
        + n_s * math.log(big_f)
        + p.sigma
        - math.log(tol)
    )
    log_eta = log_base * (1.0 + math.log(2.0 * n_s)) / p.sigma
    eta = math.ceil(math.exp(log_eta)) if log_eta < 700 else math.inf
    return {
        "N_s_required": n_s_req,
        "N_s": n_s,
        "h_required": h,
        "N_h_required": n_h,
        "eta_required": eta,
        "W_total": p.D_1 * n_h**p.q * eta,
    }


@dataclass
class AnalyticityReport:
    """All region constants for one ``(delta_tilde, d, a_min, a_max)``.

    Fields depending on ``beta`` are ``None`` when no positive radius is
    admissible under the chosen policy; ``notes`` then says why.
    """

    delta_tilde: float
    d: int
    a_min: float
    a_max: float
    gamma: float
    beta_lemma: float
    beta_thm: float
    beta_max: float
    beta_policy: str
    beta: float | None = None
    alpha: float | None = None
    B_const: float | None = None
    C_const: float | None = None
    D_const: float | None = None
    epsilon: float | None = None
    n_s: int | None = None
    tau: float | None = None
    sigma_hat: float | None = None
    sigma: float | None = None
    mu2: float | None = None
    mu3: float | None = None
    delta_star: float | None = None
    c2_tilde: float | None = None
    notes: list[str] = field(default_factory=list)

    @property
    def feasible(self) -> bool:
        return self.epsilon is not None

    def as_dict(self) -> dict:
        out = asdict(self)
        out["feasible"] = self.feasible
        return out

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        rows = [(k, v) for k, v in self.as_dict().items() if k != "notes"]
        width = max(len(k) for k, _ in rows)
        lines = []
        for k, v in rows:
            shown = f"{v:.6g}" if isinstance(v, float) else str(v)
            lines.append(f"{k:<{width}}  {shown}")
        lines.extend(f"note: {n}" for n in self.notes)
        return "\n".join(lines)


def analyze(
    delta_tilde: float,
    d: int = 2,
    a_min: float = 1.0,
    a_max: float = 1.0,
    n_s: int | None = None,
    beta: float | None = None,
    policy: str = "min",
    fraction: float = 0.9,
    gamma_form: str = "statement",
    d_form: str = "proof",
) -> AnalyticityReport:
    """Evaluate every region constant.

    Without an explicit ``beta`` the working radius is
    ``fraction * beta_max`` with ``beta_max`` chosen by ``policy``.
    """
    bounds = beta_bound(delta_tilde, d, gamma_form)
    bmax = select_beta_max(bounds, policy)
    rep = AnalyticityReport(
        delta_tilde=delta_tilde,
        d=d,
        a_min=a_min,
        a_max=a_max,
        gamma=bounds["gamma"],
        beta_lemma=bounds["beta_lemma"],
        beta_thm=bounds["beta_thm"],
        beta_max=bmax,
        beta_policy=policy,
        n_s=n_s,
    )
    if beta is None:
        if bmax <= 0.0:
            rep.notes.append(f"no positive radius under policy {policy!r} (beta_max = {bmax:.4g})")
            return rep
        beta = fraction * bmax
    elif beta > bmax:
        rep.notes.append(f"beta = {beta:.4g} exceeds beta_max = {bmax:.4g}")
    rep.beta = beta
    try:
        consts = lemma_constants(beta, delta_tilde, d, a_min, a_max, d_form)
    except InfeasibleRegionError as exc:
        rep.notes.append(str(exc))
        rep.alpha = alpha(beta, delta_tilde, d) if 0 <= beta < delta_tilde else None
        return rep
    rep.alpha = consts["alpha"]
    rep.B_const, rep.C_const, rep.D_const = consts["B"], consts["C"], consts["D"]
    rep.epsilon = consts["epsilon"]
    if n_s is not None and beta > 0:
        sig = rate_parameters(beta, delta_tilde, n_s)["sigma"]
        c2 = default_c2_tilde(sig)
        rates = rate_parameters(beta, delta_tilde, n_s, c2)
        rep.tau, rep.sigma_hat, rep.sigma = rates["tau"], rates["sigma_hat"], rates["sigma"]
        rep.mu2, rep.mu3, rep.delta_star = rates["mu2"], rates["mu3"], rates["delta_star"]
        rep.c2_tilde = c2
    return rep
