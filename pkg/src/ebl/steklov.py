"""Mode-wise Steklov quantities, the bifurcation threshold, and domain shapes.

For an admitted mode k the unit-boundary-data extension phi_k solves the
mode reduction of the linearized equation with phi_k(1) = 1 and far-field
decay.  With the normal pointing into the hole the boundary operator acts
diagonally over modes:

    gamma_k = -phi_k'(1),        sigma_k = gamma_k - (N - 1),

and multiplying the equation by phi_k and integrating by parts gives the
variational identity  gamma_k = Q_{lam,k}(phi_k) / lam, which superconverges
and is the reported value (the one-sided slope is kept as a cross-check).

sigma_{i1}(lam) is negative just above the Dirichlet threshold lambda_0 and
positive for large lam; its zero crossing lambda_star is located by
bisection and the bifurcation radius is r_star = lambda_star^(-1/2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import Lambda0Collision, NearSingularOperator, NoBracket
from .grids import ProblemParams, RadialGrid, boundary_derivative
from .modes import (
    GridPolicy,
    GroupSpec,
    Lambda0Result,
    ModeOperator,
    assemble_mode_operator,
    bottom_tau_of,
    locate_lambda0,
    quadratic_form,
)
from .radial import RadialProfile, solve_exterior_ground_state

__all__ = [
    "SteklovResult",
    "BifurcationResult",
    "DomainShape",
    "solve_mode_extension",
    "steklov_mode",
    "scan_sigma",
    "locate_lambda_star",
    "bifurcate",
    "export_domain_shape",
]


@dataclass(frozen=True)
class SteklovResult:
    """gamma and sigma of one mode at one lambda, with the slope cross-check."""

    lam: float
    k: int
    mu_k: float
    gamma: float                 # reported value = variational gamma_form
    sigma: float
    phi: RadialProfile
    gamma_form: float
    gamma_slope: float
    slope_vs_form_gap: float


@dataclass(frozen=True)
class BifurcationResult:
    """Thresholds, the sampled sigma curve, and kernel metadata."""

    group: GroupSpec
    N: int
    p: float
    lambda0: float
    lambda_star: float
    r_star: float
    sigma_curve: np.ndarray      # columns: lambda, sigma_i1, gamma_i1, tau0_mode0
    kernel_multiplicity: int
    bracket: tuple
    tolerances: dict
    lambda0_result: Lambda0Result | None = None
    kernel_check: dict = field(default_factory=dict)
    grid_policy: GridPolicy | None = None


@dataclass(frozen=True)
class DomainShape:
    """First-order perturbed boundary at the bifurcation radius."""

    R: float
    epsilon: float
    mode: int
    N: int
    group_name: str
    angles: np.ndarray           # theta on the circle (N=2) or polar angle alpha
    radius: np.ndarray
    xy: np.ndarray | None        # closed polyline for N = 2
    perturbation_mean: float     # sphere average of the exported perturbation


def _checked_mode_operator(params, grid, u, k, group) -> ModeOperator:
    mop = assemble_mode_operator(params, grid, u, k, group)
    tau_min = bottom_tau_of(mop)
    if tau_min <= 1e-8:
        raise NearSingularOperator(
            f"mode {k} Dirichlet operator has bottom eigenvalue {tau_min:.3e} at "
            f"lambda = {params.lam:.6g}; this lambda sits at or below the positivity threshold"
        )
    return mop


def solve_mode_extension(
    params: ProblemParams,
    grid: RadialGrid,
    u: RadialProfile,
    k: int,
    group: GroupSpec | None = None,
) -> RadialProfile:
    """Unit-boundary-data decaying solution of the mode-k reduction."""
    mop = _checked_mode_operator(params, grid, u, k, group)
    values = mop.op.solve_refined(np.zeros(mop.op.n_active), left_value=1.0)
    resid = mop.op.apply_weighted(values)
    rn = mop.op.residual_norm(resid[mop.op.lo : mop.op.hi + 1])
    return RadialProfile(
        grid=grid,
        values=values,
        kind="steklov_mode",
        residual_norm=rn,
        boundary_slope=boundary_derivative(grid, np.asarray(values, float), order=1),
        params=params,
        meta={"mode": k},
    )


def steklov_mode(
    params: ProblemParams,
    grid: RadialGrid,
    u: RadialProfile,
    k: int,
    group: GroupSpec | None = None,
) -> SteklovResult:
    """gamma_k both ways (variational and slope), sigma_k = gamma_k - (N-1)."""
    mop = _checked_mode_operator(params, grid, u, k, group)
    values = mop.op.solve_refined(np.zeros(mop.op.n_active), left_value=1.0)
    resid = mop.op.apply_weighted(values)
    rn = mop.op.residual_norm(resid[mop.op.lo : mop.op.hi + 1])
    phi = RadialProfile(
        grid=grid,
        values=values,
        kind="steklov_mode",
        residual_norm=rn,
        boundary_slope=boundary_derivative(grid, np.asarray(values, float), order=1),
        params=params,
        meta={"mode": k},
    )
    gamma_form = quadratic_form(mop, phi, boundary_term=False) / params.lam
    gamma_slope = -phi.boundary_slope
    sigma = gamma_form - (params.N - 1)
    return SteklovResult(
        lam=params.lam,
        k=k,
        mu_k=mop.mu_k,
        gamma=gamma_form,
        sigma=sigma,
        phi=phi,
        gamma_form=gamma_form,
        gamma_slope=gamma_slope,
        slope_vs_form_gap=abs(gamma_form - gamma_slope),
    )


def _sigma_point(N, p, grid_policy, group, lam, mode=None, guess=None):
    """One sigma sample: (sigma, gamma, tau0 of mode 0, u values for reuse)."""
    params = ProblemParams.from_lambda(N, p, lam)
    grid = grid_policy.build(params)
    u = solve_exterior_ground_state(params, grid, initial_guess=guess)
    k = group.i1 if mode is None else mode
    res = steklov_mode(params, grid, u, k, group)
    tau0 = bottom_tau_of(assemble_mode_operator(params, grid, u, 0))
    return res.sigma, res.gamma, tau0, u


def scan_sigma(
    N: int,
    p: float,
    grid_policy: GridPolicy,
    group: GroupSpec,
    lambdas,
    mode: int | None = None,
) -> np.ndarray:
    """Sample lambda -> sigma_k along an increasing sweep (continuation reuse).

    Returns rows (lambda, sigma, gamma, tau0_mode0).
    """
    lams = np.sort(np.asarray(lambdas, dtype=float))
    rows = []
    for lam in lams:
        sigma, gamma, tau0, _u = _sigma_point(N, p, grid_policy, group, lam, mode)
        rows.append((lam, sigma, gamma, tau0))
    return np.array(rows)


def locate_lambda_star(
    N: int,
    p: float,
    grid_policy: GridPolicy,
    group: GroupSpec,
    bracket: tuple,
    tol: float = 1e-5,
    lambda0_bracket: tuple | None = None,
    lambda0_tol: float = 1e-4,
    lambda0_result: Lambda0Result | None = None,
) -> BifurcationResult:
    """Bisection on lambda -> sigma_{i1}(lambda); carries lambda_0 along.

    The left end must sit strictly above lambda_0 (a safety margin of five
    lambda_0 tolerances is enforced), with sigma negative there and positive
    at the right end.
    """
    lo, hi = float(bracket[0]), float(bracket[1])
    if not (0 < lo < hi):
        raise ValueError("need 0 < lambda_lo < lambda_hi")

    if lambda0_result is None:
        if lambda0_bracket is None:
            left = 0.5 * (p - 1.0) / group.mu(group.i1)
            lambda0_bracket = (left, lo)
        lambda0_result = locate_lambda0(N, p, grid_policy, group, lambda0_bracket, lambda0_tol)
    lambda0 = lambda0_result.value
    if lo <= lambda0 + 5.0 * lambda0_tol:
        raise Lambda0Collision(
            f"bracket start {lo} sits at or below lambda_0 = {lambda0:.6g} plus margin"
        )

    samples = []

    def f(lam):
        sigma, gamma, tau0, _ = _sigma_point(N, p, grid_policy, group, lam)
        samples.append((lam, sigma, gamma, tau0))
        return sigma

    f_lo, f_hi = f(lo), f(hi)
    if not (f_lo < 0.0 < f_hi):
        raise NoBracket(
            f"sigma does not change sign on [{lo}, {hi}] "
            f"(sigma(lo) = {f_lo:.3e}, sigma(hi) = {f_hi:.3e})",
        )
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if f(mid) < 0.0:
            lo = mid
        else:
            hi = mid
    lambda_star = 0.5 * (lo + hi)

    # kernel content at the crossing: mode i1 degenerate, higher modes positive
    params = ProblemParams.from_lambda(N, p, lambda_star)
    grid = grid_policy.build(params)
    u = solve_exterior_ground_state(params, grid)
    kernel_check = {}
    for k in group.mode_indices:
        res = steklov_mode(params, grid, u, k, group)
        kernel_check[k] = res.sigma
        if k != group.i1 and np.min(
            assemble_mode_operator(params, grid, u, k, group).potential
        ) > 0.0:
            break
    curve = np.array(sorted(samples))
    return BifurcationResult(
        group=group,
        N=N,
        p=p,
        lambda0=lambda0,
        lambda_star=lambda_star,
        r_star=lambda_star ** (-0.5),
        sigma_curve=curve,
        kernel_multiplicity=group.m1,
        bracket=(float(bracket[0]), float(bracket[1])),
        tolerances={"lambda_star": tol, "lambda0": lambda0_tol},
        lambda0_result=lambda0_result,
        kernel_check=kernel_check,
        grid_policy=grid_policy,
    )


def bifurcate(
    N: int,
    p: float,
    grid_policy: GridPolicy,
    group: GroupSpec,
    lambda0_bracket: tuple,
    lambda_star_hi: float,
    rel_tol: float = 1e-5,
) -> BifurcationResult:
    """Locate lambda_0 and lambda_star with an adaptive sigma bracket.

    sigma rises from -infinity at lambda_0 to its free-field limit like
    sigma_inf - C/(lambda - lambda_0), so the negative window (lambda_0,
    lambda_star) can be much narrower than a generic tolerance.  Two pilot
    samples fit the hyperbola, the lambda_0 tolerance is tightened to a
    fraction of the estimated window, and the bracket start is walked toward
    lambda_0 until sigma is negative there.
    """
    scale = float(lambda0_bracket[1])
    l0_tol = rel_tol * scale
    r0 = locate_lambda0(N, p, grid_policy, group, lambda0_bracket, l0_tol)

    def sigma_at(lam):
        return _sigma_point(N, p, grid_policy, group, lam)[0]

    for _round in range(4):
        delta1 = 12.0 * l0_tol
        s1 = sigma_at(r0.value + delta1)
        if s1 < 0.0:
            window = None  # already inside the negative window
            lo = r0.value + delta1
            break
        s2 = sigma_at(r0.value + 2.0 * delta1)
        # fit sigma(d) = a - C/d through the two pilots
        C = 2.0 * delta1 * max(s2 - s1, 1e-300)
        a = s2 + C / (2.0 * delta1)
        window = C / a if a > 0 else None
        if window is not None and window > 11.0 * l0_tol:
            lo = r0.value + 0.5 * window
            if sigma_at(lo) < 0.0:
                break
        # window unresolved at this tolerance: refine lambda_0 and retry
        new_tol = l0_tol / 8.0 if window is None else min(l0_tol / 8.0, window / 24.0)
        bracket = (r0.value - 5.0 * l0_tol, r0.value + 5.0 * l0_tol)
        l0_tol = new_tol
        r0 = locate_lambda0(N, p, grid_policy, group, bracket, l0_tol)
    else:
        raise NoBracket(
            "could not resolve the negative-sigma window above lambda_0; "
            "the gap lambda_star - lambda_0 is below the resolvable scale"
        )
    ls_tol = max(min(rel_tol * scale, (lo - r0.value) / 8.0), 1e-12 * scale)
    return locate_lambda_star(
        N, p, grid_policy, group, (lo, lambda_star_hi), ls_tol,
        lambda0_result=r0, lambda0_tol=l0_tol,
    )


def _zonal_profile(N: int, m: int):
    """The degree-2 block harmonic restricted to the sphere, normalized to
    unit sup: q(alpha) = (N sin(alpha)^2 - m) / max(m, N - m)."""

    scale = float(max(m, N - m))

    def q(alpha):
        return (N * np.sin(alpha) ** 2 - m) / scale

    return q


def export_domain_shape(result: BifurcationResult, epsilon: float, samples: int | None = None) -> DomainShape:
    """First-order perturbed boundary r = R_* (1 + eps v) at the crossing.

    For N = 2 the curve is sampled on the full circle and closed; for N >= 3
    with the block symmetry the zonal profile along the polar angle is
    exported.  eps must stay below 1/(1 + i1^2) so the curve stays simple.
    """
    i1 = result.group.i1
    if not 0.0 <= epsilon < 1.0 / (1.0 + i1**2):
        raise ValueError(f"epsilon must lie in [0, {1.0 / (1.0 + i1 ** 2):.4g}) for mode {i1}")
    R = result.r_star
    n = samples if samples is not None else max(64 * i1, 256)
    if result.N == 2:
        theta = np.linspace(0.0, 2.0 * math.pi, n + 1)
        v = np.cos(i1 * theta)
        radius = R * (1.0 + epsilon * v)
        xy = np.column_stack([radius * np.cos(theta), radius * np.sin(theta)])
        xy[-1] = xy[0]
        # mean over the circle by the trapezoid rule (exact for this band limit)
        mean = float(np.trapz(epsilon * v, theta) / (2.0 * math.pi))
        return DomainShape(
            R=R, epsilon=epsilon, mode=i1, N=2, group_name=result.group.name,
            angles=theta, radius=radius, xy=xy, perturbation_mean=mean,
        )
    if not result.group.name.startswith("product-orthogonal"):
        raise ValueError("shape export for N >= 3 covers the block-symmetric catalog only")
    m = int(result.group.name.split("(")[1].rstrip(")"))
    q = _zonal_profile(result.N, m)
    alpha = np.linspace(0.0, 0.5 * math.pi, n + 1)
    v = q(alpha)
    radius = R * (1.0 + epsilon * v)
    # sphere average of v against the block measure sin^(m-1) cos^(N-m-1)
    from numpy.polynomial.legendre import leggauss

    x, wts = leggauss(64)
    a = 0.25 * math.pi * (x + 1.0)
    wts = 0.25 * math.pi * wts
    meas = np.sin(a) ** (m - 1) * np.cos(a) ** (result.N - m - 1)
    mean = float(np.sum(wts * q(a) * meas) / np.sum(wts * meas)) * epsilon
    return DomainShape(
        R=R, epsilon=epsilon, mode=i1, N=result.N, group_name=result.group.name,
        angles=alpha, radius=radius, xy=None, perturbation_mean=mean,
    )
