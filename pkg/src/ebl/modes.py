"""Per-angular-mode reductions of the linearized operator and their spectra.

A rotation-equivariant operator restricted to the span of one spherical
harmonic of degree i (angular eigenvalue mu_i = i (i + N - 2)) reduces to the
radial operator

    L_k phi = -lam (phi'' + (N-1)/r phi') + (1 + lam mu_k / r^2 - p u^(p-1)) phi

with a Dirichlet wall at r = 1 and the far-field closure of the grid.  This
module assembles those reductions, computes their bottom Dirichlet eigenpairs
(tau_0 and the positive radial eigenfunction z for mode 0), evaluates the
quadratic forms Q and Q-tilde mode by mode, and locates the threshold
lambda_0 where the first symmetric mode loses positivity.

Symmetry groups enter only through the list of admitted harmonic degrees;
the gate i_1 >= 2 with odd leading multiplicity is enforced at construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .eigen import bottom_eigenpairs_sym
from .errors import NoBracket, SolverError
from .grids import (
    ProblemParams,
    RadialGrid,
    TridiagonalOperator,
    assemble_divergence_form,
    boundary_derivative,
    build_grid,
)
from .radial import RadialProfile, solve_exterior_ground_state

__all__ = [
    "GroupSpec",
    "GridPolicy",
    "ModeOperator",
    "EigenPair",
    "make_group",
    "assemble_mode_operator",
    "bottom_eigenpairs",
    "quadratic_form",
    "locate_lambda0",
    "Lambda0Result",
]


@dataclass(frozen=True)
class GroupSpec:
    """A symmetry class described by its admitted spherical-harmonic degrees.

    i1 is the first nonzero admitted degree and m1 its multiplicity; the gate
    i1 >= 2 and m1 odd is what guarantees an odd-dimensional kernel at the
    degeneracy point, so it is enforced here.
    """

    name: str
    N: int
    i1: int
    m1: int
    mode_indices: tuple
    multiplicities: tuple

    def __post_init__(self):
        if self.i1 < 2:
            raise ValueError(f"group {self.name!r}: first mode i1 must be >= 2, got {self.i1}")
        if self.m1 % 2 == 0:
            raise ValueError(f"group {self.name!r}: leading multiplicity m1 must be odd, got {self.m1}")
        modes = tuple(int(i) for i in self.mode_indices)
        if len(modes) == 0 or modes[0] != self.i1:
            raise ValueError("mode_indices must start at i1")
        if any(b <= a for a, b in zip(modes, modes[1:])):
            raise ValueError("mode_indices must be strictly increasing")
        if len(self.multiplicities) != len(modes):
            raise ValueError("multiplicities must match mode_indices")
        object.__setattr__(self, "mode_indices", modes)
        object.__setattr__(self, "multiplicities", tuple(int(m) for m in self.multiplicities))

    def mu(self, i: int) -> float:
        """Angular eigenvalue of degree-i spherical harmonics."""
        return float(i * (i + self.N - 2))

    def admits(self, k: int) -> bool:
        return k == 0 or k in self.mode_indices


def _even_degrees(start: int, count: int) -> tuple:
    return tuple(start + 2 * j for j in range(count))


def make_group(name: str, N: int, param: int | None = None, **custom) -> GroupSpec:
    """Catalog of symmetry classes.

    product-orthogonal(m): block symmetry O(m) x O(N-m); admitted degrees are
    the even ones, i1 = 2, m1 = 1.  dihedral(k), N = 2 only: degrees k, 2k,
    3k, ...; i1 = k, m1 = 1.  The three platonic classes are for N = 3.
    A custom class passes i1/m1/modes explicitly (and must satisfy the gate).
    """
    key = name.replace("_", "-").lower()
    if key in ("product-orthogonal", "po"):
        m = 1 if param is None else int(param)
        if not 1 <= m <= N - 1:
            raise ValueError(f"product-orthogonal block size must be in [1, {N - 1}]")
        modes = _even_degrees(2, 8)
        return GroupSpec(f"product-orthogonal({m})", N, 2, 1, modes, (1,) * len(modes))
    if key == "dihedral":
        if N != 2:
            raise ValueError("dihedral groups are the planar catalog (N = 2)")
        if param is None or param < 3:
            raise ValueError("dihedral(k) needs k >= 3")
        k = int(param)
        modes = tuple(k * j for j in range(1, 9))
        return GroupSpec(f"dihedral({k})", N, k, 1, modes, (1,) * len(modes))
    if key == "tetrahedral":
        if N != 3:
            raise ValueError("tetrahedral symmetry lives in N = 3")
        return GroupSpec("tetrahedral", 3, 3, 1, (3, 4, 6, 7, 8, 9), (1, 1, 2, 1, 1, 2))
    if key == "octahedral":
        if N != 3:
            raise ValueError("octahedral symmetry lives in N = 3")
        return GroupSpec("octahedral", 3, 4, 1, (4, 6, 8, 10, 12), (1, 1, 1, 1, 2))
    if key == "icosahedral":
        if N != 3:
            raise ValueError("icosahedral symmetry lives in N = 3")
        return GroupSpec("icosahedral", 3, 6, 1, (6, 10, 12, 16), (1, 1, 1, 1))
    if key == "custom":
        modes = tuple(custom["modes"])
        mult = tuple(custom.get("multiplicities", (1,) * len(modes)))
        return GroupSpec("custom", N, int(custom["i1"]), int(custom["m1"]), modes, mult)
    raise ValueError(f"unknown group {name!r}")


@dataclass(frozen=True)
class GridPolicy:
    """How to build a grid for a given lambda (one policy per study)."""

    M: int = 2000
    stretch: float = 2.0
    r_max_factor: float = 40.0
    closure: str = "robin"

    def build(self, params: ProblemParams) -> RadialGrid:
        return build_grid(params, self.M, self.stretch, self.r_max_factor, self.closure)

    def as_dict(self) -> dict:
        return {
            "M": self.M,
            "stretch": self.stretch,
            "r_max_factor": self.r_max_factor,
            "closure": self.closure,
        }


@dataclass(frozen=True)
class ModeOperator:
    """Radial reduction of the linearization at angular eigenvalue mu_k."""

    params: ProblemParams
    grid: RadialGrid
    k: int
    mu_k: float
    potential: np.ndarray
    op: TridiagonalOperator
    u_values: np.ndarray = field(repr=False, default=None)


@dataclass(frozen=True)
class EigenPair:
    """One Dirichlet eigenpair of a mode operator (weighted-norm-1 vector)."""

    tau: float
    phi: RadialProfile
    index: int
    residual: float


def assemble_mode_operator(
    params: ProblemParams,
    grid: RadialGrid,
    u: RadialProfile,
    k: int,
    group: GroupSpec | None = None,
) -> ModeOperator:
    """Dirichlet rows at r = 1, the grid closure at r_max, weight-symmetric."""
    if k != 0:
        if group is None or not group.admits(k):
            raise ValueError(f"mode index {k} is not admitted by the group")
        if group.N != params.N:
            raise ValueError("group dimension does not match params")
    mu_k = 0.0 if k == 0 else group.mu(k)
    uv = np.asarray(u.values, dtype=float)
    r = grid.nodes
    potential = 1.0 + params.lam * mu_k / r**2 - params.p * np.maximum(uv, 0.0) ** (params.p - 1.0)
    op = assemble_divergence_form(grid, params.lam, potential, left_bc="dirichlet")
    return ModeOperator(params=params, grid=grid, k=k, mu_k=mu_k, potential=potential, op=op, u_values=uv)


def bottom_eigenpairs(mode_op: ModeOperator, count: int) -> list[EigenPair]:
    """The `count` smallest eigenpairs of A phi = tau W phi for one mode.

    Sturm bisection plus inverse iteration on the weight-symmetrized matrix;
    eigenvectors come back orthonormal in the weighted inner product.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    op = mode_op.op
    d, e = op.symmetrized_tridiag()
    taus, ys = bottom_eigenpairs_sym(d, e, count)
    grid = mode_op.grid
    w_act = op.weights[op.lo : op.hi + 1]
    pairs = []
    for i in range(count):
        full = np.zeros(grid.M + 1)
        full[op.lo : op.hi + 1] = ys[:, i] / np.sqrt(w_act)
        resid_vec = op.apply_weighted(full) - taus[i] * op.weights * full
        resid_vec[: op.lo] = 0.0
        resid_vec[op.hi + 1 :] = 0.0
        resid = float(np.linalg.norm(resid_vec) / np.linalg.norm(full))
        phi = RadialProfile(
            grid=grid,
            values=full,
            kind="eigenfunction",
            residual_norm=resid,
            boundary_slope=boundary_derivative(grid, full, order=1),
            params=mode_op.params,
            meta={"tau": float(taus[i]), "mode": mode_op.k},
        )
        pairs.append(EigenPair(tau=float(taus[i]), phi=phi, index=i, residual=resid))
    return pairs


def quadratic_form(mode_op: ModeOperator, phi, boundary_term: bool = False) -> float:
    """Q_{lam,k}(phi), optionally with the -lam (N-1) phi(1)^2 boundary term.

    Q = int (lam phi'^2 + phi^2 - p u^(p-1) phi^2) r^(N-1) dr
        + lam mu_k int phi^2 r^(N-3) dr      (+ Robin flux energy)

    evaluated with the same element energies and lumped weights as the
    matrix, so <A phi, phi> matches it exactly for functions vanishing at
    both walls.
    """
    v = np.asarray(getattr(phi, "values", phi), dtype=float)
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite test function")
    grid = mode_op.grid
    lam = mode_op.params.lam
    q = lam * grid.h1_seminorm_sq(v)
    q += float(np.sum(grid.quad_weights * mode_op.potential * v * v))
    q += mode_op.op.robin_term * v[-1] ** 2
    if boundary_term:
        q -= lam * (mode_op.params.N - 1) * v[0] ** 2
    return float(q)


@dataclass(frozen=True)
class Lambda0Result:
    """Location of the Dirichlet positivity threshold for the first mode."""

    value: float
    N: int
    p: float
    group: GroupSpec
    bracket: tuple
    tol: float
    samples: np.ndarray          # columns: lambda, bottom tau of mode i1
    nonbinding_modes: dict       # k -> bottom tau at the located threshold


def bottom_tau_of(mode_op: ModeOperator) -> float:
    """Rayleigh-polished bottom Dirichlet eigenvalue of a mode operator."""
    d, e = mode_op.op.symmetrized_tridiag()
    taus, _ = bottom_eigenpairs_sym(d, e, 1)
    return float(taus[0])


def mode_bottom_tau(
    N: int, p: float, grid_policy: GridPolicy, group: GroupSpec, k: int, lam: float,
    u: RadialProfile | None = None,
) -> float:
    """Bottom Dirichlet eigenvalue of the mode-k reduction at one lambda."""
    params = ProblemParams.from_lambda(N, p, lam)
    grid = grid_policy.build(params)
    if u is None or u.grid is not grid:
        u = solve_exterior_ground_state(params, grid)
    return bottom_tau_of(assemble_mode_operator(params, grid, u, k, group))


def locate_lambda0(
    N: int,
    p: float,
    grid_policy: GridPolicy,
    group: GroupSpec,
    bracket: tuple,
    tol: float = 1e-4,
) -> Lambda0Result:
    """Bisection on lambda -> bottom tau of mode i1 across the bracket.

    Needs tau <= 0 at the left end and tau > 0 at the right end.  Higher
    admitted modes are checked non-binding at the located value: their
    bottom eigenvalues must exceed mode i1's, walking up the admitted list
    until the mode potential is pointwise positive (beyond which the
    operator is positive definite automatically).
    """
    lo, hi = float(bracket[0]), float(bracket[1])
    if not (0 < lo < hi):
        raise ValueError("need 0 < lambda_lo < lambda_hi")
    samples = []

    def f(lam):
        tau = mode_bottom_tau(N, p, grid_policy, group, group.i1, lam)
        samples.append((lam, tau))
        return tau

    f_lo, f_hi = f(lo), f(hi)
    if not (f_lo <= 0.0 < f_hi):
        raise NoBracket(
            f"bottom eigenvalue does not change sign on [{lo}, {hi}] "
            f"(tau(lo) = {f_lo:.3e}, tau(hi) = {f_hi:.3e}); widen the bracket"
        )
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if f(mid) <= 0.0:
            lo = mid
        else:
            hi = mid
    value = 0.5 * (lo + hi)

    # non-bindingness of higher admitted modes at the threshold
    params = ProblemParams.from_lambda(N, p, value)
    grid = grid_policy.build(params)
    u = solve_exterior_ground_state(params, grid)
    tau_i1 = None
    nonbinding = {}
    for k in group.mode_indices:
        mop = assemble_mode_operator(params, grid, u, k, group)
        if k == group.i1:
            tau_i1 = bottom_tau_of(mop)
            nonbinding[k] = tau_i1
            continue
        if np.min(mop.potential) > 0.0:
            break
        tau_k = bottom_tau_of(mop)
        nonbinding[k] = tau_k
        if tau_k <= tau_i1:
            raise SolverError(
                f"mode {k} binds below mode {group.i1} at lambda = {value:.6g}; "
                "mode ordering is violated, which signals a corrupted discretization"
            )
    arr = np.array(sorted(samples))
    return Lambda0Result(
        value=value,
        N=N,
        p=p,
        group=group,
        bracket=(float(bracket[0]), float(bracket[1])),
        tol=tol,
        samples=arr,
        nonbinding_modes=nonbinding,
    )
