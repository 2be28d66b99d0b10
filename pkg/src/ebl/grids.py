"""Truncated radial meshes, weighted quadrature, and divergence-form operators.

All downstream solvers work with the radial measure r^(N-1) dr on a truncated
interval [r0, r_max].  Three ingredients live here:

* graded meshes  r_j = r0 + (r_max - r0) * (j/M)^stretch,  nested under M -> 2M;
* node-based quadrature weights that integrate the overlapping-parabola
  interpolant of nodal data exactly against r^(N-1) (so linears, and in fact
  quadratics, are exact on any mesh, and the weights stay positive);
* the self-adjoint three-point discretization of

      phi  ->  -lam * r^(1-N) * (r^(N-1) phi')' + c(r) * phi

  assembled in weighted (divergence) form, with a decaying Robin closure
  phi'(r_max) = -beta * phi(r_max) or a homogeneous Dirichlet wall at r_max.

The Robin coefficient beta = 1/sqrt(lam) + (N-1)/(2 r_max) matches the WKB
far-field decay of solutions of -lam * Delta(phi) + phi = 0, which halves the
r_max needed for a given accuracy compared with the Dirichlet wall.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import solve_banded

from .errors import NearSingularOperator

__all__ = [
    "ProblemParams",
    "RadialGrid",
    "TridiagonalOperator",
    "build_grid",
    "build_interval_grid",
    "build_wholespace_grid",
    "assemble_divergence_form",
    "robin_beta",
    "fornberg_weights",
]

_CLOSURES = ("robin", "dirichlet")


@dataclass(frozen=True)
class ProblemParams:
    """Problem data (dimension, exponent, diffusion) with lam = R^-2 enforced.

    Attributes:
        N: spatial dimension, integer >= 2.
        p: nonlinearity exponent; subcritical for N >= 3 (p < (N+2)/(N-2)).
        lam: diffusion coefficient in front of the Laplacian.
        R: hole radius of the equivalent unit-coefficient problem, R = lam^-1/2.
    """

    N: int
    p: float
    lam: float
    R: float

    def __post_init__(self):
        if not (isinstance(self.N, (int, np.integer)) and self.N >= 2):
            raise ValueError(f"dimension N must be an integer >= 2, got {self.N}")
        for name in ("p", "lam", "R"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"{name} must be finite, got {v}")
        if self.p <= 1:
            raise ValueError(f"exponent p must exceed 1, got {self.p}")
        if self.N >= 3 and self.p >= (self.N + 2) / (self.N - 2):
            raise ValueError(
                f"p={self.p} is supercritical for N={self.N} "
                f"(needs p < {(self.N + 2) / (self.N - 2)})"
            )
        if self.lam <= 0 or self.R <= 0:
            raise ValueError("lam and R must be positive")
        if abs(self.lam * self.R**2 - 1.0) > 1e-10:
            raise ValueError(
                f"inconsistent parameters: lam*R^2 = {self.lam * self.R ** 2}, expected 1"
            )

    @classmethod
    def from_lambda(cls, N: int, p: float, lam: float) -> "ProblemParams":
        return cls(N=N, p=p, lam=lam, R=lam ** (-0.5))

    @classmethod
    def from_radius(cls, N: int, p: float, R: float) -> "ProblemParams":
        return cls(N=N, p=p, lam=R ** (-2.0), R=R)


def _weighted_power_moments(a, b, N, kmax):
    """Centered moments mu_k = int_a^b (r - c)^k r^(N-1) dr, c = (a+b)/2.

    Exact via binomial expansion of r^(N-1) = ((r-c) + c)^(N-1); N is a small
    integer so the expansion is short.  a, b may be arrays (one per element).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    c = 0.5 * (a + b)
    ta, tb = a - c, b - c
    mus = []
    for k in range(kmax + 1):
        total = np.zeros_like(c)
        for i in range(N):
            binom = math.comb(N - 1, i)
            q = k + i + 1
            total += binom * c ** (N - 1 - i) * (tb**q - ta**q) / q
        mus.append(total)
    return mus


def _parabola_element_weights(nodes, N):
    """Node weights integrating the overlapping-parabola interpolant.

    On each element the integrand is replaced by the average of the two
    quadratics anchored at the element's left and right node triples (single
    parabola on the end elements), so quadratics, hence linears, are
    integrated exactly against r^(N-1).  Parabola rules spill a small
    negative contribution onto their far node; where that makes a node weight
    non-positive (vanishing measure at r = 0, strongly compressed gradings),
    the adjacent elements fall back to the exact-linear hat rule.  The
    fallback keeps linears exact and costs only an O(h^3) local error.
    """
    M = len(nodes) - 1
    a, b = nodes[:-1], nodes[1:]
    mu0, mu1, mu2 = _weighted_power_moments(a, b, N, 2)
    c = 0.5 * (a + b)

    def hat_weight(w, elems):
        # exact integral of the linear interpolant, per element
        h = b[elems] - a[elems]
        np.add.at(w, elems, (mu0[elems] * (b[elems] - c[elems]) - mu1[elems]) / h)
        np.add.at(w, elems + 1, (mu1[elems] - mu0[elems] * (a[elems] - c[elems])) / h)

    def parabola_weight(w, elems, i0, i1, i2, factor):
        # contribution of the parabola through nodes (i0, i1, i2) on elements
        t0 = nodes[i0] - c[elems]
        t1 = nodes[i1] - c[elems]
        t2 = nodes[i2] - c[elems]
        m0, m1, m2 = mu0[elems], mu1[elems], mu2[elems]
        for ti, tj, tk, idx in ((t0, t1, t2, i0), (t1, t2, t0, i1), (t2, t0, t1, i2)):
            integral = (m2 - (tj + tk) * m1 + tj * tk * m0) / ((ti - tj) * (ti - tk))
            np.add.at(w, idx, factor * integral)

    def assemble(use_hat):
        w = np.zeros(M + 1)
        elems = np.arange(M)
        hat_elems = elems[use_hat]
        hat_weight(w, hat_elems)
        left = elems[(~use_hat) & (elems >= 1)]
        right = elems[(~use_hat) & (elems <= M - 2)]
        both = (~use_hat) & (elems >= 1) & (elems <= M - 2)
        parabola_weight(w, elems[both], elems[both] - 1, elems[both], elems[both] + 1, 0.5)
        parabola_weight(w, elems[both], elems[both], elems[both] + 1, elems[both] + 2, 0.5)
        only_left = (~use_hat) & (elems == M - 1) & (elems >= 1)
        parabola_weight(w, elems[only_left], elems[only_left] - 1, elems[only_left], elems[only_left] + 1, 1.0)
        only_right = (~use_hat) & (elems == 0) & np.full(M, M >= 2)
        parabola_weight(w, elems[only_right], elems[only_right], elems[only_right] + 1, elems[only_right] + 2, 1.0)
        return w

    use_hat = np.zeros(M, dtype=bool)
    if M == 1:
        use_hat[:] = True
    w = assemble(use_hat)
    for _ in range(12):
        bad = np.where(w <= 0.0)[0]
        if len(bad) == 0:
            break
        for j in bad:
            # node j receives parabola contributions from elements j-2 .. j+1
            use_hat[max(0, j - 2) : min(M, j + 2)] = True
        w = assemble(use_hat)
    else:
        use_hat[:] = True
        w = assemble(use_hat)
    return w


@dataclass(frozen=True)
class RadialGrid:
    """Graded mesh on [r0, r_max] with r^(N-1)-weighted quadrature.

    Attributes:
        nodes: strictly increasing radii, nodes[0] = r0.
        N: spatial dimension entering the weight r^(N-1).
        quad_weights: positive node weights, sum w_j f(r_j) ~ int f r^(N-1) dr.
        closure: far-field truncation kind, "robin" or "dirichlet".
        stretch: grading exponent of the generating map (1 = uniform).
    """

    nodes: np.ndarray
    N: int
    quad_weights: np.ndarray
    closure: str
    stretch: float
    elem_len: np.ndarray = field(repr=False, default=None)
    elem_mass: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        if nodes.ndim != 1 or len(nodes) < 2:
            raise ValueError("grid needs at least two nodes")
        if not np.all(np.diff(nodes) > 0):
            raise ValueError("grid nodes must be strictly increasing")
        if self.closure not in _CLOSURES:
            raise ValueError(f"unknown closure {self.closure!r}")
        object.__setattr__(self, "nodes", nodes)
        h = np.diff(nodes)
        m = _weighted_power_moments(nodes[:-1], nodes[1:], self.N, 0)[0]
        object.__setattr__(self, "elem_len", h)
        object.__setattr__(self, "elem_mass", m)
        w = np.asarray(self.quad_weights, dtype=float)
        if w.shape != nodes.shape:
            raise ValueError("quad_weights must match nodes")
        object.__setattr__(self, "quad_weights", w)

    # -- basic geometry -------------------------------------------------
    @property
    def M(self) -> int:
        return len(self.nodes) - 1

    @property
    def r0(self) -> float:
        return float(self.nodes[0])

    @property
    def r_max(self) -> float:
        return float(self.nodes[-1])

    # -- quadrature and discrete norms ----------------------------------
    def integrate(self, values) -> float:
        """int f r^(N-1) dr for nodal samples f(r_j)."""
        return float(self.quad_weights @ np.asarray(values, dtype=float))

    def inner(self, u, v) -> float:
        """Weighted inner product <u, v>_w = int u v r^(N-1) dr."""
        return float(np.sum(self.quad_weights * np.asarray(u) * np.asarray(v)))

    def h1_seminorm_sq(self, values) -> float:
        """int (u')^2 r^(N-1) dr of the piecewise-linear interpolant (exact)."""
        du = np.diff(np.asarray(values, dtype=float)) / self.elem_len
        return float(np.sum(self.elem_mass * du * du))

    def h1_norm(self, values) -> float:
        """Discrete H1 norm, (int (u'^2 + u^2) r^(N-1) dr)^(1/2)."""
        v = np.asarray(values, dtype=float)
        return math.sqrt(self.h1_seminorm_sq(v) + self.inner(v, v))

    def refined(self) -> "RadialGrid":
        """The nested grid with 2M elements (same generating map)."""
        return build_interval_grid(
            self.N, self.r0, self.r_max, 2 * self.M, self.stretch, self.closure
        )

    def with_closure(self, closure: str) -> "RadialGrid":
        return replace(self, closure=closure)


def build_interval_grid(
    N: int, r0: float, r_max: float, M: int, stretch: float = 2.0, closure: str = "robin"
) -> RadialGrid:
    """Graded grid r_j = r0 + (r_max - r0) (j/M)^stretch with M elements."""
    if M < 16:
        raise ValueError(f"node count M must be >= 16, got {M}")
    if stretch < 1:
        raise ValueError(f"grading exponent must be >= 1, got {stretch}")
    if not (math.isfinite(r0) and math.isfinite(r_max)) or r_max <= r0:
        raise ValueError("need finite r0 < r_max")
    xi = np.arange(M + 1, dtype=float) / M
    nodes = r0 + (r_max - r0) * xi**stretch
    nodes[0], nodes[-1] = r0, r_max
    w = _parabola_element_weights(nodes, N)
    return RadialGrid(nodes=nodes, N=N, quad_weights=w, closure=closure, stretch=float(stretch))


def build_grid(
    params: ProblemParams,
    M: int = 2000,
    stretch: float = 2.0,
    r_max_factor: float = 40.0,
    closure: str = "robin",
) -> RadialGrid:
    """Exterior-domain grid on [1, 1 + r_max_factor * max(1, sqrt(lam))].

    The factor tracks the decay length sqrt(lam) of the far field, so the
    default 40 puts the truncation error at the e^-40 level.
    """
    if not (math.isfinite(r_max_factor) and r_max_factor > 0):
        raise ValueError(f"r_max_factor must be positive and finite, got {r_max_factor}")
    r_max = 1.0 + r_max_factor * max(1.0, math.sqrt(params.lam))
    return build_interval_grid(params.N, 1.0, r_max, M, stretch, closure)


def build_wholespace_grid(
    N: int, M: int = 2000, r_max: float = 40.0, closure: str = "robin"
) -> RadialGrid:
    """Uniform grid on [0, r_max] for whole-space profiles (no boundary layer)."""
    return build_interval_grid(N, 0.0, r_max, M, stretch=1.0, closure=closure)


def robin_beta(lam: float, N: int, r_max: float) -> float:
    """Decay-matched Robin coefficient: phi'(r_max) = -beta phi(r_max)."""
    return 1.0 / math.sqrt(lam) + (N - 1) / (2.0 * r_max)


@dataclass(frozen=True)
class TridiagonalOperator:
    """Weighted-form discretization of -lam r^(1-N)(r^(N-1) phi')' + c phi.

    Rows are assembled in weighted (residual) form: row j of the matrix acting
    on nodal values approximates w_j * (A phi)(r_j).  The matrix is symmetric
    and couples only neighbors; `lo`/`hi` delimit the active unknowns after
    the boundary rows (Dirichlet at r0 and/or r_max) are eliminated.

    diag/off cover all nodes; weights is the quadrature vector of the grid.
    """

    grid: RadialGrid
    lam: float
    potential: np.ndarray
    left_bc: str           # "dirichlet" or "regularity"
    closure: str           # "robin" or "dirichlet"
    diag: np.ndarray
    off: np.ndarray
    lo: int
    hi: int
    elem_stiff: np.ndarray = field(repr=False, default=None)   # lam * m_e / h_e^2
    robin_term: float = 0.0                                     # lam * beta * r_max^(N-1)

    @property
    def weights(self) -> np.ndarray:
        return self.grid.quad_weights

    @property
    def n_active(self) -> int:
        return self.hi - self.lo + 1

    # -- linear algebra on the active block ------------------------------
    def active_tridiag(self):
        """(d, e): diagonal and subdiagonal of the active symmetric block."""
        return self.diag[self.lo : self.hi + 1], self.off[self.lo : self.hi]

    def symmetrized_tridiag(self):
        """Similarity transform to a plain symmetric eigenproblem.

        The generalized pencil (A, W) on the active block becomes
        B = W^{-1/2} A W^{-1/2}, still tridiagonal.
        """
        d, e = self.active_tridiag()
        w = self.weights[self.lo : self.hi + 1]
        s = 1.0 / np.sqrt(w)
        return d * s * s, e * s[:-1] * s[1:]

    def apply_weighted(self, values) -> np.ndarray:
        """Weighted action on full nodal data; rows outside lo..hi are zero.

        Evaluated in flux-difference form, s_e (u_{j+1} - u_j), so the
        near-cancellation of the second difference happens between O(h)
        quantities instead of O(1) ones.  The computation preserves the
        dtype of `values`: extended-precision iterates (np.longdouble) give
        residuals below the float64 representation floor, which the strongly
        graded meshes need to honor tight residual contracts.
        """
        u = np.asarray(values)
        if u.dtype != np.longdouble:
            u = u.astype(float)
        M = self.grid.M
        s = self.elem_stiff.astype(u.dtype, copy=False)
        flux = s * (u[1:] - u[:-1])
        out = np.zeros_like(u)
        out[:M] -= flux
        out[1:] += flux
        out += self.weights.astype(u.dtype, copy=False) * self.potential.astype(u.dtype, copy=False) * u
        out[M] += u.dtype.type(self.robin_term) * u[M]
        lo, hi = self.lo, self.hi
        out[:lo] = 0.0
        out[hi + 1 :] = 0.0
        return out

    def solve_refined(
        self, rhs_weighted, left_value: float = 0.0, right_value: float = 0.0, refine: int = 2
    ) -> np.ndarray:
        """Direct solve plus mixed-precision iterative refinement.

        The banded factorization runs in float64; the defect is accumulated
        in extended precision and the iterate kept in np.longdouble, so the
        returned nodal vector solves the system to well below 1e-12.
        """
        x = self.solve(rhs_weighted, left_value, right_value).astype(np.longdouble)
        rhs = np.zeros(self.grid.M + 1, dtype=np.longdouble)
        rhs[self.lo : self.hi + 1] = np.asarray(rhs_weighted, dtype=np.longdouble)
        for _ in range(refine):
            defect = rhs - self.apply_weighted(x)
            corr = self.solve(defect[self.lo : self.hi + 1].astype(float))
            x = x + corr.astype(np.longdouble)
            x[: self.lo] = left_value
            if self.hi < self.grid.M:
                x[self.hi + 1 :] = right_value
        return x

    def solve(self, rhs_weighted, left_value: float = 0.0, right_value: float = 0.0):
        """Solve the active system; boundary values fill the eliminated rows.

        rhs_weighted is given on the active nodes (length n_active) in the
        same weighted form as apply_weighted.
        """
        d, e = self.active_tridiag()
        rhs = np.array(rhs_weighted, dtype=float)
        if self.lo > 0 and left_value != 0.0:
            rhs[0] -= self.off[self.lo - 1] * left_value
        if self.hi < self.grid.M and right_value != 0.0:
            rhs[-1] -= self.off[self.hi] * right_value
        ab = np.zeros((3, len(d)))
        ab[0, 1:] = e
        ab[1, :] = d
        ab[2, :-1] = e
        try:
            x = solve_banded((1, 1), ab, rhs)
        except np.linalg.LinAlgError as exc:  # pragma: no cover - scipy raises rarely
            raise NearSingularOperator(str(exc)) from exc
        full = np.empty(self.grid.M + 1)
        full[self.lo : self.hi + 1] = x
        if self.lo > 0:
            full[: self.lo] = left_value
        if self.hi < self.grid.M:
            full[self.hi + 1 :] = right_value
        return full

    def residual_norm(self, weighted_residual_active) -> float:
        """Weighted 2-norm of the strong-form residual: (sum R_j^2 / w_j)^(1/2)."""
        w = self.weights[self.lo : self.hi + 1]
        r = np.asarray(weighted_residual_active, dtype=float)
        return math.sqrt(float(np.sum(r * r / w)))


def assemble_divergence_form(
    grid: RadialGrid,
    diffusion: float,
    potential,
    left_bc: str | None = None,
    closure: str | None = None,
) -> TridiagonalOperator:
    """Assemble the symmetric three-point operator with lumped potential.

    The stiffness uses exact element masses m_e = int_e r^(N-1) dr, so the
    matrix is symmetric with respect to the quadrature weight by construction.
    `left_bc` defaults to Dirichlet on exterior grids (r0 > 0) and to the
    zero-flux regularity closure on whole-space grids (r0 = 0).
    """
    c = np.asarray(potential, dtype=float)
    if c.shape != grid.nodes.shape:
        raise ValueError("potential must be sampled on the grid nodes")
    if not np.all(np.isfinite(c)):
        raise ValueError("potential contains non-finite entries")
    if not (math.isfinite(diffusion) and diffusion > 0):
        raise ValueError(f"diffusion must be positive and finite, got {diffusion}")
    if left_bc is None:
        left_bc = "dirichlet" if grid.r0 > 0 else "regularity"
    if left_bc not in ("dirichlet", "regularity"):
        raise ValueError(f"unknown left_bc {left_bc!r}")
    if closure is None:
        closure = grid.closure

    M = grid.M
    s = diffusion * grid.elem_mass / grid.elem_len**2
    diag = np.zeros(M + 1)
    diag[:-1] += s
    diag[1:] += s
    diag += grid.quad_weights * c
    off = -s

    lo = 1 if left_bc == "dirichlet" else 0
    robin_term = 0.0
    if closure == "robin":
        hi = M
        beta = robin_beta(diffusion, grid.N, grid.r_max)
        robin_term = diffusion * beta * grid.r_max ** (grid.N - 1)
        diag[M] += robin_term
    else:
        hi = M - 1
    return TridiagonalOperator(
        grid=grid,
        lam=float(diffusion),
        potential=c,
        left_bc=left_bc,
        closure=closure,
        diag=diag,
        off=off,
        lo=lo,
        hi=hi,
        elem_stiff=s,
        robin_term=robin_term,
    )


def fornberg_weights(z: float, x, m: int) -> np.ndarray:
    """Finite-difference weights for derivatives 0..m at z from nodes x.

    Classic recursive algorithm; returns an array of shape (m+1, len(x)).
    """
    x = np.asarray(x, dtype=float)
    n = len(x)
    if n < m + 1:
        raise ValueError("need at least m+1 nodes")
    C = np.zeros((m + 1, n))
    C[0, 0] = 1.0
    c1 = 1.0
    c4 = x[0] - z
    for i in range(1, n):
        mn = min(i, m)
        c2 = 1.0
        c5 = c4
        c4 = x[i] - z
        for j in range(i):
            c3 = x[i] - x[j]
            c2 *= c3
            if j == i - 1:
                for k in range(mn, 0, -1):
                    C[k, i] = c1 * (k * C[k - 1, i - 1] - c5 * C[k, i - 1]) / c2
                C[0, i] = -c1 * c5 * C[0, i - 1] / c2
            for k in range(mn, 0, -1):
                C[k, j] = (c4 * C[k, j] - k * C[k - 1, j]) / c3
            C[0, j] = c4 * C[0, j] / c3
        c1 = c2
    return C


def boundary_derivative(grid: RadialGrid, values, order: int = 1, npts: int | None = None) -> float:
    """One-sided derivative at r0 from the first few nodes (order-2+ accurate)."""
    if npts is None:
        npts = order + 2
    npts = min(npts, len(grid.nodes))
    w = fornberg_weights(grid.r0, grid.nodes[:npts], order)
    return float(w[order] @ np.asarray(values[:npts], dtype=float))
