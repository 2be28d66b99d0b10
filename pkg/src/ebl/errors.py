"""Exception types shared across the solvers and the CLI."""


class EblError(Exception):
    """Base class for all package errors."""


class ConfigError(EblError):
    """Invalid run configuration (schema violation, unknown key, bad group)."""


class SolverError(EblError):
    """Base class for numerical failures."""


class ConvergenceFailure(SolverError):
    """Newton iteration stalled after all retries."""


class TrivialSolution(SolverError):
    """Newton collapsed onto the zero solution for every retried amplitude."""


class NearSingularOperator(SolverError):
    """A linear solve was requested at a near-degenerate operator."""


class BisectionBracketFailure(SolverError):
    """Sturm bisection could not bracket the requested eigenvalue."""


class NoBracket(SolverError):
    """The target function does not change sign over the supplied bracket."""


class Lambda0Collision(SolverError):
    """A Steklov bracket endpoint sits at or below the Dirichlet threshold."""


class InadmissibleMapping(SolverError):
    """The boundary perturbation makes the domain map non-orientation-preserving."""
