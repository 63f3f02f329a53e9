"""Exception types raised across the toolkit."""


class InvalidParameter(ValueError):
    """A parameter violates its documented precondition."""


class StepSizeFault(InvalidParameter):
    """An explicit integration step is too large for the observer gain."""


class DivergentSeries(InvalidParameter):
    """The error-bound series does not converge (discrete pole outside (0, 1))."""


class InvalidModel(InvalidParameter):
    """A nominal model cannot be inverted."""


class SingularMassMatrix(ArithmeticError):
    """The inertia matrix is numerically singular."""


class InfeasibleQP(ArithmeticError):
    """The safety QP has an empty feasible set.

    ``violation`` is the amount by which the best point of the box still
    misses the halfspace constraint.
    """

    def __init__(self, violation: float, t: float | None = None):
        self.violation = float(violation)
        self.t = t
        where = "" if t is None else f" at t={t:.4f}s"
        super().__init__(f"safety QP infeasible{where} (violation {self.violation:.3e})")


class DegenerateConstraint(ArithmeticError):
    """The halfspace normal vanishes while the constraint is violated."""


class ConfigError(ValueError):
    """Scenario or run configuration is malformed."""


class InitialSetViolation(ConfigError):
    """The initial state lies outside the safe set required by the barrier."""
