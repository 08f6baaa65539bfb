"""Exception hierarchy shared by every solver module."""


class StripdError(Exception):
    """Base class for all errors raised by this package."""


class RejectedInputError(StripdError, ValueError):
    """An argument has the wrong shape, sign or structure."""


class ConfigurationError(StripdError):
    """A problem or run configuration is inconsistent or infeasible."""


class StepSizeError(ConfigurationError):
    """Step sizes violate the primal-dual step condition."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class DivergenceError(StripdError):
    """An iterate became non-finite."""

    def __init__(self, iteration, trial=None):
        where = f"iteration {iteration}"
        if trial is not None:
            where = f"trial {trial}, {where}"
        super().__init__(f"non-finite iterate at {where}")
        self.iteration = iteration
        self.trial = trial
