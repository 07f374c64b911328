class DelayStabError(Exception):
    pass


class SolverFailure(DelayStabError):
    """Root iteration did not converge inside its bracket."""

    def __init__(self, message, bracket=None, residual=None):
        super().__init__(message)
        self.bracket = bracket
        self.residual = residual


class IllConditionedBasisError(DelayStabError):
    pass


class BasisInconsistencyError(DelayStabError):
    pass


class RankConditionError(DelayStabError):
    """Sum of the B_k matrices is numerically singular."""

    def __init__(self, message, cond=None):
        super().__init__(message)
        self.cond = cond


class GammaTooSmallError(DelayStabError):
    pass


class BlowUpError(DelayStabError):
    def __init__(self, message, t=None, ratio=None):
        super().__init__(message)
        self.t = t
        self.ratio = ratio


class ConfigError(DelayStabError):
    pass
