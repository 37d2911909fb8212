"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4, VerificationError -> 5.
"""


class KtasrError(Exception):
    pass


class ConfigError(KtasrError):
    pass


class DataError(KtasrError):
    pass


class NumericError(KtasrError):
    pass


class VerificationError(KtasrError):
    pass


class CtcInfeasibleError(DataError):
    """Label sequence cannot be aligned within the available frames."""

    def __init__(self, required, available, utt_id=None):
        self.required = required
        self.available = available
        self.utt_id = utt_id
        where = f" (utterance {utt_id})" if utt_id is not None else ""
        super().__init__(
            f"CTC-infeasible label sequence{where}: needs at least "
            f"{required} frames, got {available}"
        )
