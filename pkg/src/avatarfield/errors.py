class DomainError(ValueError):
    """A query point lies outside the region a field is defined on."""


class DataError(RuntimeError):
    """Dataset, pose file or checkpoint content is missing or malformed."""


class CheckpointError(DataError):
    pass


class NumericError(FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, terms: dict):
        self.step = step
        self.terms = dict(terms)
        detail = ", ".join(f"{k}={v!r}" for k, v in self.terms.items())
        super().__init__(f"non-finite loss at step {step}: {detail}")
