"""Exception hierarchy.

Everything a user can fix (bad config, missing files, stale artifacts) derives
from :class:`GereaError`; the CLI maps those to exit code 1.
"""


class GereaError(Exception):
    pass


class DatasetError(GereaError):
    pass


class ArtifactError(GereaError):
    pass


class ConcurrentWriteError(ArtifactError):
    pass


class AlignmentError(GereaError, ValueError):
    """Two per-sample collections do not cover the same sample ids."""

    def __init__(self, missing_left, missing_right, what="inputs"):
        self.missing_left = sorted(missing_left)
        self.missing_right = sorted(missing_right)
        super().__init__(
            f"misaligned {what}: only in first={self.missing_left[:20]}, "
            f"only in second={self.missing_right[:20]}"
        )


class CaptionGenerationError(GereaError):
    def __init__(self, sample_id, failures):
        self.sample_id = sample_id
        self.failures = failures
        pairs = ", ".join(f"(region={r}, template={t})" for r, t, *_ in failures)
        super().__init__(f"caption generation failed for sample {sample_id}: {pairs}")


class PassageBudgetError(GereaError, ValueError):
    pass


class NonFiniteLossError(GereaError):
    def __init__(self, sample_id, step, value):
        self.sample_id = sample_id
        self.step = step
        super().__init__(f"non-finite loss {value} at step {step} on sample {sample_id}")


class StageError(GereaError):
    pass


class ConfigError(GereaError):
    pass
