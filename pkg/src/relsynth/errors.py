"""Exception hierarchy shared by all relsynth modules."""


class RelsynthError(Exception):
    """Base class for all library errors."""


class SchemaError(RelsynthError):
    """Malformed schema file, or an illegal foreign-key structure."""


class IntegrityError(RelsynthError):
    """Data violates the schema: dangling reference, out-of-range code, ..."""


class CapExceeded(RelsynthError):
    """A group is larger than the declared maximum group size."""


class IncompleteRow(RelsynthError):
    """A non-NULL slot of a flattened row still has unsampled attributes."""


class DomainError(RelsynthError):
    """An attribute set uses more individual slots than the order or group size allows."""


class SubsetError(RelsynthError):
    """Roll-up target is not a subset of the marginal's attributes."""


class MissingNPM(RelsynthError):
    """No stored marginal can serve the requested attribute set."""


class NumericError(RelsynthError):
    """A numerical routine failed to bracket or converge."""


class BudgetOverdraw(RelsynthError):
    """A charge would push the cumulative privacy cost above the budget."""


class ConfigError(RelsynthError):
    """Invalid or incomplete run configuration."""


class WidthExceeded(RelsynthError):
    """Junction tree would exceed the configured cell cap."""


class EmptyCandidates(RelsynthError):
    """No candidate attribute set is available for selection."""


class EmptyPool(RelsynthError):
    """Pool restriction left zero probability mass."""


class DegenerateVariance(RelsynthError):
    """Pearson correlation is undefined for a constant column."""


class NonConvergence(UserWarning):
    """Estimation stopped before reaching its tolerance; the model is still usable."""


class InfeasibleHistogram(UserWarning):
    """A group-size histogram does not match the number of referencing tuples."""
