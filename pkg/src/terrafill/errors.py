"""Exception hierarchy shared by all terrafill modules."""


class TerrafillError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(TerrafillError):
    """A file did not match its declared format.

    Carries enough context (path, line or byte offset) to locate the
    offending record.
    """

    def __init__(self, message, path=None, line=None, offset=None):
        detail = message
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"byte {offset}")
        if where:
            detail = f"{message} ({', '.join(where)})"
        super().__init__(detail)
        self.path = path
        self.line = line
        self.offset = offset


class InvalidParameter(TerrafillError):
    """An argument is outside its documented range."""


class EmptyCloud(TerrafillError):
    """An operation that needs points received an empty cloud."""


class DegenerateFootprint(TerrafillError):
    """The cloud footprint has zero extent along a parameter axis."""


class SingularSystem(TerrafillError):
    """The least-squares system has no unique solution."""


class EmptyProjection(TerrafillError):
    """Every projection was rejected by the validity test."""


class NoValidSourcePatch(TerrafillError):
    """The known region contains no fully-known patch to copy from."""


class UncoveredHoleCell(TerrafillError):
    """A hole cell received no votes during gradient aggregation."""


class SolverDivergence(TerrafillError):
    """The sparse solve did not reach the requested residual."""


class DegenerateTangent(TerrafillError):
    """Surface tangents are parallel; the normal is undefined."""


class HoleCoverageFailure(TerrafillError):
    """Rejection sampling hit its draw cap before filling the hole."""


class StageFailure(TerrafillError):
    """A pipeline stage failed; names the stage and keeps the cause chained."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
