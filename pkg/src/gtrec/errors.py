"""Exception hierarchy shared across the package."""

from __future__ import annotations


class GTRecError(Exception):
    """Base class for every error raised by gtrec."""

    hint: str = ""


# corpus
class ParseError(GTRecError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class EmptyDataset(GTRecError, ValueError):
    hint = "check the input path and format flag"


class EmptySplit(GTRecError, ValueError):
    hint = "lower min_history or use a larger log"


# context enrichment
class UnknownTemplate(GTRecError, KeyError):
    pass


class MalformedResponse(GTRecError, ValueError):
    pass


class SchemaError(GTRecError, ValueError):
    pass


class ProviderExhausted(GTRecError, RuntimeError):
    hint = "retry later, or run with a warm cache / replay provider"

    def __init__(self, keys):
        self.keys = list(keys)
        shown = ", ".join(str(k) for k in self.keys[:5])
        more = f" (+{len(self.keys) - 5} more)" if len(self.keys) > 5 else ""
        super().__init__(f"provider exhausted retries for {len(self.keys)} key(s): {shown}{more}")


# embeddings / numerics
class ShapeMismatch(GTRecError, ValueError):
    pass


class DimMismatch(ShapeMismatch):
    pass


class NonFinite(GTRecError, FloatingPointError):
    pass


NonFiniteValue = NonFinite


class DuplicateKey(GTRecError, ValueError):
    pass


class ZeroVector(GTRecError, ValueError):
    pass


class MissingContext(GTRecError, KeyError):
    hint = "run `enrich` (and `mock-embed`) over the same log first"

    def __init__(self, keys):
        self.keys = sorted(set(keys))
        super().__init__(f"{len(self.keys)} unresolved context key(s): {self.keys[:10]}")

    def __str__(self) -> str:
        return self.args[0]


class MissingEmbedding(GTRecError, KeyError):
    def __str__(self) -> str:
        return self.args[0] if self.args else "missing embedding"


# diagnostics / model / training
class EmptyHistory(GTRecError, ValueError):
    pass


class UnknownItem(GTRecError, KeyError):
    def __str__(self) -> str:
        return self.args[0] if self.args else "unknown item"


class SeqTooLong(GTRecError, ValueError):
    pass


class VariantMismatch(GTRecError, ValueError):
    pass


class EmptyPool(GTRecError, ValueError):
    hint = "widen window_days / pool_fraction or enable the uniform fallback"


class GradCheckFailed(GTRecError, RuntimeError):
    def __init__(self, report):
        self.report = report
        bad = [p.name for p in report.params if not p.passed]
        super().__init__(f"gradient check failed for: {', '.join(bad)}")


class UnknownCommand(GTRecError, ValueError):
    pass
