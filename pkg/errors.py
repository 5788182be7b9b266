from __future__ import annotations

from typing import Optional


class CovRagError(Exception):
    """Base error. `stage` is filled in by the pipeline when an error escapes a stage."""

    def __init__(self, message: str, *, stage: Optional[str] = None):
        super().__init__(message)
        self.stage = stage

    def to_json_dict(self) -> dict[str, Optional[str]]:
        return {"error": type(self).__name__, "message": str(self), "stage": self.stage}


class EmptyReferences(CovRagError):
    pass


class EmptyAnswer(CovRagError):
    pass


class MissingBinding(CovRagError):
    def __init__(self, name: str, *, template: str = ""):
        where = f" in template {template!r}" if template else ""
        super().__init__(f"missing binding {name!r}{where}")
        self.name = name


class TransportError(CovRagError):
    """Network failure or timeout. The only error class that is retried."""


class InvalidUrl(CovRagError):
    """A URL requests refuses to send. Never retried."""


class NetworkDisabledError(CovRagError):
    pass


class HttpStatusError(CovRagError):
    def __init__(self, message: str, *, status: int, body: str = ""):
        super().__init__(message)
        self.status = status
        self.body = body


class BackendRefusal(CovRagError):
    def __init__(self, message: str, *, status: Optional[int] = None, body: str = ""):
        super().__init__(message)
        self.status = status
        self.body = body


class ScriptMiss(CovRagError):
    def __init__(self, prompt: str):
        self.prompt_head = prompt[:80]
        super().__init__(f"no script entry matches prompt: {self.prompt_head!r}")


class ScriptParseError(CovRagError):
    def __init__(self, message: str, *, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class SearchUnavailable(CovRagError):
    pass


class QuotaExceeded(SearchUnavailable):
    pass


class EmptyCorpus(CovRagError):
    pass


class UnparsableReport(CovRagError):
    def __init__(self, message: str, *, raw: str = ""):
        super().__init__(message)
        self.raw = raw


class DatasetTooSmall(CovRagError):
    pass


class CannotSwap(CovRagError):
    pass


class NoGolds(CovRagError):
    pass


class NoSamples(CovRagError):
    pass
