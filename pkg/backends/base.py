from __future__ import annotations

import abc
import logging
from dataclasses import dataclass


@dataclass(frozen=True)
class GenerationRequest:
    prompt: str
    max_tokens: int = 512
    temperature: float = 0.0
    stop_sequences: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.max_tokens < 1:
            raise ValueError(f"max_tokens must be >= 1, got {self.max_tokens}")
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")


class GenerationBackend(abc.ABC):
    def __init__(self, *, logger: logging.Logger):
        self.logger = logger

    @abc.abstractmethod
    def generate(self, request: GenerationRequest) -> str:
        raise NotImplementedError


def trim_stop(text: str, stop_sequences: tuple[str, ...]) -> str:
    """Cut `text` at the earliest stop sequence."""
    cut = len(text)
    for stop in stop_sequences:
        if not stop:
            continue
        i = text.find(stop)
        if i != -1 and i < cut:
            cut = i
    return text[:cut]
