from __future__ import annotations

import abc
import logging

from models import ReferenceSet


class Retriever(abc.ABC):
    def __init__(self, *, logger: logging.Logger):
        self.logger = logger

    @abc.abstractmethod
    def retrieve(self, query: str) -> ReferenceSet:
        raise NotImplementedError
