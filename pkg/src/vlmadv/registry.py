"""String-keyed factory registries for pluggable backends."""

from __future__ import annotations

from .exceptions import BackendUnavailableError


class Registry:
    def __init__(self, kind: str):
        self.kind = kind
        self._factories = {}

    def register(self, name: str):
        def deco(factory):
            if name in self._factories:
                raise ValueError(f"duplicate {self.kind} backend id: {name!r}")
            self._factories[name] = factory
            return factory

        return deco

    def create(self, name: str, /, **params):
        if name not in self._factories:
            raise BackendUnavailableError(
                f"unknown {self.kind} backend {name!r}; known: {sorted(self._factories)}"
            )
        return self._factories[name](**params)

    def ids(self):
        return sorted(self._factories)

    def __contains__(self, name: str) -> bool:
        return name in self._factories


VISUAL_BACKENDS = Registry("visual")
TEXT_BACKENDS = Registry("text")
SEGMENTATION_BACKENDS = Registry("segmentation")
INPAINTING_BACKENDS = Registry("inpainting")
SIMILARITY_BACKENDS = Registry("similarity")
ANSWER_PROVIDERS = Registry("answer-provider")
