from .config import RunConfig
from .providers import AnswerCache, AnswerProvider, StubProvider
from .runner import RunManifest, cmd_attack, cmd_evaluate, fetch_answers

__all__ = [
    "AnswerCache",
    "AnswerProvider",
    "RunConfig",
    "RunManifest",
    "StubProvider",
    "cmd_attack",
    "cmd_evaluate",
    "fetch_answers",
]
