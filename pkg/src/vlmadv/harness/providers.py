"""Answer providers and the append-only answer cache.

A provider answers one query about one image. The deterministic stub
answers from a fixed vocabulary keyed by (provider name, image content,
query), giving repeatable end-to-end runs with zero external calls. Real
VLM services plug in behind the same interface; decoding settings travel
with each cache entry so sampled vs greedy answers stay distinguishable.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from pathlib import Path

from ..exceptions import BackendUnavailableError
from ..registry import ANSWER_PROVIDERS
from ..storage import content_hash


def credential_from_env(var_name: str) -> str:
    """Resolve a provider credential by environment variable name.

    Run configs reference credentials only through this indirection (e.g.
    ``{"api_key_env": "MY_SERVICE_KEY"}``); literal secrets never appear in
    config files or run manifests.
    """
    value = os.environ.get(var_name)
    if not value:
        raise BackendUnavailableError(f"credential env var {var_name!r} is not set")
    return value


class AnswerProvider:
    name = "abstract"
    decoding = "deterministic"

    def answer(self, image, query_text: str) -> str:
        raise NotImplementedError


_ADJECTIVES = ("red", "small", "wooden", "shiny", "round", "old", "bright", "dark")
_NOUNS = ("ball", "sign", "table", "tree", "book", "cup", "box", "lamp",
          "chair", "stone", "bottle", "wheel", "hat", "fruit", "tool", "toy")
_PLACES = ("left side", "right side", "center", "background", "foreground",
           "corner", "top", "bottom")


@ANSWER_PROVIDERS.register("stub")
class StubProvider(AnswerProvider):
    """Template answers derived by hashing (name, salt, image bytes, query)."""

    def __init__(self, name="stub", salt=0):
        self.name = str(name)
        self.salt = int(salt)

    def answer(self, image, query_text: str) -> str:
        key = f"{self.name}:{self.salt}:{content_hash(image)}:{query_text}"
        digest = hashlib.blake2b(key.encode(), digest_size=8).digest()
        idx = int.from_bytes(digest, "little")
        adj = _ADJECTIVES[idx % len(_ADJECTIVES)]
        noun = _NOUNS[(idx >> 8) % len(_NOUNS)]
        place = _PLACES[(idx >> 16) % len(_PLACES)]
        noun2 = _NOUNS[(idx >> 24) % len(_NOUNS)]
        return f"there is a {adj} {noun} in the {place} next to a {noun2}"


class AnswerCache:
    """Line-delimited JSON cache keyed by (provider, image hash, query_id).

    Entries are immutable once written; re-running a fetch only appends
    missing keys.
    """

    def __init__(self, path):
        self.path = Path(path)
        self._entries = {}
        self.hits = 0
        self.misses = 0
        if self.path.exists():
            for line in self.path.read_text().splitlines():
                if not line.strip():
                    continue
                rec = json.loads(line)
                self._entries[(rec["provider"], rec["image_hash"], rec["query_id"])] = rec

    def get(self, provider: str, image_hash: str, query_id: str):
        rec = self._entries.get((provider, image_hash, query_id))
        if rec is not None:
            self.hits += 1
            return rec["answer"]
        self.misses += 1
        return None

    def put(self, provider: str, image_hash: str, query_id: str, answer: str,
            decoding: str = "deterministic") -> None:
        key = (provider, image_hash, query_id)
        if key in self._entries:
            return  # append-only: never mutate an existing entry
        rec = {
            "provider": provider,
            "image_hash": image_hash,
            "query_id": query_id,
            "answer": answer,
            "decoding": decoding,
            "retrieved_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        }
        self._entries[key] = rec
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("a") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def ask_with_retries(provider: AnswerProvider, image, query_text: str,
                     retries: int = 2):
    """Return the provider's answer or None after exhausting retries;
    failures never fabricate an answer."""
    last = None
    for _ in range(retries + 1):
        try:
            return provider.answer(image, query_text)
        except Exception as exc:  # provider adapters may raise anything
            last = exc
    return None
