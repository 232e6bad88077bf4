"""Prompt-list emission and the file-backed text feature store.

Prompt lists are the handshake with the embedding tool: tab-separated
``key<TAB>channel<TAB>prompt`` lines, newline-delimited UTF-8. The
embedder averages all prompts of one (key, channel) pair, renormalizes,
and writes a text-feature SCLP file this store can serve back.
"""

from __future__ import annotations

import os

from .csp import PromptPairSpec
from .store import TextFeature, read_feature_file


class MissingTextError(Exception):
    """A required prompt key has no embedding on disk."""

    def __init__(self, key: str):
        super().__init__(f"missing text features for prompt key {key!r}")
        self.key = key


def write_prompt_list(path: str, specs: list[PromptPairSpec]) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for spec in specs:
            for channel, prompts in (("normal", spec.normal), ("abnormal", spec.abnormal)):
                for prompt in prompts:
                    if "\t" in spec.key or "\t" in prompt:
                        raise ValueError("tabs are not allowed in keys or prompts")
                    fh.write(f"{spec.key}\t{channel}\t{prompt}\n")


def read_prompt_list(path: str) -> list[PromptPairSpec]:
    """Re-group the flat prompt lines by key, preserving first-seen order."""
    specs: dict[str, PromptPairSpec] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3 or parts[1] not in ("normal", "abnormal"):
                raise ValueError(f"{path}:{lineno}: malformed prompt line {line!r}")
            key, channel, prompt = parts
            spec = specs.setdefault(key, PromptPairSpec(key=key, normal=[], abnormal=[]))
            getattr(spec, channel).append(prompt)
    return list(specs.values())


class FileTextStore:
    """Serves precomputed TextFeatures; ignores prompt specs entirely."""

    def __init__(self, paths: list[str]):
        self._features: dict[str, TextFeature] = {}
        for path in paths:
            obj = read_feature_file(path)
            if not isinstance(obj, list):
                raise ValueError(f"{path} does not hold text features")
            for tf in obj:
                self._features[tf.prompt_key] = tf

    def keys(self) -> list[str]:
        return sorted(self._features)

    def get(self, key: str, spec: PromptPairSpec | None = None) -> TextFeature:
        if key not in self._features:
            raise MissingTextError(key)
        return self._features[key]
