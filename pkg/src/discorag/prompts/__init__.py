"""Versioned prompt templates shipped as text files with ``{{name}}`` slots."""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

_SLOT = re.compile(r"\{\{(\w+)\}\}")


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    text: str

    @property
    def version(self) -> str:
        digest = hashlib.sha256(self.text.encode("utf-8")).hexdigest()[:12]
        return f"{self.name}@{digest}"

    @property
    def slots(self) -> set[str]:
        return set(_SLOT.findall(self.text))

    def render(self, **values: str) -> str:
        missing = self.slots - values.keys()
        if missing:
            raise KeyError(f"template {self.name!r} missing values for {sorted(missing)}")
        # Single pass so substituted text is never re-expanded.
        return _SLOT.sub(lambda m: values[m.group(1)], self.text)


@lru_cache(maxsize=None)
def load(name: str) -> PromptTemplate:
    text = resources.files(__package__).joinpath("templates", f"{name}.txt").read_text("utf-8")
    return PromptTemplate(name, text.rstrip("\n"))


@lru_cache(maxsize=None)
def raw(name: str) -> str:
    return load(name).text
