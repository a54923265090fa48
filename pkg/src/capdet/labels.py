from __future__ import annotations

import enum


class Label(enum.IntEnum):
    """Binary authenticity label; FAKE is the positive class."""

    REAL = 0
    FAKE = 1

    @property
    def text(self) -> str:
        return self.name.lower()

    @classmethod
    def from_text(cls, text: str) -> "Label":
        try:
            return cls[text.upper()]
        except KeyError:
            raise ValueError(f"unknown label {text!r}") from None
