"""Answer normalization shared by voting and accuracy scoring.

One frozen rule everywhere: case-fold, trim, collapse internal
whitespace, strip terminal punctuation. Multiple-choice answers reduce to
the option letter when a "(X)" marker is present.
"""

from __future__ import annotations

import re

__all__ = ["normalize_answer", "extract_option_letter", "normalize_for_task"]

_TERMINAL_PUNCT = ".,;:!?"
_OPTION_RE = re.compile(r"\(([A-Za-z])\)")


def normalize_answer(text: str) -> str:
    """Canonical comparison form of a free-text answer."""
    out = " ".join(str(text).split()).casefold()
    return out.rstrip(_TERMINAL_PUNCT).rstrip()


def extract_option_letter(text: str) -> str | None:
    """Lower-cased letter X from the first "(X)" marker, if any."""
    m = _OPTION_RE.search(str(text))
    return m.group(1).casefold() if m else None


def normalize_for_task(text: str, kind: str) -> str:
    """Task-aware normalization: multiple choice compares option letters.

    A bare single-letter answer (e.g. gold "B") already is the option
    letter, so it passes through the base normalization unchanged.
    """
    if kind == "multiple_choice":
        letter = extract_option_letter(text)
        if letter is not None:
            return letter
    return normalize_answer(text)
