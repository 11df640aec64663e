"""Caption tokenisation shared by the vocabulary, captioner and metrics."""

import re

_TOKEN = re.compile(r"[^\W_]+", re.UNICODE)


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace and punctuation."""
    return _TOKEN.findall(text.lower())
