"""Text handling: tokenisation, stopwords and a toy token encoder.

Tokenisation: lowercase, replace every ``string.punctuation`` character with a
space, split on whitespace. No stemming.

The stopword list is the classic 127-word English list (the original NLTK
``stopwords.words('english')``).
"""
from __future__ import annotations

import math
import string
import zlib
from dataclasses import dataclass, field

import numpy as np

from .numerics import make_rng

STOPWORDS = frozenset("""
i me my myself we our ours ourselves you your yours yourself yourselves he him
his himself she her hers herself it its itself they them their theirs
themselves what which who whom this that these those am is are was were be
been being have has had having do does did doing a an the and but if or
because as until while of at by for with about against between into through
during before after above below to from up down in out on off over under again
further then once here there when where why how all any both each few more most
other some such no nor not only own same so than too very s t can will just don
should now
""".split())

_PUNCT = str.maketrans({c: " " for c in string.punctuation})


def tokenize(text: str) -> list[str]:
    return text.lower().translate(_PUNCT).split()


@dataclass
class TextDoc:
    id: str | int
    text: str
    remove_stopwords: bool = True
    tokens: list[str] = field(init=False)

    def __post_init__(self):
        toks = tokenize(self.text)
        if self.remove_stopwords:
            toks = [t for t in toks if t not in STOPWORDS]
        self.tokens = toks


@dataclass
class ToyTextEncoder:
    """Maps each token to a fixed pseudo-random vector keyed by (seed, crc32(token))."""

    seed: int = 0
    d_model: int = 64
    name: str = "toy-text"
    deterministic: bool = True

    def token_vector(self, token: str) -> np.ndarray:
        rng = make_rng(self.seed, 0x7E47, zlib.crc32(token.encode("utf-8")))
        return rng.standard_normal(self.d_model) / math.sqrt(self.d_model) * 4.0

    def encode(self, text: str) -> np.ndarray:
        """n_tokens x d_model; an empty text encodes as a single placeholder token."""
        toks = tokenize(text) or ["<empty>"]
        return np.stack([self.token_vector(t) for t in toks])
