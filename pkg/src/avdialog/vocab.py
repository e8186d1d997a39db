"""Token vocabulary with reserved control tokens."""

from __future__ import annotations

import re
from collections import Counter
from typing import Iterable

PAD = "<pad>"
SOS = "<sos>"
EOS = "<eos>"
UNK = "<unk>"
RESERVED = (PAD, SOS, EOS, UNK)

_TOKEN_RE = re.compile(r"[a-z0-9']+|[^\sa-z0-9']")


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, and split punctuation into its own tokens."""
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    """Bijective token<->id map with fixed ids for the four reserved tokens.

    Ids are contiguous from 0.  <pad>=0, <sos>=1, <eos>=2, <unk>=3; all other
    tokens follow in frequency-descending, then lexicographic, order so that a
    rebuild over the same corpus yields the identical mapping.
    """

    def __init__(self, tokens: Iterable[str] = ()):
        self._token_to_id: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for tok in tokens:
            if tok not in self._token_to_id:
                self._token_to_id[tok] = len(self._token_to_id)
        self._id_to_token = {i: t for t, i in self._token_to_id.items()}

    def __len__(self) -> int:
        return len(self._token_to_id)

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def sos_id(self) -> int:
        return 1

    @property
    def eos_id(self) -> int:
        return 2

    @property
    def unk_id(self) -> int:
        return 3

    def id_of(self, token: str) -> int:
        return self._token_to_id.get(token, self.unk_id)

    def token_of(self, idx: int) -> str:
        return self._id_to_token[idx]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.id_of(t) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self._id_to_token[i] for i in ids]

    def tokens(self) -> list[str]:
        """All tokens in id order."""
        return [self._id_to_token[i] for i in range(len(self))]

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self._token_to_id == other._token_to_id


def build_vocabulary(token_streams: Iterable[Iterable[str]], min_count: int = 1) -> Vocabulary:
    """Build a vocabulary from token sequences, keeping tokens seen >= min_count times."""
    counts: Counter[str] = Counter()
    for stream in token_streams:
        counts.update(stream)
    for tok in RESERVED:
        counts.pop(tok, None)
    kept = [t for t, c in counts.items() if c >= min_count]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(kept)
