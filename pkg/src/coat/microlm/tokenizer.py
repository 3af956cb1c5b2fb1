"""Whitespace tokenizer with dense ids and reserved specials."""

from __future__ import annotations

from dataclasses import dataclass

from ..errors import ConfigInvalid

PAD, UNK, SEP, EOS = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<unk>", "<sep>", "<eos>")


@dataclass
class Tokenizer:
    id_to_token: list[str]

    def __post_init__(self) -> None:
        if tuple(self.id_to_token[:4]) != SPECIAL_TOKENS:
            raise ConfigInvalid("tokenizer specials must occupy ids 0..3")
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ConfigInvalid("duplicate tokens in vocabulary")

    @property
    def vocab_size(self) -> int:
        return len(self.id_to_token)

    def encode(self, text: str) -> list[int]:
        return [self.token_to_id.get(tok, UNK) for tok in text.split()]

    def decode(self, ids: list[int], *, skip_specials: bool = True) -> str:
        tokens = []
        for i in ids:
            if skip_specials and i < len(SPECIAL_TOKENS):
                continue
            tokens.append(self.id_to_token[i])
        return " ".join(tokens)

    def to_json(self) -> dict:
        return {"tokens": self.id_to_token}

    @classmethod
    def from_json(cls, obj: dict) -> "Tokenizer":
        return cls(list(obj["tokens"]))


def build_tokenizer(corpus: list[str]) -> Tokenizer:
    """Vocabulary = specials + sorted unique whitespace tokens of the corpus."""
    if not corpus:
        raise ConfigInvalid("cannot build a tokenizer from an empty corpus")
    seen: set[str] = set()
    for text in corpus:
        seen.update(text.split())
    seen.difference_update(SPECIAL_TOKENS)
    return Tokenizer(list(SPECIAL_TOKENS) + sorted(seen))
