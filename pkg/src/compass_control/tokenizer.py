"""Word-level tokenizer for the built-in backbone.

One word is one token; multi-word object names ("teddy bear") therefore
occupy multi-token spans. Six compass placeholder ids are reserved up
front, one per controllable object slot, so compass embeddings can be
substituted without retraining the vocabulary. A small pool of free ids
is kept for subject tokens added by personalization.
"""

from __future__ import annotations

import re

from .errors import ConfigError, PromptError

PAD = "<pad>"
BOS = "<bos>"
EOS = "<eos>"
UNK = "<unk>"
MAX_OBJECTS = 6
COMPASS_PLACEHOLDERS = tuple(f"<c{i}>" for i in range(MAX_OBJECTS))
RESERVED = (PAD, BOS, EOS, UNK) + COMPASS_PLACEHOLDERS

_WORD_RE = re.compile(r"[^\s]+")


def split_words(text: str) -> list[str]:
    return [w.lower().strip(".,;:!?'\"") for w in _WORD_RE.findall(text)]


class Tokenizer:
    def __init__(self, words: list[str], context_length: int = 32, extra_slots: int = 16):
        if context_length < 4:
            raise ConfigError(f"context length too small: {context_length}")
        self.context_length = context_length
        self.extra_slots = extra_slots
        vocab: dict[str, int] = {}
        for w in RESERVED:
            vocab[w] = len(vocab)
        for w in words:
            w = w.lower()
            if w and w not in vocab:
                vocab[w] = len(vocab)
        self.vocab = vocab
        self.capacity = len(vocab) + extra_slots
        self._id_to_word = {i: w for w, i in vocab.items()}

    @classmethod
    def from_corpus(cls, texts: list[str], context_length: int = 32,
                    extra_slots: int = 16) -> "Tokenizer":
        words: list[str] = []
        for t in texts:
            words.extend(split_words(t))
        return cls(sorted(set(words)), context_length, extra_slots)

    @property
    def pad_id(self) -> int:
        return self.vocab[PAD]

    @property
    def bos_id(self) -> int:
        return self.vocab[BOS]

    @property
    def eos_id(self) -> int:
        return self.vocab[EOS]

    @property
    def unk_id(self) -> int:
        return self.vocab[UNK]

    def compass_id(self, slot: int) -> int:
        return self.vocab[COMPASS_PLACEHOLDERS[slot]]

    def add_word(self, word: str) -> int:
        """Register a new token (personalization subjects), using reserved
        embedding capacity."""
        word = word.lower()
        if word in self.vocab:
            raise ConfigError(f"token {word!r} already present in the vocabulary")
        if len(self.vocab) >= self.capacity:
            raise ConfigError("tokenizer capacity exhausted; increase extra_slots")
        idx = len(self.vocab)
        self.vocab[word] = idx
        self._id_to_word[idx] = word
        return idx

    def word_id(self, word: str) -> int:
        return self.vocab.get(word.lower(), self.unk_id)

    def words_known(self, words: list[str]) -> bool:
        return all(w.lower() in self.vocab for w in words)

    def encode_words(self, words: list[str]) -> list[int]:
        """[BOS] + words + [EOS], padded to the fixed context length."""
        ids = [self.bos_id] + [self.word_id(w) for w in words] + [self.eos_id]
        if len(ids) > self.context_length:
            raise PromptError(
                f"prompt of {len(words)} words exceeds context length "
                f"{self.context_length}"
            )
        ids.extend([self.pad_id] * (self.context_length - len(ids)))
        return ids

    def encode(self, text: str) -> list[int]:
        return self.encode_words(split_words(text))

    def decode(self, ids: list[int]) -> list[str]:
        return [self._id_to_word.get(i, UNK) for i in ids]

    def to_json(self) -> dict:
        inv = sorted(self.vocab.items(), key=lambda kv: kv[1])
        return {
            "words": [w for w, _ in inv],
            "context_length": self.context_length,
            "extra_slots": self.extra_slots,
        }

    @classmethod
    def from_json(cls, data: dict) -> "Tokenizer":
        tok = cls.__new__(cls)
        tok.context_length = int(data["context_length"])
        tok.extra_slots = int(data["extra_slots"])
        tok.vocab = {w: i for i, w in enumerate(data["words"])}
        tok.capacity = len(tok.vocab) + tok.extra_slots
        tok._id_to_word = {i: w for w, i in tok.vocab.items()}
        return tok
