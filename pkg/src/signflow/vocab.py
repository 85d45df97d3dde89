"""Closed vocabularies for glosses and words, with their file formats.

Gloss files: line 0 is a comment naming the blank (id 0); the gloss on
0-based line k has id k.  Word files: one token per line with the specials
first in fixed order [pad], [start], [end], ids equal to line numbers.
"""

from __future__ import annotations

import hashlib

PAD, START, END = "[pad]", "[start]", "[end]"
WORD_SPECIALS = (PAD, START, END)
BLANK_NAME = "<blank>"


class Vocabulary:
    def __init__(self, tokens):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("vocabulary contains duplicate tokens")

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def id(self, token):
        try:
            return self.index[token]
        except KeyError:
            raise KeyError(f"token {token!r} not in vocabulary") from None

    def encode(self, tokens):
        return [self.id(t) for t in tokens]

    def decode(self, ids):
        return [self.tokens[i] for i in ids]

    def digest(self):
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()


class GlossVocabulary(Vocabulary):
    """Glosses with the reserved blank at id 0 (never in ground truth)."""

    def __init__(self, glosses):
        glosses = list(glosses)
        if BLANK_NAME in glosses:
            raise ValueError(f"{BLANK_NAME} is reserved")
        super().__init__([BLANK_NAME] + glosses)
        self.blank_id = 0

    @property
    def n_glosses(self):
        return len(self.tokens) - 1

    def encode(self, tokens):
        ids = super().encode(tokens)
        if self.blank_id in ids:
            raise ValueError("ground-truth gloss sequences may not contain the blank")
        return ids

    @classmethod
    def from_corpus(cls, gloss_sequences):
        seen = sorted({g for seq in gloss_sequences for g in seq})
        return cls(seen)

    def save(self, path):
        lines = [f"# id 0 reserved for the CTC blank ({BLANK_NAME})"]
        lines += self.tokens[1:]
        _write_lines(path, lines)

    @classmethod
    def load(cls, path):
        lines = _read_lines(path)
        if not lines or not lines[0].startswith("#"):
            raise ValueError(f"{path}: gloss vocabulary must open with the blank comment line")
        return cls(lines[1:])


class WordVocabulary(Vocabulary):
    """Words plus the specials [pad]=0, [start]=1, [end]=2."""

    def __init__(self, words):
        words = list(words)
        for s in WORD_SPECIALS:
            if s in words:
                raise ValueError(f"special token {s} may not appear in the word list")
        super().__init__(list(WORD_SPECIALS) + words)
        self.pad_id, self.start_id, self.end_id = 0, 1, 2

    @property
    def n_words(self):
        return len(self.tokens) - len(WORD_SPECIALS)

    @classmethod
    def from_corpus(cls, sentences):
        seen = sorted({w for sent in sentences for w in sent})
        return cls(seen)

    def save(self, path):
        _write_lines(path, self.tokens)

    @classmethod
    def load(cls, path):
        lines = _read_lines(path)
        if tuple(lines[:3]) != WORD_SPECIALS:
            raise ValueError(f"{path}: word vocabulary must start with {WORD_SPECIALS}")
        return cls(lines[3:])

    def arithmetic(self):
        """Human-auditable size accounting."""
        return (f"word vocabulary: {self.n_words} words + {len(WORD_SPECIALS)} specials "
                f"= {len(self)} total")


def _write_lines(path, lines):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _read_lines(path):
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh if line.rstrip("\n")]
