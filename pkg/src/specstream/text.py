"""Word-level tokenization and sentence segmentation.

The engine uses a deliberately simple, hand-checkable token scheme:
whitespace-delimited words plus a small set of punctuation marks that
become standalone tokens. Real model backends bring their own tokenizer
behind the LM interface; this one exists so that every verifier and
generator behavior can be asserted against token sequences a human can
read.

Token ids are assigned in order of first appearance, so a fixed corpus
always produces the same vocabulary. Token id 0 is reserved for the
end-of-sequence marker.
"""

from __future__ import annotations

from dataclasses import dataclass

EOS_ID = 0
EOS_SURFACE = "<eos>"

# Characters that split off as standalone single-character tokens.
PUNCTUATION = {".", ",", "?", "!", ":", ";", '"'}

# Only these may terminate a sentence. Commas, colons and semicolons
# delimit sub-sentences, which are too short for a TTS system to pace well,
# so they never count.
SENTENCE_TERMINATORS = {".", "?", "!"}


class VocabularyError(ValueError):
    """A token id or surface form does not belong to the vocabulary."""


def split_words(text: str) -> list[str]:
    """Split text into word and punctuation surface forms.

    Whitespace separates words; punctuation marks from ``PUNCTUATION``
    become their own tokens. A ``.`` flanked by digits on both sides stays
    inside its word so that numbers like ``3.5`` survive as one token and
    never masquerade as sentence ends.
    """
    out: list[str] = []
    for word in text.split():
        start = 0
        for i, ch in enumerate(word):
            if ch not in PUNCTUATION:
                continue
            if ch == "." and 0 < i < len(word) - 1 and word[i - 1].isdigit() and word[i + 1].isdigit():
                continue
            if i > start:
                out.append(word[start:i])
            out.append(ch)
            start = i + 1
        if start < len(word):
            out.append(word[start:])
    return out


class Vocabulary:
    """Order-of-first-appearance id table with a reserved end token.

    While unfrozen, :meth:`tokenize` admits new surface forms and assigns
    the next free id. Freeze the table before handing it to a backend so
    that vocabulary size stays fixed for the lifetime of the run.
    """

    def __init__(self) -> None:
        self._id_of: dict[str, int] = {EOS_SURFACE: EOS_ID}
        self._surface_of: list[str] = [EOS_SURFACE]
        self._frozen = False

    def __len__(self) -> int:
        return len(self._surface_of)

    @property
    def frozen(self) -> bool:
        return self._frozen

    def freeze(self) -> "Vocabulary":
        self._frozen = True
        return self

    def add(self, surface: str) -> int:
        existing = self._id_of.get(surface)
        if existing is not None:
            return existing
        if self._frozen:
            raise VocabularyError(f"unknown surface form {surface!r} in frozen vocabulary")
        self._id_of[surface] = len(self._surface_of)
        self._surface_of.append(surface)
        return self._id_of[surface]

    def id_of(self, surface: str) -> int:
        try:
            return self._id_of[surface]
        except KeyError:
            raise VocabularyError(f"unknown surface form {surface!r}") from None

    def surface(self, token_id: int) -> str:
        if not 0 <= token_id < len(self._surface_of):
            raise VocabularyError(f"token id {token_id} outside vocabulary of size {len(self)}")
        return self._surface_of[token_id]

    def tokenize(self, text: str) -> list[int]:
        """Map text to token ids, admitting new words unless frozen."""
        return [self.add(w) if not self._frozen else self.id_of(w) for w in split_words(text)]

    def detokenize(self, tokens: list[int]) -> str:
        """Join tokens back into text.

        Words are separated by single spaces; punctuation tokens attach to
        the preceding token without a space. ``tokenize(detokenize(s)) == s``
        for any sequence produced by :meth:`tokenize`.
        """
        parts: list[str] = []
        for tok in tokens:
            surface = self.surface(tok)
            if parts and not (len(surface) == 1 and surface in PUNCTUATION):
                parts.append(" ")
            parts.append(surface)
        return "".join(parts)


def build_vocabulary(texts: list[str]) -> Vocabulary:
    """Build a frozen vocabulary covering every token of the given corpus."""
    vocab = Vocabulary()
    for text in texts:
        vocab.tokenize(text)
    return vocab.freeze()


@dataclass(frozen=True)
class SentenceSpan:
    """Half-open token range ``[start, end)`` ending in a terminator mark."""

    start: int
    end: int
    terminator: str

    def __post_init__(self) -> None:
        if not self.start < self.end:
            raise ValueError("sentence span must be nonempty")
        if self.terminator not in SENTENCE_TERMINATORS:
            raise ValueError(f"{self.terminator!r} is not a sentence terminator")


def first_sentence(tokens: list[int], vocab: Vocabulary) -> SentenceSpan | None:
    """Span from the start through the first ``.``, ``?`` or ``!`` token.

    Returns None when no terminator is present. A ``.`` embedded in a
    number token never appears as its own token, so it cannot terminate.
    """
    for i, tok in enumerate(tokens):
        if vocab.surface(tok) in SENTENCE_TERMINATORS:
            return SentenceSpan(0, i + 1, vocab.surface(tok))
    return None


def sentence_spans(tokens: list[int], vocab: Vocabulary) -> list[tuple[int, int]]:
    """Partition tokens into sentence ranges.

    Each range ends just after a terminator token; a trailing range without
    a terminator (an unfinished sentence) is included as the last element.
    """
    spans: list[tuple[int, int]] = []
    start = 0
    for i, tok in enumerate(tokens):
        if vocab.surface(tok) in SENTENCE_TERMINATORS:
            spans.append((start, i + 1))
            start = i + 1
    if start < len(tokens):
        spans.append((start, len(tokens)))
    return spans


def strip_eos(tokens: list[int]) -> list[int]:
    return [t for t in tokens if t != EOS_ID]
