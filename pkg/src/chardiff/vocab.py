"""Character vocabulary and prompt enhancement.

A fixed 97-token vocabulary (26 uppercase, 26 lowercase, 10 digits, 32
punctuation marks, space, start flag, end flag) plus the caption suffix
that spells out every rendered word character by character:

    Rendered characters: <|startofchar|><|S|><|A|><|L|><|E|><|endofchar|>

The suffix carries an explicit alignment from each token position back to
(word index, character index) so masks and attention maps can be paired
with individual characters downstream.
"""

from __future__ import annotations

import string
from dataclasses import dataclass, field

from .errors import PromptError, QuoteParseError, VocabularyError

KIND_UPPER = "uppercase"
KIND_LOWER = "lowercase"
KIND_DIGIT = "digit"
KIND_PUNCT = "punctuation"
KIND_SPACE = "space"
KIND_START = "start_flag"
KIND_END = "end_flag"

START_GLYPH = "startofchar"
END_GLYPH = "endofchar"

# The 32 ASCII punctuation marks, the documented default (overridable).
DEFAULT_PUNCTUATION = string.punctuation
assert len(DEFAULT_PUNCTUATION) == 32

VOCAB_SIZE = 97


@dataclass(frozen=True)
class CharToken:
    glyph: str  # single character, or a flag name for the two flags
    token_id: int
    kind: str

    @property
    def marker(self) -> str:
        """The `<|...|>` marker used in enhanced captions."""
        return f"<|{self.glyph}|>"

    @property
    def is_flag(self) -> bool:
        return self.kind in (KIND_START, KIND_END)


@dataclass
class CharVocabulary:
    entries: list[CharToken]
    punctuation_set: str

    _by_glyph: dict[str, CharToken] = field(init=False, repr=False)

    def __post_init__(self):
        self._by_glyph = {}
        for tok in self.entries:
            if tok.glyph in self._by_glyph:
                raise VocabularyError(f"duplicate glyph {tok.glyph!r} in vocabulary")
            self._by_glyph[tok.glyph] = tok

    def __len__(self):
        return len(self.entries)

    def lookup(self, glyph: str) -> CharToken:
        tok = self._by_glyph.get(glyph)
        if tok is None:
            raise PromptError(f"glyph {glyph!r} is not in the vocabulary")
        return tok

    def __contains__(self, glyph: str) -> bool:
        return glyph in self._by_glyph

    def by_id(self, token_id: int) -> CharToken:
        return self.entries[token_id]

    @property
    def start(self) -> CharToken:
        return self._by_glyph[START_GLYPH]

    @property
    def end(self) -> CharToken:
        return self._by_glyph[END_GLYPH]

    def printable_glyphs(self) -> str:
        """Every single-character glyph except the flags (95 characters)."""
        return "".join(t.glyph for t in self.entries if not t.is_flag)

    # Serialization: one line per token, "token_id<TAB>kind<TAB>glyph".
    # The glyph field escapes space as \s and backslash as \\ so the table
    # survives whitespace-normalizing tooling; flags store their names.

    def to_table(self) -> str:
        lines = ["# chardiff vocabulary v1: token_id\tkind\tglyph (space=\\s, backslash=\\\\)"]
        for tok in self.entries:
            glyph = tok.glyph.replace("\\", "\\\\").replace(" ", "\\s")
            lines.append(f"{tok.token_id}\t{tok.kind}\t{glyph}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_table(cls, text: str) -> "CharVocabulary":
        entries = []
        for line in text.splitlines():
            if not line or line.startswith("#"):
                continue
            token_id, kind, glyph = line.split("\t")
            glyph = glyph.replace("\\s", " ").replace("\\\\", "\\")
            entries.append(CharToken(glyph=glyph, token_id=int(token_id), kind=kind))
        if [t.token_id for t in entries] != list(range(len(entries))):
            raise VocabularyError("vocabulary table has non-contiguous token ids")
        punct = "".join(t.glyph for t in entries if t.kind == KIND_PUNCT)
        vocab = cls(entries=entries, punctuation_set=punct)
        if len(vocab) != VOCAB_SIZE:
            raise VocabularyError(f"vocabulary table has {len(vocab)} entries, expected {VOCAB_SIZE}")
        return vocab


def build_vocabulary(punctuation_list: str = DEFAULT_PUNCTUATION) -> CharVocabulary:
    """Build the 97-token vocabulary in canonical order.

    Order: A-Z, a-z, 0-9, the 32 punctuation glyphs in the given order,
    space, start flag, end flag. The punctuation list must contain exactly
    32 distinct glyphs, disjoint from letters, digits, and space.
    """
    if len(punctuation_list) != 32:
        raise VocabularyError(f"need exactly 32 punctuation glyphs, got {len(punctuation_list)}")
    seen = set()
    reserved = set(string.ascii_letters + string.digits + " ")
    for g in punctuation_list:
        if g in seen:
            raise VocabularyError(f"duplicate punctuation glyph {g!r}")
        if g in reserved:
            raise VocabularyError(f"punctuation glyph {g!r} overlaps letters/digits/space")
        seen.add(g)

    entries = []

    def add(glyph, kind):
        entries.append(CharToken(glyph=glyph, token_id=len(entries), kind=kind))

    for g in string.ascii_uppercase:
        add(g, KIND_UPPER)
    for g in string.ascii_lowercase:
        add(g, KIND_LOWER)
    for g in string.digits:
        add(g, KIND_DIGIT)
    for g in punctuation_list:
        add(g, KIND_PUNCT)
    add(" ", KIND_SPACE)
    add(START_GLYPH, KIND_START)
    add(END_GLYPH, KIND_END)
    assert len(entries) == VOCAB_SIZE
    return CharVocabulary(entries=entries, punctuation_set=punctuation_list)


# Alignment entries: ("start", word_idx), ("char", word_idx, char_idx),
# ("end", word_idx) -- one per suffix token position.
SUFFIX_PREFIX = "Rendered characters:"


@dataclass
class EnhancedPrompt:
    base_caption: str
    render_words: list[str]
    suffix_tokens: list[int]
    alignment: list[tuple]

    def suffix_string(self, vocab: CharVocabulary) -> str:
        """Concatenated `<|...|>` markers, empty when nothing is rendered."""
        return "".join(vocab.by_id(t).marker for t in self.suffix_tokens)

    def enhanced_caption(self, vocab: CharVocabulary) -> str:
        """Caption with the character suffix appended (unchanged when empty)."""
        if not self.suffix_tokens:
            return self.base_caption
        return f"{self.base_caption} {SUFFIX_PREFIX} {self.suffix_string(vocab)}"

    def decode_words(self, vocab: CharVocabulary) -> list[str]:
        """Rebuild the render words from suffix tokens via the alignment."""
        words: dict[int, dict[int, str]] = {}
        for pos, entry in enumerate(self.alignment):
            if entry[0] == "char":
                _, wi, ci = entry
                words.setdefault(wi, {})[ci] = vocab.by_id(self.suffix_tokens[pos]).glyph
        out = []
        for wi in range(len(words)):
            chars = words[wi]
            out.append("".join(chars[ci] for ci in range(len(chars))))
        return out


def extract_render_words(caption: str) -> list[str]:
    """Whitespace-split words of every double-quoted span, in order.

    Raises QuoteParseError (with the character offset of the orphan quote)
    when the quotes are unbalanced.
    """
    words = []
    open_at = None
    start = None
    for i, ch in enumerate(caption):
        if ch != '"':
            continue
        if open_at is None:
            open_at, start = i, i + 1
        else:
            words.extend(caption[start:i].split())
            open_at = None
    if open_at is not None:
        raise QuoteParseError("unbalanced double quote", open_at)
    return words


def enhance_prompt(caption: str, render_words: list[str], vocab: CharVocabulary) -> EnhancedPrompt:
    """Append the character-token suffix for the given render words.

    Each word contributes start flag, one token per character, end flag.
    With no render words the suffix (and its literal prefix) is omitted
    entirely. Deterministic; raises PromptError on any character outside
    the vocabulary.
    """
    suffix: list[int] = []
    alignment: list[tuple] = []
    for wi, word in enumerate(render_words):
        if not word:
            raise PromptError(f"render word {wi} is empty")
        suffix.append(vocab.start.token_id)
        alignment.append(("start", wi))
        for ci, ch in enumerate(word):
            if ch == " " or ch not in vocab:
                raise PromptError(f"character {ch!r} of word {word!r} is not in the vocabulary")
            suffix.append(vocab.lookup(ch).token_id)
            alignment.append(("char", wi, ci))
        suffix.append(vocab.end.token_id)
        alignment.append(("end", wi))
    return EnhancedPrompt(
        base_caption=caption,
        render_words=list(render_words),
        suffix_tokens=suffix,
        alignment=alignment,
    )
