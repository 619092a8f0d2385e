"""Unified vocabulary: specials + closed word lexicon + byte fallback + audio tokens.

Text ids occupy [0, text_size); audio ids follow, one block of K ids per
quantizer stage. The text head scores text ids only; each audio head scores
its stage's K codes, so audio ids exist purely for the embedding table.

Tokenization is word-level over the lexicon. Unknown words fall back to
their UTF-8 bytes (one token per byte). Newlines are their own token.
"""

from dataclasses import dataclass, field

from . import lexicon
from .errors import InputError

SPECIAL_NAMES = [
    "<pad>", "<bos>", "<eos>", "<boa>", "<eoa>", "<null>",
    "<user>", "<assistant>", "<plan>", "</plan>", "<critique>", "</critique>",
]

NEWLINE_WORD = "<nl>"


@dataclass
class UnifiedVocab:
    n_q: int
    codebook_size: int
    words: list = field(default_factory=list)
    word_to_id: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.words:
            byte_words = [f"<0x{b:02x}>" for b in range(256)]
            self.words = SPECIAL_NAMES + [NEWLINE_WORD] + lexicon.collect_words() + byte_words
        self.word_to_id = {w: i for i, w in enumerate(self.words)}
        if len(self.word_to_id) != len(self.words):
            raise InputError("duplicate words in vocabulary")
        self.text_size = len(self.words)
        self.audio_base = self.text_size
        # special ids as attributes: PAD, BOS, EOS, BOA, EOA, NULL, USER,
        # ASSISTANT, PLAN_OPEN, PLAN_CLOSE, CRITIQUE_OPEN, CRITIQUE_CLOSE
        self.PAD = self.word_to_id["<pad>"]
        self.BOS = self.word_to_id["<bos>"]
        self.EOS = self.word_to_id["<eos>"]
        self.BOA = self.word_to_id["<boa>"]
        self.EOA = self.word_to_id["<eoa>"]
        self.NULL = self.word_to_id["<null>"]
        self.USER = self.word_to_id["<user>"]
        self.ASSISTANT = self.word_to_id["<assistant>"]
        self.PLAN_OPEN = self.word_to_id["<plan>"]
        self.PLAN_CLOSE = self.word_to_id["</plan>"]
        self.CRITIQUE_OPEN = self.word_to_id["<critique>"]
        self.CRITIQUE_CLOSE = self.word_to_id["</critique>"]
        self._byte_base = self.word_to_id.get("<0x00>", -1)

    @property
    def size(self):
        return self.text_size + self.n_q * self.codebook_size

    def audio_id(self, stage, code):
        """Embedding row of code ``code`` at 0-based stage ``stage``."""
        if not (0 <= stage < self.n_q and 0 <= code < self.codebook_size):
            raise InputError(f"audio token ({stage}, {code}) out of range")
        return self.audio_base + stage * self.codebook_size + code

    def is_byte(self, token_id):
        return self._byte_base >= 0 and self._byte_base <= token_id < self._byte_base + 256

    def encode_word(self, word):
        hit = self.word_to_id.get(word)
        if hit is not None:
            return [hit]
        if self._byte_base < 0:
            raise InputError(f"word {word!r} not in vocabulary (no byte fallback)")
        return [self._byte_base + b for b in word.encode("utf-8")]

    def encode_text(self, text):
        """Token ids for a newline-preserving, space-separated text."""
        ids = []
        for part in text.replace("\n", f" {NEWLINE_WORD} ").split():
            ids.extend(self.encode_word(part))
        return ids

    def decode_text(self, ids):
        """Inverse of encode_text on canonical text (single spaces)."""
        pieces = []
        byte_run = bytearray()
        for i in ids:
            if self.is_byte(i):
                byte_run.append(i - self._byte_base)
                continue
            if byte_run:
                pieces.append(byte_run.decode("utf-8", errors="replace"))
                byte_run = bytearray()
            if 0 <= i < self.text_size:
                pieces.append(self.words[i])
            else:
                raise InputError(f"token id {i} is not a text token")
        if byte_run:
            pieces.append(byte_run.decode("utf-8", errors="replace"))
        out = []
        for p in pieces:
            if p == NEWLINE_WORD:
                out.append("\n")
            else:
                if out and out[-1] != "\n":
                    out.append(" ")
                out.append(p)
        return "".join(out)


_DEFAULT = None


def default_vocab(n_q=8, codebook_size=64):
    """Process-wide vocabulary for the default quantizer geometry."""
    global _DEFAULT
    if _DEFAULT is None or (_DEFAULT.n_q, _DEFAULT.codebook_size) != (n_q, codebook_size):
        _DEFAULT = UnifiedVocab(n_q=n_q, codebook_size=codebook_size)
    return _DEFAULT
