"""
Word-level vocabulary with reserved special and IMG token ids.

Layout: ``<pad> <bos> <eos> <unk>``, then corpus words by descending frequency
(ties broken lexicographically), then ``[IMG_1] .. [IMG_r]`` as the final
contiguous id range.
"""
import json
import logging
import re
from collections import Counter
from pathlib import Path
from typing import Dict, Iterable, List, Sequence

from .errors import DataIOError, InputValidationError

logger = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)

_TOKEN_PATTERN = re.compile(r"[a-z0-9]+(?:'[a-z]+)?|[^\sa-z0-9]")


def tokenize(text: str) -> List[str]:
    """Lowercase, then split into words and single punctuation marks."""
    return _TOKEN_PATTERN.findall(text.lower())


def img_token(i: int) -> str:
    return f"[IMG_{i}]"


class Vocabulary:
    def __init__(self, words: Sequence[str], r: int):
        if r < 1:
            raise ValueError("r must be at least 1")
        words = [w for w in words if w not in SPECIALS]
        if len(set(words)) != len(words):
            raise ValueError("vocabulary words must be unique")
        self.r = r
        self.tokens: List[str] = list(SPECIALS) + list(words) + [img_token(i) for i in range(1, r + 1)]
        self.token_to_id: Dict[str, int] = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def bos_id(self) -> int:
        return 1

    @property
    def eos_id(self) -> int:
        return 2

    @property
    def unk_id(self) -> int:
        return 3

    @property
    def img_ids(self) -> List[int]:
        return list(range(len(self.tokens) - self.r, len(self.tokens)))

    @property
    def base_size(self) -> int:
        """Number of ids below the IMG range."""
        return len(self.tokens) - self.r

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, self.unk_id)

    def encode(self, tokens: Iterable[str]) -> List[int]:
        return [self.lookup(t) for t in tokens]

    def decode(self, ids: Iterable[int]) -> List[str]:
        return [self.tokens[i] for i in ids]

    def frame(self, text: str, max_len: int) -> List[int]:
        """
        ``[BOS] ids [EOS]`` truncated to fit ``max_len``, padded with PAD.

        Raises:
            InputValidationError: empty instruction or max_len < 3
        """
        if max_len < 3:
            raise InputValidationError("max_len must be at least 3")
        tokens = tokenize(text)
        if not tokens:
            raise InputValidationError("instruction must contain at least one token")
        body = self.encode(tokens)[: max_len - 2]
        framed = [self.bos_id] + body + [self.eos_id]
        return framed + [self.pad_id] * (max_len - len(framed))

    def to_json(self) -> Dict[str, int]:
        return dict(self.token_to_id)

    def save(self, path) -> None:
        try:
            Path(path).write_text(json.dumps({"r": self.r, "tokens": self.to_json()}, indent=2, sort_keys=True)
                                  + "\n", encoding="utf-8")
        except OSError as e:
            raise DataIOError(f"could not write vocabulary: {e}", str(path)) from e

    @classmethod
    def load(cls, path) -> "Vocabulary":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
            r = int(raw["r"])
            by_id = sorted(raw["tokens"].items(), key=lambda kv: kv[1])
        except OSError as e:
            raise DataIOError(f"could not read vocabulary: {e}", str(path)) from e
        except (ValueError, KeyError, TypeError, AttributeError) as e:
            raise DataIOError(f"invalid vocabulary file: {e}", str(path)) from e
        tokens = [t for t, _ in by_id]
        vocab = cls(tokens[len(SPECIALS): len(tokens) - r], r)
        if vocab.tokens != tokens:
            raise DataIOError("vocabulary ids are not in the expected layout", str(path))
        return vocab


def build_vocab(corpus: Sequence[str], r: int = 32) -> Vocabulary:
    """
    Build a vocabulary from instruction text.

    Raises:
        InputValidationError: for an empty corpus
    """
    if not corpus:
        raise InputValidationError("cannot build a vocabulary from an empty corpus")
    counts = Counter(t for text in corpus for t in tokenize(text))
    for special in SPECIALS:
        counts.pop(special, None)
    words = [w for w, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))]
    logger.debug(f"Vocabulary built: {len(words)} words, r={r}")
    return Vocabulary(words, r)
