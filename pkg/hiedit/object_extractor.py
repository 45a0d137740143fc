"""
Rule-based extraction of the object a hypothetical instruction refers to.
"""
import re
from typing import Dict, List, Protocol, Set

from .vocabulary import Vocabulary, tokenize


class ObjectExtractor(Protocol):
    def extract_object_words(self, instruction: str) -> List[str]:
        ...

    def extract_object_ids(self, instruction: str, vocab: Vocabulary) -> List[int]:
        ...


class StoplistObjectExtractor:
    """
    Strips the hypothetical frame from an instruction and keeps the tokens that are
    neither stop words nor verbs/auxiliaries; what remains are taken as object nouns.
    """

    name = "stoplist"

    def __init__(self):
        """Initialize the frame patterns and the closed word lists."""
        self._frame_patterns = self._initialize_frame_patterns()
        self._stop_words = self._initialize_stop_words()
        self._verbs = self._initialize_verbs()

    def _initialize_frame_patterns(self) -> List[re.Pattern]:
        """Leading hypothetical frames, tried in order; the first match is removed."""
        return [
            re.compile(r"^what would happen (?:if|to|when|after)\b"),
            re.compile(r"^what would\b"),
            re.compile(r"^what if\b"),
            re.compile(r"^what happens (?:if|to|when)\b"),
            re.compile(r"^imagine (?:if|that)?\b"),
            re.compile(r"^how would\b"),
            re.compile(r"^suppose (?:that)?\b"),
        ]

    def _initialize_stop_words(self) -> Set[str]:
        """Determiners, pronouns, prepositions, time words and frame leftovers."""
        return {
            # Articles and determiners
            'a', 'an', 'the', 'this', 'that', 'these', 'those', 'some', 'any', 'each', 'every',
            'many', 'much', 'more', 'most', 'several', 'all', 'its', 'their', 'his', 'her',
            # Pronouns
            'it', 'they', 'them', 'he', 'she', 'we', 'you', 'i', 'someone', 'something',
            # Prepositions and conjunctions
            'if', 'to', 'of', 'in', 'on', 'at', 'by', 'for', 'with', 'from', 'into', 'onto',
            'after', 'before', 'when', 'while', 'then', 'and', 'or', 'but', 'over', 'under',
            'like', 'as', 'up', 'down', 'out', 'off', 'next', 'again',
            # Question words
            'what', 'how', 'why', 'where', 'which', 'who',
            # Time and narrative words
            'year', 'years', 'day', 'days', 'time', 'times', 'long', 'while', 'later', 'scene',
            'moment', 'growth', 'ages', 'decades', 'decade', 'hour', 'hours', 'week', 'weeks',
        }

    def _initialize_verbs(self) -> Set[str]:
        """Auxiliaries and the state-change verbs instructions use."""
        return {
            # Auxiliaries and modals
            'would', 'will', 'could', 'should', 'might', 'may', 'can', 'do', 'does', 'did',
            'is', 'are', 'was', 'were', 'be', 'been', 'being', 'has', 'have', 'had',
            # Frame verbs
            'happen', 'happens', 'happened', 'look', 'looks', 'looked', 'become', 'became',
            'tried', 'try', 'left', 'leave', 'kept', 'keep', 'continue', 'continued', 'imagine',
            # State-change verbs
            'melt', 'melted', 'melts', 'melting', 'tilt', 'tilted', 'tilts', 'shatter', 'shattered',
            'shatters', 'break', 'broke', 'broken', 'age', 'aged', 'ages', 'aging', 'grow', 'grew',
            'grown', 'grows', 'knock', 'knocked', 'knocks', 'fall', 'fell', 'fallen', 'burn',
            'burned', 'burnt', 'burns', 'freeze', 'froze', 'frozen', 'heat', 'heated', 'rot',
            'rotted', 'crack', 'cracked', 'explode', 'exploded', 'move', 'moved',
        }

    def strip_frame(self, instruction: str) -> str:
        text = instruction.lower().strip()
        for pattern in self._frame_patterns:
            stripped, hits = pattern.subn("", text, count=1)
            if hits:
                return stripped.strip()
        return text

    def extract_object_words(self, instruction: str) -> List[str]:
        """
        Args:
            instruction: hypothetical instruction text

        Returns:
            Candidate object words in order of appearance, without repeats; may be empty
        """
        words = []
        for token in tokenize(self.strip_frame(instruction)):
            if not re.fullmatch(r"[a-z][a-z0-9']*", token):
                continue
            if token in self._stop_words or token in self._verbs or token in words:
                continue
            words.append(token)
        return words

    def extract_object_ids(self, instruction: str, vocab: Vocabulary) -> List[int]:
        """Vocabulary ids of the object words; a single UNK id when nothing is found."""
        ids = vocab.encode(self.extract_object_words(instruction))
        return ids or [vocab.unk_id]


EXTRACTORS: Dict[str, type] = {StoplistObjectExtractor.name: StoplistObjectExtractor}


def build_object_extractor(name: str) -> ObjectExtractor:
    try:
        return EXTRACTORS[name]()
    except KeyError:
        raise ValueError(f"unknown object extractor {name!r}; available: {sorted(EXTRACTORS)}") from None
