"""Rule-based direction/landmark phrase extraction.

Directions are matched against an ordered list of lowercase phrase patterns;
landmarks are looked up in a surface-noun dictionary and normalized to a
closed category set. Matching is longest-first, left to right, and spans of
the two roles never overlap. When a direction pattern and a landmark entry
of equal length start at the same token, the direction wins, so an
ambiguous word such as "exit" is read as an action.
"""
import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .errors import ConfigurationError

LEXICON_FORMAT = "semnav-lexicon/1"

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text):
    """Lowercase and split into word and punctuation tokens."""
    return _TOKEN_RE.findall(text.lower())


@dataclass
class LexiconConfig:
    direction_patterns: list
    landmark_dictionary: dict  # surface phrase -> category id
    category_names: list
    _dir_index: dict = field(init=False, repr=False, default=None)
    _lm_index: dict = field(init=False, repr=False, default=None)

    def __post_init__(self):
        self.validate()
        self._dir_index = {}
        for pid, pat in enumerate(self.direction_patterns):
            self._dir_index.setdefault(tuple(pat.split()), pid)
        self._lm_index = {tuple(s.split()): c for s, c in self.landmark_dictionary.items()}

    def validate(self):
        for pat in self.direction_patterns:
            if not pat.strip() or pat != pat.lower():
                raise ConfigurationError(f"direction pattern must be lowercase and non-empty: {pat!r}")
        n = len(self.category_names)
        for surface, cat in self.landmark_dictionary.items():
            if not surface.strip() or surface != surface.lower():
                raise ConfigurationError(f"landmark entry must be lowercase and non-empty: {surface!r}")
            if not (isinstance(cat, int) and 0 <= cat < n):
                raise ConfigurationError(f"landmark {surface!r} maps to invalid category {cat!r}")

    @property
    def max_direction_len(self):
        return max((len(k) for k in self._dir_index), default=0)

    @property
    def max_landmark_len(self):
        return max((len(k) for k in self._lm_index), default=0)

    def category_id(self, name):
        return self.category_names.index(name)

    def surfaces(self, category):
        """Surface forms of a category id, sorted."""
        return sorted(s for s, c in self.landmark_dictionary.items() if c == category)

    def to_json(self):
        return {
            "format": LEXICON_FORMAT,
            "category_names": list(self.category_names),
            "direction_patterns": list(self.direction_patterns),
            "landmark_dictionary": {
                s: self.category_names[c] for s, c in self.landmark_dictionary.items()
            },
        }

    @classmethod
    def from_json(cls, obj):
        if obj.get("format") != LEXICON_FORMAT:
            raise ConfigurationError(f"lexicon format must be {LEXICON_FORMAT!r}, got {obj.get('format')!r}")
        names = list(obj["category_names"])
        index = {n: i for i, n in enumerate(names)}
        dictionary = {}
        for surface, cat in obj["landmark_dictionary"].items():
            if cat not in index:
                raise ConfigurationError(f"landmark {surface!r} refers to unknown category {cat!r}")
            dictionary[surface] = index[cat]
        return cls(list(obj["direction_patterns"]), dictionary, names)


def load_lexicon(path=None):
    """Read a lexicon file; ``None`` loads the bundled default."""
    if path is None:
        text = resources.files("semnav.data").joinpath("default_lexicon.json").read_text()
    else:
        text = Path(path).read_text()
    return LexiconConfig.from_json(json.loads(text))


@dataclass(frozen=True)
class ParsedInstruction:
    tokens: tuple
    direction_spans: tuple  # (start, end, pattern id), end exclusive
    landmark_spans: tuple  # (start, end, category id)

    def to_json(self, lexicon=None):
        out = {
            "tokens": list(self.tokens),
            "directions": [list(s) for s in self.direction_spans],
            "landmarks": [list(s) for s in self.landmark_spans],
        }
        if lexicon is not None:
            out["direction_phrases"] = [" ".join(self.tokens[a:b]) for a, b, _ in self.direction_spans]
            out["landmark_categories"] = [lexicon.category_names[c] for _, _, c in self.landmark_spans]
        return out


def _longest(tokens, i, index, max_len):
    for n in range(min(max_len, len(tokens) - i), 0, -1):
        hit = index.get(tuple(tokens[i:i + n]))
        if hit is not None:
            return n, hit
    return 0, None


def parse(tokens, lexicon):
    tokens = tuple(tokens)
    dirs, lms = [], []
    i = 0
    while i < len(tokens):
        dn, pid = _longest(tokens, i, lexicon._dir_index, lexicon.max_direction_len)
        ln, cat = _longest(tokens, i, lexicon._lm_index, lexicon.max_landmark_len)
        if dn and dn >= ln:
            dirs.append((i, i + dn, pid))
            i += dn
        elif ln:
            lms.append((i, i + ln, cat))
            i += ln
        else:
            i += 1
    return ParsedInstruction(tokens, tuple(dirs), tuple(lms))


def category_token(name):
    return f"<cat:{name}>"


def extract_phrases(parsed, lexicon):
    """Return (direction tokens, landmark category tokens) in textual order."""
    directions = [t for a, b, _ in parsed.direction_spans for t in parsed.tokens[a:b]]
    landmarks = [category_token(lexicon.category_names[c]) for _, _, c in parsed.landmark_spans]
    return directions, landmarks
