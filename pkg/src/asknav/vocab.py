"""Closed vocabulary over templated dialog text.

Token sequences live as lists of token strings everywhere in memory and are
space-joined in files. The vocabulary is a pure function of the world
configuration's name pools, not of any seed, so checkpoints transfer across
worlds.
"""

from __future__ import annotations

from .errors import DataError
from .world import OBJECT_NAMES, REGION_NAMES, _object_names, _region_names

PAD = "[PAD]"
UNK = "[UNK]"
CLS = "[CLS]"
SEP = "[SEP]"
MASK = "[MASK]"
TAR = "[TAR]"
NAV = "[NAV]"
GUIDE = "[GUIDE]"

SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK, TAR, NAV, GUIDE)

# Stock words used by every text template in the package.
TEMPLATE_WORDS = (
    "a", "and", "are", "at", "behind", "down", "find", "for", "forward",
    "go", "goal", "here", "i", "in", "is", "it", "keep", "left", "looking",
    "near", "next", "of", "past", "photo", "reached", "right", "see",
    "should", "stop", "the", "then", "there", "to", "turn", "up", "walk",
    "we", "what", "where", "which", "will", "you",
)


class Vocabulary:
    """token <-> id mapping with reserved special tokens at the front."""

    def __init__(self, tokens):
        self.id_to_token = list(SPECIAL_TOKENS) + [
            t for t in tokens if t not in SPECIAL_TOKENS
        ]
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise DataError("duplicate tokens in vocabulary")
        self.pad_id = self.token_to_id[PAD]
        self.unk_id = self.token_to_id[UNK]
        self.cls_id = self.token_to_id[CLS]
        self.sep_id = self.token_to_id[SEP]
        self.mask_id = self.token_to_id[MASK]
        self.tar_id = self.token_to_id[TAR]
        self.nav_id = self.token_to_id[NAV]
        self.guide_id = self.token_to_id[GUIDE]
        self.special_ids = frozenset(range(len(SPECIAL_TOKENS)))

    def __len__(self):
        return len(self.id_to_token)

    def encode(self, tokens):
        """Map token strings to ids; unknown tokens map to UNK, never fail."""
        return [self.token_to_id.get(t, self.unk_id) for t in tokens]

    def decode(self, ids):
        return [self.id_to_token[i] for i in ids]

    def save(self, path):
        with open(path, "w") as f:
            f.write(f"# asknav-vocab v1 reserved={len(SPECIAL_TOKENS)}\n")
            for token in self.id_to_token:
                f.write(token + "\n")

    @classmethod
    def load(cls, path):
        with open(path) as f:
            header = f.readline()
            if not header.startswith("# asknav-vocab v1"):
                raise DataError(f"{path}: not a vocabulary file")
            tokens = [line.rstrip("\n") for line in f if line.strip()]
        if tokens[: len(SPECIAL_TOKENS)] != list(SPECIAL_TOKENS):
            raise DataError(f"{path}: reserved token block is corrupt")
        return cls(tokens[len(SPECIAL_TOKENS):])


def build_vocabulary(num_objects=len(OBJECT_NAMES), num_regions=len(REGION_NAMES)):
    """Vocabulary covering object names, region names, and template words.

    Region names are included from the full canonical pool (plus overflow)
    so that any world's region assignment tokenizes without UNKs.
    """
    objects = _object_names(num_objects)
    regions = REGION_NAMES + [f"room{i}" for i in range(max(0, num_regions - len(REGION_NAMES)))]
    seen = set(SPECIAL_TOKENS)
    ordered = []
    for token in list(objects) + list(regions) + list(TEMPLATE_WORDS):
        if token not in seen:
            seen.add(token)
            ordered.append(token)
    return Vocabulary(ordered)


def vocabulary_for_world(world):
    return build_vocabulary(num_objects=len(world.object_vocab))
