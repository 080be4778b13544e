"""Label vocabularies and record types shared across the toolkit."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

UNKNOWN_FITZPATRICK = -1

# 6-point scale collapsed into pairs, as distributed with DDI
FITZ_GROUPS = {1: "T12", 2: "T12", 3: "T34", 4: "T34", 5: "T56", 6: "T56"}


class SourceDomain(str, Enum):
    DERM = "Derm"
    ATLA = "Atla"
    DDI = "DDI"
    SYNTH = "Synth"


class DataError(ValueError):
    """Raised for malformed manifests, vocabularies and splits."""


@dataclass(frozen=True)
class ConditionLabel:
    index: int
    name: str


@dataclass(frozen=True)
class SkinType:
    index: int
    scale: str
    unknown: bool = False


@dataclass(frozen=True)
class Vocabulary:
    """Dense, sorted name <-> index mapping."""

    names: Tuple[str, ...]

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise DataError(f"duplicate vocabulary names: {self.names}")

    def __len__(self) -> int:
        return len(self.names)

    def __contains__(self, name: str) -> bool:
        return name in self.names

    def encode(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise DataError(f"label {name!r} not in vocabulary {self.names}") from None

    def decode(self, index: int) -> str:
        if not 0 <= index < len(self.names):
            raise DataError(f"label index {index} out of range [0, {len(self.names)})")
        return self.names[index]

    @classmethod
    def from_names(cls, names: Iterable[str]) -> "Vocabulary":
        return cls(tuple(sorted(set(names))))


def skin_scale_name(raw, grouped: bool = False) -> Optional[str]:
    """Map a raw Fitzpatrick field to a scale name; ``None`` for unknown.

    Accepts 1..6, -1 (unknown) and the pre-grouped DDI codes 12/34/56.
    """
    text = str(raw).strip()
    if text in ("", "-1", "nan", "None"):
        return None
    if text in ("12", "34", "56"):
        return f"T{text}"
    if text in ("T12", "T34", "T56"):
        return text
    if text.startswith("Fitz"):
        text = text[4:]
    try:
        value = int(float(text))
    except ValueError:
        raise DataError(f"unrecognised Fitzpatrick value {raw!r}") from None
    if value == UNKNOWN_FITZPATRICK:
        return None
    if value not in FITZ_GROUPS:
        raise DataError(f"Fitzpatrick value {raw!r} outside 1..6")
    return FITZ_GROUPS[value] if grouped else f"Fitz{value}"


def build_vocabularies(rows: Sequence[Mapping[str, object]], grouped: bool = False) -> Tuple[Vocabulary, Vocabulary]:
    """Condition and skin-type vocabularies from raw manifest rows.

    Rows need ``id``, ``condition`` and ``fitzpatrick`` keys. Unknown skin
    types are left out of the skin-type vocabulary.
    """
    if not rows:
        raise DataError("manifest is empty")
    seen = set()
    conditions, scales = set(), set()
    for row in rows:
        sid = str(row["id"])
        if sid in seen:
            raise DataError(f"duplicate sample id {sid!r}")
        seen.add(sid)
        conditions.add(str(row["condition"]).strip())
        scale = skin_scale_name(row["fitzpatrick"], grouped=grouped)
        if scale is not None:
            scales.add(scale)
    condition_vocab = Vocabulary.from_names(conditions)
    if len(condition_vocab) == 1:
        logger.warning("manifest has a single condition label %r", condition_vocab.names[0])
    return condition_vocab, Vocabulary.from_names(scales)


@dataclass(frozen=True)
class Sample:
    sample_id: str
    image_ref: str
    condition: int
    skin_type: int
    source_domain: str = SourceDomain.SYNTH.value


@dataclass(frozen=True)
class PredictionRecord:
    sample_id: str
    true_condition: int
    predicted_condition: int
    class_probs: Tuple[float, ...]
    skin_type: int

    def __post_init__(self):
        if abs(sum(self.class_probs) - 1.0) > 1e-6:
            raise DataError(f"class probabilities of {self.sample_id!r} do not sum to 1")
        if self.predicted_condition != int(np.argmax(self.class_probs)):
            raise DataError(f"prediction of {self.sample_id!r} is not the argmax of its probabilities")


@dataclass
class PredictionLog:
    """Per-sample predictions; every metric is computed from one of these.

    Arrays are aligned: ``true``, ``pred`` and ``skin`` are integer index
    vectors, ``probs`` is an (n, M) matrix of class probabilities.
    """

    sample_ids: List[str]
    true: np.ndarray
    pred: np.ndarray
    probs: np.ndarray
    skin: np.ndarray
    conditions: Vocabulary
    skin_types: Vocabulary

    def __post_init__(self):
        self.true = np.asarray(self.true, dtype=np.int64)
        self.pred = np.asarray(self.pred, dtype=np.int64)
        self.skin = np.asarray(self.skin, dtype=np.int64)
        n = len(self.true)
        self.probs = np.asarray(self.probs, dtype=np.float64).reshape(n, -1) if n else np.zeros((0, len(self.conditions)))
        if not (len(self.sample_ids) == n == len(self.pred) == len(self.skin)):
            raise DataError("prediction log columns have different lengths")
        M, N = len(self.conditions), len(self.skin_types)
        for name, arr, hi in (("true", self.true, M), ("pred", self.pred, M), ("skin", self.skin, N)):
            if n and (arr.min() < 0 or arr.max() >= hi):
                raise DataError(f"{name} labels outside vocabulary")
        if n and self.probs.shape[1] != M:
            raise DataError(f"probability vectors have length {self.probs.shape[1]}, expected {M}")

    def __len__(self) -> int:
        return len(self.true)

    def records(self) -> Iterable[PredictionRecord]:
        for i, sid in enumerate(self.sample_ids):
            yield PredictionRecord(sid, int(self.true[i]), int(self.pred[i]),
                                   tuple(self.probs[i].tolist()), int(self.skin[i]))

    @classmethod
    def from_records(cls, records: Sequence[PredictionRecord], conditions: Vocabulary,
                     skin_types: Vocabulary) -> "PredictionLog":
        M = len(conditions)
        return cls(
            [r.sample_id for r in records],
            np.array([r.true_condition for r in records], dtype=np.int64),
            np.array([r.predicted_condition for r in records], dtype=np.int64),
            np.array([r.class_probs for r in records], dtype=np.float64).reshape(len(records), M),
            np.array([r.skin_type for r in records], dtype=np.int64),
            conditions,
            skin_types,
        )
