"""Training-data curation: rejection sampling of teacher trajectories, hard-negative
mining from reranker score bands, uncertainty-based curriculum selection, and
positive/negative mix accounting.
"""

from __future__ import annotations

import logging
import math
import statistics
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Hashable, Iterable, Mapping, Protocol, Sequence

import httpx

from .errors import UnscriptedInput, VerifierUnavailable, WrongRolloutCount
from .geometry import NormBox
from .metrics import DEFAULT_THRESHOLDS, MatchThresholds, TrajectoryScore, box_set_recall

logger = logging.getLogger(__name__)

NEGATIVE_BAND = (0.05, 0.30)
ROLLOUTS_PER_SAMPLE = 8


@dataclass
class TrajectoryCandidate:
    id: Any
    trajectory: list
    pred_boxes: list[NormBox]
    gt_boxes: list[NormBox]
    recall_min: float = field(init=False)
    recall_em: float = field(init=False)
    score: TrajectoryScore = field(init=False)
    thresholds: MatchThresholds = DEFAULT_THRESHOLDS

    def __post_init__(self) -> None:
        self.recall_min = box_set_recall(self.gt_boxes, self.pred_boxes, "min", self.thresholds)
        self.recall_em = box_set_recall(self.gt_boxes, self.pred_boxes, "em", self.thresholds)
        self.score = TrajectoryScore.from_recalls(self.recall_min, self.recall_em)


def filter_trajectories(
    candidates: Iterable[TrajectoryCandidate],
    keep: int,
    min_recall: float = 0.8,
) -> list[TrajectoryCandidate]:
    """Drop candidates below ``min_recall`` on Recall_min, then keep the best ``keep`` by summed recall.

    Ties on the summed score are broken by candidate id.
    """
    survivors = [c for c in candidates if c.recall_min >= min_recall]
    survivors.sort(key=lambda c: (-c.score.sum_score, c.id))
    return survivors[: max(keep, 0)]


def export_sft(candidate: TrajectoryCandidate) -> dict:
    """SFT-ready record; ``trainable`` marks assistant-generated turns for loss masking downstream."""
    messages = []
    for turn in candidate.trajectory:
        data = turn.to_dict() if hasattr(turn, "to_dict") else dict(turn)
        role = data["role"]
        messages.append(
            {
                "role": role,
                "content": data.get("text", data.get("content", "")),
                "image_parts": list(data.get("image_parts", [])),
                "trainable": role == "assistant",
            }
        )
    return {
        "id": candidate.id,
        "messages": messages,
        "recall_min": candidate.recall_min,
        "recall_em": candidate.recall_em,
        "score": candidate.score.sum_score,
    }


# -- hard negatives -------------------------------------------------------

@dataclass(frozen=True)
class NegativeCandidate:
    query_id: str
    page: str
    relevance_score: float
    verified_negative: bool

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "page": self.page,
            "relevance_score": self.relevance_score,
            "verified_negative": self.verified_negative,
        }


class Verifier(Protocol):
    def verify(self, query_id: str, page: str) -> bool:
        """True when the page is confirmed to hold no evidence for the query."""


class ScriptedVerifier:
    def __init__(self, verdicts: Mapping[tuple[str, str], bool]):
        self.verdicts = dict(verdicts)
        self.calls: list[tuple[str, str]] = []

    def verify(self, query_id: str, page: str) -> bool:
        self.calls.append((query_id, page))
        try:
            return self.verdicts[(query_id, page)]
        except KeyError:
            raise UnscriptedInput(f"no scripted verdict for ({query_id!r}, {page!r})") from None


class HttpVerifier:
    """Judge service client: POST ``{"query_id", "query", "page"}`` -> ``{"verified_negative": bool}``."""

    def __init__(self, endpoint: str, queries: Mapping[str, str] | None = None, client: httpx.Client | None = None,
                 timeout: float = 60.0):
        self.endpoint = endpoint
        self.queries = dict(queries or {})
        self._client = client or httpx.Client(timeout=timeout)

    def verify(self, query_id: str, page: str) -> bool:
        body = {"query_id": query_id, "query": self.queries.get(query_id, ""), "page": page}
        try:
            resp = self._client.post(self.endpoint, json=body)
            resp.raise_for_status()
            verdict = resp.json()["verified_negative"]
        except (httpx.HTTPError, ValueError, KeyError, TypeError) as exc:
            raise VerifierUnavailable(f"verifier {self.endpoint} failed: {exc}") from exc
        if not isinstance(verdict, bool):
            raise VerifierUnavailable("verifier returned a non-boolean verdict")
        return verdict


def in_band(score: float, band: tuple[float, float] = NEGATIVE_BAND) -> bool:
    low, high = band
    return low <= score <= high


def mine_negatives(
    query_id: str,
    scored_pages: Sequence[Mapping[str, Any]],
    verifier: Verifier,
    band: tuple[float, float] = NEGATIVE_BAND,
) -> list[NegativeCandidate]:
    """Keep pages whose reranker score lies in the closed band and that the verifier confirms.

    Ground-truth pages must already be removed from ``scored_pages``. A verifier
    outage aborts mining (VerifierUnavailable) rather than emitting unverified pages.
    """
    out = []
    for entry in scored_pages:
        score = float(entry["relevance_score"])
        if not in_band(score, band):
            continue
        page = str(entry["page"])
        if verifier.verify(query_id, page):
            out.append(NegativeCandidate(query_id, page, score, True))
    return out


# -- curriculum -----------------------------------------------------------

def rollout_std(scores: Sequence[float]) -> float:
    """Population standard deviation of per-rollout mean scores."""
    return statistics.pstdev(scores)


def uncertainty_filter(
    per_sample_rollout_scores: Mapping[Hashable, Sequence[float]],
    std_floor: float | None = 0.1,
    *,
    top_fraction: float | None = None,
    rollouts: int = ROLLOUTS_PER_SAMPLE,
) -> list[Hashable]:
    """Samples whose rollout scores disagree the most.

    With ``std_floor`` (default), keep every sample whose population std is at
    least the floor, in input order. With ``top_fraction``, keep the
    ``ceil(fraction * n)`` highest-std samples instead, ordered by std descending.
    """
    stds = {}
    for sample, scores in per_sample_rollout_scores.items():
        if len(scores) != rollouts:
            raise WrongRolloutCount(f"sample {sample!r} has {len(scores)} rollouts, expected {rollouts}")
        stds[sample] = rollout_std(scores)
    if top_fraction is not None:
        if not 0 < top_fraction <= 1:
            raise ValueError("top_fraction must lie in (0, 1]")
        n = math.ceil(top_fraction * len(stds))
        ranked = sorted(stds, key=lambda s: (-stds[s], str(s)))
        return ranked[:n]
    if std_floor is None:
        raise ValueError("give either std_floor or top_fraction")
    return [s for s, sd in stds.items() if sd >= std_floor]


# -- mix accounting -------------------------------------------------------

@dataclass(frozen=True)
class DatasetManifest:
    positive_count: int
    negative_count: int
    ratio: tuple[int, int]
    negative_share: float
    warnings: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "positive_count": self.positive_count,
            "negative_count": self.negative_count,
            "ratio": f"{self.ratio[0]}:{self.ratio[1]}",
            "negative_share": self.negative_share,
            "warnings": list(self.warnings),
        }


def manifest(
    positives: int | Sequence,
    negatives: int | Sequence,
    target_negative_share: float = 0.23,
    margin: float = 0.05,
) -> DatasetManifest:
    pos = positives if isinstance(positives, int) else len(positives)
    neg = negatives if isinstance(negatives, int) else len(negatives)
    if pos < 0 or neg < 0:
        raise ValueError("counts must be non-negative")
    g = math.gcd(pos, neg) or 1
    total = pos + neg
    share = neg / total if total else 0.0
    warnings = []
    if total == 0:
        warnings.append("dataset is empty")
    elif abs(Fraction(neg, total) - Fraction(str(target_negative_share))) > Fraction(str(margin)):
        warnings.append(
            f"negative share {share:.1%} deviates from target {target_negative_share:.0%} by more than {margin:.0%}"
        )
    for w in warnings:
        logger.warning(w)
    return DatasetManifest(pos, neg, (pos // g, neg // g), share, tuple(warnings))
