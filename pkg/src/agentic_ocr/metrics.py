"""Dual-threshold box-set metrics and page-level accuracy.

Two overlap measures drive everything here: standard IoU (``em``), which rewards
tight alignment, and IoU over the smaller area (``min``), which forgives
granularity mismatch between annotation and prediction. Every ground-truth box
is matched independently against its best prediction; one prediction may
satisfy several ground-truth boxes.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Literal, Sequence

from .errors import EmptyGroundTruth, EmptyJudgmentSet, EmptyPrediction
from .geometry import NormBox, iou_em, iou_min

Kind = Literal["em", "min"]

_IOU = {"em": iou_em, "min": iou_min}


@dataclass(frozen=True)
class MatchThresholds:
    thres_em: float = 0.6
    thres_min: float = 0.8

    def __post_init__(self) -> None:
        for name in ("thres_em", "thres_min"):
            value = getattr(self, name)
            if not 0 < value <= 1:
                raise ValueError(f"{name} must lie in (0, 1], got {value}")

    def for_kind(self, kind: Kind) -> float:
        return self.thres_em if kind == "em" else self.thres_min


DEFAULT_THRESHOLDS = MatchThresholds()


@dataclass(frozen=True)
class TrajectoryScore:
    sum_score: float
    mean_score: float

    @classmethod
    def from_recalls(cls, recall_min: float, recall_em: float) -> "TrajectoryScore":
        total = recall_min + recall_em
        return cls(sum_score=total, mean_score=total / 2)


@dataclass
class BoxSetReport:
    recall_min: float
    recall_em: float
    precision_min: float
    f1_min: float
    matched_gt_indices: list[int] = field(default_factory=list)
    matched_pred_indices: list[int] = field(default_factory=list)


def best_overlap(box: NormBox, others: Sequence[NormBox], kind: Kind) -> float:
    """Highest overlap of ``box`` against any of ``others`` (0 when ``others`` is empty)."""
    iou = _IOU[kind]
    return max((iou(box, other) for other in others), default=0.0)


def _matched_gt(gt: Sequence[NormBox], pred: Sequence[NormBox], kind: Kind, thresholds: MatchThresholds) -> list[int]:
    thres = thresholds.for_kind(kind)
    return [i for i, g in enumerate(gt) if pred and best_overlap(g, pred, kind) >= thres]


def _matched_pred(gt: Sequence[NormBox], pred: Sequence[NormBox], thresholds: MatchThresholds) -> list[int]:
    return [j for j, p in enumerate(pred) if gt and best_overlap(p, gt, "min") >= thresholds.thres_min]


def box_set_recall(
    gt: Sequence[NormBox],
    pred: Sequence[NormBox],
    kind: Kind,
    thresholds: MatchThresholds = DEFAULT_THRESHOLDS,
) -> float:
    """Fraction of ground-truth boxes whose best prediction clears the ``kind`` threshold."""
    if not gt:
        raise EmptyGroundTruth("recall is undefined without ground-truth boxes")
    if kind not in _IOU:
        raise ValueError(f"unknown overlap kind {kind!r}")
    return len(_matched_gt(gt, pred, kind, thresholds)) / len(gt)


def box_set_precision_min(
    gt: Sequence[NormBox],
    pred: Sequence[NormBox],
    thresholds: MatchThresholds = DEFAULT_THRESHOLDS,
) -> float:
    if not pred:
        raise EmptyPrediction("precision is undefined for an empty prediction set")
    return len(_matched_pred(gt, pred, thresholds)) / len(pred)


def f1_min(recall_min: float, precision_min: float) -> float:
    denom = precision_min + recall_min
    if denom == 0:
        return 0.0
    return 2 * precision_min * recall_min / denom


def _f1_from_counts(matched_gt: int, n_gt: int, matched_pred: int, n_pred: int) -> float:
    # 2PR/(P+R) with P = mp/np, R = mg/ng, reduced to one integer division
    denom = matched_pred * n_gt + matched_gt * n_pred
    if denom == 0:
        return 0.0
    return 2 * matched_pred * matched_gt / denom


def trajectory_score(
    gt: Sequence[NormBox],
    pred: Sequence[NormBox],
    thresholds: MatchThresholds = DEFAULT_THRESHOLDS,
) -> TrajectoryScore:
    return TrajectoryScore.from_recalls(
        box_set_recall(gt, pred, "min", thresholds),
        box_set_recall(gt, pred, "em", thresholds),
    )


def evaluate_boxes(
    gt: Sequence[NormBox],
    pred: Sequence[NormBox],
    thresholds: MatchThresholds = DEFAULT_THRESHOLDS,
) -> BoxSetReport:
    """All four ratios for one page. Requires non-empty ground truth.

    An empty prediction set scores 0 precision here (rather than raising) so a
    missed positive page still yields a full report.
    """
    if not gt:
        raise EmptyGroundTruth("box metrics need ground truth; route negative pages to page_accuracy")
    matched_gt = _matched_gt(gt, pred, "min", thresholds)
    recall_min = len(matched_gt) / len(gt)
    recall_em = box_set_recall(gt, pred, "em", thresholds)
    if pred:
        matched_pred = _matched_pred(gt, pred, thresholds)
        precision = len(matched_pred) / len(pred)
    else:
        matched_pred, precision = [], 0.0
    return BoxSetReport(
        recall_min=recall_min,
        recall_em=recall_em,
        precision_min=precision,
        f1_min=_f1_from_counts(len(matched_gt), len(gt), len(matched_pred), len(pred)),
        matched_gt_indices=matched_gt,
        matched_pred_indices=matched_pred,
    )


@dataclass(frozen=True)
class PageJudgment:
    expected_relevant: bool
    predicted_relevant: bool

    @property
    def correct(self) -> bool:
        return self.expected_relevant == self.predicted_relevant


def page_accuracy(judgments: Iterable[PageJudgment]) -> float:
    judgments = list(judgments)
    if not judgments:
        raise EmptyJudgmentSet("page accuracy needs at least one judged page")
    return sum(j.correct for j in judgments) / len(judgments)


def report_record(
    query_id: str,
    page_id: str,
    report: BoxSetReport,
    thresholds: MatchThresholds = DEFAULT_THRESHOLDS,
) -> dict:
    """Flat record for line-delimited evaluation output."""
    record = {"query_id": query_id, "page_id": page_id}
    data = asdict(report)
    for key in ("recall_min", "recall_em", "precision_min", "f1_min"):
        record[key] = data[key]
    record["thres_em"] = thresholds.thres_em
    record["thres_min"] = thresholds.thres_min
    return record


def dumps_record(record: dict) -> str:
    return json.dumps(record, sort_keys=True, ensure_ascii=False)
