"""Rollout reward for policy optimization.

Positive samples score the mean of the two recalls minus three behavioral
penalties; negative samples score 1 only when the model abstains entirely.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

from .errors import NotPositiveSample
from .geometry import NormBox, iou_em
from .metrics import DEFAULT_THRESHOLDS, MatchThresholds, best_overlap, trajectory_score
from .toolkit import ElementType, ToolCall

DEFAULT_SCHEDULE: dict[int, float] = {1: 0.05, 2: 0.20, 3: 0.30}


@dataclass(frozen=True)
class RewardConfig:
    spurious_match_floor: float = 0.5
    redundant_overlap_floor: float = 0.5
    oversized_area_fraction: float = 0.85
    oversized_penalty: float = 0.10
    escalation_schedule: Mapping[int, float] = field(default_factory=lambda: dict(DEFAULT_SCHEDULE))
    thresholds: MatchThresholds = DEFAULT_THRESHOLDS

    def __post_init__(self) -> None:
        for name in ("spurious_match_floor", "redundant_overlap_floor", "oversized_area_fraction"):
            value = getattr(self, name)
            if not 0 < value < 1:
                raise ValueError(f"{name} must lie in (0, 1), got {value}")
        if self.oversized_penalty < 0:
            raise ValueError("oversized_penalty must be non-negative")
        keys = sorted(self.escalation_schedule)
        if not keys or keys[0] < 1:
            raise ValueError("escalation schedule needs positive integer counts")
        values = [self.escalation_schedule[k] for k in keys]
        if any(b < a for a, b in zip(values, values[1:])) or values[0] < 0:
            raise ValueError("escalation schedule must be non-negative and non-decreasing")

    def penalty_for(self, count: int) -> float:
        """Schedule lookup; counts beyond the largest key use the largest key's value."""
        if count <= 0:
            return 0.0
        eligible = [k for k in self.escalation_schedule if k <= count]
        if not eligible:
            return 0.0
        return self.escalation_schedule[max(eligible)]


@dataclass(frozen=True)
class RewardBreakdown:
    accuracy: float
    p_over_pred: float
    p_overlap: float
    p_oversized: float
    total: float
    spurious: int = 0
    redundant: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def count_spurious(pred: Sequence[NormBox], gt: Sequence[NormBox], config: RewardConfig = RewardConfig()) -> int:
    """Predicted boxes whose best IoU_min against any ground-truth box falls below the floor."""
    return sum(1 for p in pred if best_overlap(p, gt, "min") < config.spurious_match_floor)


def count_redundant(pred: Sequence[NormBox], config: RewardConfig = RewardConfig()) -> int:
    """Greedy sweep in list order: a box is redundant if it overlaps an earlier kept box."""
    kept: list[NormBox] = []
    redundant = 0
    for box in pred:
        if any(iou_em(box, k) >= config.redundant_overlap_floor for k in kept):
            redundant += 1
        else:
            kept.append(box)
    return redundant


def is_oversized(calls: Iterable[ToolCall], config: RewardConfig = RewardConfig()) -> bool:
    # decimal reading of the threshold so 0.85 means exactly 17/20
    limit = Fraction(str(config.oversized_area_fraction))
    return any(c.element_type is ElementType.REGION and c.box.page_fraction() > limit for c in calls)


def positive_reward(
    gt: Sequence[NormBox],
    pred: Sequence[NormBox],
    tool_calls: Sequence[ToolCall] = (),
    config: RewardConfig = RewardConfig(),
) -> RewardBreakdown:
    if not gt:
        raise NotPositiveSample("positive reward needs ground-truth boxes; use negative_reward")
    accuracy = trajectory_score(gt, pred, config.thresholds).mean_score
    spurious = count_spurious(pred, gt, config)
    redundant = count_redundant(pred, config)
    p_over = config.penalty_for(spurious)
    p_overlap = config.penalty_for(redundant)
    p_oversized = config.oversized_penalty if is_oversized(tool_calls, config) else 0.0
    return RewardBreakdown(
        accuracy=accuracy,
        p_over_pred=p_over,
        p_overlap=p_overlap,
        p_oversized=p_oversized,
        total=accuracy - p_over - p_overlap - p_oversized,
        spurious=spurious,
        redundant=redundant,
    )


def negative_reward(pred: Sequence[NormBox]) -> int:
    return 1 if len(pred) == 0 else 0


def score_rollout(record: Mapping, config: RewardConfig = RewardConfig()) -> dict:
    """Score one rollout record and return it with reward fields appended.

    Input keys: ``sample_id``, ``label`` (positive|negative), ``gt_boxes``,
    ``pred_boxes``, ``tool_calls`` (list of tool-call objects or their arguments).
    """
    label = record.get("label")
    pred = [NormBox.from_seq(b) for b in record.get("pred_boxes", [])]
    out = dict(record)
    if label == "negative":
        r = negative_reward(pred)
        out.update(accuracy=float(r), p_over_pred=0.0, p_overlap=0.0, p_oversized=0.0, total=float(r))
        return out
    if label != "positive":
        raise ValueError(f"rollout label must be 'positive' or 'negative', got {label!r}")
    gt = [NormBox.from_seq(b) for b in record.get("gt_boxes", [])]
    calls = []
    for raw in record.get("tool_calls", []):
        args = raw.get("arguments", raw)
        calls.append(ToolCall.from_arguments(args))
    out.update(positive_reward(gt, pred, calls, config).to_dict())
    return out
