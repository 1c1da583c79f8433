"""Query-driven evidence extraction from document page images.

The package covers the tool primitive (crop, rotate, recognize), the agent
session that drives a vision-language model through it, the box metrics and
rollout rewards used to train and evaluate such an agent, data curation, and
the visual-RAG pipeline glue.
"""

from .geometry import NormBox, PixelRect, Rotation, iou_em, iou_min
from .metrics import MatchThresholds, box_set_precision_min, box_set_recall, f1_min, page_accuracy, trajectory_score
from .reward import RewardConfig, negative_reward, positive_reward
from .toolkit import ElementType, ToolCall, execute

__all__ = [
    "ElementType",
    "MatchThresholds",
    "NormBox",
    "PixelRect",
    "RewardConfig",
    "Rotation",
    "ToolCall",
    "box_set_precision_min",
    "box_set_recall",
    "execute",
    "f1_min",
    "iou_em",
    "iou_min",
    "negative_reward",
    "page_accuracy",
    "positive_reward",
    "trajectory_score",
]

__version__ = "0.1.0"
