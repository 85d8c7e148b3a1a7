"""Segmentation scores with unsupervised channel matching.

Copyright © 2018 regiondiff contributors

This file is part of regiondiff.

regiondiff is free software: you can redistribute it and/or modify
it under the terms of the GNU General Public License as published by
the Free Software Foundation, either version 3 of the License, or
(at your option) any later version.

regiondiff is distributed in the hope that it will be useful,
but WITHOUT ANY WARRANTY; without even the implied warranty of
MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
GNU General Public License for more details.

You should have received a copy of the GNU General Public License
along with regiondiff.  If not, see <http://www.gnu.org/licenses/>.
"""
import dataclasses
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.optimize
import torch

from regiondiff.sampler import SegmentationResult
from regiondiff.containerbase import JSONFile
from regiondiff.utils import BoxTable
from regiondiff.exceptions import ConfigError, ShapeError

DICE_MODES = ("symmetric", "predicted")

Labels = Union[SegmentationResult, torch.Tensor, np.ndarray]

# Marks predicted channels that weren't matched to any class.
UNMATCHED = -1


@dataclasses.dataclass
class MetricReport:
    """Segmentation scores averaged over images.

    Attributes:
        acc: The fraction of pixels whose matched label equals the truth.
        iou: The intersection over union of the foreground.
        miou: The mean intersection over union over all classes.
        dice: The Dice score of the foreground.
        matching: The class matched to each predicted channel, or -1.
        dice_mode: "symmetric" for the standard Dice score, or "predicted" for
            2|F̂ ∩ F| / |F̂|, which isn't bounded by one.
        num_images: The number of images scored.
        corpus: The same scores computed from pixel counts summed over all
            images.
    """
    acc: float
    iou: float
    miou: float
    dice: float
    matching: Tuple[int, ...]
    dice_mode: str = "symmetric"
    num_images: int = 0
    corpus: Dict[str, float] = dataclasses.field(default_factory=dict)

    def to_dict(self) -> Dict:
        vals = dataclasses.asdict(self)
        vals["matching"] = list(self.matching)
        return vals

    def format(self, verbose=False) -> str:
        """Format the report as a table."""
        rows = [("metric", "per image")]
        if verbose:
            rows = [("metric", "per image", "corpus")]
        for key in ("acc", "iou", "miou", "dice"):
            row = (key, getattr(self, key))
            if verbose:
                row += (self.corpus.get(key),)
            rows.append(row)
        table = BoxTable(rows).format()
        matching = ", ".join(
            "{0}→{1}".format(k, "-" if j == UNMATCHED else j)
            for k, j in enumerate(self.matching))
        return "{0}\nimages: {1}  matching: {2}  dice: {3}".format(
            table, self.num_images, matching, self.dice_mode)

    def write(self, path: str) -> None:
        record = JSONFile(path)
        record.vals = self.to_dict()
        record.write()


def _as_labels(labels: Labels) -> Tuple[np.ndarray, Optional[int]]:
    """Get hard labels as an int64 array and the channel count, if known."""
    if isinstance(labels, SegmentationResult):
        return (labels.hard.detach().cpu().numpy().astype(np.int64),
                labels.soft.shape[1])
    if isinstance(labels, torch.Tensor):
        labels = labels.detach().cpu().numpy()
    return np.asarray(labels).astype(np.int64), None


def _count_classes(labels: np.ndarray, known: Optional[int]) -> int:
    if known is not None:
        return known
    return int(labels.max(initial=0)) + 1


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, K: int,
                     K_gt: int) -> np.ndarray:
    """Count pixels for every pair of predicted channel and true class."""
    if pred.shape != gt.shape:
        raise ShapeError(
            "label map shape mismatch: {0} and {1}".format(
                pred.shape, gt.shape))
    counts = np.bincount(
        (pred * K_gt + gt).reshape(-1), minlength=K * K_gt)
    return counts[:K * K_gt].reshape(K, K_gt)


def _assignment_value(confusion: np.ndarray, rows: Sequence[int],
                      columns: Sequence[int]) -> int:
    if not rows or not columns:
        return 0
    sub = confusion[np.ix_(rows, columns)]
    row_ind, col_ind = scipy.optimize.linear_sum_assignment(
        sub, maximize=True)
    return int(sub[row_ind, col_ind].sum())


def _match_confusion(confusion: np.ndarray) -> Tuple[int, ...]:
    """Find the assignment with the largest total overlap.

    Among optimal assignments the one that is lexicographically smallest in
    the class given to channel 0, then channel 1 and so on is returned.
    """
    K, K_gt = confusion.shape
    best = _assignment_value(confusion, list(range(K)), list(range(K_gt)))
    num_matched = min(K, K_gt)

    fixed_value = 0
    matching = []
    used = set()
    for k in range(K):
        rest = list(range(k + 1, K))
        candidates = [j for j in range(K_gt) if j not in used]
        # A channel may stay unmatched only if enough channels remain.
        if num_matched - len(used) <= len(rest):
            candidates.append(UNMATCHED)
        for j in candidates:
            value = fixed_value + (confusion[k, j] if j != UNMATCHED else 0)
            free = [c for c in range(K_gt) if c not in used and c != j]
            needed = num_matched - len(used) - (j != UNMATCHED)
            if needed > min(len(rest), len(free)):
                continue
            if value + _assignment_value(confusion, rest, free) == best:
                matching.append(j)
                fixed_value = value
                if j != UNMATCHED:
                    used.add(j)
                break
    return tuple(matching)


def match_channels(pred: Labels, gt: Labels, K: Optional[int] = None,
                   K_gt: Optional[int] = None) -> Tuple[int, ...]:
    """Match predicted channels to true classes by maximum total overlap.

    This is a Hungarian assignment over the confusion matrix. Ties are broken
    toward the lowest class for the lowest channel.

    Args:
        pred: The predicted labels.
        gt: The true labels.
        K: The number of predicted channels. Inferred if not given.
        K_gt: The number of true classes. Inferred if not given.

    Returns:
        The class matched to each predicted channel, or -1 for channels left
        over when K > K_gt.
    """
    pred, known_k = _as_labels(pred)
    gt, known_gt = _as_labels(gt)
    K = K or _count_classes(pred, known_k)
    K_gt = K_gt or _count_classes(gt, known_gt)
    return _match_confusion(confusion_matrix(pred, gt, K, K_gt))


def apply_matching(pred: np.ndarray,
                   matching: Sequence[int]) -> np.ndarray:
    """Relabel predicted channels with their matched classes."""
    return np.asarray(matching, dtype=np.int64)[pred]


def _overlap_scores(pred_fg: np.ndarray, gt_fg: np.ndarray,
                    dice_mode: str) -> Tuple[float, float]:
    """IoU and Dice of two binary masks, summing over the last two axes."""
    intersection = float(np.logical_and(pred_fg, gt_fg).sum())
    pred_size = float(pred_fg.sum())
    gt_size = float(gt_fg.sum())
    if pred_size == 0 and gt_size == 0:
        return 1.0, 1.0
    if pred_size == 0 or gt_size == 0:
        return 0.0, 0.0
    iou = intersection / (pred_size + gt_size - intersection)
    if dice_mode == "predicted":
        dice = 2 * intersection / pred_size
    else:
        dice = 2 * intersection / (pred_size + gt_size)
    return iou, dice


def _image_scores(mapped: np.ndarray, gt: np.ndarray,
                  fg_classes: Sequence[int], K_gt: int,
                  dice_mode: str) -> Dict[str, float]:
    fg = list(fg_classes)
    iou, dice = _overlap_scores(
        np.isin(mapped, fg), np.isin(gt, fg), dice_mode)
    class_ious = [
        _overlap_scores(mapped == c, gt == c, dice_mode)[0]
        for c in range(K_gt)]
    return {
        "acc": float((mapped == gt).mean()),
        "iou": iou,
        "miou": float(np.mean(class_ious)),
        "dice": dice}


def score(pred: Labels, gt: Labels, fg_classes: Iterable[int],
          dice_mode="symmetric", K_gt: Optional[int] = None,
          matching: Optional[Sequence[int]] = None) -> MetricReport:
    """Score predicted segmentations against true label maps.

    Predicted channels are matched to classes once over the whole set, then
    each image is scored under that matching and the scores are averaged.

    Args:
        pred: The predicted labels shaped (N, H, W).
        gt: The true labels shaped (N, H, W).
        fg_classes: The true classes that make up the foreground.
        dice_mode: "symmetric" or "predicted".
        K_gt: The number of true classes. Inferred if not given.
        matching: Use this matching instead of computing one.

    Raises:
        ShapeError: The label maps don't have the same shape.
        ConfigError: The Dice mode isn't recognized.
    """
    if dice_mode not in DICE_MODES:
        raise ConfigError(
            "eval.dice_mode: must be one of {}".format(", ".join(DICE_MODES)),
            field="eval.dice_mode")
    pred, known_k = _as_labels(pred)
    gt, known_gt = _as_labels(gt)
    if pred.shape != gt.shape:
        raise ShapeError(
            "label map shape mismatch: expected {0}, got {1}".format(
                gt.shape, pred.shape))
    if pred.ndim == 2:
        pred, gt = pred[np.newaxis], gt[np.newaxis]
    K = _count_classes(pred, known_k)
    K_gt = K_gt or _count_classes(gt, known_gt)
    if matching is None:
        matching = _match_confusion(confusion_matrix(pred, gt, K, K_gt))
    mapped = apply_matching(pred, matching)

    per_image = [
        _image_scores(mapped[i], gt[i], fg_classes, K_gt, dice_mode)
        for i in range(len(pred))]
    keys = ("acc", "iou", "miou", "dice")
    if per_image:
        averaged = {
            key: float(np.mean([scores[key] for scores in per_image]))
            for key in keys}
    else:
        averaged = dict.fromkeys(keys, float("nan"))
    corpus = _image_scores(mapped, gt, fg_classes, K_gt, dice_mode)

    return MetricReport(
        matching=tuple(int(j) for j in matching), dice_mode=dice_mode,
        num_images=len(pred), corpus=corpus, **averaged)


def consistency(generated: Labels, reference: Labels) -> float:
    """Measure the per-pixel agreement of two segmentations.

    The channels of the generated masks are matched to the reference labels
    before comparing, and the agreement is averaged over images.

    Raises:
        ShapeError: The segmentations don't have the same shape.
    """
    generated, known_k = _as_labels(generated)
    reference, known_ref = _as_labels(reference)
    if generated.shape != reference.shape:
        raise ShapeError(
            "segmentation shape mismatch: expected {0}, got {1}".format(
                reference.shape, generated.shape))
    if generated.size == 0:
        return float("nan")
    if generated.ndim == 2:
        generated, reference = generated[np.newaxis], reference[np.newaxis]
    K = _count_classes(generated, known_k)
    K_ref = _count_classes(reference, known_ref)
    matching = _match_confusion(
        confusion_matrix(generated, reference, K, K_ref))
    mapped = apply_matching(generated, matching)
    agreement = (mapped == reference).reshape(len(mapped), -1).mean(axis=1)
    return float(agreement.mean())


def format_comparison(rows: List[Tuple]) -> str:
    """Format rows of (variant, iou, miou, validation loss) as a table."""
    return BoxTable(
        [("variant", "IoU", "mIoU", "val. loss")] + list(rows)).format()
