"""Evaluation metrics: IoU-based instance matching with the derived
precision/recall/quality scores, plus paired image metrics (PSNR, SSIM)."""

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

IOU_THRESHOLD = 0.5
PSNR_CAP_DB = 99.0


@dataclass
class MatchResult:
    """One-to-one instance matching; every matched pair has IoU > 0.5."""
    matches: list  # (pred_id, gt_id, iou)
    unmatched_pred: list
    unmatched_gt: list


def _instance_ids(labels: np.ndarray) -> np.ndarray:
    ids = np.unique(labels)
    return ids[ids > 0]


def _iou_matrix(pred: np.ndarray, gt: np.ndarray, pred_ids, gt_ids) -> np.ndarray:
    pred_areas = {int(i): int((pred == i).sum()) for i in pred_ids}
    gt_areas = {int(i): int((gt == i).sum()) for i in gt_ids}
    both = (pred > 0) & (gt > 0)
    key = pred[both].astype(np.int64) * (int(gt.max()) + 1) + gt[both].astype(np.int64)
    pairs, counts = np.unique(key, return_counts=True)
    pred_index = {int(i): k for k, i in enumerate(pred_ids)}
    gt_index = {int(i): k for k, i in enumerate(gt_ids)}
    ious = np.zeros((len(pred_ids), len(gt_ids)))
    for pair, inter in zip(pairs, counts):
        p = int(pair // (int(gt.max()) + 1))
        g = int(pair % (int(gt.max()) + 1))
        union = pred_areas[p] + gt_areas[g] - int(inter)
        ious[pred_index[p], gt_index[g]] = inter / union
    return ious


def match_instances(pred, gt) -> MatchResult:
    """Optimal one-to-one matching between predicted and ground-truth
    instances, maximizing total IoU with pairs at IoU <= 0.5 forbidden.
    Ties between equal-IoU assignments break toward lower (pred id, gt id).
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    pred_ids = _instance_ids(pred)
    gt_ids = _instance_ids(gt)
    if len(pred_ids) == 0 or len(gt_ids) == 0:
        return MatchResult([], [int(i) for i in pred_ids], [int(i) for i in gt_ids])

    ious = _iou_matrix(pred, gt, pred_ids, gt_ids)
    scores = np.where(ious > IOU_THRESHOLD, ious, 0.0)
    # Tiny index-based penalty so equal-IoU ties resolve deterministically
    # toward lower ids; far below any real IoU difference.
    pi = np.arange(len(pred_ids))[:, None]
    gi = np.arange(len(gt_ids))[None, :]
    rows, cols = linear_sum_assignment(scores - 1e-12 * (pi + gi), maximize=True)

    matches = []
    matched_p, matched_g = set(), set()
    for r, c in zip(rows, cols):
        if ious[r, c] > IOU_THRESHOLD:
            matches.append((int(pred_ids[r]), int(gt_ids[c]), float(ious[r, c])))
            matched_p.add(r)
            matched_g.add(c)
    unmatched_pred = [int(pred_ids[r]) for r in range(len(pred_ids)) if r not in matched_p]
    unmatched_gt = [int(gt_ids[c]) for c in range(len(gt_ids)) if c not in matched_g]
    return MatchResult(matches, unmatched_pred, unmatched_gt)


def segmentation_scores(m: MatchResult) -> dict:
    """Instance precision/recall, segmentation quality (mean matched IoU),
    and panoptic quality (F1 x SQ). Empty-vs-empty scores 1.0 everywhere;
    otherwise an empty denominator scores 0."""
    tp = len(m.matches)
    fp = len(m.unmatched_pred)
    fn = len(m.unmatched_gt)
    if tp == 0 and fp == 0 and fn == 0:
        return {"precision": 1.0, "recall": 1.0, "seg_quality": 1.0,
                "panoptic_quality": 1.0}
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    sq = float(np.mean([iou for _, _, iou in m.matches])) if tp else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"precision": precision, "recall": recall, "seg_quality": sq,
            "panoptic_quality": f1 * sq}


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 99 for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(peak * peak / mse), PSNR_CAP_DB)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(coords ** 2) / (2 * sigma * sigma))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(a, b, data_range: float = 1.0) -> float:
    """Windowed structural similarity with an 11x11 Gaussian window
    (sigma 1.5) and the standard stabilizers, averaged over channels and
    valid window positions."""
    a = torch.as_tensor(np.asarray(a), dtype=torch.float64)
    b = torch.as_tensor(np.asarray(b), dtype=torch.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.ndim == 2:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    if a.ndim != 3:
        raise ValueError("expected (H, W) or (C, H, W) inputs")
    if a.shape[1] < 11 or a.shape[2] < 11:
        raise ValueError("images must be at least 11x11 for the SSIM window")
    c = a.shape[0]
    window = _gaussian_window().expand(c, 1, 11, 11)

    def wfilter(t):
        return F.conv2d(t.unsqueeze(0), window, groups=c).squeeze(0)

    mu_a, mu_b = wfilter(a), wfilter(b)
    var_a = wfilter(a * a) - mu_a ** 2
    var_b = wfilter(b * b) - mu_b ** 2
    cov = wfilter(a * b) - mu_a * mu_b
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    score = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(score.mean())


def mean_std_summary(records: list) -> dict:
    """Column-wise mean and std over per-image metric dicts."""
    if not records:
        return {}
    keys = records[0].keys()
    return {k: (float(np.mean([r[k] for r in records])),
                float(np.std([r[k] for r in records]))) for k in keys}
