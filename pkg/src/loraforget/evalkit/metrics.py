"""Segmentation and classification metrics, divergence between two nets."""
from __future__ import annotations

import numpy as np

from .. import ndgrad as nd
from ..data import stack_images


def _sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def dice_iou_per_item(pred_logits, mask, threshold: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Hard-threshold Dice and IoU for each item of a batch.

    Both-empty prediction and ground truth count as a perfect 1.0.
    """
    z = np.asarray(pred_logits)
    g = np.asarray(mask) > 0.5
    if z.shape != g.shape:
        raise ValueError(f"dice_iou: prediction {z.shape} vs mask {g.shape}")
    if z.ndim < 2:
        z, g = z[None], g[None]
    p = _sigmoid(z) > threshold
    axes = tuple(range(1, z.ndim))
    inter = (p & g).sum(axis=axes).astype(np.float64)
    sp, sg = p.sum(axis=axes).astype(np.float64), g.sum(axis=axes).astype(np.float64)
    union = sp + sg - inter
    empty = (sp + sg) == 0
    dice = np.where(empty, 1.0, 2 * inter / np.where(empty, 1, sp + sg))
    iou = np.where(empty, 1.0, inter / np.where(empty, 1, union))
    return dice, iou


def dice_iou(pred_logits, mask, threshold: float = 0.5) -> tuple[float, float]:
    """Mean per-item Dice and IoU."""
    dice, iou = dice_iou_per_item(pred_logits, mask, threshold)
    return float(dice.mean()), float(iou.mean())


def cls_metrics(logits, labels, n_classes: int) -> tuple[float, list[float]]:
    """Argmax accuracy and one-vs-rest F1 per class (0/0 counts as 0)."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ValueError(f"cls_metrics: logits {logits.shape} vs labels {labels.shape}")
    pred = logits.argmax(axis=1)
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (labels, pred), 1)
    tp = np.diag(conf).astype(np.float64)
    denom = conf.sum(axis=0) + conf.sum(axis=1)
    f1 = np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)
    acc = float(tp.sum() / max(len(labels), 1))
    return acc, [float(v) for v in f1]


def predict(net, items, batch_size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Logits and features of ``net`` on ``items`` (eval mode, off the tape)."""
    was_training = net.training
    net.eval()
    logits, feats = [], []
    try:
        with nd.no_grad():
            for start in range(0, len(items), batch_size):
                x = nd.Tensor(stack_images(items[start:start + batch_size]))
                if hasattr(net, "forward_features"):
                    f = net.forward_features(x)
                    z = net._linear("fc", f)
                else:
                    z, f = net(x)
                logits.append(z.data)
                feats.append(f.data)
    finally:
        net.train(was_training)
    if not logits:
        return np.zeros((0,)), np.zeros((0,))
    return np.concatenate(logits), np.concatenate(feats)


def divergence_arrays(zs, zt, fs, ft, kind: str = "seg") -> tuple[float, float]:
    """(mean |p_s - p_t|, mean per-sample 1 - cos(f_s, f_t))."""
    zs, zt = np.asarray(zs, np.float64), np.asarray(zt, np.float64)
    if kind == "seg":
        l1 = float(np.abs(_sigmoid(zs) - _sigmoid(zt)).mean())
    else:
        def soft(z):
            e = np.exp(z - z.max(axis=1, keepdims=True))
            return e / e.sum(axis=1, keepdims=True)
        # per-sample L1 between class distributions, averaged
        l1 = float(np.abs(soft(zs) - soft(zt)).sum(axis=1).mean())
    fs = np.asarray(fs, np.float64).reshape(len(fs), -1)
    ft = np.asarray(ft, np.float64).reshape(len(ft), -1)
    ns = np.maximum(np.linalg.norm(fs, axis=1), 1e-8)
    nt = np.maximum(np.linalg.norm(ft, axis=1), 1e-8)
    cos = (fs * ft).sum(axis=1) / (ns * nt)
    # identical rows are exactly 0, not 1 - (1 - rounding)
    same = (fs == ft).all(axis=1)
    gap = float(np.where(same, 0.0, np.clip(1.0 - cos, 0.0, 2.0)).mean())
    return max(l1, 0.0), gap


def divergence(student, teacher, items, batch_size: int = 32) -> tuple[float, float]:
    zs, fs = predict(student, items, batch_size)
    zt, ft = predict(teacher, items, batch_size)
    kind = "seg" if zs.ndim == 4 else "cls"
    return divergence_arrays(zs, zt, fs, ft, kind)


def split_metric(net, items, task: str, n_classes: int = 3, batch_size: int = 32) -> dict:
    """Headline metrics of ``net`` on one split."""
    logits, _ = predict(net, items, batch_size)
    if task == "seg":
        dice, iou = dice_iou(logits, np.stack([it.target for it in items]))
        return {"dice": dice, "iou": iou}
    acc, f1 = cls_metrics(logits, [it.target for it in items], n_classes)
    return {"accuracy": acc, "f1": f1}
