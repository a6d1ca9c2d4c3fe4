from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

EPS = 1e-7


def dice_loss(pred: torch.Tensor, target: torch.Tensor, variant: str = "sum", eps: float = EPS) -> torch.Tensor:
    """Soft Dice loss over K classes on (K, ...) or (1, K, ...) tensors.

    ``sum``:  1 - sum_k 2 <y_k, p_k> / (|y_k|^2 + |p_k|^2), so a perfect
    prediction with all K classes present scores 1 - K.
    ``mean``: 1 - mean_k of the same terms, perfect = 0.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if pred.dim() == 5:
        if pred.shape[0] != 1:
            raise ValueError("batched input must have batch size 1")
        pred, target = pred[0], target[0]
    k = pred.shape[0]
    p = pred.reshape(k, -1)
    y = target.reshape(k, -1).to(p.dtype)
    terms = 2 * (y * p).sum(dim=1) / ((y * y).sum(dim=1) + (p * p).sum(dim=1) + eps)
    if variant == "sum":
        return 1 - terms.sum()
    if variant == "mean":
        return 1 - terms.mean()
    raise ValueError(f"unknown dice variant {variant!r}")


def one_hot(classes, n_classes: int, dtype=torch.float32) -> torch.Tensor:
    """(D, H, W) class indices to a (1, K, D, H, W) one-hot tensor."""
    classes = torch.as_tensor(np.asarray(classes, dtype=np.int64))
    return F.one_hot(classes, n_classes).permute(3, 0, 1, 2).unsqueeze(0).to(dtype)
