"""Training loop, gradients and inference for the group U-Net."""

from __future__ import annotations

import csv
import logging
import math

import numpy as np
import torch

from ..core import GridSpec, LabelMap, Protocol, default_protocol, dice_overlap, normalize, resample, resample_to
from ..engine import generate_sample, sample_seed
from .loss import dice_loss, one_hot
from .optim import Adam
from .unet import GroupUNet

log = logging.getLogger(__name__)


def group_tensor(volumes, dtype=torch.float32) -> torch.Tensor:
    """Stack Volumes into an (n, 1, D, H, W) group tensor."""
    volumes = list(volumes)
    if not volumes:
        raise ValueError("no input volumes")
    shape = volumes[0].shape
    for v in volumes[1:]:
        if v.shape != shape:
            raise ValueError(f"group inputs differ in shape: {v.shape} vs {shape}")
    data = np.stack([np.asarray(v.data, dtype=np.float32) for v in volumes])[:, None]
    return torch.from_numpy(data).to(dtype)


def target_tensor(lm: LabelMap, protocol: Protocol, dtype=torch.float32) -> torch.Tensor:
    return one_hot(protocol.class_indices(lm.data), len(protocol), dtype)


def check_finite(tensor: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(tensor).all():
        raise FloatingPointError(f"non-finite values in {what}")
    return tensor


def backward(loss: torch.Tensor, net: torch.nn.Module) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of ``loss`` for every parameter of ``net``.

    Gradients are stored in ``param.grad`` and returned by name; parameters
    the loss does not depend on get exact zeros.
    """
    if not isinstance(loss, torch.Tensor) or loss.grad_fn is None:
        raise RuntimeError("backward called before a forward pass produced a loss")
    names, params = zip(*net.named_parameters())
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    out = {}
    for name, p, g in zip(names, params, grads):
        g = torch.zeros_like(p) if g is None else g
        p.grad = g
        out[name] = g
    return out


def sample_to_tensors(sample, protocol: Protocol):
    return group_tensor(sample.channels), target_tensor(sample.label_map, protocol)


def foreground_dice(pred: LabelMap, truth: LabelMap, labels=None) -> dict[int, float]:
    """Hard Dice per foreground label present in ``truth`` (or ``labels``)."""
    if labels is None:
        labels = [int(k) for k in np.unique(truth.data) if k != 0]
    return dice_overlap(pred, truth, labels)


def predict_labels(net: GroupUNet, volumes, protocol: Protocol) -> np.ndarray:
    """Protocol label IDs of the per-voxel argmax for aligned ``volumes``."""
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        prob = net(group_tensor(volumes, dtype))
    classes = prob[0].argmax(dim=0).numpy()
    return np.asarray(protocol.ids, dtype=np.uint16)[classes]


def evaluate(net: GroupUNet, sample, protocol: Protocol) -> float:
    pred = LabelMap(predict_labels(net, sample.channels, protocol), sample.label_map.affine, protocol)
    scores = foreground_dice(pred, sample.label_map)
    return float(np.mean(list(scores.values()))) if scores else 1.0


def train_toy(
    session,
    config,
    net: GroupUNet,
    steps: int,
    lr: float = 1e-4,
    seed: int = 0,
    protocol: Protocol | None = None,
    val_sample=None,
    val_every: int = 100,
    lr_drop_step: int | None = None,
    lr_after: float = 1e-5,
    variant: str | None = None,
) -> list[dict]:
    """Train on freshly generated samples: one engine sample per step, batch size 1.

    Returns one record per step with the loss and, every ``val_every`` steps
    and at the last step, the mean foreground Dice on ``val_sample``.
    """
    protocol = protocol or default_protocol()
    variant = variant or config.policy.get("dice_variant", "sum")
    opt = Adam(net.parameters(), lr=lr)
    history = []
    for step in range(steps):
        if lr_drop_step is not None and step == lr_drop_step:
            opt.lr = lr_after
        sample = generate_sample(session, config, sample_seed(seed, step))
        x, y = sample_to_tensors(sample, protocol)
        loss = check_finite(dice_loss(net(x), y, variant), "loss")
        backward(loss, net)
        opt.step()
        record = {"step": step, "loss": loss.item(), "val_dice": math.nan}
        if val_sample is not None and ((step + 1) % val_every == 0 or step == steps - 1):
            record["val_dice"] = evaluate(net, val_sample, protocol)
            log.info("step %d loss %.4f val dice %.4f", step, record["loss"], record["val_dice"])
        history.append(record)
    return history


def write_curve(history: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "loss", "val_dice"])
        for r in history:
            val = "" if math.isnan(r["val_dice"]) else f"{r['val_dice']:.6f}"
            writer.writerow([r["step"], f"{r['loss']:.6f}", val])


def segment(net: GroupUNet, inputs, grid: GridSpec, protocol: Protocol | None = None) -> LabelMap:
    """Label map for any number of aligned input scans, on the first input's grid.

    Inputs are normalized, resampled to ``grid`` centered on the first
    input's field of view, segmented jointly and the argmax labels resampled
    back with nearest interpolation.
    """
    inputs = list(inputs)
    if not inputs:
        raise ValueError("segment needs at least one input volume")
    protocol = protocol or default_protocol()
    ref = inputs[0]
    center = ref.affine @ np.append((np.asarray(ref.shape) - 1) / 2, 1.0)
    target = grid.with_center(center[:3])
    conformed = [resample(normalize(v), target, "trilinear") for v in inputs]
    labels = LabelMap(predict_labels(net, conformed, protocol), target.affine, protocol)
    return resample_to(labels, ref.shape, ref.affine, "nearest")
