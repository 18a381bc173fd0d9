"""Minibatch training loop shared by the detection and segmentation networks."""
from __future__ import annotations

import logging

import numpy as np
import torch

from .nets import to_tensor

logger = logging.getLogger(__name__)


def _dihedral(x, k, flip):
    x = torch.rot90(x, k, dims=(-2, -1))
    return torch.flip(x, dims=(-1,)) if flip else x


def fit_pixel_network(net, images, targets, loss_fn, epochs, learning_rate, batch_size,
                      seed=0, augment=True, verbose=0, tag="net"):
    """Train ``net`` with Adam and return the per-epoch mean loss.

    ``targets`` is an ``N x T x H x W`` integer array; ``loss_fn(logits,
    targets)`` maps a batch to a scalar.  With ``augment`` every batch gets
    one random dihedral transform applied to images and targets alike.
    """
    from .ssl import TrainingDiverged

    x_all = to_tensor(images)
    y_all = torch.as_tensor(np.asarray(targets, dtype=np.int64))
    opt = torch.optim.Adam(net.parameters(), lr=learning_rate)
    rng = np.random.default_rng(seed)
    history = []
    for epoch in range(epochs):
        net.train()
        order = rng.permutation(len(x_all))
        total, count = 0.0, 0
        for start in range(0, len(order), batch_size):
            idx = torch.as_tensor(order[start:start + batch_size])
            if len(idx) < 2 and len(order) >= 2:
                continue
            xb, yb = x_all[idx], y_all[idx]
            if augment:
                k, flip = int(rng.integers(4)), bool(rng.integers(2))
                xb, yb = _dihedral(xb, k, flip), _dihedral(yb, k, flip)
            loss = loss_fn(net(xb), yb)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"{tag}: non-finite loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        history.append(total / max(count, 1))
        if verbose:
            logger.info("%s epoch %d loss %.6f", tag, epoch, history[-1])
    net.eval()
    return history


def predict_foreground(net, images, batch_size=32):
    """Foreground probability (softmax channel 1) for each image."""
    net.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            logits = net(to_tensor(images[start:start + batch_size]))
            prob = torch.softmax(logits.double(), dim=1)[:, 1]
            out.extend(np.clip(p.numpy(), 0.0, 1.0) for p in prob)
    return out
