"""Self-supervised pretraining of the block encoder.

Supported proxy tasks: ``similarity`` (weight-shared pair of an image and
its augmented view, L1 distance between embeddings), ``rotation`` (predict
one of four right-angle rotations), ``contrastive`` (NT-Xent with in-batch
negatives), ``mean_pixel`` (regress the mean intensity; known not to
converge well, kept for comparisons) and ``imagenet_pretrained`` (load
externally supplied weights, no self-supervision at all).
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
from scipy import ndimage
from sklearn.base import BaseEstimator
from torch import nn
from torch.nn import functional as F

from .core import check_image
from .nets import BlockEncoder, EncoderSpec, seed_everything, to_tensor

logger = logging.getLogger(__name__)

TASKS = ("similarity", "rotation", "contrastive", "mean_pixel", "imagenet_pretrained")


class TrainingDiverged(RuntimeError):
    """Raised when a training loss becomes non-finite.

    ``checkpoint`` holds the state after the last finite epoch.
    """

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class AugmentConfig:
    brightness: float = 0.2
    contrast: float = 0.2
    max_blur_sigma: float = 1.0
    hflip: bool = True
    vflip: bool = True
    flip_prob: float = 0.5

    @classmethod
    def identity(cls):
        return cls(brightness=0.0, contrast=0.0, max_blur_sigma=0.0, hflip=False, vflip=False)


def augment_view(image, seed, cfg=None):
    """Random photometric and flip augmentation, deterministic in ``seed``."""
    cfg = cfg or AugmentConfig()
    img = check_image(image).copy()
    rng = np.random.default_rng(seed)
    # draw every variate unconditionally so the stream does not depend on cfg
    u_h, u_v, u_c, u_b, u_s = rng.random(5)
    if cfg.hflip and u_h < cfg.flip_prob:
        img = img[:, ::-1]
    if cfg.vflip and u_v < cfg.flip_prob:
        img = img[::-1]
    if cfg.contrast > 0:
        factor = 1.0 + cfg.contrast * (2 * u_c - 1)
        mean = img.mean(axis=(0, 1), keepdims=True)
        img = (img - mean) * factor + mean
    if cfg.brightness > 0:
        img = img + cfg.brightness * (2 * u_b - 1)
    if cfg.max_blur_sigma > 0:
        sigma = cfg.max_blur_sigma * u_s
        if sigma > 0:
            img = ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0), mode="reflect")
    return np.ascontiguousarray(np.clip(img, 0.0, 1.0))


def rotate(image, label):
    """Rotate counter-clockwise by ``90 * label`` degrees."""
    if label not in (0, 1, 2, 3):
        raise ValueError(f"rotation label must be 0..3, got {label}")
    return np.ascontiguousarray(np.rot90(np.asarray(image), k=label, axes=(0, 1)))


def rotation_label(image, seed):
    img = check_image(image)
    if img.shape[0] != img.shape[1]:
        raise ValueError(f"rotation needs a square patch, got {img.shape[:2]}")
    label = int(np.random.default_rng(seed).integers(4))
    return rotate(img, label), label


def mean_pixel_target(image):
    return float(check_image(image).mean())


def _as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x, False
    return torch.as_tensor(np.asarray(x, dtype=np.float64)), True


def similarity_loss(z_l, z_r, reduction="mean"):
    """L1 distance between two embeddings (``mean`` or ``sum`` over dimensions).

    Works on numpy arrays (returns a float) or on torch tensors of shape
    ``(d,)`` or ``(batch, d)`` (returns a tensor averaged over the batch).
    """
    a, numpy_in = _as_tensor(z_l)
    b, _ = _as_tensor(z_r)
    if a.shape != b.shape:
        raise ValueError(f"embedding shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    diff = (a - b).abs()
    if reduction == "mean":
        per = diff.mean(-1)
    elif reduction == "sum":
        per = diff.sum(-1)
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    out = per.mean() if per.ndim else per
    return float(out) if numpy_in else out


def contrastive_loss(anchor, positive, negatives, temperature=0.5):
    """NT-Xent style loss of one anchor against one positive and ``negatives``."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    a, numpy_in = _as_tensor(anchor)
    p, _ = _as_tensor(positive)
    if len(negatives) == 0:
        raise ValueError("contrastive loss needs at least one negative")
    n = torch.stack([_as_tensor(v)[0] for v in negatives])
    if a.shape != p.shape or n.shape[1:] != a.shape:
        raise ValueError("all embeddings must share one length")
    a = F.normalize(a, dim=-1)
    sims = torch.cat([(a * F.normalize(p, dim=-1)).sum(-1, keepdim=True),
                      F.normalize(n, dim=-1) @ a]) / temperature
    loss = torch.logsumexp(sims, 0) - sims[0]
    return float(loss) if numpy_in else loss


def nt_xent(z1, z2, temperature=0.5):
    """Batched NT-Xent: each view's positive is its partner, all other views are negatives."""
    z = F.normalize(torch.cat([z1, z2]), dim=1)
    sim = z @ z.t() / temperature
    n = len(z1)
    sim = sim.masked_fill(torch.eye(2 * n, dtype=torch.bool), float("-inf"))
    target = torch.cat([torch.arange(n, 2 * n), torch.arange(0, n)])
    return F.cross_entropy(sim, target)


def variance_penalty(z, eps=1e-4):
    """Hinge on the per-dimension batch standard deviation; discourages collapse."""
    if len(z) < 2:
        return z.sum() * 0.0
    std = torch.sqrt(z.var(dim=0) + eps)
    return F.relu(1.0 - std).mean()


def config_hash(obj):
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


class SelfSupervisedPretrainer(BaseEstimator):
    """Pretrain a :class:`BlockEncoder` on unlabelled images.

    Parameters
    ----------
    task : str
        One of ``similarity``, ``rotation``, ``contrastive``, ``mean_pixel``,
        ``imagenet_pretrained``.
    encoder : str
        Encoder preset, ``compact`` or ``deep``.
    epochs, learning_rate, batch_size : training schedule (Adam).
    variance_weight : float
        Weight of the anti-collapse penalty in the similarity task; 0 turns
        it off.
    temperature : float
        Contrastive temperature.
    weights_path : str, optional
        State dict to load for ``imagenet_pretrained``.
    random_state : int

    Attributes
    ----------
    encoder_ : BlockEncoder
    loss_history_ : list of float
        Mean training loss per epoch.
    """

    def __init__(self, task="similarity", encoder="compact", epochs=100, learning_rate=1e-4,
                 batch_size=16, variance_weight=1e-4, temperature=0.5, augment=None,
                 weights_path=None, random_state=0, deterministic=True, verbose=0):
        self.task = task
        self.encoder = encoder
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.variance_weight = variance_weight
        self.temperature = temperature
        self.augment = augment
        self.weights_path = weights_path
        self.random_state = random_state
        self.deterministic = deterministic
        self.verbose = verbose

    def _validate(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown proxy task {self.task!r}; expected one of {TASKS}")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    def _build(self, in_channels):
        seed_everything(self.random_state, self.deterministic)
        spec = EncoderSpec.from_preset(self.encoder, in_channels=in_channels)
        self.encoder_ = BlockEncoder(spec)
        dim = spec.embedding_dim
        self.heads_ = nn.ModuleDict()
        if self.task == "rotation":
            self.heads_["rotation"] = nn.Linear(dim, 4)
        elif self.task == "mean_pixel":
            self.heads_["mean_pixel"] = nn.Linear(dim, 1)

    def _batch_loss(self, batch, epoch, offsets):
        aug = self.augment or AugmentConfig()
        base = self.random_state * 1_000_003 + epoch * 10_007
        if self.task == "similarity":
            views = [augment_view(im, base + o, aug) for im, o in zip(batch, offsets)]
            z = self.encoder_(to_tensor(batch + views))[0]
            z_l, z_r = z[: len(batch)], z[len(batch):]
            loss = similarity_loss(z_l, z_r)
            if self.variance_weight > 0:
                loss = loss + self.variance_weight * (variance_penalty(z_l) + variance_penalty(z_r))
            return loss
        if self.task == "contrastive":
            views = [augment_view(im, base + o, aug) for im, o in zip(batch, offsets)]
            z = self.encoder_(to_tensor(batch + views))[0]
            return nt_xent(z[: len(batch)], z[len(batch):], self.temperature)
        if self.task == "rotation":
            pairs = [rotation_label(im, base + o) for im, o in zip(batch, offsets)]
            z = self.encoder_(to_tensor([p[0] for p in pairs]))[0]
            target = torch.tensor([p[1] for p in pairs])
            return F.cross_entropy(self.heads_["rotation"](z), target)
        if self.task == "mean_pixel":
            z = self.encoder_(to_tensor(batch))[0]
            target = torch.tensor([mean_pixel_target(im) for im in batch], dtype=torch.float32)
            return F.mse_loss(self.heads_["mean_pixel"](z).squeeze(1), target)
        raise ValueError(f"task {self.task!r} has no training objective")

    def fit(self, X, y=None):
        """Train on a sequence of ``H x W x C`` images in ``[0, 1]``."""
        self._validate()
        images = [check_image(im).astype(np.float32) for im in X]
        if not images:
            raise ValueError("pretraining needs a non-empty dataset")
        self._build(images[0].shape[2])
        self.loss_history_ = []
        if self.task == "imagenet_pretrained":
            if self.weights_path is None:
                raise ValueError("imagenet_pretrained needs weights_path")
            state = torch.load(self.weights_path, map_location="cpu", weights_only=True)
            self.encoder_.load_state_dict(state, strict=False)
            self.encoder_.eval()
            return self

        params = list(self.encoder_.parameters()) + list(self.heads_.parameters())
        opt = torch.optim.Adam(params, lr=self.learning_rate)
        rng = np.random.default_rng(self.random_state)
        last_good = self._state()
        for epoch in range(self.epochs):
            self.encoder_.train()
            order = rng.permutation(len(images))
            total, count = 0.0, 0
            for start in range(0, len(order), self.batch_size):
                idx = order[start:start + self.batch_size]
                if len(idx) < 2 and len(order) >= 2:
                    continue  # batch statistics need at least two samples
                loss = self._batch_loss([images[i] for i in idx], epoch, idx.tolist())
                if not torch.isfinite(loss):
                    raise TrainingDiverged(
                        f"non-finite {self.task} loss at epoch {epoch}", checkpoint=last_good)
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += float(loss.detach()) * len(idx)
                count += len(idx)
            self.loss_history_.append(total / max(count, 1))
            last_good = self._state()
            if self.verbose:
                logger.info("pretrain epoch %d loss %.6f", epoch, self.loss_history_[-1])
        self.encoder_.eval()
        return self

    def _state(self):
        return {k: v.detach().clone() for k, v in self.encoder_.state_dict().items()}

    # -- checkpoint container ------------------------------------------------

    def get_checkpoint(self):
        params = self.get_params()
        params["augment"] = asdict(self.augment) if self.augment else None
        return {
            "kind": "nucleiseg.encoder",
            "topology": self.encoder_.spec.as_dict(),
            "state_dict": self.encoder_.state_dict(),
            "heads": self.heads_.state_dict(),
            "task": self.task,
            "params": params,
            "config_hash": config_hash(params),
            "seed": self.random_state,
            "loss_history": list(self.loss_history_),
        }

    def save(self, path):
        torch.save(self.get_checkpoint(), path)

    @classmethod
    def from_checkpoint(cls, ckpt):
        if isinstance(ckpt, (str, bytes)) or hasattr(ckpt, "__fspath__"):
            ckpt = torch.load(ckpt, map_location="cpu", weights_only=False)
        params = dict(ckpt["params"])
        if params.get("augment"):
            params["augment"] = AugmentConfig(**params["augment"])
        obj = cls(**params)
        spec = EncoderSpec(**ckpt["topology"])
        obj.encoder_ = BlockEncoder(spec)
        obj.encoder_.load_state_dict(ckpt["state_dict"])
        obj.encoder_.eval()
        obj.heads_ = nn.ModuleDict()
        if obj.task == "rotation":
            obj.heads_["rotation"] = nn.Linear(spec.embedding_dim, 4)
        elif obj.task == "mean_pixel":
            obj.heads_["mean_pixel"] = nn.Linear(spec.embedding_dim, 1)
        obj.heads_.load_state_dict(ckpt["heads"])
        obj.loss_history_ = list(ckpt["loss_history"])
        return obj

    def write_log(self, path):
        with open(path, "w") as fh:
            fh.write("epoch,loss\n")
            for i, v in enumerate(self.loss_history_):
                fh.write(f"{i},{v:.10g}\n")


def pretrain(dataset, task="similarity", encoder="compact", **kwargs):
    """Functional wrapper: fit a :class:`SelfSupervisedPretrainer` and return its checkpoint."""
    model = SelfSupervisedPretrainer(task=task, encoder=encoder, **kwargs).fit(dataset)
    return copy.deepcopy(model.get_checkpoint())
