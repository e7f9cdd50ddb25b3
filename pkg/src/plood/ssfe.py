"""Self-supervised feature enhancement via rotation prediction.

Each source image is expanded into R rotated copies. The rotation
classification loss is a weighted cross-entropy where the original
orientation keeps weight 1 and each rotated copy is downweighted by its own
predicted probability; the rotation irrelevance loss pulls the invariant
head's features of all R copies toward their per-instance mean. The two are
blended by a trade-off weight alpha (0.5 by default).
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import backbone as bb
from .datagen import ROTATIONS, rotate

PROB_FLOOR = 1e-12

LOG_COLUMNS = ("epoch", "l_rc", "l_ri", "l_ssfe", "wall_ms")


class SsfeError(Exception):
    pass


@dataclass
class SsfeConfig:
    alpha: float = 0.5
    epochs: int = 50
    batch_size: int = 128
    lr: float = 1e-3
    seed: int = 0
    rotations: int = ROTATIONS
    distance: str = "sqeuclidean"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise SsfeError(f"alpha must lie in [0,1], got {self.alpha}")
        if self.distance != "sqeuclidean":
            raise SsfeError(f"unsupported distance metric {self.distance!r}")


@dataclass
class RotationBatch:
    """Instance-major stack: rows i*R..(i+1)*R-1 are the R copies of source i."""

    images: np.ndarray  # (B*R, 1, H, W)
    rotation_labels: np.ndarray  # (B*R,) ints in 1..R
    source_indices: np.ndarray  # (B*R,)


def make_rotation_batch(images, rotations=ROTATIONS):
    images = np.asarray(images)
    b = images.shape[0]
    stacked = np.empty((b * rotations,) + images.shape[1:])
    for r in range(1, rotations + 1):
        stacked[r - 1 :: rotations] = rotate(images, r)
    labels = np.tile(np.arange(1, rotations + 1), b)
    src = np.repeat(np.arange(b), rotations)
    return RotationBatch(images=stacked, rotation_labels=labels, source_indices=src)


def _probs_array(probs):
    return probs.data if isinstance(probs, ad.Tensor) else np.asarray(probs)


def rotation_probs(logits):
    """Row-wise softmax over rotation logits."""
    x = logits if isinstance(logits, ad.Tensor) else ad.Tensor(logits)
    if not np.isfinite(x.data).all():
        raise SsfeError("rotation_probs: non-finite logits")
    return ad.softmax(x)


def rotation_weights(probs, rotation_labels):
    """Instance weights: 1 for the original orientation, else 1 - P at the
    assigned rotation class. Constant w.r.t. the graph (no gradient flows)."""
    p = _probs_array(probs)
    labels = np.asarray(rotation_labels)
    r_count = p.shape[-1]
    if labels.min() < 1 or labels.max() > r_count:
        raise SsfeError(
            f"rotation labels must lie in 1..{r_count}, got "
            f"[{labels.min()}, {labels.max()}]"
        )
    at_label = p[np.arange(p.shape[0]), labels - 1]
    return np.where(labels == 1, 1.0, 1.0 - at_label)


def loss_rc(probs, rotation_labels, weights):
    """Weighted rotation cross-entropy, averaged over all B*R rows."""
    p = probs if isinstance(probs, ad.Tensor) else ad.Tensor(probs)
    labels = np.asarray(rotation_labels)
    w = np.asarray(weights, dtype=np.float64)
    m, r_count = p.data.shape
    if labels.shape != (m,) or w.shape != (m,):
        raise SsfeError(
            f"loss_rc: batch mismatch probs {p.data.shape}, labels {labels.shape}, "
            f"weights {w.shape}"
        )
    onehot = np.zeros((m, r_count))
    onehot[np.arange(m), labels - 1] = 1.0
    picked = ad.tsum(p * ad.Tensor(onehot), axis=1)
    nll = ad.log(ad.clamp_min(picked, PROB_FLOOR)) * ad.Tensor(-w)
    return ad.mean(nll)


def loss_ri(h_ri):
    """Mean squared distance of each copy's feature to its per-instance mean.

    h_ri: (B, R, F) tensor, instance-major.
    """
    h = h_ri if isinstance(h_ri, ad.Tensor) else ad.Tensor(h_ri)
    if h.data.ndim != 3 or h.data.shape[1] < 2:
        raise SsfeError(f"loss_ri: expected (B, R>=2, F), got {h.data.shape}")
    b, r, f = h.data.shape
    centered = h - ad.reshape(ad.mean(h, axis=1), (b, 1, f))
    return ad.mean(ad.tsum(centered * centered, axis=2))


def loss_ssfe(l_rc, l_ri, alpha):
    if not 0.0 <= alpha <= 1.0:
        raise SsfeError(f"alpha must lie in [0,1], got {alpha}")
    wrap = lambda v: v if isinstance(v, ad.Tensor) else ad.Tensor(v)
    return wrap(l_rc) * ad.Tensor(alpha) + wrap(l_ri) * ad.Tensor(1.0 - alpha)


def _forward_losses(params, rb, alpha, rotations):
    feats = bb.extract_features(params, rb.images)
    probs = rotation_probs(bb.rotation_logits(params, feats.h_rc))
    w = rotation_weights(probs.data, rb.rotation_labels)
    l_rc = loss_rc(probs, rb.rotation_labels, w)
    b = rb.images.shape[0] // rotations
    l_ri = loss_ri(ad.reshape(feats.h_ri, (b, rotations, bb.HEAD_DIM)))
    return l_rc, l_ri, loss_ssfe(l_rc, l_ri, alpha)


def train_ssfe(dataset, cfg):
    """Mini-batch rotation-pretext training; returns (params, per-epoch log).

    Log rows carry epoch-mean losses; wall_ms is informational and excluded
    from determinism comparisons.
    """
    if len(dataset) == 0:
        raise SsfeError("train_ssfe: empty dataset")
    params = bb.init_backbone(cfg.seed, rotations=cfg.rotations)
    opt = ad.Adam(params.trainables(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    n = len(dataset)
    log = []
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        perm = rng.permutation(n)
        sums = np.zeros(3)
        batches = 0
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo : lo + cfg.batch_size]
            rb = make_rotation_batch(dataset.images[idx], cfg.rotations)
            ad.zero_grads(params.trainables())
            l_rc, l_ri, total = _forward_losses(params, rb, cfg.alpha, cfg.rotations)
            ad.backward(total)
            opt.step()
            sums += (float(l_rc.data), float(l_ri.data), float(total.data))
            batches += 1
        wall_ms = (time.perf_counter() - t0) * 1e3
        log.append(
            {
                "epoch": epoch,
                "l_rc": sums[0] / batches,
                "l_ri": sums[1] / batches,
                "l_ssfe": sums[2] / batches,
                "wall_ms": wall_ms,
            }
        )
    return params, log


def evaluate_ssfe_loss(params, dataset, cfg, batch=256):
    """Dataset-mean combined loss under fixed params (no training)."""
    n = len(dataset)
    total = 0.0
    rows = 0
    for lo in range(0, n, batch):
        rb = make_rotation_batch(dataset.images[lo : lo + batch], cfg.rotations)
        _, _, loss = _forward_losses(params, rb, cfg.alpha, cfg.rotations)
        b = rb.images.shape[0] // cfg.rotations
        total += float(loss.data) * b
        rows += b
    return total / rows


def write_training_log(log, path, columns=LOG_COLUMNS):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns))
        writer.writeheader()
        for row in log:
            writer.writerow({k: row[k] for k in columns})
    return path
