"""Partial-label fine-tuning with a row-stochastic label-confidence matrix.

The confidence matrix starts uniform over each candidate set, weights a
masked cross-entropy during fine-tuning, and is sharpened multiplicatively
from the model's own probabilities (then renormalized per row, which the
bare multiplicative update would otherwise break). Support never grows:
entries outside the candidate set stay exactly zero.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import backbone as bb
from .ssfe import PROB_FLOOR

ROW_SUM_TOL = 1e-9

PLL_LOG_COLUMNS = ("epoch", "l_pl", "mean_max_conf", "wall_ms")


class PllError(Exception):
    pass


@dataclass
class PllConfig:
    epochs: int = 50
    batch_size: int = 128
    lr: float = 1e-3
    seed: int = 0
    update_cadence: str = "epoch"  # or "step"
    update_input: str = "probs"  # Eq-literal softmax of probabilities; or "logits"

    def __post_init__(self):
        if self.update_cadence not in ("epoch", "step"):
            raise PllError(f"update_cadence must be epoch|step, got {self.update_cadence!r}")
        if self.update_input not in ("probs", "logits"):
            raise PllError(f"update_input must be probs|logits, got {self.update_input!r}")


class ConfidenceMatrix:
    """N x q row-stochastic confidences, support-restricted to candidate sets."""

    def __init__(self, c, mask):
        self.c = np.asarray(c, dtype=np.float64)
        self.mask = np.asarray(mask, dtype=bool)
        if self.c.shape != self.mask.shape:
            raise PllError(f"confidence/mask shape mismatch {self.c.shape} vs {self.mask.shape}")

    @property
    def shape(self):
        return self.c.shape

    def copy(self):
        return ConfidenceMatrix(self.c.copy(), self.mask.copy())

    def validate(self):
        if (self.c < 0).any():
            raise PllError("negative confidence entry")
        if self.c[~self.mask].any():
            raise PllError("confidence mass outside the candidate set")
        rows = self.c.sum(axis=1)
        bad = np.abs(rows - 1.0).max() if rows.size else 0.0
        if bad > ROW_SUM_TOL:
            raise PllError(f"row sums deviate from 1 by {bad:g}")
        return self


def init_confidence(candidate_masks):
    """Uniform 1/|S_i| over each candidate set S_i, zero elsewhere."""
    mask = np.asarray(candidate_masks, dtype=bool)
    sizes = mask.sum(axis=1)
    if (sizes == 0).any():
        raise PllError("empty candidate set")
    c = mask / sizes[:, None]
    return ConfidenceMatrix(c, mask)


def _softmax_rows(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _conf_rows(conf):
    return conf.c if isinstance(conf, ConfidenceMatrix) else np.asarray(conf)


def loss_pl(probs, conf):
    """Confidence-weighted negative log-likelihood over candidate entries."""
    p = probs if isinstance(probs, ad.Tensor) else ad.Tensor(probs)
    c = _conf_rows(conf)
    if p.data.shape != c.shape:
        raise PllError(f"loss_pl: probs {p.data.shape} vs confidence {c.shape}")
    weighted = ad.log(ad.clamp_min(p, PROB_FLOOR)) * ad.Tensor(-c)
    return ad.mean(ad.tsum(weighted, axis=1))


def update_confidence(conf, values):
    """Multiplicative sharpening: C ⊗ softmax(values) on the candidate support,
    then per-row renormalization. `values` follows the configured update input
    (model probabilities by default, logits in the alternate mode)."""
    values = np.asarray(values)
    if values.shape != conf.shape:
        raise PllError(f"update_confidence: values {values.shape} vs C {conf.shape}")
    sharp = conf.c * _softmax_rows(values) * conf.mask
    rows = sharp.sum(axis=1, keepdims=True)
    if (rows <= 0).any():
        raise PllError("confidence row collapsed to zero mass")
    return ConfidenceMatrix(sharp / rows, conf.mask.copy())


def finetune_pll(dataset, ssfe_params, cfg, on_epoch=None):
    """Fine-tune from pretext-trained params under the partial-label loss.

    Per epoch: mini-batch loss minimization, then (epoch cadence) one
    confidence update from full-dataset probabilities. Returns
    (pll-phase params, final ConfidenceMatrix, per-epoch log).
    """
    if len(dataset) == 0:
        raise PllError("finetune_pll: empty dataset")
    q = dataset.q
    params = bb.init_finetune(ssfe_params, q, cfg.seed)
    conf = init_confidence(dataset.candidate_sets)
    opt = ad.Adam(params.trainables(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    n = len(dataset)
    log = []
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        perm = rng.permutation(n)
        loss_sum, batches = 0.0, 0
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo : lo + cfg.batch_size]
            logits = bb.pll_logits(params, dataset.images[idx])
            probs = ad.softmax(logits)
            ad.zero_grads(params.trainables())
            loss = loss_pl(probs, conf.c[idx])
            ad.backward(loss)
            opt.step()
            loss_sum += float(loss.data)
            batches += 1
            if cfg.update_cadence == "step":
                vals = probs.data if cfg.update_input == "probs" else logits.data
                part = update_confidence(
                    ConfidenceMatrix(conf.c[idx], conf.mask[idx]), vals
                )
                conf.c[idx] = part.c
        if cfg.update_cadence == "epoch":
            logits = bb.pll_logits_ndarray(params, dataset.images)
            vals = _softmax_rows(logits) if cfg.update_input == "probs" else logits
            conf = update_confidence(conf, vals)
        conf.validate()
        log.append(
            {
                "epoch": epoch,
                "l_pl": loss_sum / batches,
                "mean_max_conf": float(conf.c.max(axis=1).mean()),
                "wall_ms": (time.perf_counter() - t0) * 1e3,
            }
        )
        if on_epoch is not None:
            on_epoch(epoch, params, conf)
    return params, conf, log


# --- checkpoint I/O ----------------------------------------------------------
# Same container conventions as datasets: magic | u32 version | u32 header_len
# | JSON header | float64 LE confidence rows | candidate bitsets (LSB-first).

_CONF_MAGIC = b"PLCM"
_CONF_VERSION = 1


def save_confidence(conf, path):
    n, q = conf.shape
    header = json.dumps({"n": int(n), "q": int(q)}, sort_keys=True).encode()
    bits = np.packbits(conf.mask, axis=1, bitorder="little")
    with open(path, "wb") as fh:
        fh.write(_CONF_MAGIC)
        fh.write(struct.pack("<II", _CONF_VERSION, len(header)))
        fh.write(header)
        fh.write(conf.c.astype("<f8").tobytes())
        fh.write(bits.tobytes())
    return path


def load_confidence(path):
    with open(path, "rb") as fh:
        if fh.read(4) != _CONF_MAGIC:
            raise PllError("bad magic (not a confidence checkpoint)")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != _CONF_VERSION:
            raise PllError(f"unsupported confidence checkpoint version {version}")
        head = json.loads(fh.read(hlen))
        n, q = head["n"], head["q"]
        buf = fh.read(8 * n * q)
        if len(buf) != 8 * n * q:
            raise PllError("truncated confidence checkpoint")
        c = np.frombuffer(buf, dtype="<f8").reshape(n, q).copy()
        nbytes = (q + 7) // 8
        bbuf = fh.read(n * nbytes)
        if len(bbuf) != n * nbytes:
            raise PllError("truncated confidence checkpoint")
        mask = np.unpackbits(
            np.frombuffer(bbuf, dtype=np.uint8).reshape(n, nbytes),
            axis=1,
            count=q,
            bitorder="little",
        ).astype(bool)
    return ConfidenceMatrix(c, mask)
