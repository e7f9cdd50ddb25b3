"""Small convolutional backbone with two projection heads.

Architecture: conv 1->8 (3x3) + relu + 2x2 pool, conv 8->16 + relu + pool,
flatten to 256, then two 32-dim heads. The rotation-discriminative head
feeds a rotation classifier during pretext training; both heads concatenate
into a 64-dim feature that feeds the label classifier after fine-tuning.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .datagen import IMAGE_SIZE, ROTATIONS

FLAT_DIM = 16 * (IMAGE_SIZE // 4) * (IMAGE_SIZE // 4)  # 256
HEAD_DIM = 32

PHASE_SSFE = "ssfe"
PHASE_PLL = "pll"

_CKPT_MAGIC = b"PLBK"
_CKPT_VERSION = 1


class BackboneError(Exception):
    pass


class PhaseError(BackboneError):
    """Operation invoked on a parameter bundle in the wrong training phase."""


@dataclass
class FeaturePair:
    """Per-instance features: rotation-discriminative, rotation-invariant,
    and their concatenation (h_ssfe[:, :32] == h_rc, h_ssfe[:, 32:] == h_ri)."""

    h_rc: ad.Tensor
    h_ri: ad.Tensor
    h_ssfe: ad.Tensor


class BackboneParams:
    """Named parameter tensors plus a phase tag.

    Phase "ssfe" carries the rotation classifier and no label classifier;
    phase "pll" carries the label classifier and drops the rotation one.
    """

    def __init__(self, tensors, phase, seed, rotations=ROTATIONS, q=None):
        self.tensors = dict(tensors)
        self.phase = phase
        self.seed = seed
        self.rotations = rotations
        self.q = q
        self._check()

    def _check(self):
        if self.phase not in (PHASE_SSFE, PHASE_PLL):
            raise BackboneError(f"unknown phase {self.phase!r}")
        if self.phase == PHASE_SSFE and "cls_w" in self.tensors:
            raise BackboneError("ssfe-phase params must not carry a label classifier")
        if self.phase == PHASE_PLL and "rot_w" in self.tensors:
            raise BackboneError("pll-phase params must not carry a rotation classifier")
        for name, t in self.tensors.items():
            if not np.isfinite(t.data).all():
                raise BackboneError(f"non-finite parameter tensor {name!r}")

    def trainables(self):
        return list(self.tensors.values())

    def checksum(self):
        import hashlib

        h = hashlib.sha256()
        for name in sorted(self.tensors):
            h.update(name.encode())
            h.update(self.tensors[name].data.astype("<f8").tobytes())
        return h.hexdigest()


def _he_uniform(rng, shape, fan_in):
    a = np.sqrt(6.0 / fan_in)
    return rng.uniform(-a, a, size=shape)


def init_backbone(seed, rotations=ROTATIONS):
    """Fresh ssfe-phase parameters (He-uniform weights, zero biases)."""
    rng = np.random.default_rng(seed)
    t = {
        "conv1_w": _he_uniform(rng, (8, 1, 3, 3), 9),
        "conv1_b": np.zeros(8),
        "conv2_w": _he_uniform(rng, (16, 8, 3, 3), 72),
        "conv2_b": np.zeros(16),
        "head_rc_w": _he_uniform(rng, (FLAT_DIM, HEAD_DIM), FLAT_DIM),
        "head_rc_b": np.zeros(HEAD_DIM),
        "head_ri_w": _he_uniform(rng, (FLAT_DIM, HEAD_DIM), FLAT_DIM),
        "head_ri_b": np.zeros(HEAD_DIM),
        "rot_w": _he_uniform(rng, (HEAD_DIM, rotations), HEAD_DIM),
        "rot_b": np.zeros(rotations),
    }
    tensors = {k: ad.Tensor(v) for k, v in t.items()}
    return BackboneParams(tensors, PHASE_SSFE, seed, rotations=rotations)


def init_finetune(params, q, seed):
    """Copy the extractor and both heads; attach a fresh label classifier.

    The rotation classifier is dropped (not fine-tuned); the new classifier
    is uniform in [-0.05, 0.05], seeded.
    """
    if params.phase != PHASE_SSFE:
        raise PhaseError(f"init_finetune needs ssfe-phase params, got {params.phase!r}")
    rng = np.random.default_rng(seed)
    tensors = {
        name: ad.Tensor(t.data.copy())
        for name, t in params.tensors.items()
        if not name.startswith("rot_")
    }
    tensors["cls_w"] = ad.Tensor(rng.uniform(-0.05, 0.05, size=(2 * HEAD_DIM, q)))
    tensors["cls_b"] = ad.Tensor(rng.uniform(-0.05, 0.05, size=(q,)))
    return BackboneParams(tensors, PHASE_PLL, seed, rotations=params.rotations, q=q)


def _as_image_tensor(images):
    x = images if isinstance(images, ad.Tensor) else ad.Tensor(images)
    if x.data.ndim != 4 or x.data.shape[1:] != (1, IMAGE_SIZE, IMAGE_SIZE):
        raise BackboneError(
            f"expected images (B,1,{IMAGE_SIZE},{IMAGE_SIZE}), got {x.data.shape}"
        )
    return x


def extract_features(params, images):
    """Shared conv stack + the two projection heads."""
    x = _as_image_tensor(images)
    t = params.tensors
    b = x.data.shape[0]

    def bias4(name, ch):
        return ad.reshape(t[name], (1, ch, 1, 1))

    h = ad.maxpool2(ad.relu(ad.conv2d(x, t["conv1_w"]) + bias4("conv1_b", 8)))
    h = ad.maxpool2(ad.relu(ad.conv2d(h, t["conv2_w"]) + bias4("conv2_b", 16)))
    flat = ad.reshape(h, (b, FLAT_DIM))
    h_rc = ad.relu(flat @ t["head_rc_w"] + t["head_rc_b"])
    h_ri = ad.relu(flat @ t["head_ri_w"] + t["head_ri_b"])
    return FeaturePair(h_rc=h_rc, h_ri=h_ri, h_ssfe=ad.concat([h_rc, h_ri], axis=1))


def rotation_logits(params, h_rc):
    """Affine rotation-classifier logits (no activation)."""
    if params.phase != PHASE_SSFE:
        raise PhaseError(f"rotation_logits needs ssfe-phase params, got {params.phase!r}")
    h = h_rc if isinstance(h_rc, ad.Tensor) else ad.Tensor(h_rc)
    return h @ params.tensors["rot_w"] + params.tensors["rot_b"]


def pll_logits(params, images):
    """Label-space logits from the concatenated 64-dim feature."""
    if params.phase != PHASE_PLL:
        raise PhaseError(f"pll_logits needs pll-phase params, got {params.phase!r}")
    feats = extract_features(params, images)
    return feats.h_ssfe @ params.tensors["cls_w"] + params.tensors["cls_b"]


def pll_logits_ndarray(params, images, batch=512):
    """Inference-only logits as a plain array (chunked, no tape kept)."""
    images = np.asarray(images)
    outs = []
    for lo in range(0, images.shape[0], batch):
        outs.append(pll_logits(params, images[lo : lo + batch]).data)
    return np.concatenate(outs, axis=0)


# --- checkpoint I/O ----------------------------------------------------------
# Layout: "PLBK" | u32 version | u32 header_len | JSON header (tensor order,
#         shapes, phase, seed) | concatenated float64 LE tensor payloads.

def save_params(params, path):
    order = sorted(params.tensors)
    header = json.dumps(
        {
            "phase": params.phase,
            "seed": params.seed,
            "rotations": params.rotations,
            "q": params.q,
            "tensors": [[n, list(params.tensors[n].data.shape)] for n in order],
        },
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(header)))
        fh.write(header)
        for n in order:
            fh.write(params.tensors[n].data.astype("<f8").tobytes())
    return path


def load_params(path):
    with open(path, "rb") as fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise BackboneError("bad magic (not a parameter checkpoint)")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != _CKPT_VERSION:
            raise BackboneError(f"unsupported checkpoint version {version}")
        head = json.loads(fh.read(hlen))
        tensors = {}
        for name, shape in head["tensors"]:
            count = int(np.prod(shape))
            buf = fh.read(8 * count)
            if len(buf) != 8 * count:
                raise BackboneError(f"truncated checkpoint while reading {name!r}")
            tensors[name] = ad.Tensor(
                np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
            )
        if fh.read(1):
            raise BackboneError("trailing bytes after checkpoint payload")
    return BackboneParams(
        tensors, head["phase"], head["seed"], rotations=head["rotations"], q=head["q"]
    )
