"""Synthetic benchmark construction: glyph classes, OOD families, rotations.

ID instances are 16x16 grayscale glyphs (one shape family per class) with
seeded pixel noise; candidate label sets add each wrong label independently
with probability p. OOD families (checkerboard, blob, uniform-noise,
stripes-offgrid) are disjoint from every glyph family by construction.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

IMAGE_SIZE = 16
ROTATIONS = 4

MAGIC = b"PLOD"
FORMAT_VERSION = 1
OOD_LABEL = -1
_OOD_LABEL_U16 = 0xFFFF

OOD_KINDS = ("checkerboard", "blob", "uniform-noise", "stripes-offgrid")


class DatasetError(Exception):
    pass


class DatasetFormatError(DatasetError):
    """Bad magic/version/truncation while reading a dataset container."""


@dataclass
class GlyphSpec:
    """Recipe for the ID classes: one shape family per class."""

    q: int = 6
    families: tuple = ()
    sigma_pix: float = 0.05
    samples_per_class: int | None = None

    def __post_init__(self):
        if self.q < 2:
            raise DatasetError(f"GlyphSpec: q must be >= 2, got {self.q}")
        if self.sigma_pix < 0:
            raise DatasetError(f"GlyphSpec: sigma_pix must be >= 0, got {self.sigma_pix}")
        if not self.families:
            if self.q > len(_CANONICAL_FAMILIES):
                raise DatasetError(
                    f"GlyphSpec: q={self.q} needs explicit families "
                    f"(only {len(_CANONICAL_FAMILIES)} canonical ones)"
                )
            self.families = tuple(_CANONICAL_FAMILIES[: self.q])
        if len(self.families) != self.q:
            raise DatasetError(
                f"GlyphSpec: {len(self.families)} families for q={self.q} classes"
            )


@dataclass
class LabeledImageSet:
    """Images + hidden ground truth + candidate label bitsets.

    true_labels use -1 for OOD instances; OOD candidate sets are empty.
    """

    images: np.ndarray  # (N, 1, 16, 16) float64 in [0,1]
    true_labels: np.ndarray  # (N,) int
    candidate_sets: np.ndarray  # (N, q) bool
    origin: str  # id-train | id-test | ood
    seed: int
    partial_rate: float
    kind: str = ""  # glyph spec name or OOD family, informational

    def __len__(self):
        return self.images.shape[0]

    @property
    def q(self):
        return self.candidate_sets.shape[1]

    def validate(self):
        if self.images.min() < 0.0 or self.images.max() > 1.0:
            raise DatasetError("pixel values outside [0,1]")
        if self.origin == "ood":
            if self.candidate_sets.any() or (self.true_labels != OOD_LABEL).any():
                raise DatasetError("ood set must have empty candidates and sentinel labels")
        else:
            n = len(self)
            if not self.candidate_sets[np.arange(n), self.true_labels].all():
                raise DatasetError("candidate set missing the true label")
        return self


# --- glyph rasterizers -------------------------------------------------------

def _grid():
    ys, xs = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
    return ys.astype(float), xs.astype(float)


def _seg_mask(p0, p1, thickness):
    """Pixels within `thickness` of the segment p0-p1 (row, col coords)."""
    ys, xs = _grid()
    (y0, x0), (y1, x1) = p0, p1
    dy, dx = y1 - y0, x1 - x0
    denom = dy * dy + dx * dx
    t = ((ys - y0) * dy + (xs - x0) * dx) / denom
    t = np.clip(t, 0.0, 1.0)
    py, px = y0 + t * dy, x0 + t * dx
    return np.hypot(ys - py, xs - px) <= thickness


def _glyph_bar(angle_deg=35.0):
    th = np.deg2rad(angle_deg)
    cy = cx = (IMAGE_SIZE - 1) / 2
    dy, dx = -np.sin(th) * 6.0, np.cos(th) * 6.0
    return _seg_mask((cy - dy, cx - dx), (cy + dy, cx + dx), 1.2)


def _glyph_corner():
    return _seg_mask((3, 3), (12, 3), 1.1) | _seg_mask((3, 3), (3, 12), 1.1)


def _glyph_cross():
    c = (IMAGE_SIZE - 1) / 2
    return _seg_mask((2.5, c), (12.5, c), 1.1) | _seg_mask((c, 2.5), (c, 12.5), 1.1)


def _glyph_ring():
    ys, xs = _grid()
    c = (IMAGE_SIZE - 1) / 2
    r = np.hypot(ys - c, xs - c)
    return (r >= 3.6) & (r <= 5.6)


def _glyph_tee():
    return _seg_mask((3, 3), (3, 12), 1.1) | _seg_mask((3, 7.5), (12.5, 7.5), 1.1)


def _glyph_wedge():
    ys, xs = _grid()
    return (ys >= 3) & (ys <= 12) & (xs >= 3) & (xs - 3 <= ys - 3) & (xs <= 12)


_BUILDERS = {
    "bar": _glyph_bar,
    "corner": _glyph_corner,
    "cross": _glyph_cross,
    "ring": _glyph_ring,
    "tee": _glyph_tee,
    "wedge": _glyph_wedge,
}

_CANONICAL_FAMILIES = ("bar", "corner", "cross", "ring", "tee", "wedge")


def _render_family(family):
    """Render one canonical glyph; 'bar:ANGLE' selects the bar orientation."""
    name, _, arg = family.partition(":")
    if name not in _BUILDERS:
        raise DatasetError(f"unknown glyph family {family!r}")
    if arg:
        if name != "bar":
            raise DatasetError(f"family {name!r} takes no parameter")
        mask = _BUILDERS[name](float(arg))
    else:
        mask = _BUILDERS[name]()
    return mask.astype(np.float64)


# --- generation --------------------------------------------------------------

def assign_candidate_labels(true_labels, q, p, seed):
    """Candidate bitsets: the true label plus each wrong label w.p. p."""
    if not 0.0 <= p <= 1.0:
        raise DatasetError(f"partial rate p must lie in [0,1], got {p}")
    true_labels = np.asarray(true_labels)
    n = true_labels.shape[0]
    rng = np.random.default_rng(seed)
    sets = rng.random((n, q)) < p
    sets[np.arange(n), true_labels] = True
    return sets


def generate_id_dataset(spec, n, seed, p=0.1, origin="id-train"):
    """Balanced (+-1) glyph dataset; all per-instance variation is sigma_pix noise."""
    if n < spec.q:
        raise DatasetError(f"need n >= q, got n={n}, q={spec.q}")
    rng = np.random.default_rng(seed)
    prototypes = np.stack([_render_family(f) for f in spec.families])
    labels = np.arange(n) % spec.q
    images = prototypes[labels][:, None, :, :]
    if spec.sigma_pix > 0:
        images = images + rng.normal(scale=spec.sigma_pix, size=images.shape)
    images = np.clip(images, 0.0, 1.0)
    cands = assign_candidate_labels(labels, spec.q, p, seed + 1)
    return LabeledImageSet(
        images=np.ascontiguousarray(images),
        true_labels=labels.astype(np.int64),
        candidate_sets=cands,
        origin=origin,
        seed=seed,
        partial_rate=p,
        kind="glyphs",
    ).validate()


def generate_ood_dataset(kind, n, seed, q=6):
    if n < 1:
        raise DatasetError(f"need n >= 1, got {n}")
    rng = np.random.default_rng(seed)
    ys, xs = _grid()
    imgs = np.empty((n, 1, IMAGE_SIZE, IMAGE_SIZE))
    if kind == "checkerboard":
        cells = rng.choice([2, 4], size=n)
        phases = rng.integers(0, 2, size=n)
        hi = rng.uniform(0.7, 1.0, size=n)
        for i in range(n):
            board = ((ys // cells[i] + xs // cells[i]) + phases[i]) % 2
            imgs[i, 0] = board * hi[i]
    elif kind == "blob":
        cy = rng.uniform(4, 11, size=n)
        cx = rng.uniform(4, 11, size=n)
        width = rng.uniform(2.0, 4.0, size=n)
        for i in range(n):
            d2 = (ys - cy[i]) ** 2 + (xs - cx[i]) ** 2
            imgs[i, 0] = np.exp(-d2 / (2 * width[i] ** 2))
    elif kind == "uniform-noise":
        imgs = rng.random((n, 1, IMAGE_SIZE, IMAGE_SIZE))
    elif kind == "stripes-offgrid":
        theta = rng.uniform(np.deg2rad(15), np.deg2rad(75), size=n)
        freq = rng.uniform(0.25, 0.45, size=n)
        phase = rng.uniform(0, 2 * np.pi, size=n)
        for i in range(n):
            u = xs * np.cos(theta[i]) + ys * np.sin(theta[i])
            imgs[i, 0] = 0.5 + 0.5 * np.sin(2 * np.pi * freq[i] * u + phase[i])
    else:
        raise DatasetError(f"unknown OOD kind {kind!r} (known: {', '.join(OOD_KINDS)})")
    return LabeledImageSet(
        images=np.clip(imgs, 0.0, 1.0),
        true_labels=np.full(n, OOD_LABEL, dtype=np.int64),
        candidate_sets=np.zeros((n, q), dtype=bool),
        origin="ood",
        seed=seed,
        partial_rate=0.0,
        kind=kind,
    ).validate()


def rotate(image, r):
    """Exact 90-degree grid rotation (counterclockwise); r=1 is the identity."""
    image = np.asarray(image)
    if image.shape[-1] != image.shape[-2]:
        raise DatasetError(f"rotate: image must be square, got {image.shape}")
    if not 1 <= r <= ROTATIONS:
        raise DatasetError(f"rotate: r must lie in 1..{ROTATIONS}, got {r}")
    return np.rot90(image, k=r - 1, axes=(-2, -1)).copy()


# --- container I/O -----------------------------------------------------------
# Layout: "PLOD" | u32 version | u32 header_len | JSON header |
#         images float64 LE | true labels u16 LE (0xFFFF = OOD) |
#         candidate bitsets, ceil(q/8) bytes/instance, LSB-first bits.

def _header(ds):
    return {
        "n": len(ds),
        "q": int(ds.q),
        "p": float(ds.partial_rate),
        "origin": ds.origin,
        "seed": int(ds.seed),
        "kind": ds.kind,
        "shape": list(ds.images.shape),
    }


def save_dataset(ds, path):
    header = json.dumps(_header(ds), sort_keys=True).encode()
    labels_u16 = np.where(
        ds.true_labels == OOD_LABEL, _OOD_LABEL_U16, ds.true_labels
    ).astype("<u2")
    bits = np.packbits(ds.candidate_sets, axis=1, bitorder="little")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        fh.write(header)
        fh.write(ds.images.astype("<f8").tobytes())
        fh.write(labels_u16.tobytes())
        fh.write(bits.tobytes())
    return path


def _read_exact(fh, count, what):
    buf = fh.read(count)
    if len(buf) != count:
        raise DatasetFormatError(f"truncated dataset file while reading {what}")
    return buf


def _read_header(fh):
    if _read_exact(fh, 4, "magic") != MAGIC:
        raise DatasetFormatError("bad magic (not a dataset container)")
    version, hlen = struct.unpack("<II", _read_exact(fh, 8, "version/header length"))
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported container version {version}")
    try:
        return json.loads(_read_exact(fh, hlen, "header"))
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"corrupt JSON header: {exc}") from exc


def inspect_dataset(path):
    """Header-only metadata (n, q, p, origin, seed, kind, shape); skips tensors."""
    with open(path, "rb") as fh:
        return _read_header(fh)


def load_dataset(path):
    with open(path, "rb") as fh:
        head = _read_header(fh)
        n, q = head["n"], head["q"]
        shape = tuple(head["shape"])
        images = np.frombuffer(
            _read_exact(fh, 8 * int(np.prod(shape)), "images"), dtype="<f8"
        ).reshape(shape)
        labels_u16 = np.frombuffer(_read_exact(fh, 2 * n, "labels"), dtype="<u2")
        nbytes = (q + 7) // 8
        bits = np.frombuffer(_read_exact(fh, n * nbytes, "bitsets"), dtype=np.uint8)
        if fh.read(1):
            raise DatasetFormatError("trailing bytes after dataset payload")
    labels = labels_u16.astype(np.int64)
    labels[labels == _OOD_LABEL_U16] = OOD_LABEL
    cands = np.unpackbits(
        bits.reshape(n, nbytes), axis=1, count=q, bitorder="little"
    ).astype(bool)
    return LabeledImageSet(
        images=images.copy(),
        true_labels=labels,
        candidate_sets=cands,
        origin=head["origin"],
        seed=head["seed"],
        partial_rate=head["p"],
        kind=head.get("kind", ""),
    )
