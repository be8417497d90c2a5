"""Dataset loading and bit-exact artifact persistence.

Artifact container layout: 8-byte magic "TDAENS01", 4-byte little-endian
header length, UTF-8 JSON header, float64 little-endian payload. Every
artifact embeds the config digest of whatever produced it.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import CorruptionError, FormatError, MigrationError
from .rng import keyed_generator

__all__ = [
    "Dataset",
    "load_mnist_idx",
    "gen_synthetic_classification",
    "gen_synthetic_sequences",
    "write_idx_images",
    "write_idx_labels",
    "save_artifact",
    "load_artifact",
    "ArtifactFile",
    "config_digest",
]

MAGIC = b"TDAENS01"
FORMAT_VERSION = 1

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    """Either a classification set (features + integer labels) or a
    sequence set (token matrices + aligned next-token targets)."""

    kind: str  # "classification" | "sequence"
    inputs: np.ndarray   # (n, dim) float64 or (n, T) int64
    targets: np.ndarray  # (n,) int64 or (n, T) int64
    n_classes: int       # class count or vocabulary size

    def __post_init__(self):
        if self.n == 0:
            raise ValueError("dataset must be non-empty")
        if self.targets.min() < 0 or self.targets.max() >= self.n_classes:
            raise ValueError("targets out of range")

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    def take(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.kind, self.inputs[idx], self.targets[idx], self.n_classes)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.kind.encode())
        h.update(str(self.n_classes).encode())
        h.update(np.ascontiguousarray(self.inputs).tobytes())
        h.update(np.ascontiguousarray(self.targets).tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# MNIST IDX


def _read_u32_be(buf: bytes, offset: int, path: str) -> int:
    if offset + 4 > len(buf):
        raise FormatError(f"{path}: truncated at byte {offset}")
    return struct.unpack_from(">I", buf, offset)[0]


def load_mnist_idx(images_path: str | Path, labels_path: str | Path,
                   limit: Optional[int] = None) -> Dataset:
    """Parse an IDX image/label pair into a classification dataset.

    Big-endian magics 0x00000803 / 0x00000801; pixels are scaled to
    [0, 1]; `limit` keeps a deterministic prefix.
    """
    images_path, labels_path = str(images_path), str(labels_path)
    img = Path(images_path).read_bytes()
    magic = _read_u32_be(img, 0, images_path)
    if magic != IDX_IMAGE_MAGIC:
        raise FormatError(
            f"{images_path}: bad image magic 0x{magic:08x} at byte 0, "
            f"expected 0x{IDX_IMAGE_MAGIC:08x}"
        )
    count = _read_u32_be(img, 4, images_path)
    rows = _read_u32_be(img, 8, images_path)
    cols = _read_u32_be(img, 12, images_path)
    need = 16 + count * rows * cols
    if len(img) < need:
        raise FormatError(f"{images_path}: truncated at byte {len(img)}, need {need}")
    pixels = np.frombuffer(img, dtype=np.uint8, count=count * rows * cols, offset=16)

    lab = Path(labels_path).read_bytes()
    magic = _read_u32_be(lab, 0, labels_path)
    if magic != IDX_LABEL_MAGIC:
        raise FormatError(
            f"{labels_path}: bad label magic 0x{magic:08x} at byte 0, "
            f"expected 0x{IDX_LABEL_MAGIC:08x}"
        )
    lab_count = _read_u32_be(lab, 4, labels_path)
    if lab_count != count:
        raise FormatError(f"{labels_path}: {lab_count} labels for {count} images")
    if len(lab) < 8 + count:
        raise FormatError(f"{labels_path}: truncated at byte {len(lab)}")
    labels = np.frombuffer(lab, dtype=np.uint8, count=count, offset=8)

    if limit is not None:
        count = min(limit, count)
    features = pixels.reshape(-1, rows * cols)[:count].astype(np.float64) / 255.0
    return Dataset("classification", features, labels[:count].astype(np.int64),
                   n_classes=10)


def write_idx_images(path: str | Path, images: np.ndarray) -> None:
    """Inverse of the image side of load_mnist_idx; images are (n, rows, cols)
    uint8."""
    n, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols))
        f.write(np.ascontiguousarray(images, dtype=np.uint8).tobytes())


def write_idx_labels(path: str | Path, labels: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, labels.size))
        f.write(np.ascontiguousarray(labels, dtype=np.uint8).tobytes())


# ---------------------------------------------------------------------------
# synthetic generators


def gen_synthetic_classification(n: int, dim: int, classes: int, separation: float,
                                 label_noise: float, seed: int,
                                 center_seed: Optional[int] = None) -> Dataset:
    """Gaussian class blobs; labels flipped with probability label_noise.

    Centers are keyed by center_seed (default: seed), samples by seed, so
    train/test pairs can share one distribution while drawing disjoint
    points.
    """
    if separation < 0:
        raise ValueError("separation must be non-negative")
    if not 0.0 <= label_noise < 1.0:
        raise ValueError("label_noise must be in [0, 1)")
    center_rng = keyed_generator(seed if center_seed is None else center_seed,
                                 "synth_cls_centers")
    centers = center_rng.normal(size=(classes, dim))
    centers *= separation / max(np.linalg.norm(centers, axis=1).mean(), 1e-12)
    rng = keyed_generator(seed, "synth_cls")
    labels = rng.integers(0, classes, size=n)
    features = centers[labels] + rng.normal(size=(n, dim))
    if label_noise > 0.0:
        flip = rng.random(n) < label_noise
        noise_labels = rng.integers(0, classes, size=n)
        labels = np.where(flip, noise_labels, labels)
    return Dataset("classification", features, labels.astype(np.int64), classes)


def gen_synthetic_sequences(n: int, vocab: int, context_len: int,
                            generator: str, seed: int, order: int = 1,
                            chain_seed: Optional[int] = None) -> Dataset:
    """Token sequences with aligned next-token targets.

    "markov": a transition table keyed by chain_seed (default: seed)
    drives each sequence; samples are keyed by seed so train/test pairs
    share the chain. "copy": targets repeat the previous input token
    (position 0 repeats itself).
    """
    if vocab < 2:
        raise ValueError("vocab must be >= 2")
    rng = keyed_generator(seed, "synth_seq", generator)
    if generator == "copy":
        tokens = rng.integers(0, vocab, size=(n, context_len))
        targets = np.concatenate([tokens[:, :1], tokens[:, :-1]], axis=1)
        return Dataset("sequence", tokens.astype(np.int64),
                       targets.astype(np.int64), vocab)
    if generator != "markov":
        raise ValueError(f"unknown sequence generator {generator!r}")
    if order < 1:
        raise ValueError("markov order must be >= 1")
    # Dirichlet(0.3) rows make transitions concentrated enough to learn.
    n_states = vocab ** order
    chain_rng = keyed_generator(seed if chain_seed is None else chain_seed,
                                "synth_seq_chain")
    trans = chain_rng.dirichlet(np.full(vocab, 0.3), size=n_states)
    full = rng.random(size=(n, context_len + 1))
    tokens = np.zeros((n, context_len + 1), dtype=np.int64)
    tokens[:, :order] = rng.integers(0, vocab, size=(n, order))
    cdf = np.cumsum(trans, axis=1)
    for t in range(order, context_len + 1):
        state = np.zeros(n, dtype=np.int64)
        for k in range(order):
            state = state * vocab + tokens[:, t - order + k]
        drawn = (full[:, t, None] >= cdf[state]).sum(axis=1)
        tokens[:, t] = np.minimum(drawn, vocab - 1)
    return Dataset("sequence", tokens[:, :-1], tokens[:, 1:], vocab)


# ---------------------------------------------------------------------------
# artifact container


@dataclass(frozen=True)
class ArtifactFile:
    kind: str
    header: dict
    payload: np.ndarray  # flat float64


def config_digest(obj) -> str:
    """Stable digest of a JSON-serializable config description."""
    return hashlib.sha256(
        json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()


def save_artifact(path: str | Path, kind: str, header: dict,
                  payload: np.ndarray) -> None:
    """Write container atomically (temp file + rename); the header gains
    kind/format_version/payload_len bookkeeping fields."""
    payload = np.ascontiguousarray(payload, dtype="<f8").reshape(-1)
    full_header = dict(header)
    full_header["kind"] = kind
    full_header["format_version"] = FORMAT_VERSION
    full_header["payload_len"] = int(payload.size)
    blob = json.dumps(full_header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(payload.tobytes())
    os.replace(tmp, path)


def load_artifact(path: str | Path, expect_kind: Optional[str] = None,
                  expect_digest: Optional[str] = None) -> ArtifactFile:
    path = str(path)
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 4:
        raise FormatError(f"{path}: truncated at byte {len(raw)}")
    if raw[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic at byte 0")
    header_len = struct.unpack_from("<I", raw, len(MAGIC))[0]
    start = len(MAGIC) + 4
    if len(raw) < start + header_len:
        raise CorruptionError(f"{path}: header truncated at byte {len(raw)}")
    try:
        header = json.loads(raw[start : start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"{path}: unreadable header: {exc}") from exc
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise MigrationError(
            f"{path}: format version {version!r} not supported (have {FORMAT_VERSION})"
        )
    payload_len = int(header["payload_len"])
    body = raw[start + header_len :]
    if len(body) != payload_len * 8:
        raise CorruptionError(
            f"{path}: payload is {len(body)} bytes, header says {payload_len * 8}"
        )
    payload = np.frombuffer(body, dtype="<f8").astype(np.float64)
    kind = header.get("kind", "")
    if expect_kind is not None and kind != expect_kind:
        raise FormatError(f"{path}: artifact kind {kind!r}, expected {expect_kind!r}")
    if expect_digest is not None and header.get("config_digest") != expect_digest:
        raise FormatError(f"{path}: config digest mismatch")
    return ArtifactFile(kind=kind, header=header, payload=payload)
