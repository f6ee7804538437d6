"""Local feature sets and their binary file format.

File layout (little-endian): magic ``LFS1``, u32 N, u32 D, N records of
(f32 x, f32 y, f32 scale, f32 orientation), then the N x D f32 descriptor
block. Descriptor rows are re-normalized to unit L2 on load.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import BadMagic, NonFiniteDescriptor, TruncatedFile

__all__ = ["LocalFeatureSet", "MatchSet", "load_features", "save_features"]

MAGIC = b"LFS1"


@dataclass
class LocalFeatureSet:
    """Keypoints (x, y, scale, orientation) with unit-norm descriptors."""

    keypoints: np.ndarray
    descriptors: np.ndarray
    image_id: object = None
    variant: tuple = None  # optional (scale, orientation) pyramid tag

    def __post_init__(self):
        kps = np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 4)
        desc = np.asarray(self.descriptors, dtype=np.float64)
        if desc.ndim != 2:
            desc = desc.reshape(len(kps), -1)
        if len(kps) != len(desc):
            raise ValueError("keypoint/descriptor row counts differ")
        if desc.size:
            if not np.all(np.isfinite(desc)):
                raise NonFiniteDescriptor(f"image {self.image_id!r}: non-finite descriptor")
            norms = np.linalg.norm(desc, axis=1)
            if np.any(norms == 0):
                raise NonFiniteDescriptor(f"image {self.image_id!r}: zero-norm descriptor row")
            # only touch rows that actually deviate, so row subsetting is exact
            off = np.abs(norms - 1.0) > 1e-12
            if np.any(off):
                desc = desc.copy()
                desc[off] /= norms[off, None]
        self.keypoints = kps
        self.descriptors = desc

    def __len__(self):
        return len(self.keypoints)

    @property
    def dim(self):
        return self.descriptors.shape[1] if self.descriptors.ndim == 2 else 0

    @property
    def xy(self):
        return self.keypoints[:, :2]

    def select(self, mask) -> "LocalFeatureSet":
        """Row subset (boolean mask or index array), order preserved."""
        return LocalFeatureSet(
            keypoints=self.keypoints[mask],
            descriptors=self.descriptors[mask],
            image_id=self.image_id,
            variant=self.variant,
        )


@dataclass
class MatchSet:
    """One-to-one index pairs between two feature sets with scores in [0, 1]."""

    pairs: np.ndarray
    scores: np.ndarray
    variant: str = "BASE"
    a_id: object = None
    b_id: object = None

    def __post_init__(self):
        pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if len(pairs) != len(scores):
            raise ValueError("pair/score counts differ")
        for side in (0, 1):
            col = pairs[:, side]
            if len(np.unique(col)) != len(col):
                raise ValueError(f"matches repeat an index on side {side}")
        self.pairs = pairs
        self.scores = scores

    def __len__(self):
        return len(self.pairs)

    def mirrored(self) -> "MatchSet":
        return MatchSet(self.pairs[:, ::-1], self.scores, variant=self.variant,
                        a_id=self.b_id, b_id=self.a_id)


def save_features(path, features: LocalFeatureSet):
    n, d = len(features), features.dim
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", n, d))
        fh.write(features.keypoints.astype("<f4").tobytes())
        fh.write(features.descriptors.astype("<f4").tobytes())


def load_features(path, image_id=None) -> LocalFeatureSet:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12:
        raise TruncatedFile("file shorter than header", path=path)
    if blob[:4] != MAGIC:
        raise BadMagic(f"expected {MAGIC!r}, found {blob[:4]!r}", path=path)
    n, d = struct.unpack_from("<II", blob, 4)
    need = 12 + 4 * n * 4 + 4 * n * d
    if len(blob) < need:
        raise TruncatedFile(f"need {need} bytes, file has {len(blob)}", path=path)
    kps = np.frombuffer(blob, dtype="<f4", count=4 * n, offset=12)
    desc = np.frombuffer(blob, dtype="<f4", count=n * d, offset=12 + 16 * n)
    return LocalFeatureSet(
        keypoints=kps.reshape(n, 4).astype(np.float64),
        descriptors=desc.reshape(n, d).astype(np.float64),
        image_id=image_id if image_id is not None else str(path),
    )
