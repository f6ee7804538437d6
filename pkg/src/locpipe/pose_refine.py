"""ICP refinement of a preliminary camera pose against map geometry.

The query's dense depth is back-projected into a camera-frame cloud and
aligned to the map cloud (world frame) by trimmed point-to-point ICP with
closed-form SVD alignment steps. Nearest neighbours come from a KD-tree
built once over the static target cloud.
"""

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import AllInvalid, BadMagic, DegenerateCloud, Diverged, TruncatedFile
from .geometry import PinholeCamera, RigidPose

__all__ = [
    "PointCloud",
    "backproject_depth",
    "kabsch_align",
    "icp_refine",
    "IcpDiagnostics",
    "save_depth_raster",
    "load_depth_raster",
    "load_depth_image",
    "save_depth_image",
]

DPT_MAGIC = b"DPT1"


@dataclass
class PointCloud:
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if pts.size and not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        self.points = pts

    def __len__(self):
        return len(self.points)

    def diameter(self) -> float:
        if len(self.points) == 0:
            return 0.0
        return float(np.linalg.norm(self.points.max(axis=0) - self.points.min(axis=0)))


def backproject_depth(cam: PinholeCamera, depth, stride: int = 1) -> PointCloud:
    """Unproject valid (> 0) depth pixels into a camera-frame cloud."""
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise ValueError("depth map must be 2D")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    d = depth[::stride, ::stride]
    vv, uu = np.nonzero(d > 0.0)
    if vv.size == 0:
        raise AllInvalid("depth map has no valid pixels")
    z = d[vv, uu]
    u = uu * stride
    v = vv * stride
    x = (u - cam.cx) / cam.fx * z
    y = (v - cam.cy) / cam.fy * z
    return PointCloud(np.column_stack([x, y, z]))


def _check_conditioning(pts, label):
    if len(pts) < 3:
        raise DegenerateCloud(f"{label} cloud has fewer than 3 points")
    centered = pts - pts.mean(axis=0)
    svals = np.linalg.svd(centered, compute_uv=False)
    if svals[0] <= 0 or svals[1] < 1e-9 * svals[0]:
        raise DegenerateCloud(f"{label} cloud is collinear or coincident")


def kabsch_align(src, dst):
    """Least-squares rigid (R, t) with dst ~= R src + t; det(R) = +1."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    h = (src - cs).T @ (dst - cd)
    u, _, vt = np.linalg.svd(h)
    v = vt.T
    d = np.sign(np.linalg.det(v @ u.T))
    rot = v @ np.diag([1.0, 1.0, d]) @ u.T
    t = cd - rot @ cs
    return rot, t


@dataclass
class IcpDiagnostics:
    rms: list = field(default_factory=list)  # trimmed RMS after each update
    iterations: int = 0
    converged: bool = False
    initial_rms: float = 0.0


def icp_refine(source: PointCloud, target: PointCloud, initial: RigidPose,
               max_iters: int = 100, trim: float = 0.2, tol: float = None):
    """Trimmed point-to-point ICP.

    `source` lives in the query camera frame, `target` in the world frame,
    and `initial` is the preliminary world-to-camera pose. Each iteration
    matches the currently transformed source to its nearest target points,
    drops the worst `trim` fraction by distance, and re-fits the alignment
    in closed form. Returns (refined world-to-camera pose, diagnostics);
    the trimmed RMS sequence in the diagnostics is non-increasing.
    """
    if not 0.0 <= trim < 1.0:
        raise ValueError("trim fraction must be in [0, 1)")
    src = source.points
    tgt = target.points
    _check_conditioning(src, "source")
    _check_conditioning(tgt, "target")
    if tol is None:
        tol = 1e-6 * max(target.diameter(), 1e-12)

    tree = cKDTree(tgt)
    keep_n = max(3, int(np.ceil((1.0 - trim) * len(src))))

    rot = initial.rotation_matrix.T          # camera -> world
    t = -(rot @ initial.t)
    diag = IcpDiagnostics()

    moved = src @ rot.T + t
    dists, _ = tree.query(moved)
    kept0 = np.sort(dists)[:keep_n]
    diag.initial_rms = float(np.sqrt(np.mean(kept0 ** 2)))

    prev_rms = np.inf
    for it in range(max_iters):
        moved = src @ rot.T + t
        dists, idx = tree.query(moved)
        keep = np.argsort(dists, kind="stable")[:keep_n]
        rot, t = kabsch_align(src[keep], tgt[idx[keep]])
        after = src[keep] @ rot.T + t - tgt[idx[keep]]
        rms = float(np.sqrt(np.mean(np.sum(after ** 2, axis=1))))
        diag.rms.append(rms)
        diag.iterations = it + 1
        if rms < tol or abs(prev_rms - rms) < tol:
            diag.converged = True
            break
        prev_rms = rms

    if not diag.converged and diag.rms and diag.rms[-1] > diag.initial_rms + tol:
        raise Diverged(
            f"ICP RMS {diag.rms[-1]:.6g} above initial {diag.initial_rms:.6g} "
            f"after {max_iters} iterations"
        )
    refined = RigidPose.from_matrix(rot.T, -(rot.T @ t))  # world -> camera
    return refined, diag


# ---------------------------------------------------------------------------
# depth map files


def save_depth_raster(path, depth):
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(DPT_MAGIC)
        fh.write(struct.pack("<II", w, h))
        fh.write(depth.astype("<f4").tobytes())


def load_depth_raster(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12:
        raise TruncatedFile("file shorter than header", path=path)
    if blob[:4] != DPT_MAGIC:
        raise BadMagic(f"expected {DPT_MAGIC!r}, found {blob[:4]!r}", path=path)
    w, h = struct.unpack_from("<II", blob, 4)
    need = 12 + 4 * w * h
    if len(blob) < need:
        raise TruncatedFile(f"need {need} bytes, file has {len(blob)}", path=path)
    return np.frombuffer(blob, "<f4", w * h, 12).reshape(h, w).astype(np.float64)


def load_depth_image(path, scale: float) -> np.ndarray:
    """16-bit single-channel image times `scale` (scene units per unit)."""
    from PIL import Image

    img = Image.open(path)
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{path}: depth image must be single-channel")
    return arr * scale


def save_depth_image(path, depth, scale: float):
    from PIL import Image

    depth = np.asarray(depth, dtype=np.float64) / scale
    arr = np.clip(np.round(depth), 0, 65535).astype(np.uint16)
    Image.fromarray(arr, mode="I;16").save(path)
