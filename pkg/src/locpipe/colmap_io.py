"""COLMAP text model IO and the pose submission line format.

Reads/writes cameras.txt, images.txt and points3D.txt with the public
field ordering. Floats are printed with 17 significant digits so a
load(save(m)) round trip is exact. Only camera models that map onto a
pinhole + (k1, k2, p1, p2) distortion are supported.

Pose files use one line per query: `name qw qx qy qz tx ty tz`.
"""

import os

import numpy as np

from .errors import ParseError, UnsupportedCameraModel
from .geometry import PinholeCamera, RigidPose
from .scene import MapPoint, RegisteredImage, SparseMap

__all__ = [
    "load_colmap_text",
    "camera_from_params",
    "save_colmap_text",
    "read_pose_file",
    "write_pose_file",
]

_F = "{:.17g}".format


def _content_lines(path):
    """Yields (line number, stripped text) skipping comments and blanks...

    except that images.txt needs blank observation lines, so blanks are
    yielded too (empty string) and the caller decides.
    """
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.strip()
            if text.startswith("#"):
                continue
            yield lineno, text


def _floats(parts, path, lineno, what):
    try:
        return [float(p) for p in parts]
    except ValueError:
        raise ParseError(f"malformed {what}", path=path, line=lineno) from None


def camera_from_params(model, width, height, params, path, lineno):
    model = model.upper()
    if model == "SIMPLE_PINHOLE":
        if len(params) != 3:
            raise ParseError("SIMPLE_PINHOLE expects 3 params", path=path, line=lineno)
        f, cx, cy = params
        return PinholeCamera(f, f, cx, cy, width, height)
    if model == "PINHOLE":
        if len(params) != 4:
            raise ParseError("PINHOLE expects 4 params", path=path, line=lineno)
        fx, fy, cx, cy = params
        return PinholeCamera(fx, fy, cx, cy, width, height)
    if model == "SIMPLE_RADIAL":
        if len(params) != 4:
            raise ParseError("SIMPLE_RADIAL expects 4 params", path=path, line=lineno)
        f, cx, cy, k = params
        return PinholeCamera(f, f, cx, cy, width, height, distortion=[k, 0, 0, 0])
    if model == "RADIAL":
        if len(params) != 5:
            raise ParseError("RADIAL expects 5 params", path=path, line=lineno)
        f, cx, cy, k1, k2 = params
        return PinholeCamera(f, f, cx, cy, width, height, distortion=[k1, k2, 0, 0])
    if model == "OPENCV":
        if len(params) != 8:
            raise ParseError("OPENCV expects 8 params", path=path, line=lineno)
        fx, fy, cx, cy, k1, k2, p1, p2 = params
        return PinholeCamera(fx, fy, cx, cy, width, height,
                             distortion=[k1, k2, p1, p2])
    raise UnsupportedCameraModel(f"{path}:{lineno}: camera model {model!r}")


def _read_cameras(path):
    cameras = {}
    for lineno, text in _content_lines(path):
        if not text:
            continue
        parts = text.split()
        if len(parts) < 4:
            raise ParseError("camera line needs id, model, width, height",
                             path=path, line=lineno)
        try:
            cam_id = int(parts[0])
            width = int(parts[2])
            height = int(parts[3])
        except ValueError:
            raise ParseError("malformed camera id/size", path=path, line=lineno) from None
        params = _floats(parts[4:], path, lineno, "camera parameters")
        cameras[cam_id] = camera_from_params(parts[1], width, height, params,
                                              path, lineno)
    return cameras


def _read_images(path):
    images = {}
    pending = None  # (lineno, header fields) awaiting its observation line
    for lineno, text in _content_lines(path):
        if pending is None:
            if not text:
                continue
            parts = text.split()
            if len(parts) < 10:
                raise ParseError("image header needs 10 fields", path=path, line=lineno)
            try:
                image_id = int(parts[0])
                camera_id = int(parts[8])
            except ValueError:
                raise ParseError("malformed image/camera id", path=path, line=lineno) from None
            qt = _floats(parts[1:8], path, lineno, "quaternion/translation")
            quat = np.array(qt[:4])
            if abs(np.linalg.norm(quat) - 1.0) > 1e-6:
                raise ParseError("quaternion is not unit norm", path=path, line=lineno)
            pose = RigidPose(quat, np.array(qt[4:7]))
            pending = (image_id, pose, camera_id, " ".join(parts[9:]))
        else:
            image_id, pose, camera_id, name = pending
            pending = None
            parts = text.split() if text else []
            if len(parts) % 3 != 0:
                raise ParseError("observations must be (x, y, point id) triplets",
                                 path=path, line=lineno)
            xy = []
            observed = {}
            for k in range(0, len(parts), 3):
                x, y = _floats(parts[k:k + 2], path, lineno, "keypoint coordinate")
                try:
                    pid = int(parts[k + 2])
                except ValueError:
                    raise ParseError("malformed point id", path=path, line=lineno) from None
                idx = k // 3
                xy.append([x, y])
                if pid != -1:
                    observed[idx] = pid
            images[image_id] = RegisteredImage(
                id=image_id, name=name, camera_id=camera_id, pose=pose,
                observed_points=observed,
                keypoints2d=np.array(xy) if xy else np.empty((0, 2)),
            )
    if pending is not None:
        raise ParseError("image header without observation line", path=path,
                         line=lineno)
    return images


def _read_points(path):
    points = {}
    for lineno, text in _content_lines(path):
        if not text:
            continue
        parts = text.split()
        if len(parts) < 8 or (len(parts) - 8) % 2 != 0:
            raise ParseError("point line needs id, xyz, rgb, error, track pairs",
                             path=path, line=lineno)
        try:
            pid = int(parts[0])
            rgb = tuple(int(c) for c in parts[4:7])
        except ValueError:
            raise ParseError("malformed point id/rgb", path=path, line=lineno) from None
        xyz = _floats(parts[1:4], path, lineno, "point position")
        error = _floats(parts[7:8], path, lineno, "point error")[0]
        track = []
        for k in range(8, len(parts), 2):
            try:
                track.append((int(parts[k]), int(parts[k + 1])))
            except ValueError:
                raise ParseError("malformed track entry", path=path, line=lineno) from None
        points[pid] = MapPoint(position=np.array(xyz), track=track, rgb=rgb,
                               error=error)
    return points


def load_colmap_text(directory) -> SparseMap:
    """Load a COLMAP text model (cameras.txt, images.txt, points3D.txt)."""
    cameras = _read_cameras(os.path.join(directory, "cameras.txt"))
    images = _read_images(os.path.join(directory, "images.txt"))
    points = _read_points(os.path.join(directory, "points3D.txt"))
    return SparseMap(cameras, images, points)


def _camera_line(cam_id, cam: PinholeCamera):
    if cam.has_distortion:
        params = [cam.fx, cam.fy, cam.cx, cam.cy, *cam.distortion]
        model = "OPENCV"
    else:
        params = [cam.fx, cam.fy, cam.cx, cam.cy]
        model = "PINHOLE"
    return f"{cam_id} {model} {cam.width} {cam.height} " + \
        " ".join(_F(p) for p in params)


def save_colmap_text(sparse_map: SparseMap, directory):
    """Write the map as a COLMAP text model (creates the directory)."""
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "cameras.txt"), "w") as fh:
        fh.write("# Camera list with one line of data per camera:\n")
        fh.write("#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n")
        for cam_id in sorted(sparse_map.cameras):
            fh.write(_camera_line(cam_id, sparse_map.cameras[cam_id]) + "\n")

    with open(os.path.join(directory, "images.txt"), "w") as fh:
        fh.write("# Image list with two lines of data per image:\n")
        fh.write("#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n")
        fh.write("#   POINTS2D[] as (X, Y, POINT3D_ID)\n")
        for image_id in sorted(sparse_map.images):
            img = sparse_map.images[image_id]
            q, t = img.pose.quat, img.pose.t
            head = [str(image_id)] + [_F(v) for v in (*q, *t)]
            head += [str(img.camera_id), img.name]
            fh.write(" ".join(head) + "\n")
            obs = []
            kps = img.keypoints2d if img.keypoints2d is not None else np.empty((0, 2))
            for idx in range(len(kps)):
                pid = img.observed_points.get(idx, -1)
                obs += [_F(kps[idx, 0]), _F(kps[idx, 1]), str(pid)]
            fh.write(" ".join(obs) + "\n")

    with open(os.path.join(directory, "points3D.txt"), "w") as fh:
        fh.write("# 3D point list with one line of data per point:\n")
        fh.write("#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n")
        for pid in sorted(sparse_map.points):
            pt = sparse_map.points[pid]
            parts = [str(pid)] + [_F(v) for v in pt.position]
            parts += [str(int(c)) for c in pt.rgb] + [_F(pt.error)]
            for image_id, kp_idx in pt.track:
                parts += [str(image_id), str(kp_idx)]
            fh.write(" ".join(parts) + "\n")


def write_pose_file(path, poses: dict):
    """Write `name qw qx qy qz tx ty tz` lines, sorted by name."""
    with open(path, "w") as fh:
        for name in sorted(poses):
            pose = poses[name]
            vals = " ".join(_F(v) for v in (*pose.quat, *pose.t))
            fh.write(f"{name} {vals}\n")


def read_pose_file(path) -> dict:
    """Parse a submission-format pose file into {name: RigidPose}."""
    poses = {}
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            if len(parts) != 8:
                raise ParseError("pose line needs name + 7 values", path=path,
                                 line=lineno)
            vals = _floats(parts[1:], path, lineno, "pose values")
            poses[parts[0]] = RigidPose(np.array(vals[:4]), np.array(vals[4:]))
    return poses
