"""Pose error metrics and recall evaluation of estimated query poses."""

from dataclasses import dataclass, field

import numpy as np

from .colmap_io import read_pose_file
from .errors import NameMismatch
from .geometry import RigidPose

__all__ = ["pose_error", "EvalReport", "evaluate", "DEFAULT_THRESHOLDS"]

# (translation scene units, rotation degrees), benchmark convention
DEFAULT_THRESHOLDS = ((0.25, 2.0), (0.5, 5.0), (5.0, 10.0))


def pose_error(estimate: RigidPose, truth: RigidPose):
    """(rotation error degrees, camera-center distance in scene units)."""
    r_rel = estimate.rotation_matrix @ truth.rotation_matrix.T
    cos_angle = 0.5 * (np.trace(r_rel) - 1.0)
    rot_deg = float(np.degrees(np.arccos(np.clip(cos_angle, -1.0, 1.0))))
    trans = float(np.linalg.norm(estimate.center - truth.center))
    return rot_deg, trans


@dataclass
class EvalReport:
    """Per-query errors, recalls at (translation, rotation) thresholds,
    and per-stage timing."""

    errors: dict                      # name -> (rot deg, trans units)
    recalls: list                     # ((t_thr, r_thr), recall) pairs
    thresholds: tuple
    timings: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def recall_at(self, t_thr, r_thr):
        for (tt, rr), recall in self.recalls:
            if tt == t_thr and rr == r_thr:
                return recall
        raise KeyError((t_thr, r_thr))

    def to_text(self):
        lines = []
        for name in sorted(self.errors):
            rot, trans = self.errors[name]
            lines.append(f"{name} rot_deg {rot:.6g} trans {trans:.6g}")
        for (tt, rr), recall in self.recalls:
            lines.append(f"recall ({tt:.6g} units, {rr:.6g} deg): {recall:.4f}")
        for stage, secs in self.timings.items():
            lines.append(f"time {stage}: {secs:.3f}s")
        for warning in self.warnings:
            lines.append(f"warning: {warning}")
        return "\n".join(lines) + "\n"


def evaluate(estimates, truths, thresholds=DEFAULT_THRESHOLDS,
             translation_scale: float = 1.0) -> EvalReport:
    """Compare estimated poses to ground truth by query name.

    `estimates`/`truths` are {name: RigidPose} dicts or pose-file paths.
    Translation thresholds are multiplied by `translation_scale` (used to
    adapt the benchmark thresholds to a synthetic scene's size). Raises
    NameMismatch when the name sets differ.
    """
    if not isinstance(estimates, dict):
        estimates = read_pose_file(estimates)
    if not isinstance(truths, dict):
        truths = read_pose_file(truths)
    missing = sorted(set(truths) - set(estimates))
    if missing:
        raise NameMismatch(f"query {missing[0]!r} missing from estimates")
    extra = sorted(set(estimates) - set(truths))
    if extra:
        raise NameMismatch(f"query {extra[0]!r} has no ground truth")

    errors = {name: pose_error(estimates[name], truths[name]) for name in truths}
    scaled = [(t * translation_scale, r) for t, r in thresholds]
    recalls = []
    n = max(1, len(errors))
    for t_thr, r_thr in scaled:
        hits = sum(1 for rot, trans in errors.values()
                   if trans <= t_thr and rot <= r_thr)
        recalls.append(((t_thr, r_thr), hits / n))
    return EvalReport(errors=errors, recalls=recalls, thresholds=tuple(scaled))
