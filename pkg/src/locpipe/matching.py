"""Pairwise descriptor matching and the guided pyramid fallback.

The base matcher is mutual nearest neighbour with a Lowe ratio test over
unit-norm descriptors; any callable with the same signature can stand in
for it. When a pair matches weakly, re-matching across ingested pyramid
variants (per-scale/orientation feature files) either unions the results
(ALL) or keeps the strongest variant (MAX).

ALL-mode unions require variants to share the keypoint index space of the
base sets (descriptors re-extracted for the same keypoints), which is how
variant files are produced here.
"""

import numpy as np

from . import _accel
from .errors import DimensionMismatch
from .features import LocalFeatureSet, MatchSet

__all__ = ["match_descriptors", "guided_pyramid_match", "dedup_one_to_one"]

DEFAULT_RATIO = 0.85
PYRAMID_THRESHOLD = 100


def match_descriptors(a: LocalFeatureSet, b: LocalFeatureSet,
                      ratio: float = DEFAULT_RATIO) -> MatchSet:
    """Mutual-NN matches passing the ratio test; one-to-one by construction."""
    if a.dim != b.dim and len(a) and len(b):
        raise DimensionMismatch(f"descriptor dims differ: {a.dim} vs {b.dim}")
    if len(a) == 0 or len(b) == 0:
        return MatchSet(np.empty((0, 2), np.int64), np.empty(0), "BASE",
                        a_id=a.image_id, b_id=b.image_id)
    sim = a.descriptors @ b.descriptors.T
    pairs, scores = _accel.mutual_nn_ratio(sim, float(ratio))
    return MatchSet(pairs, scores, "BASE", a_id=a.image_id, b_id=b.image_id)


def dedup_one_to_one(pairs, scores):
    """Resolve index conflicts keeping the higher score; ties prefer the
    lexicographically smaller (a, b) pair. Exact duplicates collapse first."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(pairs) == 0:
        return pairs, scores
    # collapse exact duplicate pairs to their best score
    best = {}
    for (ia, ib), s in zip(pairs, scores):
        key = (int(ia), int(ib))
        if key not in best or s > best[key]:
            best[key] = float(s)
    items = sorted(best.items(), key=lambda kv: (-kv[1], kv[0][0], kv[0][1]))
    used_a, used_b = set(), set()
    out_pairs, out_scores = [], []
    for (ia, ib), s in items:
        if ia in used_a or ib in used_b:
            continue
        used_a.add(ia)
        used_b.add(ib)
        out_pairs.append((ia, ib))
        out_scores.append(s)
    order = np.lexsort((np.array([p[1] for p in out_pairs]),
                        np.array([p[0] for p in out_pairs])))
    out_pairs = np.array(out_pairs, dtype=np.int64)[order]
    out_scores = np.array(out_scores, dtype=np.float64)[order]
    return out_pairs, out_scores


def _resolve(provider, image_id, scale, orientation):
    if callable(provider):
        return provider(image_id, scale, orientation)
    return provider[(image_id, scale, orientation)]


def guided_pyramid_match(a: LocalFeatureSet, b: LocalFeatureSet,
                         variants, provider, mode: str = "MAX",
                         threshold: int = PYRAMID_THRESHOLD,
                         ratio: float = DEFAULT_RATIO,
                         matcher=match_descriptors,
                         base: MatchSet = None) -> MatchSet:
    """Base matching with pyramid fallback for weakly matched pairs.

    When the base match count reaches `threshold` the base result is
    returned untouched. Otherwise every (scale, orientation) variant pair
    from `provider` is matched as well; MAX keeps the candidate with the
    most matches (base included), ALL unions all candidates under the
    one-to-one constraint.
    """
    if mode not in ("ALL", "MAX"):
        raise ValueError(f"mode must be ALL or MAX, got {mode!r}")
    if base is None:
        base = matcher(a, b, ratio)
    if len(base) >= threshold or not variants:
        return base
    candidates = [base]
    for scale, orientation in variants:
        av = _resolve(provider, a.image_id, scale, orientation)
        bv = _resolve(provider, b.image_id, scale, orientation)
        candidates.append(matcher(av, bv, ratio))
    if mode == "MAX":
        counts = [len(m) for m in candidates]
        winner = candidates[int(np.argmax(counts))]
        return MatchSet(winner.pairs, winner.scores, "MAX",
                        a_id=a.image_id, b_id=b.image_id)
    all_pairs = np.vstack([m.pairs for m in candidates])
    all_scores = np.concatenate([m.scores for m in candidates])
    pairs, scores = dedup_one_to_one(all_pairs, all_scores)
    return MatchSet(pairs, scores, "ALL", a_id=a.image_id, b_id=b.image_id)
