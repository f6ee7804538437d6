import numpy as np
import pytest

from locpipe.errors import BadMagic, DimensionMismatch, NonFiniteDescriptor, TruncatedFile
from locpipe.features import LocalFeatureSet, MatchSet, load_features, save_features
from locpipe.matching import dedup_one_to_one, guided_pyramid_match, match_descriptors


def fset(descs, xy=None, image_id=None):
    descs = np.asarray(descs, dtype=float)
    n = len(descs)
    if xy is None:
        xy = np.arange(2 * n, dtype=float).reshape(n, 2)
    kps = np.column_stack([xy, np.ones(n), np.zeros(n)])
    return LocalFeatureSet(keypoints=kps, descriptors=descs, image_id=image_id)


def random_unit(rng, n, d):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


class TestFeatureFile:
    def test_round_trip_exact(self, tmp_path):
        # values exactly representable in float32
        kps = np.array([[1.5, 2.25, 1.0, 0.5], [3.0, 4.5, 2.0, -0.25]])
        descs = np.array([[1.0, 0.0, 0.0], [0.0, 0.6, 0.8]])
        feats = LocalFeatureSet(keypoints=kps, descriptors=descs)
        path = tmp_path / "f.lfs"
        save_features(path, feats)
        back = load_features(path, image_id="x")
        np.testing.assert_array_equal(back.keypoints, kps)
        np.testing.assert_allclose(back.descriptors, descs, atol=1e-7)
        assert back.image_id == "x"

    def test_empty_set(self, tmp_path):
        feats = LocalFeatureSet(keypoints=np.empty((0, 4)),
                                descriptors=np.empty((0, 8)))
        path = tmp_path / "empty.lfs"
        save_features(path, feats)
        back = load_features(path)
        assert len(back) == 0

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.lfs"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(BadMagic):
            load_features(path)

    def test_truncated_descriptor_block(self, tmp_path):
        feats = fset(random_unit(np.random.default_rng(0), 4, 8))
        path = tmp_path / "t.lfs"
        save_features(path, feats)
        blob = path.read_bytes()
        path.write_bytes(blob[:-10])
        with pytest.raises(TruncatedFile):
            load_features(path)

    def test_nonfinite_descriptor(self, tmp_path):
        path = tmp_path / "nan.lfs"
        import struct
        with open(path, "wb") as fh:
            fh.write(b"LFS1")
            fh.write(struct.pack("<II", 1, 2))
            fh.write(np.array([1, 2, 1, 0], "<f4").tobytes())
            fh.write(np.array([np.nan, 1], "<f4").tobytes())
        with pytest.raises(NonFiniteDescriptor):
            load_features(path)

    def test_normalization_enforced_on_load(self, tmp_path):
        import struct
        path = tmp_path / "n.lfs"
        with open(path, "wb") as fh:
            fh.write(b"LFS1")
            fh.write(struct.pack("<II", 1, 2))
            fh.write(np.array([1, 2, 1, 0], "<f4").tobytes())
            fh.write(np.array([3.0, 4.0], "<f4").tobytes())
        back = load_features(path)
        np.testing.assert_allclose(back.descriptors[0], [0.6, 0.8], atol=1e-7)


class TestMatchSet:
    def test_one_to_one_enforced(self):
        with pytest.raises(ValueError):
            MatchSet(pairs=[[0, 1], [0, 2]], scores=[1.0, 0.9])
        with pytest.raises(ValueError):
            MatchSet(pairs=[[0, 1], [2, 1]], scores=[1.0, 0.9])

    def test_mirrored(self):
        m = MatchSet(pairs=[[0, 3], [1, 2]], scores=[0.9, 0.8])
        np.testing.assert_array_equal(m.mirrored().pairs, [[3, 0], [2, 1]])


class TestMatchDescriptors:
    def test_identical_sets_identity_matching(self):
        rng = np.random.default_rng(0)
        a = fset(random_unit(rng, 20, 16))
        m = match_descriptors(a, a)
        assert len(m) == 20
        np.testing.assert_array_equal(m.pairs[:, 0], m.pairs[:, 1])

    def test_orthogonal_sets_no_matches(self):
        # cosine-similarity table oracle: all similarities are exactly 0,
        # so every ratio is 1 and nothing passes at 0.85
        eye = np.eye(8)
        a = fset(eye[:3])
        b = fset(eye[3:7])
        sim = a.descriptors @ b.descriptors.T
        assert np.all(sim == 0)
        assert len(match_descriptors(a, b, ratio=0.85)) == 0

    def test_planted_correspondences_recovered(self):
        rng = np.random.default_rng(1)
        base = random_unit(rng, 5, 32)
        noise = lambda: 0.02 * rng.normal(size=(5, 32))
        a_desc = np.vstack([base + noise(), random_unit(rng, 7, 32)])
        b_desc = np.vstack([random_unit(rng, 9, 32), base + noise()])
        a, b = fset(a_desc), fset(b_desc)

        # brute-force mutual nearest neighbour oracle with two-sided ratio
        sim = a.descriptors @ b.descriptors.T
        dist = np.sqrt(np.maximum(0, 2 - 2 * sim))
        expected = set()
        for i in range(len(a)):
            order = np.argsort(dist[i])
            j = int(order[0])
            if dist[i, j] >= 0.85 * dist[i, order[1]]:
                continue
            col = np.argsort(dist[:, j])
            if col[0] != i:
                continue
            if dist[i, j] >= 0.85 * dist[col[1], j]:
                continue
            expected.add((i, j))
        planted = {(i, 9 + i) for i in range(5)}
        assert expected == planted

        m = match_descriptors(a, b, ratio=0.85)
        assert set(map(tuple, m.pairs)) == planted

    def test_mirror_symmetry(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            a = fset(random_unit(rng, rng.integers(2, 30), 16))
            b = fset(random_unit(rng, rng.integers(2, 30), 16))
            ab = match_descriptors(a, b)
            ba = match_descriptors(b, a)
            assert set(map(tuple, ab.pairs)) == \
                set(map(tuple, ba.mirrored().pairs))

    def test_one_to_one_property(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            a = fset(random_unit(rng, rng.integers(1, 40), 8))
            b = fset(random_unit(rng, rng.integers(1, 40), 8))
            m = match_descriptors(a, b, ratio=0.95)
            for side in (0, 1):
                col = m.pairs[:, side]
                assert len(np.unique(col)) == len(col)

    def test_dimension_mismatch(self):
        rng = np.random.default_rng(4)
        with pytest.raises(DimensionMismatch):
            match_descriptors(fset(random_unit(rng, 3, 8)),
                              fset(random_unit(rng, 3, 16)))

    def test_scores_in_unit_interval(self):
        rng = np.random.default_rng(5)
        a = fset(random_unit(rng, 25, 8))
        b = fset(random_unit(rng, 25, 8))
        m = match_descriptors(a, b, ratio=0.99)
        assert np.all(m.scores >= 0) and np.all(m.scores <= 1)


class TestDedup:
    def test_higher_score_wins_tie_lexicographic(self):
        pairs = [[0, 0], [0, 1], [1, 1], [2, 2], [2, 2]]
        scores = [0.5, 0.9, 0.9, 0.7, 0.8]
        out_pairs, out_scores = dedup_one_to_one(pairs, scores)
        got = {tuple(p): s for p, s in zip(out_pairs, out_scores)}
        # (0,1) beats (0,0); (1,1) loses index 1 to the tie rule? no:
        # (0,1) and (1,1) tie at 0.9 -> (0,1) wins side b=1; (1,1) dropped
        assert got == {(0, 1): 0.9, (2, 2): 0.8}


class TestGuidedPyramid:
    def make_pair(self, rng, n_common, extra_a=0, extra_b=0, noise=0.01, d=16):
        base = random_unit(rng, n_common, d)
        a_desc = np.vstack([base + noise * rng.normal(size=base.shape),
                            random_unit(rng, extra_a, d)])
        b_desc = np.vstack([base + noise * rng.normal(size=base.shape),
                            random_unit(rng, extra_b, d)])
        return fset(a_desc, image_id="a"), fset(b_desc, image_id="b")

    def test_strong_base_returned_untouched(self):
        rng = np.random.default_rng(0)
        a, b = self.make_pair(rng, 150)
        provider = {}

        def boom(image_id, scale, orientation):
            raise AssertionError("variants must not be matched")

        out = guided_pyramid_match(a, b, [(0.5, 0.0)], boom, mode="MAX",
                                   threshold=100)
        assert out.variant == "BASE"
        assert len(out) >= 100

    def test_max_mode_picks_largest_variant(self):
        rng = np.random.default_rng(1)
        a, b = self.make_pair(rng, 40)
        ax, bx = self.make_pair(rng, 90)
        ay, by = self.make_pair(rng, 60)
        provider = {
            ("a", 0.5, 0.0): ax, ("b", 0.5, 0.0): bx,
            ("a", 2.0, 0.0): ay, ("b", 2.0, 0.0): by,
        }
        out = guided_pyramid_match(a, b, [(0.5, 0.0), (2.0, 0.0)], provider,
                                   mode="MAX", threshold=100)
        assert out.variant == "MAX"
        expected = match_descriptors(ax, bx)
        assert set(map(tuple, out.pairs)) == set(map(tuple, expected.pairs))

    def test_max_mode_single_variant_equals_plain_matching(self):
        rng = np.random.default_rng(2)
        a, b = self.make_pair(rng, 10)
        av, bv = self.make_pair(rng, 50)
        provider = {("a", 0.5, 0.0): av, ("b", 0.5, 0.0): bv}
        out = guided_pyramid_match(a, b, [(0.5, 0.0)], provider, mode="MAX",
                                   threshold=100)
        plain = match_descriptors(av, bv)
        assert set(map(tuple, out.pairs)) == set(map(tuple, plain.pairs))

    def test_max_mode_keeps_base_when_variants_worse(self):
        rng = np.random.default_rng(3)
        a, b = self.make_pair(rng, 50)
        av, bv = self.make_pair(rng, 5)
        provider = {("a", 0.5, 0.0): av, ("b", 0.5, 0.0): bv}
        out = guided_pyramid_match(a, b, [(0.5, 0.0)], provider, mode="MAX",
                                   threshold=100)
        base = match_descriptors(a, b)
        assert set(map(tuple, out.pairs)) == set(map(tuple, base.pairs))

    def test_all_mode_union_one_to_one(self):
        # union + conflict-resolution oracle over aligned index spaces
        rng = np.random.default_rng(4)
        d = 16
        base = random_unit(rng, 30, d)
        a = fset(base, image_id="a")
        b_desc = base.copy()
        b_desc[10:20] = random_unit(rng, 10, d)  # break 10 of the matches
        b = fset(b_desc, image_id="b")
        # variant: the broken rows re-described so they match again
        av = fset(base, image_id="a")
        bv_desc = base.copy()
        bv_desc[:5] = random_unit(rng, 5, d)     # different 5 broken here
        bv = fset(bv_desc, image_id="b")
        provider = {("a", 0.5, 0.0): av, ("b", 0.5, 0.0): bv}

        out = guided_pyramid_match(a, b, [(0.5, 0.0)], provider, mode="ALL",
                                   threshold=100)
        assert out.variant == "ALL"
        base_pairs = set(map(tuple, match_descriptors(a, b).pairs))
        var_pairs = set(map(tuple, match_descriptors(av, bv).pairs))
        got = set(map(tuple, out.pairs))
        # every union pair present unless it conflicts; one-to-one holds
        assert got <= (base_pairs | var_pairs)
        assert {i for i, _ in got} == {i for i, _ in base_pairs | var_pairs}
        for side in (0, 1):
            col = out.pairs[:, side]
            assert len(np.unique(col)) == len(col)

    def test_bad_mode(self):
        rng = np.random.default_rng(5)
        a, b = self.make_pair(rng, 5)
        with pytest.raises(ValueError):
            guided_pyramid_match(a, b, [], {}, mode="SOME")
