import math

import numpy as np
import pytest

from mem4d import (
    CameraModel,
    EgoState,
    MaskedObservation,
    MockDescriptionProvider,
    MockEmbedder,
    build_entry,
    compute_centroid,
    compute_extent,
    project_points,
)
from mem4d.core import EmptyMaskError, ProviderError
from mem4d.featuregen import DescriptionProvider, read_observation_jsonl

CAM = CameraModel(fx=100, fy=100, cx=50, cy=50, width=100, height=100)
EMB = MockEmbedder(dim=32)


def obs(points, t=0.0, pose=None, label="thing", mask_id=0):
    return MaskedObservation(
        object_points=np.asarray(points, dtype=float),
        mask_id=mask_id,
        timestamp=t,
        camera_pose=pose if pose is not None else EgoState([0, 0, 0], [1, 0, 0, 0], t),
        label=label,
    )


class TestProjection:
    def test_on_axis_point_hits_principal_point(self):
        assert project_points([(0, 0, 1)], CAM) == [(0, 50.0, 50.0)]

    def test_point_behind_camera_omitted(self):
        assert project_points([(0, 0, -1)], CAM) == []

    def test_random_points_match_per_point_formula(self, rng):
        pts = rng.uniform(-2, 2, (50, 3))
        pts[:, 2] = rng.uniform(-1, 3, 50)  # mix of in-front and behind
        got = {i: (u, v) for i, u, v in project_points(pts, CAM)}
        for i, (x, y, z) in enumerate(pts):
            if z <= 0:
                assert i not in got
                continue
            u = CAM.fx * x / z + CAM.cx
            v = CAM.fy * y / z + CAM.cy
            inside = 0 <= u < CAM.width and 0 <= v < CAM.height
            assert (i in got) == inside
            if inside:
                assert got[i] == (u, v)  # exact: same arithmetic

    def test_bad_intrinsics_rejected(self):
        with pytest.raises(ValueError):
            CameraModel(fx=0, fy=1, cx=0, cy=0, width=10, height=10)
        with pytest.raises(ValueError):
            CameraModel(fx=1, fy=1, cx=20, cy=0, width=10, height=10)


class TestCentroidExtent:
    def test_single_point(self):
        assert np.array_equal(compute_centroid([(1, 2, 3)]), [1, 2, 3])
        assert np.array_equal(compute_extent([(1, 2, 3)]), [0, 0, 0])

    def test_two_points(self):
        assert np.array_equal(compute_centroid([(0, 0, 0), (2, 0, 0)]), [1, 0, 0])
        assert np.array_equal(compute_extent([(0, 0, 0), (2, 1, 3)]), [2, 1, 3])

    def test_empty_rejected(self):
        with pytest.raises(EmptyMaskError):
            compute_centroid([])
        with pytest.raises(EmptyMaskError):
            compute_extent(np.zeros((0, 3)))

    def test_centroid_matches_summation_oracle(self, rng):
        pts = rng.uniform(-100, 100, (1000, 3))
        got = compute_centroid(pts)
        expected = [math.fsum(pts[:, a]) / len(pts) for a in range(3)]
        assert np.allclose(got, expected, rtol=1e-12, atol=1e-12)

    def test_extent_matches_min_max_oracle(self, rng):
        pts = rng.uniform(-100, 100, (1000, 3))
        got = compute_extent(pts)
        for a in range(3):
            lo = hi = pts[0][a]
            for p in pts:
                lo = min(lo, p[a])
                hi = max(hi, p[a])
            assert got[a] == hi - lo

    def test_properties(self, rng):
        for _ in range(25):
            pts = rng.uniform(-10, 10, (int(rng.integers(1, 60)), 3))
            v = rng.uniform(-5, 5, 3)
            perm = rng.permutation(len(pts))
            c = compute_centroid(pts)
            # permutation invariance and translation equivariance
            assert np.allclose(compute_centroid(pts[perm]), c, rtol=1e-9)
            assert np.allclose(compute_centroid(pts + v), c + v, rtol=1e-9)
            # centroid inside the bounding box
            assert np.all(c >= pts.min(axis=0) - 1e-12)
            assert np.all(c <= pts.max(axis=0) + 1e-12)
            e = compute_extent(pts)
            assert np.all(e >= 0)
            assert np.allclose(compute_extent(pts[perm]), e, rtol=1e-9)
            assert np.allclose(compute_extent(pts + v), e, rtol=1e-9)


class TestBuildEntry:
    def test_checkpoint_observed_at_t17(self):
        provider = MockDescriptionProvider({"checkpoint": "a checkpoint barrier"})
        entry = build_entry(obs([(1, 0, 0)], t=17.0, label="checkpoint"),
                            provider, EMB)
        assert any(a <= 17.0 <= b for a, b in entry.tem.intervals)
        assert entry.sem.description == "a checkpoint barrier"

    def test_identity_pose(self):
        entry = build_entry(obs([(1, 0, 0)]), MockDescriptionProvider(), EMB)
        assert np.array_equal(entry.spa.centroid, [1, 0, 0])
        assert np.array_equal(entry.spa.extent, [0, 0, 0])

    def test_translated_camera(self):
        pose = EgoState([5, 0, 0], [1, 0, 0, 0], 3.0)
        entry = build_entry(obs([(1, 0, 0)], t=3.0, pose=pose),
                            MockDescriptionProvider(), EMB)
        # manual rigid transform: R = I, so world = point + translation
        assert np.allclose(entry.spa.centroid, [6, 0, 0], atol=1e-12)

    def test_rotated_camera(self):
        # camera yawed 90 degrees left: camera +x maps to world +y
        q = [math.cos(math.pi / 4), 0, 0, math.sin(math.pi / 4)]
        pose = EgoState([0, 0, 0], q, 0.0)
        entry = build_entry(obs([(2, 0, 0)], pose=pose), MockDescriptionProvider(), EMB)
        assert np.allclose(entry.spa.centroid, [0, 2, 0], atol=1e-12)

    def test_deterministic(self):
        provider = MockDescriptionProvider({"b": "a blue bin"})
        e1 = build_entry(obs([(1, 2, 3)], label="b"), provider, EMB, entry_id="fixed")
        e2 = build_entry(obs([(1, 2, 3)], label="b"), provider, EMB, entry_id="fixed")
        from mem4d import entry_canonical
        assert entry_canonical(e1) == entry_canonical(e2)

    def test_empty_mask(self):
        with pytest.raises(EmptyMaskError):
            build_entry(obs(np.zeros((0, 3))), MockDescriptionProvider(), EMB)

    def test_provider_failure_carries_mask_id(self):
        class Broken(DescriptionProvider):
            def describe(self, obs):
                raise RuntimeError("boom")

        with pytest.raises(ProviderError, match="mask 7"):
            build_entry(obs([(1, 0, 0)], mask_id=7), Broken(), EMB)


class TestJsonlBatch:
    def test_round_trip(self):
        import json
        header = {"type": "header", "camera": CAM.to_dict(), "agent_id": "a9",
                  "frame_id": "site"}
        o = obs([(1, 0, 0), (2, 1, 0)], t=4.5, label="cart")
        lines = [json.dumps(header),
                 json.dumps({"type": "observation", **o.to_dict()})]
        batch = read_observation_jsonl(lines)
        assert batch.agent_id == "a9"
        assert batch.frame_id == "site"
        assert len(batch.observations) == 1
        got = batch.observations[0]
        assert np.array_equal(got.object_points, o.object_points)
        assert got.label == "cart"

    def test_missing_header(self):
        with pytest.raises(ValueError, match="header"):
            read_observation_jsonl(['{"type": "observation"}'])
