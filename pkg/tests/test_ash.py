from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vidannot.ash import (
    AshConfig,
    Masklet,
    MaskletEntry,
    PropagationError,
    merge_redundant_frame,
    partition_batches,
    propagate_batch,
    remove_trailing_empty,
    run_ash,
    smooth_polygons,
)
from vidannot.assoc import NewObject
from vidannot.backends import (
    Detection,
    PropagationDegradation,
    SyntheticPropagator,
    SyntheticWorldConfig,
    generate_synthetic_sequence,
)
from vidannot.geometry import BBox, BinaryMask, iou_mask, mask_to_polygon

from helpers import rect_mask


def world(n=2, frames=10, vel=None, seed=1):
    vel = vel if vel is not None else tuple((0.4, 0.2) for _ in range(n))
    return generate_synthetic_sequence(
        SyntheticWorldConfig(
            num_objects=n,
            num_frames=frames,
            velocities=vel,
            rng_seed=seed,
            occlusion_enabled=False,
        )
    )


def new_obj(gt, identity, frame=0, conf=0.9):
    return NewObject(identity, Detection(gt[frame].objects[identity].box, "object", conf), frame)


def rect_masklet(object_id, frames_and_boxes, w=20, h=20, conf=0.9):
    m = Masklet(object_id, "object")
    for f, (x1, y1, x2, y2) in frames_and_boxes:
        mask = rect_mask(x1, y1, x2, y2, w, h)
        poly = mask_to_polygon(mask, min_pixels=1)
        m.add_entry(f, MaskletEntry(mask, poly, BBox(x1, y1, x2, y2), conf))
    return m


class TestPartitionBatches:
    def test_twelve_by_five(self):
        assert [len(b) for b in partition_batches(list(range(12)), 5)] == [5, 5, 2]

    def test_small_input_single_batch(self):
        assert [len(b) for b in partition_batches([1, 2, 3], 5)] == [3]

    def test_empty(self):
        assert partition_batches([], 5) == []

    @given(st.lists(st.integers(), max_size=40), st.integers(1, 9))
    @settings(max_examples=1000, deadline=None)
    def test_order_and_sizes(self, items, beta):
        batches = partition_batches(items, beta)
        assert [x for b in batches for x in b] == items
        assert all(len(b) == beta for b in batches[:-1])
        if batches:
            assert 1 <= len(batches[-1]) <= beta


class TestPropagateBatch:
    def test_static_object_identical_entries(self):
        gt = world(n=1, frames=5, vel=((0, 0),))
        prop = SyntheticPropagator(gt)
        (m,) = propagate_batch([new_obj(gt, 0)], range(5), prop)
        assert m.frames() == [0, 1, 2, 3, 4]
        for f in m.frames():
            assert m.entries[f].mask == gt[0].objects[0].mask

    def test_object_leaving_frame_empty_tail(self):
        gt = world(n=1, frames=30, vel=((10.0, 0.0),), seed=0)
        assert gt[-1].objects[0].mask.is_empty()  # object exits the frame
        prop = SyntheticPropagator(gt)
        (m,) = propagate_batch([new_obj(gt, 0)], range(30), prop)
        empties = [f for f in m.frames() if m.entries[f].mask.is_empty()]
        assert empties and empties[-1] == 29  # pre-pruning: entries still there

    def test_drift_shifts_boxes(self):
        gt = world(n=1, frames=8, vel=((0, 0),))
        prop = SyntheticPropagator(gt, PropagationDegradation(drift_px_per_frame=(1.0, 0.0)))
        (m,) = propagate_batch([new_obj(gt, 0)], range(8), prop)
        x0 = m.entries[0].bbox.x1
        assert m.entries[7].bbox.x1 - x0 == 7

    def test_failure_carries_batch_identity(self):
        class Broken:
            def propagate(self, box, start, frames):
                raise RuntimeError("out of memory")

        gt = world(n=2, frames=3)
        batch = [new_obj(gt, 0), new_obj(gt, 1)]
        with pytest.raises(PropagationError) as err:
            propagate_batch(batch, range(3), Broken())
        assert err.value.object_ids == (0, 1)


class TestRemoveTrailingEmpty:
    def test_trailing_removed(self):
        m = rect_masklet(0, [(f, (2, 2, 8, 8)) for f in range(5)])
        for f in range(5, 10):
            m.add_entry(f, MaskletEntry(BinaryMask.zeros(20, 20), None, None, 0.9))
        out = remove_trailing_empty(m, 3)
        assert out.frames() == [0, 1, 2, 3, 4]

    def test_all_valid_unchanged(self):
        m = rect_masklet(0, [(f, (2, 2, 8, 8)) for f in range(5)])
        assert remove_trailing_empty(m, 3).frames() == m.frames()

    def test_epsilon_boundary(self):
        # frames 0-6 hold 49 px, frame 7 holds 2 px: 2 > 3 is false, so the
        # terminus is 6 and frame 7 goes.
        m = rect_masklet(0, [(f, (2, 2, 8, 8)) for f in range(7)])
        g = np.zeros((20, 20), dtype=bool)
        g[0, 0] = g[0, 1] = True
        m.add_entry(7, MaskletEntry(BinaryMask(g), None, None, 0.9))
        out = remove_trailing_empty(m, 3)
        assert out.frames() == list(range(7))

    def test_entirely_below_floor_dropped(self):
        m = Masklet(0, "object")
        m.add_entry(0, MaskletEntry(BinaryMask.zeros(10, 10), None, None, 0.5))
        assert remove_trailing_empty(m, 3) is None


class TestSmoothPolygons:
    def test_alpha_one_identity(self):
        m = rect_masklet(0, [(f, (2 + f, 2, 8 + f, 8)) for f in range(4)])
        out = smooth_polygons(m, 1.0, 64)
        for f in m.frames():
            assert out.entries[f].polygon == m.entries[f].polygon

    def test_constant_sequence_fixed_point(self):
        m = rect_masklet(0, [(f, (2, 2, 8, 8)) for f in range(5)])
        out = smooth_polygons(m, 0.2, 32)
        first = np.asarray(out.entries[0].polygon.vertices)
        for f in out.frames():
            assert np.allclose(np.asarray(out.entries[f].polygon.vertices), first)
            assert out.entries[f].mask == m.entries[f].mask

    def test_offset_square_blended(self):
        # identical squares at x-offset 0 then 10; alpha 0.2 puts the second
        # smoothed square at offset 0.2 * 10 = 2.
        m = rect_masklet(0, [(0, (0, 0, 7, 7)), (1, (10, 0, 17, 7))], w=30, h=10)
        out = smooth_polygons(m, 0.2, 16)
        xs0 = [x for x, _ in out.entries[0].polygon.vertices]
        xs1 = [x for x, _ in out.entries[1].polygon.vertices]
        assert min(xs1) - min(xs0) == pytest.approx(2.0)
        assert max(xs1) - max(xs0) == pytest.approx(2.0)

    def test_gap_resets_recursion(self):
        m = rect_masklet(0, [(0, (0, 0, 7, 7)), (5, (10, 0, 17, 7))], w=30, h=10)
        out = smooth_polygons(m, 0.2, 16)
        xs = [x for x, _ in out.entries[5].polygon.vertices]
        assert min(xs) == pytest.approx(10.0)  # not blended across the gap

    def test_vertex_count_preserved(self):
        m = rect_masklet(0, [(f, (2 + f, 2, 8 + f, 8)) for f in range(4)])
        out = smooth_polygons(m, 0.3, 24)
        for f in out.frames():
            assert len(out.entries[f].polygon.vertices) == 24


class TestMergeRedundant:
    def test_high_overlap_merges_into_lower_id(self):
        a = rect_masklet(0, [(0, (2, 2, 10, 10))])
        b = rect_masklet(5, [(0, (2, 2, 10, 9))])  # IoU 8/9 > 0.3
        out = merge_redundant_frame([a, b], 0, 0.3)
        assert [m.object_id for m in out] == [0]
        assert out[0].entries[0].mask.count == 81  # union

    def test_low_overlap_keeps_both(self):
        a = rect_masklet(0, [(0, (0, 0, 5, 5))])
        b = rect_masklet(1, [(0, (5, 5, 10, 10))])  # IoU 1/71 < 0.3
        out = merge_redundant_frame([a, b], 0, 0.3)
        assert sorted(m.object_id for m in out) == [0, 1]

    def test_transitive_collapse(self):
        # a-b and b-c overlap above threshold; all three collapse to id 0.
        a = rect_masklet(0, [(0, (0, 0, 9, 9))])
        b = rect_masklet(1, [(0, (3, 0, 12, 9))])
        c = rect_masklet(2, [(0, (6, 0, 15, 9))])
        out = merge_redundant_frame([a, b, c], 0, 0.3)
        assert [m.object_id for m in out] == [0]
        assert out[0].entries[0].mask.count == 160

    def test_pairwise_iou_below_threshold_after(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            masklets = []
            for i in range(4):
                x = int(rng.integers(0, 8))
                y = int(rng.integers(0, 8))
                masklets.append(rect_masklet(i, [(0, (x, y, x + 7, y + 7))]))
            out = merge_redundant_frame(masklets, 0, 0.3)
            present = [m for m in out if 0 in m.entries]
            for i in range(len(present)):
                for j in range(i + 1, len(present)):
                    v = iou_mask(present[i].entries[0].mask, present[j].entries[0].mask)
                    assert v <= 0.3


class TestRunAsh:
    def test_oracle_equivalence(self):
        gt = world(n=3, frames=12, vel=((0.4, 0.1), (-0.3, 0.2), (0.2, -0.3)), seed=4)
        prop = SyntheticPropagator(gt)
        new_objects = {0: [new_obj(gt, i) for i in range(3)]}
        out = run_ash(new_objects, range(12), prop, AshConfig(alpha=1.0))
        assert sorted(m.object_id for m in out) == [0, 1, 2]
        for m in out:
            for f in m.frames():
                assert iou_mask(m.entries[f].mask, gt[f].objects[m.object_id].mask) >= 0.99

    def test_duplicate_detection_merged(self):
        gt = world(n=1, frames=6, vel=((0, 0),), seed=5)
        prop = SyntheticPropagator(gt)
        dup = {
            0: [
                new_obj(gt, 0),
                NewObject(1, Detection(gt[0].objects[0].box, "object", 0.8), 0),
            ]
        }
        out = run_ash(dup, range(6), prop, AshConfig(alpha=1.0))
        assert [m.object_id for m in out] == [0]

    def test_empty_scene(self):
        gt = world(n=1, frames=4)
        assert run_ash({}, range(4), SyntheticPropagator(gt), AshConfig()) == []

    def test_postprocess_never_adds_entries(self):
        gt = world(n=3, frames=10, vel=((0.5, 0.1), (-0.4, 0.0), (0.0, 0.5)), seed=6)
        prop = SyntheticPropagator(gt, PropagationDegradation(dropout_rate=0.2, rng_seed=1))
        new_objects = {0: [new_obj(gt, i) for i in range(3)]}
        raw = run_ash(new_objects, range(10), prop, AshConfig(), postprocess=False)
        cooked = run_ash(new_objects, range(10), prop, AshConfig())
        assert sum(len(m.entries) for m in cooked) <= sum(len(m.entries) for m in raw)

    def test_frame_range_within_detection_and_terminus(self):
        gt = world(n=2, frames=15, vel=((0.3, 0.0), (0.0, 0.3)), seed=7)
        prop = SyntheticPropagator(gt)
        new_objects = {
            0: [new_obj(gt, 0)],
            4: [NewObject(1, Detection(gt[4].objects[1].box, "object", 0.9), 4)],
        }
        out = run_ash(new_objects, range(15), prop, AshConfig(alpha=1.0))
        spans = {m.object_id: (min(m.frames()), max(m.frames())) for m in out}
        assert spans[0][0] == 0
        assert spans[1][0] == 4
        assert spans[1][1] <= 14


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            AshConfig(beta=0)
        with pytest.raises(ValueError):
            AshConfig(alpha=1.5)
        with pytest.raises(ValueError):
            AshConfig(tau_merge=0.0)
        with pytest.raises(ValueError):
            AshConfig(epsilon_mask=0)


@st.composite
def random_masklets(draw, max_objects=4, max_frames=6, grid=20):
    masklets = []
    n = draw(st.integers(1, max_objects))
    for oid in range(n):
        frames = draw(st.lists(st.integers(0, max_frames - 1), min_size=1, max_size=max_frames, unique=True))
        m = Masklet(oid, "object")
        for f in sorted(frames):
            if draw(st.booleans()):
                x = draw(st.integers(0, grid - 9))
                y = draw(st.integers(0, grid - 9))
                mask = rect_mask(x, y, x + 8, y + 8, grid, grid)
                poly = mask_to_polygon(mask, 1)
                from vidannot.geometry import polygon_to_bbox
                m.add_entry(f, MaskletEntry(mask, poly, polygon_to_bbox(poly), 0.9))
            else:
                m.add_entry(f, MaskletEntry(BinaryMask.zeros(grid, grid), None, None, 0.9))
        masklets.append(m)
    return masklets


class TestPostprocessProperties:
    @given(random_masklets(), st.floats(0.1, 1.0), st.floats(0.05, 0.95))
    @settings(max_examples=1000, deadline=None)
    def test_never_increases_entry_count(self, masklets, alpha, tau):
        from vidannot.ash import postprocess_masklets

        before = sum(len(m.entries) for m in masklets)
        cfg = AshConfig(alpha=alpha, tau_merge=tau, resample_n=16)
        out = postprocess_masklets(masklets, range(6), cfg)
        assert sum(len(m.entries) for m in out) <= before

    @given(random_masklets())
    @settings(max_examples=1000, deadline=None)
    def test_smoothing_identity_at_alpha_one_and_vertex_count(self, masklets):
        for m in masklets:
            ident = smooth_polygons(m, 1.0, 16)
            assert all(
                ident.entries[f].polygon == m.entries[f].polygon for f in m.frames()
            )
            smoothed = smooth_polygons(m, 0.4, 16)
            for f in smoothed.frames():
                p = smoothed.entries[f].polygon
                if p is not None:
                    assert len(p.vertices) == 16

    @given(random_masklets(), st.floats(0.1, 0.9))
    @settings(max_examples=1000, deadline=None)
    def test_merge_leaves_no_pair_above_threshold(self, masklets, tau):
        out = merge_redundant_frame(masklets, 0, tau)
        present = [m for m in out if 0 in m.entries and not m.entries[0].mask.is_empty()]
        for i in range(len(present)):
            for j in range(i + 1, len(present)):
                assert iou_mask(present[i].entries[0].mask, present[j].entries[0].mask) <= tau

    @given(random_masklets(), st.integers(1, 8))
    @settings(max_examples=1000, deadline=None)
    def test_pruning_never_extends_ranges(self, masklets, epsilon):
        for m in masklets:
            out = remove_trailing_empty(m, epsilon)
            if out is None:
                continue
            assert min(out.frames()) >= min(m.frames())
            assert max(out.frames()) <= max(m.frames())
            assert out.entries[max(out.frames())].mask.count > epsilon
