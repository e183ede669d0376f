from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vidannot.assoc import (
    AssocConfig,
    Associator,
    Track,
    associate_frame,
    rescale_confidence,
    validate_box,
)
from vidannot.backends import Detection
from vidannot.geometry import BBox, iou_box

CFG = AssocConfig()


def det(x1, y1, x2, y2, conf=0.9):
    return Detection(BBox(x1, y1, x2, y2), "object", conf)


class TestValidateBox:
    def test_too_small(self):
        ok, reason = validate_box(BBox(50, 50, 55, 55), 640, 480, CFG)
        assert not ok and "size" in reason

    def test_bad_aspect(self):
        ok, reason = validate_box(BBox(50, 50, 110, 60), 640, 480, CFG)
        assert not ok and "aspect" in reason

    def test_interior_accepted(self):
        ok, reason = validate_box(BBox(100, 100, 200, 200), 640, 480, CFG)
        assert ok and reason is None

    def test_margin(self):
        ok, reason = validate_box(BBox(0, 100, 100, 200), 640, 480, CFG)
        assert not ok and "margin" in reason
        ok, _ = validate_box(BBox(0.5, 100, 100, 200), 640, 480, CFG)
        assert ok

    def test_too_large(self):
        ok, reason = validate_box(BBox(0.5, 0.5, 1500, 400), 2000, 500, CFG)
        assert not ok and "size" in reason


class TestRescaleConfidence:
    def test_affine_map_endpoints(self):
        assert rescale_confidence([0.1, 0.5, 0.9]) == pytest.approx([0.7, 0.825, 0.95])

    def test_constant_maps_to_midpoint(self):
        assert rescale_confidence([0.4, 0.4]) == pytest.approx([0.825, 0.825])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            rescale_confidence([])

    @given(st.lists(st.floats(0, 1, allow_nan=False), min_size=1, max_size=30))
    @settings(max_examples=1000, deadline=None)
    def test_range_and_order(self, scores):
        out = rescale_confidence(scores)
        assert all(0.7 - 1e-12 <= v <= 0.95 + 1e-12 for v in out)
        for i in range(len(scores)):
            for j in range(len(scores)):
                if scores[i] < scores[j]:
                    assert out[i] <= out[j]


class TestAssociateFrame:
    def test_first_frame_all_new(self):
        dets = [det(0, 0, 20, 20), det(50, 0, 70, 20), det(100, 0, 120, 20)]
        r = associate_frame([], dets, 0, CFG, next_id=0)
        assert [n.object_id for n in r.new_objects] == [0, 1, 2]
        assert r.mapping == {}
        assert r.next_id == 3

    def test_exact_match(self):
        track = Track(0, BBox(0, 0, 10, 10), 0, "object", 0)
        r = associate_frame([track], [det(0, 0, 10, 10)], 1, CFG, next_id=1)
        assert r.mapping == {0: 0}
        assert r.new_objects == []
        assert r.tracks[0].last_seen_frame == 1

    def test_low_iou_spawns_new_object(self):
        # boxes (0,0,10,10) vs (6,0,16,10): IoU 40/160 = 0.25 < 0.5
        assert iou_box(BBox(0, 0, 10, 10), BBox(6, 0, 16, 10)) == pytest.approx(0.25)
        track = Track(0, BBox(0, 0, 10, 10), 0, "object", 0)
        r = associate_frame([track], [det(6, 0, 16, 10)], 1, CFG, next_id=1)
        assert r.mapping == {}
        assert [n.object_id for n in r.new_objects] == [1]
        aged = next(t for t in r.tracks if t.id == 0)
        assert aged.age == 1

    def test_track_claimed_once(self):
        track = Track(0, BBox(0, 0, 10, 10), 0, "object", 0)
        dets = [det(0, 0, 10, 10), det(0, 0, 10, 9)]
        r = associate_frame([track], dets, 1, CFG, next_id=1)
        assert list(r.mapping.values()).count(0) == 1
        assert len(r.new_objects) == 1

    def test_retirement_after_buffer(self):
        cfg = AssocConfig(track_buffer=2)
        tracks = [Track(0, BBox(0, 0, 10, 10), 0, "object", 0)]
        for f in range(1, 4):
            r = associate_frame(tracks, [], f, cfg, next_id=1)
            tracks = r.tracks
        assert tracks == []

    def test_tie_breaks_to_lowest_track_id(self):
        shared = BBox(0, 0, 10, 10)
        tracks = [Track(3, shared, 0, "object", 0), Track(1, shared, 0, "object", 0)]
        r = associate_frame(tracks, [det(0, 0, 10, 10)], 1, CFG, next_id=4)
        assert r.mapping == {0: 1}


@st.composite
def frame_scenario(draw):
    n_tracks = draw(st.integers(0, 6))
    n_dets = draw(st.integers(0, 6))
    tracks = []
    for i in range(n_tracks):
        x = draw(st.floats(0, 400))
        y = draw(st.floats(0, 400))
        tracks.append(Track(i, BBox(x, y, x + 20, y + 20), 0, "object", 0))
    dets = []
    for _ in range(n_dets):
        x = draw(st.floats(0, 400))
        y = draw(st.floats(0, 400))
        dets.append(det(x, y, x + 20, y + 20))
    return tracks, dets


class TestInvariants:
    @given(frame_scenario())
    @settings(max_examples=1000, deadline=None)
    def test_mapping_injective_on_tracks(self, scenario):
        tracks, dets = scenario
        r = associate_frame(tracks, dets, 1, CFG, next_id=len(tracks))
        assigned = list(r.mapping.values())
        assert len(assigned) == len(set(assigned))

    @given(frame_scenario())
    @settings(max_examples=1000, deadline=None)
    def test_every_detection_mapped_or_new(self, scenario):
        tracks, dets = scenario
        r = associate_frame(tracks, dets, 1, CFG, next_id=len(tracks))
        mapped = set(r.mapping.keys())
        new_ids = {n.object_id for n in r.new_objects}
        assert len(mapped) + len(new_ids) == len(dets)
        assert not (new_ids & {t.id for t in tracks})

    @given(st.lists(frame_scenario(), min_size=1, max_size=5))
    @settings(max_examples=1000, deadline=None)
    def test_ids_never_repeat(self, scenarios):
        assoc = Associator(CFG)
        seen: set[int] = set()
        for f, (_, dets) in enumerate(scenarios):
            r = assoc.associate(dets, f)
            for n in r.new_objects:
                assert n.object_id not in seen
                seen.add(n.object_id)

    def test_static_scene_zero_new_after_first(self):
        dets = [det(10, 10, 40, 40), det(100, 100, 130, 130)]
        assoc = Associator(CFG)
        first = assoc.associate(dets, 0)
        assert len(first.new_objects) == 2
        for f in range(1, 10):
            r = assoc.associate(dets, f)
            assert r.new_objects == []
            assert set(r.mapping.values()) == {0, 1}

    @given(st.lists(st.tuples(st.integers(0, 12), st.integers(0, 12)), min_size=1, max_size=6, unique=True), st.integers(2, 6))
    @settings(max_examples=1000, deadline=None)
    def test_random_static_scene_zero_new_after_first(self, cells, frames):
        dets = [det(40 * x, 40 * y, 40 * x + 25, 40 * y + 25) for x, y in cells]
        assoc = Associator(CFG)
        assert len(assoc.associate(dets, 0).new_objects) == len(dets)
        for f in range(1, frames):
            assert assoc.associate(dets, f).new_objects == []


class TestAssociatorState:
    def test_state_roundtrip(self):
        assoc = Associator(CFG)
        assoc.associate([det(10, 10, 40, 40)], 0)
        assoc.associate([det(12, 10, 42, 40), det(200, 200, 240, 240)], 1)
        state = assoc.get_state()
        clone = Associator(CFG)
        clone.set_state(state)
        assert clone.get_state() == state
        a = assoc.associate([det(14, 10, 44, 40)], 2)
        b = clone.associate([det(14, 10, 44, 40)], 2)
        assert a.mapping == b.mapping
        assert a.next_id == b.next_id

    def test_frames_strictly_increasing(self):
        assoc = Associator(CFG)
        assoc.associate([], 3)
        with pytest.raises(ValueError):
            assoc.associate([], 3)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            AssocConfig(tau_track_det=0.0)
        with pytest.raises(ValueError):
            AssocConfig(lambda_min=100, lambda_max=100)
