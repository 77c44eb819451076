"""Tests for persistence, splitting, the pseudo long-range cutoff and label ingestion."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from r4d.datamodel import (
    EmptyDatasetError,
    ParseError,
    VersionError,
    dumps_dataset,
    dumps_labels,
    dumps_predictions,
    ingest_label_text,
    ingest_labels,
    loads_dataset,
    loads_predictions,
    pseudo_longrange_filter,
    read_dataset,
    read_predictions,
    split,
    write_dataset,
    write_labels,
    write_predictions,
)
from r4d.records import CameraModel, Dataset, InputError, PredictionRecord, RenderedObject, Scene
from r4d.scenesim import APPEARANCE_DIM, SceneSpec, generate_dataset

HEADER = "frame_id,cx,cy,w,h,distance_m,role\n"


@pytest.fixture(scope="module")
def small():
    return generate_dataset(SceneSpec(), 40)


def obj(i, dist, ref):
    return RenderedObject(i, (100.0 + 10 * i, 500.0, 20.0, 10.0), np.zeros(APPEARANCE_DIM), ref,
                          known_distance_m=dist if ref else None, label_distance_m=None if ref else dist,
                          true_distance_m=dist)


def scene(sid, dists_roles):
    return Scene(sid, CameraModel(), [obj(i, d, r) for i, (d, r) in enumerate(dists_roles)])


class TestDatasetFiles:
    def test_write_read_write_identical(self, small, tmp_path):
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        write_dataset(p1, small)
        write_dataset(p2, read_dataset(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_round_trip_bit_exact(self, small):
        back = loads_dataset(dumps_dataset(small))
        assert len(back) == len(small)
        for s, b in zip(small, back):
            assert s.scene_id == b.scene_id and s.regime == b.regime
            assert s.road_gaps == b.road_gaps
            for o, p in zip(s.objects, b.objects):
                assert o.bbox == p.bbox
                assert o.appearance.tobytes() == p.appearance.tobytes()
                assert (o.known_distance_m, o.label_distance_m, o.true_distance_m) == \
                       (p.known_distance_m, p.label_distance_m, p.true_distance_m)

    def test_missing_field_named(self, small):
        lines = dumps_dataset(small).splitlines()
        rec = json.loads(lines[1])
        del rec["objects"][0]["bbox"]
        lines[1] = json.dumps(rec)
        with pytest.raises(ParseError, match="bbox"):
            loads_dataset("\n".join(lines))

    def test_truncated(self, small):
        lines = dumps_dataset(small).splitlines()
        with pytest.raises(ParseError, match="truncated"):
            loads_dataset("\n".join(lines[:-3]))

    def test_version_mismatch(self, small):
        lines = dumps_dataset(small).splitlines()
        header = json.loads(lines[0])
        header["version"] = 99
        with pytest.raises(VersionError):
            loads_dataset("\n".join([json.dumps(header)] + lines[1:]))

    @pytest.mark.parametrize("text", ["", "not json\n", '{"format": "other"}\n'])
    def test_bad_header(self, text):
        with pytest.raises(ParseError):
            loads_dataset(text)

    def test_duplicate_scene_ids(self):
        s = scene("x", [(100.0, False)])
        with pytest.raises(InputError):
            Dataset([s, s])


class TestPredictionFiles:
    def test_round_trip(self, tmp_path):
        recs = [PredictionRecord("s", 1, 123.25, [(0, 0.25), (2, 0.75)]), PredictionRecord("s", 3, 90.5)]
        write_predictions(tmp_path / "p.jsonl", recs)
        back = read_predictions(tmp_path / "p.jsonl")
        assert back == recs
        assert dumps_predictions(back) == (tmp_path / "p.jsonl").read_text()

    def test_weight_sum_rejected(self):
        text = dumps_predictions([PredictionRecord("s", 1, 100.0, [(0, 0.5), (1, 0.5)])])
        bad = text.replace("[1,0.5]", "[1,0.3]")
        with pytest.raises(ParseError, match="sum"):
            loads_predictions(bad)

    def test_nonpositive_prediction(self):
        with pytest.raises(InputError):
            PredictionRecord("s", 1, 0.0).validate()

    def test_missing_field(self):
        text = '{"format":"r4d-predictions","version":1}\n{"scene_id":"s","target_id":1}\n'
        with pytest.raises(ParseError, match="predicted_distance_m"):
            loads_predictions(text)


class TestPseudoLongRange:
    def test_forced_roles(self):
        ds = Dataset([scene("a", [(30.0, True), (60.0, True)])])
        out = pseudo_longrange_filter(ds, 40.0)
        s = out.scenes[0]
        assert [o.known_distance_m for o in s.references] == [30.0]
        assert [o.label_distance_m for o in s.targets] == [60.0]

    def test_all_near_dropped(self):
        ds = Dataset([scene("a", [(10.0, True), (20.0, True)]), scene("b", [(10.0, True), (90.0, False)])])
        out = pseudo_longrange_filter(ds, 40.0)
        assert [s.scene_id for s in out] == ["b"]

    def test_empty_result(self):
        ds = Dataset([scene("a", [(10.0, True), (20.0, False)])])
        with pytest.raises(EmptyDatasetError):
            pseudo_longrange_filter(ds, 100.0)

    def test_bad_cutoff(self, small):
        with pytest.raises(InputError):
            pseudo_longrange_filter(small, 0.0)

    @given(cutoff=st.floats(20.0, 200.0))
    @settings(max_examples=15, deadline=None)
    def test_idempotent_and_disjoint(self, small, cutoff):
        ds = Dataset(small.scenes[:15])
        try:
            once = pseudo_longrange_filter(ds, cutoff)
        except EmptyDatasetError:
            return
        twice = pseudo_longrange_filter(once, cutoff)
        assert dumps_dataset(once) == dumps_dataset(twice)
        for s in once:
            ref_ids = {o.object_id for o in s.references}
            tgt_ids = {o.object_id for o in s.targets}
            assert not ref_ids & tgt_ids
            assert all(o.distance_m <= cutoff for o in s.references)
            assert all(o.distance_m > cutoff for o in s.targets)

    def test_keeps_road_gaps(self, small):
        out = pseudo_longrange_filter(small, 40.0)
        by_id = {s.scene_id: s for s in small}
        for s in out:
            assert s.road_gaps == by_id[s.scene_id].road_gaps


class TestSplit:
    def test_arithmetic(self, small):
        ten = Dataset(small.scenes[:10])
        tr, va = split(ten, 0.2, seed=1)
        assert (len(tr), len(va)) == (8, 2)

    def test_deterministic_partition(self, small):
        a = split(small, 0.25, seed=3)
        b = split(small, 0.25, seed=3)
        assert [s.scene_id for s in a[1]] == [s.scene_id for s in b[1]]
        ids = {s.scene_id for s in a[0]} | {s.scene_id for s in a[1]}
        assert ids == {s.scene_id for s in small}
        assert not {s.scene_id for s in a[0]} & {s.scene_id for s in a[1]}

    @pytest.mark.parametrize("frac", [0.0, 1.0, 0.01])
    def test_too_small_or_bad_fraction(self, small, frac):
        with pytest.raises(InputError):
            split(Dataset(small.scenes[:3]), frac, seed=0)


class TestLabels:
    def test_empty_file(self):
        with pytest.raises(EmptyDatasetError):
            ingest_label_text("", CameraModel())

    def test_single_row(self):
        ds = ingest_label_text(HEADER + "f1,960,545,20,10,150,target\n", CameraModel())
        assert len(ds) == 1
        t = ds.scenes[0].targets[0]
        assert t.label_distance_m == 150.0 and t.bbox == (960.0, 545.0, 20.0, 10.0)

    @pytest.mark.parametrize("row,msg", [
        ("f1,960,545,20,10,150\n", "columns"),
        ("f1,960,545,abc,10,150,target\n", "non-numeric"),
        ("f1,960,545,20,10,150,car\n", "role"),
        ("f1,960,545,0,10,150,target\n", "positive"),
    ])
    def test_malformed_rows_report_line(self, row, msg):
        with pytest.raises(ParseError, match=f":3: .*{msg}"):
            ingest_label_text(HEADER + "f0,1,1,1,1,100,target\n" + row, CameraModel())

    def test_missing_header(self):
        with pytest.raises(ParseError, match=":1:"):
            ingest_label_text("f1,960,545,20,10,150,target\n", CameraModel())

    def test_unknown_version(self, tmp_path):
        p = tmp_path / "l.csv"
        p.write_text(HEADER)
        with pytest.raises(VersionError):
            ingest_labels(p, format_version=2)

    def test_round_trip_boxes_and_distances(self, small, tmp_path):
        write_labels(tmp_path / "l.csv", small)
        back = ingest_labels(tmp_path / "l.csv")
        assert [s.scene_id for s in back] == [s.scene_id for s in small]
        for s, b in zip(small, back):
            for o, p in zip(s.objects, b.objects):
                np.testing.assert_allclose(o.bbox, p.bbox, rtol=0, atol=1e-9)
                assert o.is_reference == p.is_reference
                d0 = o.known_distance_m if o.is_reference else o.label_distance_m
                d1 = p.known_distance_m if p.is_reference else p.label_distance_m
                assert abs(d0 - d1) <= 1e-9

    def test_geometry_only_appearance(self):
        ds = ingest_label_text(HEADER + "f1,960,545,20,10,150,target\n", CameraModel())
        app = ds.scenes[0].targets[0].appearance
        assert app[0] == pytest.approx(np.log(1.0)) and app[2] == pytest.approx(np.log(2.0))
        assert np.all(app[3:] == 0)

    def test_export_text_stable(self, small):
        assert dumps_labels(small) == dumps_labels(loads_dataset(dumps_dataset(small)))
