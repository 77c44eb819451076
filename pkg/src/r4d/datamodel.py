"""Dataset and prediction files, splitting, and role transforms.

Dataset files are JSON lines: a header record followed by one scene per line.
Floats are written with Python's shortest round-trip repr, so reading a file
and writing it again reproduces it byte for byte.
"""

import copy
import csv
import io
import json

import numpy as np

from .diffcore.checkpoint import atomic_write_text
from .records import CameraModel, Dataset, InputError, PredictionRecord, RenderedObject, Scene
from .scenesim import APPEARANCE_DIM

DATASET_FORMAT = "r4d-dataset"
PREDICTION_FORMAT = "r4d-predictions"
FORMAT_VERSION = 1
LABEL_COLUMNS = ("frame_id", "cx", "cy", "w", "h", "distance_m", "role")


class ParseError(ValueError):
    pass


class VersionError(ValueError):
    pass


class EmptyDatasetError(ValueError):
    pass


# -- scenes ---------------------------------------------------------------


def object_to_dict(obj):
    d = {
        "id": obj.object_id,
        "role": "reference" if obj.is_reference else "target",
        "bbox": list(obj.bbox),
        "appearance": [float(v) for v in obj.appearance],
    }
    if obj.is_reference:
        d["known_distance_m"] = obj.known_distance_m
    else:
        d["label_distance_m"] = obj.label_distance_m
    if obj.true_distance_m is not None:
        d["true_distance_m"] = obj.true_distance_m
    return d


def _require(d, key, where):
    if key not in d:
        raise ParseError(f"{where}: missing required field '{key}'")
    return d[key]


def object_from_dict(d, where):
    role = _require(d, "role", where)
    if role not in ("reference", "target"):
        raise ParseError(f"{where}: unknown role {role!r}")
    is_ref = role == "reference"
    try:
        return RenderedObject(
            object_id=int(_require(d, "id", where)),
            bbox=tuple(_require(d, "bbox", where)),
            appearance=np.array(_require(d, "appearance", where), dtype=np.float64),
            is_reference=is_ref,
            known_distance_m=_require(d, "known_distance_m", where) if is_ref else None,
            label_distance_m=None if is_ref else _require(d, "label_distance_m", where),
            true_distance_m=d.get("true_distance_m"),
        )
    except InputError as exc:
        raise ParseError(f"{where}: {exc}") from None


def scene_to_dict(scene):
    return {
        "scene_id": scene.scene_id,
        "regime": scene.regime,
        "camera": scene.camera.to_dict(),
        "objects": [object_to_dict(o) for o in scene.objects],
        "road_gaps": [[a, b, g] for (a, b), g in sorted(scene.road_gaps.items())],
    }


def scene_from_dict(d, where="scene"):
    sid = _require(d, "scene_id", where)
    where = f"{where} ({sid})"
    objects = [object_from_dict(o, f"{where} object {k}") for k, o in enumerate(_require(d, "objects", where))]
    try:
        gaps = {(int(a), int(b)): float(g) for a, b, g in d.get("road_gaps", [])}
    except (TypeError, ValueError):
        raise ParseError(f"{where}: road_gaps must be [a, b, gap] triples") from None
    return Scene(sid, CameraModel.from_dict(_require(d, "camera", where)), objects, d.get("regime", "day"), gaps)


def _dumps(record):
    return json.dumps(record, separators=(",", ":"), allow_nan=False)


def dumps_dataset(dataset):
    header = {
        "format": DATASET_FORMAT,
        "version": FORMAT_VERSION,
        "split": dataset.split_tag,
        "provenance": dataset.provenance,
        "n_scenes": len(dataset),
    }
    lines = [_dumps(header)] + [_dumps(scene_to_dict(s)) for s in dataset.scenes]
    return "\n".join(lines) + "\n"


def loads_dataset(text, source="<dataset>"):
    lines = text.splitlines()
    if not lines:
        raise ParseError(f"{source}: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(f"{source}:1: bad header ({exc.msg})") from None
    if header.get("format") != DATASET_FORMAT:
        raise ParseError(f"{source}: not an {DATASET_FORMAT} file")
    if header.get("version") != FORMAT_VERSION:
        raise VersionError(f"{source}: unsupported dataset version {header.get('version')!r}")
    scenes = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{source}:{lineno}: {exc.msg}") from None
        scenes.append(scene_from_dict(record, f"{source}:{lineno}"))
    expected = header.get("n_scenes")
    if expected is not None and expected != len(scenes):
        raise ParseError(f"{source}: truncated, header promises {expected} scenes, found {len(scenes)}")
    return Dataset(scenes, header.get("split", "train"), header.get("provenance", ""))


def write_dataset(path, dataset):
    atomic_write_text(path, dumps_dataset(dataset))


def read_dataset(path):
    with open(path, encoding="utf-8") as fh:
        return loads_dataset(fh.read(), path)


# -- predictions ------------------------------------------------------------


def dumps_predictions(records):
    header = {"format": PREDICTION_FORMAT, "version": FORMAT_VERSION, "n_records": len(records)}
    lines = [_dumps(header)]
    for r in records:
        r.validate()
        rec = {
            "scene_id": r.scene_id,
            "target_id": r.target_id,
            "predicted_distance_m": r.predicted_distance_m,
        }
        if r.attention is not None:
            rec["attention"] = [[int(ref), float(w)] for ref, w in r.attention]
        lines.append(_dumps(rec))
    return "\n".join(lines) + "\n"


def loads_predictions(text, source="<predictions>"):
    lines = text.splitlines()
    if not lines:
        raise ParseError(f"{source}: empty file")
    header = json.loads(lines[0])
    if header.get("format") != PREDICTION_FORMAT:
        raise ParseError(f"{source}: not an {PREDICTION_FORMAT} file")
    if header.get("version") != FORMAT_VERSION:
        raise VersionError(f"{source}: unsupported prediction version {header.get('version')!r}")
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{source}:{lineno}: {exc.msg}") from None
        where = f"{source}:{lineno}"
        att = d.get("attention")
        rec = PredictionRecord(
            scene_id=_require(d, "scene_id", where),
            target_id=int(_require(d, "target_id", where)),
            predicted_distance_m=float(_require(d, "predicted_distance_m", where)),
            attention=[(int(a), float(w)) for a, w in att] if att is not None else None,
        )
        try:
            rec.validate()
        except InputError as exc:
            raise ParseError(f"{where}: {exc}") from None
        records.append(rec)
    if header.get("n_records") not in (None, len(records)):
        raise ParseError(f"{source}: truncated, expected {header['n_records']} records")
    return records


def write_predictions(path, records):
    atomic_write_text(path, dumps_predictions(records))


def read_predictions(path):
    with open(path, encoding="utf-8") as fh:
        return loads_predictions(fh.read(), path)


# -- transforms ---------------------------------------------------------------


def _recast(obj, as_reference):
    """Copy of ``obj`` in the requested role, keeping its best distance."""
    if obj.is_reference == as_reference:
        return copy.deepcopy(obj)
    d = obj.distance_m
    return RenderedObject(
        obj.object_id,
        obj.bbox,
        obj.appearance.copy(),
        as_reference,
        known_distance_m=d if as_reference else None,
        label_distance_m=None if as_reference else d,
        true_distance_m=obj.true_distance_m,
    )


def pseudo_longrange_filter(dataset, cutoff_m):
    """Re-assign roles by distance: ``<= cutoff_m`` is a reference, beyond is a target.

    Scenes that end up without any target are dropped.
    """
    if cutoff_m <= 0:
        raise InputError("cutoff_m must be positive")
    scenes = []
    for scene in dataset:
        objects = [_recast(o, o.distance_m <= cutoff_m) for o in scene.objects]
        if any(not o.is_reference for o in objects):
            scenes.append(Scene(scene.scene_id, scene.camera, objects, scene.regime, dict(scene.road_gaps)))
    if not scenes:
        raise EmptyDatasetError(f"no object lies beyond {cutoff_m} m in any scene")
    tag = f"|cutoff={cutoff_m}"
    provenance = dataset.provenance if dataset.provenance.endswith(tag) else dataset.provenance + tag
    return Dataset(scenes, dataset.split_tag, provenance)


def drop_targetless(dataset):
    return Dataset([s for s in dataset if s.targets], dataset.split_tag, dataset.provenance)


def split(dataset, val_fraction, seed):
    """Scene-level random split into ``(train, val)``."""
    if not 0 < val_fraction < 1:
        raise InputError("val_fraction must lie strictly between 0 and 1")
    n = len(dataset)
    n_val = int(round(n * val_fraction))
    if n_val < 1 or n_val > n - 1:
        raise InputError(f"{n} scenes cannot be split into two non-empty parts at {val_fraction}")
    order = np.random.default_rng(seed).permutation(n)
    val_idx = set(order[:n_val].tolist())
    train = [s for i, s in enumerate(dataset.scenes) if i not in val_idx]
    val = [s for i, s in enumerate(dataset.scenes) if i in val_idx]
    return (
        Dataset(train, "train", dataset.provenance),
        Dataset(val, "val", dataset.provenance),
    )


# -- external label files -------------------------------------------------------


def geometry_appearance(bbox):
    """Appearance vector for ingested boxes: only projected size and aspect are known."""
    _, _, w, h = bbox
    vec = np.zeros(APPEARANCE_DIM)
    vec[0] = np.log(h / 10.0)
    vec[1] = np.log(w / 10.0)
    vec[2] = np.log(w / h)
    return vec


def ingest_labels(path, format_version=1, camera=None):
    """Read ``frame_id,cx,cy,w,h,distance_m,role`` rows into a dataset.

    Rows sharing a ``frame_id`` form one scene. Scenes without targets are
    dropped; an input with no usable scene raises :class:`EmptyDatasetError`.
    """
    if format_version != 1:
        raise VersionError(f"unsupported label format version {format_version!r}")
    camera = camera or CameraModel()
    with open(path, encoding="utf-8", newline="") as fh:
        text = fh.read()
    return ingest_label_text(text, camera, source=path)


def ingest_label_text(text, camera, source="<labels>"):
    reader = csv.reader(io.StringIO(text))
    rows = list(reader)
    if not rows:
        raise EmptyDatasetError(f"{source}: empty label file")
    header = [c.strip() for c in rows[0]]
    if tuple(header) != LABEL_COLUMNS:
        raise ParseError(f"{source}:1: header must be {','.join(LABEL_COLUMNS)}")
    frames = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(LABEL_COLUMNS):
            raise ParseError(f"{source}:{lineno}: expected {len(LABEL_COLUMNS)} columns, got {len(row)}")
        frame_id = row[0].strip()
        try:
            cx, cy, w, h, dist = (float(v) for v in row[1:6])
        except ValueError:
            raise ParseError(f"{source}:{lineno}: non-numeric box or distance value") from None
        role = row[6].strip()
        if role not in ("reference", "target"):
            raise ParseError(f"{source}:{lineno}: role must be 'reference' or 'target'")
        if w <= 0 or h <= 0 or dist <= 0 or not all(np.isfinite([cx, cy, w, h, dist])):
            raise ParseError(f"{source}:{lineno}: box size and distance must be positive and finite")
        objs = frames.setdefault(frame_id, [])
        bbox = (cx, cy, w, h)
        is_ref = role == "reference"
        objs.append(
            RenderedObject(
                len(objs), bbox, geometry_appearance(bbox), is_ref,
                known_distance_m=dist if is_ref else None,
                label_distance_m=None if is_ref else dist,
            )
        )
    scenes = [Scene(fid, camera, objs) for fid, objs in frames.items() if any(not o.is_reference for o in objs)]
    if not scenes:
        raise EmptyDatasetError(f"{source}: no frame contains a target")
    return Dataset(scenes, "val", f"labels:{source}")


def dumps_labels(dataset):
    """Export a dataset as an external label file (boxes, distances, roles)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LABEL_COLUMNS)
    for scene in dataset:
        for o in scene.objects:
            dist = o.known_distance_m if o.is_reference else o.label_distance_m
            writer.writerow([scene.scene_id, *(repr(float(v)) for v in o.bbox), repr(float(dist)),
                             "reference" if o.is_reference else "target"])
    return buf.getvalue()


def write_labels(path, dataset):
    atomic_write_text(path, dumps_labels(dataset))
