"""Target, reference, union and geo-distance embeddings for target-reference pairs.

Two entry points share one set of encoder parameters:

* :func:`build_pair_embedding` embeds a single (scene, target, reference)
  triple, mirroring the textbook description.
* :class:`PackedPairs` precomputes the non-learned inputs for every pair of a
  dataset so training can embed whole batches with a handful of matrix ops.
"""

from dataclasses import dataclass

import numpy as np

from .diffcore import MLPSpec, Tensor, concat, init_mlp, mlp_forward
from .records import InputError
from .scenesim import APPEARANCE_DIM

GEO_DIM = 13
GAP_SCALE_M = 100.0
# mean appearance inside the union box, its normalized geometry, gap reading and a seen flag
UNION_DIM = APPEARANCE_DIM + 4 + 2
FAMILIES = ("tgt", "ref", "uni", "geo")


@dataclass(frozen=True)
class Toggles:
    """Which embedding families feed the pair embedding; disabled ones become zeros."""

    tgt: bool = True
    ref: bool = True
    uni: bool = True
    geo: bool = True

    @classmethod
    def from_string(cls, text):
        """Parse ``"tgt+ref+geo"`` style strings (``"all"`` enables everything)."""
        text = text.strip().lower()
        if text == "all":
            return cls()
        names = {p.strip() for p in text.replace(",", "+").split("+") if p.strip()}
        aliases = {"g-d": "geo", "gd": "geo", "union": "uni", "target": "tgt", "reference": "ref"}
        names = {aliases.get(n, n) for n in names}
        unknown = names - set(FAMILIES)
        if unknown:
            raise ValueError(f"unknown embedding families: {sorted(unknown)}")
        return cls(*(f in names for f in FAMILIES))

    def label(self):
        return "+".join(f for f in FAMILIES if getattr(self, f)) or "none"

    @property
    def uses_pairs(self):
        return self.ref or self.uni or self.geo


# -- geometry helpers ---------------------------------------------------------


def to_corners(bbox):
    cx, cy, w, h = bbox
    return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def to_center(corners):
    x1, y1, x2, y2 = corners
    return ((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)


def union_box(b1, b2):
    """Smallest axis-aligned box containing both ``(cx, cy, w, h)`` boxes."""
    a, b = to_corners(b1), to_corners(b2)
    return to_center((min(a[0], b[0]), min(a[1], b[1]), max(a[2], b[2]), max(a[3], b[3])))


def boxes_intersect(a, b):
    """Positive-area overlap test for corner boxes."""
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def gap_features(scene, target_id, reference_id):
    """``[gap / 100, 1]`` from the scene's road-gap reading, or ``[0, 0]`` if absent."""
    g = scene.road_gap(target_id, reference_id)
    return np.zeros(2) if g is None else np.array([g / GAP_SCALE_M, 1.0])


def union_features(scene, ubox, target_id=None, reference_id=None):
    """Mean appearance of the objects overlapping ``ubox``, its normalized geometry,
    and the road-gap reading between the two objects."""
    cam = scene.camera
    uc = to_corners(ubox)
    inside = [o.appearance for o in scene.objects if boxes_intersect(to_corners(o.bbox), uc)]
    mean_app = np.mean(inside, axis=0) if inside else np.zeros(APPEARANCE_DIM)
    cx, cy, w, h = ubox
    geom = [cx / cam.image_width, cy / cam.image_height, w / cam.image_width, h / cam.image_height]
    gap = np.zeros(2) if target_id is None else gap_features(scene, target_id, reference_id)
    return np.concatenate([mean_app, geom, gap])


def geo_input(target_bbox, reference_bbox, reference_distance_m, camera, max_distance_m):
    """The 13 geometric scalars of a pair, pixel terms normalized by image size.

    Order: target center, reference center, center shift, target size,
    reference size, size ratios (target / reference), reference distance.
    """
    cxt, cyt, wt, ht = target_bbox
    cxr, cyr, wr, hr = reference_bbox
    if wr <= 0 or hr <= 0:
        raise InputError("reference box must have positive width and height")
    if reference_distance_m <= 0:
        raise InputError("reference distance must be positive")
    W, H = float(camera.image_width), float(camera.image_height)
    return np.array([
        cxt / W, cyt / H,
        cxr / W, cyr / H,
        (cxt - cxr) / W, (cyt - cyr) / H,
        wt / W, ht / H,
        wr / W, hr / H,
        wt / wr, ht / hr,
        reference_distance_m / max_distance_m,
    ])


# -- encoders -------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureEncoders:
    """Architecture of the four embedding encoders (all output ``embed_dim``)."""

    embed_dim: int = 64
    geo_layers: int = 3

    @property
    def target_spec(self):
        return MLPSpec((self.embed_dim,))

    @property
    def reference_spec(self):
        return MLPSpec((self.embed_dim,))

    @property
    def union_spec(self):
        return MLPSpec((self.embed_dim,))

    @property
    def geo_spec(self):
        return MLPSpec((self.embed_dim,) * self.geo_layers, use_layer_norm=True)

    @property
    def pair_dim(self):
        return 4 * self.embed_dim

    def init_params(self, rng, params=None):
        params = {} if params is None else params
        init_mlp(self.target_spec, APPEARANCE_DIM, rng, "tgt", params)
        init_mlp(self.reference_spec, APPEARANCE_DIM, rng, "ref", params)
        init_mlp(self.union_spec, UNION_DIM, rng, "uni", params)
        init_mlp(self.geo_spec, GEO_DIM, rng, "geo", params)
        return params

    def embed_targets(self, params, appearance):
        return mlp_forward(self.target_spec, params, Tensor(np.atleast_2d(appearance)), "tgt")

    def embed_references(self, params, appearance):
        return mlp_forward(self.reference_spec, params, Tensor(np.atleast_2d(appearance)), "ref")

    def embed_unions(self, params, union_inputs):
        return mlp_forward(self.union_spec, params, Tensor(np.atleast_2d(union_inputs)), "uni")

    def embed_geo(self, params, geo_inputs):
        geo_inputs = geo_inputs if isinstance(geo_inputs, Tensor) else Tensor(np.atleast_2d(geo_inputs))
        return mlp_forward(self.geo_spec, params, geo_inputs, "geo")

    def assemble(self, params, toggles, tgt_app, ref_app, union_in, geo_in):
        """Pair embeddings ``[n, 4E]`` in the order target | reference | union | geo."""
        n = np.atleast_2d(tgt_app).shape[0]
        zeros = Tensor(np.zeros((n, self.embed_dim)))
        parts = [
            self.embed_targets(params, tgt_app) if toggles.tgt else zeros,
            self.embed_references(params, ref_app) if toggles.ref else zeros,
            self.embed_unions(params, union_in) if toggles.uni else zeros,
            self.embed_geo(params, geo_in) if toggles.geo else zeros,
        ]
        return concat(parts, axis=1)

    def fallback(self, params, toggles, tgt_app):
        """Embedding for a target with no references: ``[target | 0 | 0 | 0]``."""
        n = np.atleast_2d(tgt_app).shape[0]
        first = self.embed_targets(params, tgt_app) if toggles.tgt else Tensor(np.zeros((n, self.embed_dim)))
        return concat([first, Tensor(np.zeros((n, 3 * self.embed_dim)))], axis=1)


def encode_geo(geo, encoders, params):
    """Geo-distance embedding ``[E]`` of one 13-scalar input."""
    geo = np.asarray(geo, dtype=np.float64)
    if geo.shape != (GEO_DIM,):
        raise InputError(f"geo input must have {GEO_DIM} entries")
    return encoders.embed_geo(params, geo[None, :]).reshape(encoders.embed_dim)


def pair_inputs(scene, target, reference, max_distance_m):
    """Non-learned inputs ``(target_app, ref_app, union_in, geo_in)`` of one pair."""
    ubox = union_box(target.bbox, reference.bbox)
    return (
        target.appearance,
        reference.appearance,
        union_features(scene, ubox, target.object_id, reference.object_id),
        geo_input(target.bbox, reference.bbox, reference.known_distance_m, scene.camera, max_distance_m),
    )


def build_pair_embedding(scene, target, reference, encoders, params, toggles=Toggles(), max_distance_m=300.0):
    if target not in scene.objects or reference not in scene.objects:
        raise InputError("target and reference must belong to the scene")
    tgt_app, ref_app, uni, geo = pair_inputs(scene, target, reference, max_distance_m)
    out = encoders.assemble(params, toggles, tgt_app[None], ref_app[None], uni[None], geo[None])
    return out.reshape(encoders.pair_dim)


# -- reference selection ----------------------------------------------------------


def image_distance(a, b):
    return float(np.hypot(a.bbox[0] - b.bbox[0], a.bbox[1] - b.bbox[1]))


def select_references(scene, target, max_refs):
    """References used for ``target``: all if at most ``max_refs``, otherwise the
    ``max_refs`` nearest in the image plane (ties by id). Returned in id order."""
    if max_refs < 0:
        raise InputError("max_refs must be non-negative")
    refs = sorted(scene.references, key=lambda o: o.object_id)
    if len(refs) <= max_refs:
        return refs
    ranked = sorted(refs, key=lambda o: (image_distance(o, target), o.object_id))
    return sorted(ranked[:max_refs], key=lambda o: o.object_id)


def nearest_reference(scene, target, refs=None):
    refs = scene.references if refs is None else refs
    if not refs:
        raise InputError("target has no references")
    return min(refs, key=lambda o: (image_distance(o, target), o.object_id))


# -- packed dataset -----------------------------------------------------------------


class PackedPairs:
    """All targets and their selected pairs of a dataset as flat arrays.

    Targets are stored scene by scene and pairs target by target, so a batch
    of scenes maps to contiguous index ranges. ``pair_geo`` holds the twelve
    pixel-derived geo scalars; the reference-distance column is appended at
    batch time because augmentation changes it.
    """

    def __init__(self, dataset, max_refs, max_distance_m):
        self.max_refs = max_refs
        self.max_distance_m = float(max_distance_m)
        scene_ids, t_scene, t_obj, t_app, t_label, t_bbox = [], [], [], [], [], []
        p_target, p_ref, p_app, p_union, p_geo, p_dr, p_dr_true = [], [], [], [], [], [], []
        t_nearest = []
        scene_tstart = [0]
        for si, scene in enumerate(dataset):
            scene_ids.append(scene.scene_id)
            cam = scene.camera
            corners = np.array([to_corners(o.bbox) for o in scene.objects])
            apps = np.array([o.appearance for o in scene.objects])
            for target in scene.targets:
                ti = len(t_obj)
                t_scene.append(si)
                t_obj.append(target.object_id)
                t_app.append(target.appearance)
                t_label.append(target.label_distance_m)
                t_bbox.append(target.bbox)
                refs = select_references(scene, target, max_refs)
                t_nearest.append(nearest_reference(scene, target, refs).object_id if refs else -1)
                for ref in refs:
                    ubox = union_box(target.bbox, ref.bbox)
                    uc = to_corners(ubox)
                    hit = (
                        (corners[:, 0] < uc[2]) & (uc[0] < corners[:, 2])
                        & (corners[:, 1] < uc[3]) & (uc[1] < corners[:, 3])
                    )
                    geom = [ubox[0] / cam.image_width, ubox[1] / cam.image_height,
                            ubox[2] / cam.image_width, ubox[3] / cam.image_height]
                    gap = gap_features(scene, target.object_id, ref.object_id)
                    p_union.append(np.concatenate([apps[hit].mean(axis=0), geom, gap]))
                    p_target.append(ti)
                    p_ref.append(ref.object_id)
                    p_app.append(ref.appearance)
                    geo = geo_input(target.bbox, ref.bbox, ref.known_distance_m, cam, self.max_distance_m)
                    p_geo.append(geo[:12])
                    p_dr.append(ref.known_distance_m)
                    p_dr_true.append(ref.distance_m)
            scene_tstart.append(len(t_obj))

        self.scene_ids = scene_ids
        self.target_scene = np.array(t_scene, dtype=np.intp)
        self.target_object = np.array(t_obj, dtype=np.intp)
        self.target_app = np.array(t_app, dtype=np.float64).reshape(-1, APPEARANCE_DIM)
        self.target_label = np.array(t_label, dtype=np.float64)
        self.target_bbox = np.array(t_bbox, dtype=np.float64).reshape(-1, 4)
        self.target_nearest_ref = np.array(t_nearest, dtype=np.intp)
        self.pair_target = np.array(p_target, dtype=np.intp)
        self.pair_ref = np.array(p_ref, dtype=np.intp)
        self.pair_app = np.array(p_app, dtype=np.float64).reshape(-1, APPEARANCE_DIM)
        self.pair_union = np.array(p_union, dtype=np.float64).reshape(-1, UNION_DIM)
        self.pair_geo = np.array(p_geo, dtype=np.float64).reshape(-1, 12)
        self.pair_dr = np.array(p_dr, dtype=np.float64)
        self.pair_dr_true = np.array(p_dr_true, dtype=np.float64)
        self.scene_tstart = np.array(scene_tstart, dtype=np.intp)
        counts = np.bincount(self.pair_target, minlength=len(t_obj))
        self.target_pstart = np.concatenate([[0], np.cumsum(counts)]).astype(np.intp)

    @property
    def n_scenes(self):
        return len(self.scene_ids)

    @property
    def n_targets(self):
        return self.target_label.size

    @property
    def n_pairs(self):
        return self.pair_target.size

    def n_refs(self, t):
        return int(self.target_pstart[t + 1] - self.target_pstart[t])

    def batch(self, scene_indices):
        """Target and pair indices covering the given scenes."""
        targets = np.concatenate(
            [np.arange(self.scene_tstart[s], self.scene_tstart[s + 1]) for s in scene_indices]
        ).astype(np.intp) if len(scene_indices) else np.zeros(0, np.intp)
        return self.batch_targets(targets)

    def batch_targets(self, targets):
        targets = np.asarray(targets, dtype=np.intp)
        pairs = [np.arange(self.target_pstart[t], self.target_pstart[t + 1]) for t in targets]
        pairs = np.concatenate(pairs).astype(np.intp) if pairs else np.zeros(0, np.intp)
        return targets, pairs
