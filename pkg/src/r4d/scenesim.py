"""Deterministic synthetic driving scenes seen through a pinhole camera.

Each scene is a straight multi-lane road. Short-range objects (within the
lidar range) become references carrying a noisy measured distance; objects
beyond it become targets carrying their exact distance as label. Boxes come
from pinhole projection with a small detector jitter, and a per-frame horizon
shift models camera pitch. Appearance vectors are procedural stand-ins for
CNN crop embeddings: noisy encodings of projected size, pose, vehicle type and
lane, with noise growing as boxes shrink and as lighting worsens.

Every pair of objects also gets a measured road gap, a noisy reading of how
much road lies between them (``d_a - d_b``) with error proportional to the gap.
It stands in for what the image region between two objects reveals (lane
markings, road texture) and is what the union embedding sees.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .records import CameraModel, ConfigError, Dataset, InputError, RenderedObject, Scene, WorldObject

REGIMES = ("day", "dawn_dusk", "night")
LANE_WIDTH_M = 3.7
MAX_LANE_OFFSET = 2

# (probability, mean height, sd height, mean width, sd width)
VEHICLE_KINDS = (
    (0.55, 1.50, 0.06, 1.85, 0.08),  # car
    (0.30, 1.85, 0.08, 2.00, 0.08),  # suv / van
    (0.15, 3.20, 0.30, 2.50, 0.10),  # truck / bus
)
N_KINDS = len(VEHICLE_KINDS)

# log h, log w, log aspect, sin pose, cos pose, kind one-hot, height hint, lane one-hot
APPEARANCE_DIM = 5 + N_KINDS + 1 + (2 * MAX_LANE_OFFSET + 1)


@dataclass(frozen=True)
class SceneSpec:
    lidar_range_m: float = 80.0
    max_distance_m: float = 300.0
    min_distance_m: float = 5.0
    n_references: tuple = (1, 8)
    n_targets: tuple = (1, 4)
    ref_distance_noise_sigma_m: float = 0.5
    appearance_noise_sigma: tuple = (("day", 0.06), ("dawn_dusk", 0.10), ("night", 0.17))
    size_noise_scale_px: float = 10.0
    box_noise_px: float = 1.0
    horizon_jitter_px: float = 10.0
    road_gap_noise_rel: float = 0.1
    road_gap_noise_floor_m: float = 0.5
    zero_reference_prob: float = 0.006
    regime: str = "day"
    seed: int = 42
    focal_px: float = 1000.0
    image_width: int = 1920
    image_height: int = 1080

    def __post_init__(self):
        if isinstance(self.appearance_noise_sigma, dict):
            object.__setattr__(
                self, "appearance_noise_sigma", tuple(sorted(self.appearance_noise_sigma.items()))
            )
        else:
            object.__setattr__(
                self,
                "appearance_noise_sigma",
                tuple((str(k), float(v)) for k, v in self.appearance_noise_sigma),
            )
        object.__setattr__(self, "n_references", tuple(int(v) for v in self.n_references))
        object.__setattr__(self, "n_targets", tuple(int(v) for v in self.n_targets))
        self.validate()

    def validate(self):
        if not 0 < self.min_distance_m < self.lidar_range_m < self.max_distance_m:
            raise ConfigError("need 0 < min_distance_m < lidar_range_m < max_distance_m")
        for name in ("n_references", "n_targets"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ConfigError(f"{name} must be a non-empty range [lo, hi], got {(lo, hi)}")
        if self.n_targets[1] < 1:
            raise ConfigError("every scene needs at least one target")
        if self.regime not in REGIMES:
            raise ConfigError(f"unknown regime {self.regime!r}")
        sigmas = dict(self.appearance_noise_sigma)
        if set(sigmas) != set(REGIMES):
            raise ConfigError(f"appearance_noise_sigma needs entries for {REGIMES}")
        noises = list(sigmas.values()) + [
            self.ref_distance_noise_sigma_m,
            self.box_noise_px,
            self.horizon_jitter_px,
            self.road_gap_noise_rel,
            self.road_gap_noise_floor_m,
        ]
        if any(s < 0 for s in noises):
            raise ConfigError("noise sigmas must be non-negative")
        if not 0 <= self.zero_reference_prob <= 1:
            raise ConfigError("zero_reference_prob must lie in [0, 1]")

    @property
    def camera(self):
        return CameraModel(
            focal_px=self.focal_px,
            image_width=self.image_width,
            image_height=self.image_height,
            principal_point=(self.image_width / 2.0, self.image_height / 2.0),
        )

    def appearance_sigma(self, regime):
        return dict(self.appearance_noise_sigma)[regime]

    def with_(self, **changes):
        d = asdict(self)
        d.update(changes)
        return SceneSpec(**d)

    def digest(self):
        payload = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


def project(obj, cam, horizon_shift_px=0.0):
    """Pinhole box ``(center_x, center_y, w, h)`` of ``obj`` on a flat road.

    Returns None when the box falls completely outside the image.
    """
    if obj.distance_m <= 0:
        raise InputError("cannot project an object at non-positive distance")
    f, d = cam.focal_px, obj.distance_m
    cx0, cy0 = cam.principal_point
    h = f * obj.height_m / d
    w = f * obj.width_m / d
    cx = cx0 + f * obj.lateral_m / d
    # object center sits height_m / 2 above a road plane mount_height_m below the camera
    cy = cy0 + horizon_shift_px + f * (cam.mount_height_m - obj.height_m / 2.0) / d
    if not box_in_image((cx, cy, w, h), cam):
        return None
    return (cx, cy, w, h)


def box_in_image(bbox, cam):
    cx, cy, w, h = bbox
    return (
        cx + w / 2 > 0
        and cx - w / 2 < cam.image_width
        and cy + h / 2 > 0
        and cy - h / 2 < cam.image_height
    )


def appearance_mean(obj, bbox):
    """Noise-free appearance code of an object rendered as ``bbox``."""
    _, _, w, h = bbox
    vec = np.zeros(APPEARANCE_DIM)
    vec[0] = np.log(h / 10.0)
    vec[1] = np.log(w / 10.0)
    vec[2] = np.log(w / h)
    pose = np.deg2rad(obj.pose_deg)
    vec[3], vec[4] = np.sin(pose), np.cos(pose)
    vec[5 + obj.kind] = 1.0
    vec[5 + N_KINDS] = (obj.height_m - 1.8) / 0.6
    lane = int(np.clip(obj.lane_id, -MAX_LANE_OFFSET, MAX_LANE_OFFSET))
    vec[6 + N_KINDS + MAX_LANE_OFFSET + lane] = 1.0
    return vec


def appearance_sigma(bbox, regime, spec):
    """Per-feature noise level: lighting regime times a small-box penalty."""
    h = bbox[3]
    return spec.appearance_sigma(regime) * (1.0 + spec.size_noise_scale_px / h)


def synth_appearance(obj, cam, regime, rng, spec=None, bbox=None):
    spec = spec or SceneSpec()
    if bbox is None:
        bbox = project(obj, cam)
        if bbox is None:
            raise InputError("object is not visible")
    sigma = appearance_sigma(bbox, regime, spec)
    noise = rng.normal(0.0, 1.0, APPEARANCE_DIM) * sigma
    return appearance_mean(obj, bbox) + noise


def _sample_world_object(rng, lo, hi, n_lanes, ego_lane):
    u = rng.random()
    acc = 0.0
    kind = N_KINDS - 1
    for k, row in enumerate(VEHICLE_KINDS):
        acc += row[0]
        if u < acc:
            kind = k
            break
    _, mh, sh, mw, sw = VEHICLE_KINDS[kind]
    lane = int(rng.integers(n_lanes)) - ego_lane
    oncoming = lane < 0 and rng.random() < 0.5
    pose = (180.0 if oncoming else 0.0) + rng.normal(0.0, 5.0)
    return WorldObject(
        distance_m=float(rng.uniform(lo, hi)),
        lateral_m=lane * LANE_WIDTH_M + rng.normal(0.0, 0.4),
        height_m=max(0.8, rng.normal(mh, sh)),
        width_m=max(1.0, rng.normal(mw, sw)),
        lane_id=lane,
        pose_deg=pose,
        kind=kind,
    )


def _jitter_box(bbox, sigma, rng):
    if sigma == 0:
        return bbox
    cx, cy, w, h = np.asarray(bbox) + rng.normal(0.0, sigma, 4)
    return (float(cx), float(cy), max(float(w), 0.5), max(float(h), 0.5))


def scene_rng(seed, scene_index):
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, int(scene_index)])


def generate_scene(spec, scene_index, max_tries=200):
    """Scene ``scene_index`` of the stream defined by ``spec``.

    Depends only on ``(spec, scene_index)``, so scenes can be generated in any
    order or in parallel.
    """
    spec.validate()
    rng = scene_rng(spec.seed, scene_index)
    cam = spec.camera
    n_lanes = int(rng.integers(3, 6))
    ego_lane = int(rng.integers(n_lanes))
    horizon = float(rng.normal(0.0, spec.horizon_jitter_px)) if spec.horizon_jitter_px else 0.0

    if rng.random() < spec.zero_reference_prob:
        n_refs = 0
    else:
        n_refs = int(rng.integers(spec.n_references[0], spec.n_references[1] + 1))
    n_tgts = int(rng.integers(max(1, spec.n_targets[0]), spec.n_targets[1] + 1))

    objects = []
    roles = [True] * n_refs + [False] * n_tgts
    for object_id, is_ref in enumerate(roles):
        lo, hi = (spec.min_distance_m, spec.lidar_range_m) if is_ref else (spec.lidar_range_m, spec.max_distance_m)
        for _ in range(max_tries):
            world = _sample_world_object(rng, lo, hi, n_lanes, ego_lane)
            if not is_ref and world.distance_m <= spec.lidar_range_m:
                continue
            bbox = project(world, cam, horizon)
            if bbox is None:
                continue
            bbox = _jitter_box(bbox, spec.box_noise_px, rng)
            if box_in_image(bbox, cam):
                break
        else:
            raise ConfigError(f"could not place a visible object after {max_tries} tries")
        appearance = synth_appearance(world, cam, spec.regime, rng, spec, bbox)
        if is_ref:
            known = world.distance_m + rng.normal(0.0, spec.ref_distance_noise_sigma_m)
            obj = RenderedObject(
                object_id, bbox, appearance, True, known_distance_m=float(known),
                true_distance_m=world.distance_m,
            )
        else:
            obj = RenderedObject(
                object_id, bbox, appearance, False, label_distance_m=world.distance_m,
                true_distance_m=world.distance_m,
            )
        objects.append(obj)
    gaps = road_gap_readings(objects, spec, rng)
    return Scene(f"{spec.regime}-{spec.seed}-{scene_index:06d}", cam, objects, spec.regime, gaps)


def road_gap_readings(objects, spec, rng):
    """Noisy ``d_a - d_b`` for every object pair ``a < b``; noise sd is
    ``rel * |gap| + floor``."""
    gaps = {}
    for i, a in enumerate(objects):
        for b in objects[i + 1:]:
            true_gap = a.true_distance_m - b.true_distance_m
            sd = spec.road_gap_noise_rel * abs(true_gap) + spec.road_gap_noise_floor_m
            gaps[(a.object_id, b.object_id)] = float(true_gap + rng.normal(0.0, sd))
    return gaps


def distance_histogram(dataset, edges):
    counts = np.zeros(len(edges) - 1, dtype=int)
    for scene in dataset:
        for t in scene.targets:
            k = np.searchsorted(edges, t.label_distance_m, side="left") - 1
            if 0 <= k < len(counts):
                counts[k] += 1
    return counts


def generate_dataset(spec, n_scenes, start_index=0, split_tag="train"):
    if n_scenes < 1:
        raise ConfigError("n_scenes must be at least 1")
    scenes = [generate_scene(spec, start_index + i) for i in range(n_scenes)]
    ds = Dataset(scenes, split_tag=split_tag, provenance=f"scenesim:{spec.digest()}")
    ds.stats = dataset_summary(ds, spec.lidar_range_m, spec.max_distance_m)
    return ds


def dataset_summary(dataset, lidar_range_m, max_distance_m, n_buckets=11):
    labels = [t.label_distance_m for s in dataset for t in s.targets]
    edges = np.linspace(lidar_range_m, max_distance_m, n_buckets + 1)
    return {
        "n_scenes": len(dataset),
        "n_targets": len(labels),
        "n_references": sum(len(s.references) for s in dataset),
        "n_zero_reference_scenes": sum(1 for s in dataset if not s.references),
        "min_target_distance_m": min(labels) if labels else None,
        "max_target_distance_m": max(labels) if labels else None,
        "histogram_edges_m": [float(e) for e in edges],
        "histogram_counts": [int(c) for c in distance_histogram(dataset, edges)],
    }
