"""Plain data records shared by the simulator, persistence, model and metrics."""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class ConfigError(ValueError):
    """Invalid or infeasible configuration."""


class InputError(ValueError):
    """Input data violates a documented precondition."""


@dataclass(frozen=True)
class CameraModel:
    focal_px: float = 1000.0
    image_width: int = 1920
    image_height: int = 1080
    principal_point: tuple = (960.0, 540.0)
    mount_height_m: float = 1.5

    def __post_init__(self):
        if self.focal_px <= 0:
            raise ConfigError("focal_px must be positive")
        if self.image_width <= 0 or self.image_height <= 0:
            raise ConfigError("image dimensions must be positive")
        cx0, cy0 = self.principal_point
        if not (0 <= cx0 <= self.image_width and 0 <= cy0 <= self.image_height):
            raise ConfigError("principal point must lie inside the image")

    def to_dict(self):
        return {
            "focal_px": self.focal_px,
            "image_width": self.image_width,
            "image_height": self.image_height,
            "principal_point": list(self.principal_point),
            "mount_height_m": self.mount_height_m,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            focal_px=float(d["focal_px"]),
            image_width=int(d["image_width"]),
            image_height=int(d["image_height"]),
            principal_point=tuple(float(v) for v in d["principal_point"]),
            mount_height_m=float(d.get("mount_height_m", 1.5)),
        )


@dataclass(frozen=True)
class WorldObject:
    distance_m: float
    lateral_m: float
    height_m: float
    width_m: float
    lane_id: int = 0
    pose_deg: float = 0.0
    kind: int = 0

    def __post_init__(self):
        if self.distance_m <= 0:
            raise InputError("distance_m must be positive")
        if self.height_m <= 0 or self.width_m <= 0:
            raise InputError("object height and width must be positive")


@dataclass
class RenderedObject:
    """One detected object in a frame.

    ``bbox`` is ``(center_x, center_y, w, h)`` in pixels. References carry
    ``known_distance_m`` (a noisy measurement), targets ``label_distance_m``.
    ``true_distance_m`` is the simulator's ground truth when available.
    """

    object_id: int
    bbox: tuple
    appearance: np.ndarray
    is_reference: bool
    known_distance_m: Optional[float] = None
    label_distance_m: Optional[float] = None
    true_distance_m: Optional[float] = None

    def __post_init__(self):
        self.bbox = tuple(float(v) for v in self.bbox)
        self.appearance = np.asarray(self.appearance, dtype=np.float64)
        if self.bbox[2] <= 0 or self.bbox[3] <= 0:
            raise InputError(f"object {self.object_id}: box width and height must be positive")
        if self.is_reference:
            if self.known_distance_m is None or self.label_distance_m is not None:
                raise InputError(f"reference {self.object_id} must carry only known_distance_m")
        elif self.label_distance_m is None or self.known_distance_m is not None:
            raise InputError(f"target {self.object_id} must carry only label_distance_m")

    @property
    def distance_m(self):
        """Best available distance: ground truth, else label, else measurement."""
        if self.true_distance_m is not None:
            return self.true_distance_m
        return self.known_distance_m if self.is_reference else self.label_distance_m

    def corners(self):
        cx, cy, w, h = self.bbox
        return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


@dataclass
class Scene:
    scene_id: str
    camera: CameraModel
    objects: list
    regime: str = "day"
    # measured road-surface gaps between object pairs: (a, b) with a < b -> d_a - d_b
    road_gaps: dict = field(default_factory=dict)

    def road_gap(self, a, b):
        """Measured ``d_a - d_b`` in meters, or None when the pair was not observed."""
        if a == b:
            return 0.0
        if a < b:
            g = self.road_gaps.get((a, b))
            return None if g is None else g
        g = self.road_gaps.get((b, a))
        return None if g is None else -g

    @property
    def references(self):
        return [o for o in self.objects if o.is_reference]

    @property
    def targets(self):
        return [o for o in self.objects if not o.is_reference]

    def get(self, object_id):
        for o in self.objects:
            if o.object_id == object_id:
                return o
        raise KeyError(object_id)


@dataclass
class Dataset:
    scenes: list
    split_tag: str = "train"
    provenance: str = ""
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [s.scene_id for s in self.scenes]
        if len(set(ids)) != len(ids):
            raise InputError("scene ids must be unique within a dataset")

    def __len__(self):
        return len(self.scenes)

    def __iter__(self):
        return iter(self.scenes)

    @property
    def n_targets(self):
        return sum(len(s.targets) for s in self.scenes)


@dataclass
class PredictionRecord:
    scene_id: str
    target_id: int
    predicted_distance_m: float
    attention: Optional[list] = None  # [(reference_id, weight), ...]

    def validate(self):
        if not (self.predicted_distance_m > 0 and np.isfinite(self.predicted_distance_m)):
            raise InputError(
                f"{self.scene_id}/{self.target_id}: predicted distance must be positive"
            )
        if self.attention:
            total = sum(w for _, w in self.attention)
            if abs(total - 1.0) > 1e-6:
                raise InputError(
                    f"{self.scene_id}/{self.target_id}: attention weights sum to {total:.6g}, not 1"
                )
