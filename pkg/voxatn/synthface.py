"""Procedural face-like point clouds for the three presentation classes.

Axes: x lateral, y depth (the face looks toward +y), z vertical; units are meters.

- BonaFide: half-ellipsoid head, Gaussian nose protrusion, multi-frequency surface detail.
- SiliconeMask: a worn mask. Over the front of the head a smoothed shell with damped detail
  and a lower, wider nose stands MASK_THICKNESS proud of the wearer's face; the wearer
  shows through two eye openings and past the mask rim.
- WrapPhoto: a cylindrically bent sheet cut to the head silhouette; no relief at all.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

from .cloudio import PointCloud, Space, load_cloud, write_ply
from .errors import DatasetError
from .schemas import ClassLabel, DataConfig, SynthSpec

logger = logging.getLogger(__name__)

CLASS_ORDER: Tuple[ClassLabel, ...] = (ClassLabel.bona_fide, ClassLabel.silicone_mask, ClassLabel.wrap_photo)
IDENTITY_PREFIX: Dict[ClassLabel, str] = {
    ClassLabel.bona_fide: "bona",
    ClassLabel.silicone_mask: "mask",
    ClassLabel.wrap_photo: "wrap",
}
MANIFEST_NAME = "manifest.csv"
MANIFEST_COLUMNS = ("path", "class", "identity", "session")

MAX_ELEVATION = 1.2  # radians above/below the equator of the head
NOSE_DROP = 0.12  # nose center below the head center, fraction of rz
DETAIL_TERMS = 6
MASK_DETAIL_FACTOR = 0.2
MASK_NOSE_HEIGHT_FACTOR = 0.85
MASK_NOSE_WIDTH_FACTOR = 1.3
MASK_THICKNESS = 0.015
MASK_COVER_MIN = 0.4  # front-facing cosine beyond which the mask covers the head
EYE_OFFSET = (0.35, 0.25)  # eye opening centers as fractions of (rx, rz)
EYE_SEMI_AXES = (0.2, 0.1)
WRAP_RADIUS_FACTOR = 1.2
YAW_JITTER_DEG = 3.0


@dataclass(frozen=True)
class IdentityParams:
    identity_id: str
    head_radii: Tuple[float, float, float]
    nose_height: float
    nose_width: float
    surface_detail_amp: float
    rng_seed: int

    def __post_init__(self):
        if any(r <= 0 for r in self.head_radii):
            raise ValueError("head radii must be positive")
        if self.nose_height <= 0 or self.nose_width <= 0:
            raise ValueError("nose height and width must be positive")
        if self.surface_detail_amp < 0:
            raise ValueError("surface detail amplitude must be non-negative")


def _derive(*words: int) -> int:
    return int(np.random.SeedSequence(list(words)).generate_state(1, dtype=np.uint64)[0])


def identity_params(kind: ClassLabel, index: int, master_seed: int) -> IdentityParams:
    class_idx = CLASS_ORDER.index(kind)
    rng = np.random.default_rng(np.random.SeedSequence([master_seed, class_idx, index]))
    return IdentityParams(
        identity_id=f"{IDENTITY_PREFIX[kind]}{index:02d}",
        head_radii=(
            float(rng.uniform(0.070, 0.080)),
            float(rng.uniform(0.085, 0.100)),
            float(rng.uniform(0.105, 0.120)),
        ),
        nose_height=float(rng.uniform(0.020, 0.030)),
        nose_width=float(rng.uniform(0.012, 0.018)),
        surface_detail_amp=float(rng.uniform(0.008, 0.012)),
        rng_seed=_derive(master_seed, class_idx, index, 0x1D),
    )


def _detail_field(identity: IdentityParams) -> Tuple[np.ndarray, np.ndarray]:
    # wave vectors over (x, z) and phases; fixed per identity
    rng = np.random.default_rng(np.random.SeedSequence([identity.rng_seed, 0xD7A1]))
    k = rng.uniform(60.0, 120.0, size=DETAIL_TERMS)
    angle = rng.uniform(0.0, math.pi, size=DETAIL_TERMS)
    waves = np.stack([k * np.cos(angle), k * np.sin(angle)], axis=1)
    phases = rng.uniform(0.0, 2.0 * math.pi, size=DETAIL_TERMS)
    return waves, phases


def _nose(x: np.ndarray, z: np.ndarray, height: float, width: float, rz: float) -> np.ndarray:
    return height * np.exp(-(x**2 + (z + NOSE_DROP * rz) ** 2) / (2.0 * width**2))


def _eye_openings(x: np.ndarray, z: np.ndarray, rx: float, rz: float) -> np.ndarray:
    ex, ez = EYE_OFFSET[0] * rx, EYE_OFFSET[1] * rz
    ax, az = EYE_SEMI_AXES[0] * rx, EYE_SEMI_AXES[1] * rz
    inside = np.zeros(x.shape, dtype=bool)
    for side in (-1.0, 1.0):
        inside |= ((x - side * ex) / ax) ** 2 + ((z - ez) / az) ** 2 < 1.0
    return inside


def _head_surface(identity: IdentityParams, kind: ClassLabel, n: int, rng: np.random.Generator) -> np.ndarray:
    rx, ry, rz = identity.head_radii
    u = rng.uniform(-math.pi / 2, math.pi / 2, size=n)
    # uniform in sin(elevation) spreads points by area on the sphere
    phi = np.arcsin(rng.uniform(-math.sin(MAX_ELEVATION), math.sin(MAX_ELEVATION), size=n))
    x = rx * np.sin(u) * np.cos(phi)
    y = ry * np.cos(u) * np.cos(phi)
    z = rz * np.sin(phi)

    detail = identity.surface_detail_amp
    front = np.cos(u) * np.cos(phi)  # 1 at the face center, 0 at the rim
    waves, phases = _detail_field(identity)
    relief = np.sin(np.stack([x, z], axis=1) @ waves.T + phases).sum(axis=1) / math.sqrt(DETAIL_TERMS)
    face_y = y + _nose(x, z, identity.nose_height, identity.nose_width, rz) + detail * front * relief
    if kind is not ClassLabel.silicone_mask:
        return np.stack([x, face_y, z], axis=1)

    # worn mask: a smoothed shell MASK_THICKNESS proud of the wearer's face over the
    # front of the head; the wearer shows through the eye openings and past the rim
    lift = 1.0 + MASK_THICKNESS / np.sqrt(x**2 + y**2 + z**2)
    mask_nose = _nose(x, z, identity.nose_height * MASK_NOSE_HEIGHT_FACTOR, identity.nose_width * MASK_NOSE_WIDTH_FACTOR, rz)
    mask_y = y * lift + mask_nose + detail * MASK_DETAIL_FACTOR * front * relief
    covered = (front > MASK_COVER_MIN) & ~_eye_openings(x, z, rx, rz)
    return np.stack(
        [np.where(covered, x * lift, x), np.where(covered, mask_y, face_y), np.where(covered, z * lift, z)], axis=1
    )


def _wrap_sheet(identity: IdentityParams, n: int, rng: np.random.Generator) -> np.ndarray:
    rx, ry, rz = identity.head_radii
    radius = WRAP_RADIUS_FACTOR * rx
    # uniform over the elliptical silhouette
    r = np.sqrt(rng.uniform(0.0, 1.0, size=n))
    a = rng.uniform(0.0, 2.0 * math.pi, size=n)
    x = rx * r * np.cos(a)
    z = rz * math.sin(MAX_ELEVATION) * r * np.sin(a)
    y = np.sqrt(radius**2 - x**2) - radius + ry
    return np.stack([x, y, z], axis=1)


def wrap_axis(identity: IdentityParams) -> Tuple[float, float]:
    """(y of the cylinder axis, radius) of the bent sheet, before yaw jitter."""
    radius = WRAP_RADIUS_FACTOR * identity.head_radii[0]
    return identity.head_radii[1] - radius, radius


def _yaw(points: np.ndarray, degrees: float) -> np.ndarray:
    t = math.radians(degrees)
    c, s = math.cos(t), math.sin(t)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return points @ rot.T


def generate_cloud(identity: IdentityParams, spec: SynthSpec, session_seed: int, *, session: int = 0) -> PointCloud:
    rng = np.random.default_rng(np.random.SeedSequence([identity.rng_seed, session_seed]))
    yaw = float(rng.uniform(-YAW_JITTER_DEG, YAW_JITTER_DEG))
    if spec.kind is ClassLabel.wrap_photo:
        pts = _wrap_sheet(identity, spec.points_per_cloud, rng)
    else:
        pts = _head_surface(identity, spec.kind, spec.points_per_cloud, rng)
    pts = _yaw(pts, yaw)
    if spec.noise_sigma > 0:
        pts = pts + rng.normal(0.0, spec.noise_sigma, size=pts.shape)
    return PointCloud(points=pts, label=spec.kind, identity=identity.identity_id, space=Space.capture, session=session)


def session_seed(master_seed: int, kind: ClassLabel, index: int, session: int) -> int:
    return _derive(master_seed, CLASS_ORDER.index(kind), index, session)


def generate_dataset(
    n_bona_identities: int,
    n_mask_identities: int,
    n_wrap_identities: int,
    specs: Mapping[ClassLabel, SynthSpec],
    master_seed: int,
) -> List[PointCloud]:
    """Multi-session clouds for every identity of every class, class by class."""
    counts = {
        ClassLabel.bona_fide: n_bona_identities,
        ClassLabel.silicone_mask: n_mask_identities,
        ClassLabel.wrap_photo: n_wrap_identities,
    }
    clouds: List[PointCloud] = []
    for kind in CLASS_ORDER:
        if counts[kind] and kind not in specs:
            raise DatasetError(f"no SynthSpec given for class {kind.value}")
        for index in range(counts[kind]):
            params = identity_params(kind, index, master_seed)
            spec = specs[kind]
            for s in range(spec.sessions):
                clouds.append(generate_cloud(params, spec, session_seed(master_seed, kind, index, s), session=s))
    logger.info(
        f"Synthetic dataset generated: clouds={len(clouds)}, bona={n_bona_identities}, "
        f"mask={n_mask_identities}, wrap={n_wrap_identities}, master_seed={master_seed}"
    )
    return clouds


def dataset_from_config(data: DataConfig) -> List[PointCloud]:
    return generate_dataset(
        data.n_bona_identities,
        data.n_mask_identities,
        data.n_wrap_identities,
        {kind: data.synth_spec(kind) for kind in CLASS_ORDER},
        data.master_seed,
    )


# --- files ---


def cloud_filename(cloud: PointCloud) -> str:
    return f"{cloud.label.value}_{cloud.identity}_{cloud.session:02d}.ply"


def export_dataset(clouds: Sequence[PointCloud], out_dir: str | Path) -> Path:
    """Write one PLY per cloud plus manifest.csv; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for cloud in clouds:
        name = cloud_filename(cloud)
        (out / name).write_bytes(write_ply(cloud))
        rows.append((name, cloud.label.value, cloud.identity, cloud.session))
    manifest = out / MANIFEST_NAME
    with manifest.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        writer.writerows(rows)
    logger.info(f"Dataset exported: dir={out}, files={len(rows)}")
    return manifest


def read_manifest(path: str | Path) -> List[PointCloud]:
    """Load every cloud listed in a manifest.csv; paths are relative to the manifest."""
    p = Path(path)
    if not p.exists():
        raise DatasetError(f"manifest not found: {p}")
    with p.open(newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != MANIFEST_COLUMNS:
            raise DatasetError(f"manifest {p} must have columns {','.join(MANIFEST_COLUMNS)}")
        clouds = []
        for row in reader:
            target = p.parent / row["path"]
            if not target.exists():
                raise DatasetError(f"manifest entry {row['path']} does not exist")
            try:
                label = ClassLabel(row["class"])
                session = int(row["session"])
            except ValueError as e:
                raise DatasetError(f"bad manifest row {row}: {e}") from e
            clouds.append(load_cloud(target, label=label, identity=row["identity"], session=session))
    logger.info(f"Manifest loaded: path={p}, clouds={len(clouds)}")
    return clouds
