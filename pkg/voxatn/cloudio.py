from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .errors import ParseError, ZeroExtentError
from .schemas import AugmentSpec, ClassLabel

logger = logging.getLogger(__name__)

NORMALIZE_MARGIN = 0.05
CUBE_CENTER = np.array([0.5, 0.5, 0.5])

# header comment used to carry sample metadata through PLY files
META_PREFIX = "voxatn"


class Space(str, Enum):
    capture = "capture"
    normalized = "normalized"


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Unordered set of 3D points plus the sample metadata.

    points is an (N, 3) float64 array; row order carries no meaning.
    """

    points: np.ndarray
    label: ClassLabel = ClassLabel.bona_fide
    identity: str = ""
    space: Space = Space.capture
    session: int = 0
    source: str = ""

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return int(self.points.shape[0])

    def with_points(self, points: np.ndarray, space: Optional[Space] = None) -> "PointCloud":
        return replace(self, points=points, space=space or self.space)


# --- parsing ---


def _numbered_lines(data: bytes) -> Iterator[Tuple[int, str]]:
    try:
        text = data.decode("ascii")
    except UnicodeDecodeError as e:
        # binary payloads land here; name the line where decoding broke
        line = data[: e.start].count(b"\n") + 1
        raise ParseError("non-ASCII content (binary PLY is not supported)", line) from e
    for no, raw in enumerate(text.splitlines(), start=1):
        yield no, raw.strip()


def _parse_float(token: str, line: int) -> float:
    try:
        value = float(token)
    except ValueError:
        raise ParseError(f"non-numeric token {token!r}", line) from None
    if not math.isfinite(value):
        raise ParseError(f"non-finite coordinate {token!r}", line)
    return value


def _meta_from_comment(text: str, meta: Dict[str, str]) -> None:
    parts = text.split()
    if len(parts) < 2 or parts[1] != META_PREFIX:
        return
    for kv in parts[2:]:
        if "=" in kv:
            k, v = kv.split("=", 1)
            meta[k] = v


def _cloud_from_meta(points: List[Tuple[float, float, float]], meta: Dict[str, str], **overrides) -> PointCloud:
    fields = {
        "label": ClassLabel(meta["label"]) if "label" in meta else ClassLabel.bona_fide,
        "identity": meta.get("identity", ""),
        "session": int(meta.get("session", 0)),
        "source": "",
    }
    fields.update({k: v for k, v in overrides.items() if v is not None})
    arr = np.array(points, dtype=np.float64).reshape(-1, 3)
    return PointCloud(points=arr, space=Space.capture, **fields)


def parse_ply(
    data: bytes,
    *,
    label: Optional[ClassLabel] = None,
    identity: Optional[str] = None,
    session: Optional[int] = None,
    source: Optional[str] = None,
) -> PointCloud:
    """Parse an ASCII PLY into a capture-space cloud, one point per vertex in file order.

    Extra vertex properties are ignored; other elements are skipped.
    """
    lines = _numbered_lines(data)
    no, first = next(lines, (1, ""))
    if first != "ply":
        raise ParseError("missing 'ply' magic", no)
    no, fmt = next(lines, (no + 1, ""))
    if fmt.startswith("format binary"):
        raise ParseError("binary PLY is not supported", no)
    if fmt.split() != ["format", "ascii", "1.0"]:
        raise ParseError(f"unsupported format line {fmt!r}", no)

    meta: Dict[str, str] = {}
    elements: List[Tuple[str, int, List[str]]] = []
    ended = False
    for no, text in lines:
        if not text or text.startswith("obj_info"):
            continue
        if text.startswith("comment"):
            _meta_from_comment(text, meta)
            continue
        parts = text.split()
        if parts[0] == "element":
            if len(parts) != 3 or not parts[2].isdigit():
                raise ParseError(f"malformed element line {text!r}", no)
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise ParseError("property before any element", no)
            name, _count, props = elements[-1]
            if len(parts) >= 2 and parts[1] == "list":
                if name == "vertex":
                    raise ParseError("list properties on vertices are not supported", no)
                props.append(parts[-1])
            elif len(parts) == 3:
                props.append(parts[2])
            else:
                raise ParseError(f"malformed property line {text!r}", no)
        elif parts[0] == "end_header":
            ended = True
            break
        else:
            raise ParseError(f"unexpected header line {text!r}", no)
    if not ended:
        raise ParseError("missing end_header", no)

    vertex = next((e for e in elements if e[0] == "vertex"), None)
    if vertex is None:
        raise ParseError("no vertex element declared", no)
    vprops = vertex[2]
    missing = [axis for axis in ("x", "y", "z") if axis not in vprops]
    if missing:
        raise ParseError(f"vertex element lacks properties {missing}", no)
    ix, iy, iz = (vprops.index(a) for a in ("x", "y", "z"))

    points: List[Tuple[float, float, float]] = []
    body = ((n, t) for n, t in lines if t)
    for name, count, props in elements:
        for got in range(count):
            item = next(body, None)
            if item is None:
                raise ParseError(
                    f"{name} count mismatch: header declares {count}, found {got}", no
                )
            no, text = item
            if name != "vertex":
                continue
            tokens = text.split()
            if len(tokens) != len(props):
                raise ParseError(
                    f"vertex record has {len(tokens)} values, expected {len(props)}", no
                )
            points.append(
                (_parse_float(tokens[ix], no), _parse_float(tokens[iy], no), _parse_float(tokens[iz], no))
            )
    extra = next(body, None)
    if extra is not None:
        raise ParseError("data beyond the declared element counts (count mismatch)", extra[0])

    return _cloud_from_meta(points, meta, label=label, identity=identity, session=session, source=source)


def parse_xyz(
    data: bytes,
    *,
    label: Optional[ClassLabel] = None,
    identity: Optional[str] = None,
    session: Optional[int] = None,
    source: Optional[str] = None,
) -> PointCloud:
    """Parse whitespace-separated "x y z" lines; blanks and '#' lines are skipped."""
    meta: Dict[str, str] = {}
    points: List[Tuple[float, float, float]] = []
    for no, text in _numbered_lines(data):
        if not text:
            continue
        if text.startswith("#"):
            _meta_from_comment("comment " + text[1:].strip(), meta)
            continue
        tokens = text.split()
        if len(tokens) < 3:
            raise ParseError(f"expected 3 coordinates, got {len(tokens)}", no)
        points.append(tuple(_parse_float(t, no) for t in tokens[:3]))  # type: ignore[arg-type]
    return _cloud_from_meta(points, meta, label=label, identity=identity, session=session, source=source)


def load_cloud(path: str | Path, **meta) -> PointCloud:
    p = Path(path)
    suffix = p.suffix.lower()
    if suffix == ".ply":
        parser = parse_ply
    elif suffix == ".xyz":
        parser = parse_xyz
    else:
        raise ParseError(f"unsupported point cloud format {suffix!r}")
    meta.setdefault("source", str(p))
    return parser(p.read_bytes(), **meta)


# --- writing ---


def _meta_line(cloud: PointCloud) -> str:
    return f"{META_PREFIX} label={cloud.label.value} identity={cloud.identity} session={cloud.session}"


def _coords(cloud: PointCloud) -> Iterator[str]:
    # repr of a Python float round-trips exactly
    for x, y, z in cloud.points.tolist():
        yield f"{x!r} {y!r} {z!r}\n"


def write_ply(cloud: PointCloud) -> bytes:
    header = (
        "ply\n"
        "format ascii 1.0\n"
        f"comment {_meta_line(cloud)}\n"
        f"element vertex {len(cloud)}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        "end_header\n"
    )
    return (header + "".join(_coords(cloud))).encode("ascii")


def write_xyz(cloud: PointCloud) -> bytes:
    return (f"# {_meta_line(cloud)}\n" + "".join(_coords(cloud))).encode("ascii")


# --- geometry ---


def normalize(cloud: PointCloud, margin: float = NORMALIZE_MARGIN) -> PointCloud:
    """Center the centroid in the unit cube and scale isotropically into [margin, 1-margin]^3."""
    if len(cloud) == 0:
        raise ZeroExtentError("cannot normalize an empty cloud")
    pts = cloud.points
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    reach = float(np.abs(centered).max())
    if reach == 0.0:
        raise ZeroExtentError("zero extent: all points are identical")
    scale = (0.5 - margin) / reach
    out = centered * scale + CUBE_CENTER
    return cloud.with_points(out, Space.normalized)


def _rotate_z(points: np.ndarray, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    dx = points[:, 0] - CUBE_CENTER[0]
    dy = points[:, 1] - CUBE_CENTER[1]
    out = points.copy()
    out[:, 0] = CUBE_CENTER[0] + c * dx - s * dy
    out[:, 1] = CUBE_CENTER[1] + s * dx + c * dy
    return out


def augment(cloud: PointCloud, spec: AugmentSpec) -> List[PointCloud]:
    """Rotated copies about the vertical axis through the cube center, each randomly perturbed.

    All randomness comes from spec.rng_seed; draws happen in a fixed order per copy.
    """
    if cloud.space is not Space.normalized:
        raise ValueError("augment expects a normalized cloud")
    rng = np.random.default_rng(spec.rng_seed)
    copies: List[PointCloud] = []
    n = len(cloud)
    for k in range(spec.rotation_copies):
        pts = cloud.points.copy()
        if k:
            pts = _rotate_z(pts, 2.0 * math.pi * k / spec.rotation_copies)
        if spec.jitter_sigma > 0:
            pts = pts + rng.normal(0.0, spec.jitter_sigma, size=(n, 3))
        if spec.mirror and rng.random() < 0.5:
            pts[:, 0] = 1.0 - pts[:, 0]
        if spec.shift_max > 0:
            pts = pts + rng.uniform(-spec.shift_max, spec.shift_max, size=3)
        np.clip(pts, 0.0, 1.0, out=pts)
        copies.append(cloud.with_points(pts))
    return copies
