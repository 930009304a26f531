import io
import math

import numpy as np
import numpy.testing as npt
import pytest

from voxatn.cloudio import (
    PointCloud,
    Space,
    augment,
    load_cloud,
    normalize,
    parse_ply,
    parse_xyz,
    write_ply,
    write_xyz,
)
from voxatn.errors import ParseError, ZeroExtentError
from voxatn.schemas import AugmentSpec, ClassLabel

from .conftest import NO_AUGMENT, normalized_cloud

PLY = b"""ply
format ascii 1.0
comment voxatn label=WrapPhoto identity=wrap03 session=4
element vertex 3
property float x
property float y
property float z
end_header
0 0 0
1 2 3
-1.5 0.25 4e-3
"""


def test_parse_ply_reads_points_and_metadata():
    cloud = parse_ply(PLY)
    npt.assert_array_equal(cloud.points, [[0, 0, 0], [1, 2, 3], [-1.5, 0.25, 0.004]])
    assert cloud.label is ClassLabel.wrap_photo
    assert cloud.identity == "wrap03"
    assert cloud.session == 4
    assert cloud.space is Space.capture


def test_parse_ply_ignores_extra_vertex_properties():
    data = b"""ply
format ascii 1.0
element vertex 2
property float nx
property float x
property float y
property float z
property uchar red
element face 1
property list uchar int vertex_indices
end_header
9 1 2 3 255
9 4 5 6 0
3 0 1 1
"""
    npt.assert_array_equal(parse_ply(data).points, [[1, 2, 3], [4, 5, 6]])


def test_parse_ply_rejects_binary_with_line_number():
    data = b"ply\nformat binary_little_endian 1.0\nelement vertex 1\nend_header\n"
    with pytest.raises(ParseError, match="binary") as err:
        parse_ply(data)
    assert err.value.line == 2


@pytest.mark.parametrize(
    "body, match",
    [
        (b"0 0 0\n1 1 1\n", "count mismatch"),
        (b"0 0 0\n1 1 1\n2 2 2\n3 3 3\n", "count mismatch"),
        (b"0 0 0\n1 x 1\n2 2 2\n", "non-numeric"),
        (b"0 0 0\n1 nan 1\n2 2 2\n", "non-finite"),
    ],
)
def test_parse_ply_malformed_body(body, match):
    header = PLY.split(b"end_header\n")[0] + b"end_header\n"
    with pytest.raises(ParseError, match=match) as err:
        parse_ply(header + body)
    assert err.value.line is not None


def test_parse_ply_missing_magic():
    with pytest.raises(ParseError, match="magic") as err:
        parse_ply(b"plx\n")
    assert err.value.line == 1


def test_ply_export_reloads_exactly(rng):
    cloud = PointCloud(points=rng.normal(size=(50, 3)), label=ClassLabel.silicone_mask, identity="mask01", session=2)
    again = parse_ply(write_ply(cloud))
    npt.assert_array_equal(again.points, cloud.points)
    assert (again.label, again.identity, again.session) == (cloud.label, cloud.identity, cloud.session)


def test_parse_xyz_skips_comments_and_blanks():
    data = b"# voxatn label=BonaFide identity=bona01 session=1\n\n1 2 3\n4 5 6 7\n"
    cloud = parse_xyz(data)
    npt.assert_array_equal(cloud.points, [[1, 2, 3], [4, 5, 6]])
    assert cloud.identity == "bona01"


def test_parse_xyz_reads_ten_thousand_lines_exactly(rng):
    pts = rng.uniform(-1e3, 1e3, size=(10_000, 3))
    buf = io.BytesIO()
    np.savetxt(buf, pts, fmt="%.17g")
    cloud = parse_xyz(buf.getvalue())
    assert len(cloud) == 10_000
    npt.assert_array_equal(cloud.points, pts)
    npt.assert_array_equal(parse_xyz(write_xyz(cloud)).points, pts)


def test_parse_xyz_short_line():
    with pytest.raises(ParseError, match="3 coordinates") as err:
        parse_xyz(b"1 2 3\n1 2\n")
    assert err.value.line == 2


def test_load_cloud_dispatches_on_suffix(tmp_path, rng):
    cloud = PointCloud(points=rng.random((10, 3)), identity="bona02")
    (tmp_path / "a.xyz").write_bytes(write_xyz(cloud))
    (tmp_path / "a.ply").write_bytes(write_ply(cloud))
    for name in ("a.xyz", "a.ply"):
        loaded = load_cloud(tmp_path / name)
        npt.assert_array_equal(loaded.points, cloud.points)
        assert loaded.source.endswith(name)
    (tmp_path / "a.obj").write_text("")
    with pytest.raises(ParseError, match="unsupported"):
        load_cloud(tmp_path / "a.obj")


def test_normalize_centers_and_scales(rng):
    cloud = PointCloud(points=rng.normal(3.0, 10.0, size=(200, 3)))
    out = normalize(cloud)
    assert out.space is Space.normalized
    npt.assert_allclose(out.points.mean(axis=0), [0.5, 0.5, 0.5], atol=1e-12)
    assert np.abs(out.points - 0.5).max() == pytest.approx(0.45, abs=1e-12)
    assert out.points.min() >= 0.05 - 1e-12 and out.points.max() <= 0.95 + 1e-12


def test_normalize_is_shape_preserving(rng):
    pts = rng.normal(size=(30, 3))
    a = normalize(PointCloud(points=pts)).points
    b = normalize(PointCloud(points=pts * 7.5 + 2.0)).points
    npt.assert_allclose(a, b, atol=1e-12)


def test_normalize_is_idempotent_and_order_free(rng):
    pts = rng.normal(2.0, 4.0, size=(500, 3))
    once = normalize(PointCloud(points=pts))
    npt.assert_allclose(normalize(once).points, once.points, atol=1e-12)
    perm = rng.permutation(len(pts))
    shuffled = normalize(PointCloud(points=pts[perm]))
    npt.assert_allclose(shuffled.points, once.points[perm], atol=1e-12)


def test_normalize_zero_extent():
    with pytest.raises(ZeroExtentError, match="zero extent"):
        normalize(PointCloud(points=np.ones((5, 3))))


def test_augment_copy_count_and_identity(rng):
    cloud = normalized_cloud(rng.uniform(0.2, 0.8, size=(40, 3)))
    copies = augment(cloud, NO_AUGMENT)
    assert len(copies) == 1
    npt.assert_array_equal(copies[0].points, cloud.points)
    assert len(augment(cloud, AugmentSpec(rotation_copies=5))) == 5


def test_augment_rotations_are_rigid(rng):
    # inside a disc of radius 0.4 about the vertical axis, so no clipping occurs
    r = rng.uniform(0.0, 0.4, size=60)
    t = rng.uniform(0.0, 2 * math.pi, size=60)
    pts = np.stack([0.5 + r * np.cos(t), 0.5 + r * np.sin(t), rng.uniform(0.1, 0.9, size=60)], axis=1)
    cloud = normalized_cloud(pts)
    spec = AugmentSpec(rotation_copies=4, jitter_sigma=0.0, mirror=False, shift_max=0.0)

    def dists(p):
        return np.linalg.norm(p[:, None, :] - p[None, :, :], axis=-1)

    for copy in augment(cloud, spec):
        npt.assert_allclose(dists(copy.points), dists(pts), atol=1e-12)
        npt.assert_allclose(copy.points[:, 2], pts[:, 2])
    quarter = augment(cloud, spec)[1].points
    npt.assert_allclose(quarter[:, 0], 0.5 - (pts[:, 1] - 0.5), atol=1e-12)


def test_augment_is_seeded(rng):
    cloud = normalized_cloud(rng.uniform(0.2, 0.8, size=(40, 3)))
    a = augment(cloud, AugmentSpec(rotation_copies=3, rng_seed=9))
    b = augment(cloud, AugmentSpec(rotation_copies=3, rng_seed=9))
    c = augment(cloud, AugmentSpec(rotation_copies=3, rng_seed=10))
    for x, y in zip(a, b):
        npt.assert_array_equal(x.points, y.points)
    assert not np.array_equal(a[0].points, c[0].points)
    for copy in a:
        assert copy.points.min() >= 0.0 and copy.points.max() <= 1.0


def test_augment_requires_normalized_cloud(rng):
    with pytest.raises(ValueError, match="normalized"):
        augment(PointCloud(points=rng.random((5, 3))), NO_AUGMENT)
