import math

import numpy as np
import pytest

from cameraModel import PoseTrajectory, default_intrinsics
from depthEval import (AlignmentUndefinedError, DepthMap, DepthShapeError, EmptyOverlapError, MeshError, MetricsReport,
                       PfmError, affine_align, depth_metrics, depth_to_mesh, export_obj, export_pfm, mask_iou,
                       plane_segmentation, pose_error, read_pfm)


def ramp_depth(h=12, w=16, seed=0):
    rng = np.random.Generator(np.random.Philox(seed))
    ys, xs = np.mgrid[0:h, 0:w]
    return DepthMap(1.0 + 0.05 * xs + 0.02 * ys + rng.uniform(0, 0.01, (h, w)))


def test_depth_map_validity():
    d = DepthMap(np.array([[1.0, 0.0], [np.inf, -2.0]]))
    np.testing.assert_array_equal(d.valid, [[True, False], [False, False]])
    d = DepthMap(np.ones((2, 2)), valid=np.array([[True, False], [True, True]]))
    assert d.valid.sum() == 3
    with pytest.raises(DepthShapeError):
        DepthMap(np.ones(4))


def test_identical_maps_score_zero():
    gt = ramp_depth()
    report = depth_metrics(gt, gt)
    assert report.format_pair() == "0.000/0.000"
    assert report.abs_rel == 0.0
    assert report.delta1 == 1.0
    assert report.valid_count == gt.depths.size


def test_doubled_prediction_without_alignment():
    gt = ramp_depth()
    report = depth_metrics(DepthMap(2.0 * gt.depths), gt, align=False)
    assert report.abs_rel == pytest.approx(1.0, rel=1e-12)
    assert report.log_err == pytest.approx(math.log(2.0), rel=1e-12)
    assert report.format_pair() == "1.000/0.693"
    assert not report.aligned


def test_metrics_are_affine_invariant():
    gt = ramp_depth()
    for a, b in [(3.0, 0.5), (0.2, -0.1), (7.0, 2.0)]:
        report = depth_metrics(DepthMap((gt.depths - b) / a), gt)
        assert report.abs_rel < 1e-12
        assert report.log_err < 1e-12
        assert report.a == pytest.approx(a, rel=1e-10)
        assert report.b == pytest.approx(b, abs=1e-10)


def _grid_oracle(x, y):
    """Coarse-to-fine grid search over a; b is the mean residual for each a."""
    a_c, span = 0.0, 10.0
    for _ in range(14):
        a_grid = a_c + np.linspace(-span, span, 41)
        b_grid = (y[None, :] - a_grid[:, None] * x[None, :]).mean(axis=1)
        sse = ((a_grid[:, None] * x + b_grid[:, None] - y) ** 2).sum(axis=1)
        a_c = a_grid[np.argmin(sse)]
        span /= 8.0
    return a_c, float((y - a_c * x).mean())


def test_alignment_matches_grid_oracle():
    rng = np.random.Generator(np.random.Philox(4))
    gt = DepthMap(rng.uniform(1.0, 3.0, (6, 7)))
    pred = DepthMap(0.5 * gt.depths + 0.3 + rng.normal(0, 0.05, (6, 7)))
    a, b = affine_align(pred, gt)
    a_o, b_o = _grid_oracle(pred.depths.ravel(), gt.depths.ravel())
    assert a == pytest.approx(a_o, abs=1e-6)
    assert b == pytest.approx(b_o, abs=1e-6)


def test_alignment_needs_spread():
    gt = ramp_depth()
    with pytest.raises(AlignmentUndefinedError):
        affine_align(DepthMap(np.ones_like(gt.depths)), gt)


def test_metrics_errors():
    gt = ramp_depth()
    with pytest.raises(DepthShapeError):
        depth_metrics(DepthMap(np.ones((3, 3))), gt)
    with pytest.raises(DepthShapeError):
        depth_metrics(gt, gt, mask=np.ones((2, 2), dtype=bool))

    left = gt.depths.copy()
    left[:, 8:] = 0.0
    right = gt.depths.copy()
    right[:, :8] = 0.0
    with pytest.raises(EmptyOverlapError):
        depth_metrics(DepthMap(left), DepthMap(right))


def test_mask_restricts_evaluation():
    gt = ramp_depth()
    pred = gt.depths.copy()
    pred[:, :4] *= 3.0
    mask = np.zeros(gt.depths.shape, dtype=bool)
    mask[:, 4:] = True
    report = depth_metrics(DepthMap(pred), gt, mask=mask, align=False)
    assert report.abs_rel == 0.0
    assert report.valid_count == mask.sum()


def test_paper_style_formatting():
    report = MetricsReport(0.177, 0.217, 0.0, 0.0, 1.0, 1.0, 0.0, 10, True)
    assert report.format_pair() == "0.177/0.217"
    assert report.format_pair(paper_style=True) == ".177/.217"
    assert report.to_dict()["abs_rel"] == 0.177


def test_pose_error_identical_and_scaled():
    rng = np.random.Generator(np.random.Philox(12))
    rot = rng.normal(0, 0.002, (3, 3))
    trans = rng.normal(0, 0.01, (3, 3))
    rot[0] = trans[0] = 0.0
    gt = PoseTrajectory(rot, trans)

    same = pose_error(gt, gt)
    assert same.rotation_deg_max == pytest.approx(0.0, abs=1e-9)
    assert same.translation_rms == pytest.approx(0.0, abs=1e-15)
    assert same.direction_deg_mean == pytest.approx(0.0, abs=1e-5)

    half = pose_error(PoseTrajectory(rot, 0.5 * trans), gt)
    assert half.translation_scale == pytest.approx(2.0, rel=1e-12)
    assert half.translation_rms == pytest.approx(0.0, abs=1e-15)


def test_pose_error_with_zero_ground_truth_translation():
    report = pose_error(PoseTrajectory.zeros(), PoseTrajectory.zeros())
    assert report.direction_deg_mean is None
    assert report.translation_scale == 0.0


class _OffsetStub:
    def __init__(self, offsets):
        self.offsets = offsets

    def offset_map(self, K, resolution):
        return self.offsets


def test_plane_segmentation_thresholds_offsets():
    offsets = np.array([[0.0, 0.01], [0.03, 0.5]])
    mask = plane_segmentation(_OffsetStub(offsets), default_intrinsics(2, 2), (2, 2), 0.02)
    np.testing.assert_array_equal(mask, [[False, False], [True, True]])
    with pytest.raises(ValueError):
        plane_segmentation(_OffsetStub(offsets), default_intrinsics(2, 2), (2, 2), 0.0)


def test_mask_iou():
    a = np.array([[True, True], [False, False]])
    b = np.array([[True, False], [True, False]])
    assert mask_iou(a, b) == pytest.approx(1 / 3)
    assert mask_iou(a, a) == 1.0
    assert mask_iou(np.zeros((2, 2), bool), np.zeros((2, 2), bool)) == 1.0


# ---------------------------------------------------------------------------
# PFM / mesh
# ---------------------------------------------------------------------------

def test_pfm_round_trip(tmp_path):
    depths = np.arange(1.0, 13.0).reshape(3, 4)
    depths[1, 2] = 0.0
    path = str(tmp_path / "d.pfm")
    export_pfm(DepthMap(depths), path)
    raw = open(path, "rb").read()
    assert raw.startswith(b"Pf\n4 3\n-1.0\n")
    assert len(raw) == len(b"Pf\n4 3\n-1.0\n") + 4 * 12

    back = read_pfm(path)
    np.testing.assert_array_equal(back.depths, depths)
    assert not back.valid[1, 2]
    assert back.valid.sum() == 11


def test_pfm_rows_are_stored_bottom_up(tmp_path):
    depths = np.array([[1.0, 1.0], [2.0, 2.0]])
    path = str(tmp_path / "d.pfm")
    export_pfm(DepthMap(depths), path)
    payload = np.frombuffer(open(path, "rb").read()[-16:], dtype="<f4")
    np.testing.assert_array_equal(payload, [2.0, 2.0, 1.0, 1.0])


def test_pfm_rejects_malformed(tmp_path):
    color = tmp_path / "color.pfm"
    color.write_bytes(b"PF\n1 1\n-1.0\n" + b"\0" * 12)
    with pytest.raises(PfmError):
        read_pfm(str(color))
    short = tmp_path / "short.pfm"
    short.write_bytes(b"Pf\n4 4\n-1.0\n" + b"\0" * 8)
    with pytest.raises(PfmError):
        read_pfm(str(short))
    junk = tmp_path / "junk.pfm"
    junk.write_bytes(b"hello")
    with pytest.raises(PfmError):
        read_pfm(str(junk))


def test_constant_depth_mesh_keeps_every_triangle():
    K = default_intrinsics(9, 7)
    mesh = depth_to_mesh(DepthMap(np.full((7, 9), 2.0)), K)
    assert len(mesh.triangles) == 2 * 6 * 8
    assert len(mesh.vertices) == 63
    np.testing.assert_allclose(mesh.vertices[:, 2], 2.0)


def _step_depth():
    depths = np.ones((8, 12))
    depths[:, 6:] = 3.0
    return DepthMap(depths)


def test_depth_jump_is_culled():
    K = default_intrinsics(12, 8)
    depth = _step_depth()
    mesh = depth_to_mesh(depth, K)
    z = mesh.vertices[:, 2]
    spans = np.ptp(z[mesh.triangles], axis=1)
    assert np.all(spans < 1e-12)
    assert len(mesh.triangles) == 2 * 7 * 5 * 2

    uncut = depth_to_mesh(depth, K, cull_ratio=1e18)
    assert len(uncut.triangles) == 2 * 7 * 11


def test_mesh_skips_invalid_pixels():
    depths = np.full((4, 4), 1.5)
    depths[0, 0] = np.nan
    mesh = depth_to_mesh(DepthMap(depths), default_intrinsics(4, 4))
    assert len(mesh.vertices) == 15
    assert len(mesh.triangles) == 2 * 9 - 2
    with pytest.raises(MeshError):
        depth_to_mesh(DepthMap(np.zeros((4, 4))), default_intrinsics(4, 4))


def test_obj_export(tmp_path):
    K = default_intrinsics(3, 2)
    mesh = depth_to_mesh(DepthMap(np.full((2, 3), 1.0)), K, colors=np.full((2, 3, 3), 0.5))
    path = tmp_path / "m.obj"
    export_obj(mesh, str(path))
    lines = path.read_text().splitlines()
    verts = [l for l in lines if l.startswith("v ")]
    faces = [l for l in lines if l.startswith("f ")]
    assert len(verts) == 6 and len(faces) == 4
    # pixel (0, 0) at unit depth lands on its own ray
    xyz = [float(t) for t in verts[0].split()[1:4]]
    np.testing.assert_allclose(xyz, [-K.cx / K.fx, -K.cy / K.fy, 1.0], rtol=1e-8)
    assert len(verts[0].split()) == 7
    assert min(int(t) for f in faces for t in f.split()[1:]) == 1
