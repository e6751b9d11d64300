"""Label/calibration/point-cloud parsing and the dataset facade."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cap3d.errors import (
    CalibrationError,
    DatasetError,
    LabelFormatError,
    PointCloudFormatError,
)
from cap3d.kitti_io import (
    CalibrationSet,
    Frame,
    FrameDataset,
    ObjectLabel,
    format_label_file,
    load_split_ids,
    parse_calib_file,
    parse_label_file,
    read_point_cloud,
    transform_to_rect_camera,
)

PED_LINE = (
    "Pedestrian 0.0 0 -0.2 712.4 143.0 810.73 307.92 "
    "1.89 0.48 1.2 1.84 1.47 8.41 0.01"
)
DONTCARE_LINE = "DontCare -1 -1 -10 503.89 169.71 590.61 190.13 -1 -1 -1 -1000 -1000 -1000 -10"

CALIB_TEXT = """\
P2: 721.5377 0.0 609.5593 44.85728 0.0 721.5377 172.854 0.2163791 0.0 0.0 1.0 0.002745884
R0_rect: 1.0 0.0 0.0 0.0 1.0 0.0 0.0 0.0 1.0
Tr_velo_to_cam: 0.0 -1.0 0.0 -0.06 0.0 0.0 -1.0 -0.08 1.0 0.0 0.0 -0.27
"""


class TestLabelParsing:
    def test_single_pedestrian(self):
        labels = parse_label_file(PED_LINE + "\n")
        assert len(labels) == 1
        lab = labels[0]
        assert lab.class_name == "Pedestrian"
        assert lab.dims == (1.89, 0.48, 1.2)  # file order: height, width, length
        assert lab.location == (1.84, 1.47, 8.41)
        assert lab.occlusion == 0
        assert lab.rotation_y == 0.01
        assert lab.score is None
        assert lab.bbox_height_px == pytest.approx(307.92 - 143.0)

    def test_score_column(self):
        labels = parse_label_file(PED_LINE + " 0.73\n")
        assert labels[0].score == 0.73

    def test_dontcare_sentinels_accepted(self):
        lab = parse_label_file(DONTCARE_LINE + "\n")[0]
        assert lab.class_name == "DontCare"
        assert lab.dims == (-1.0, -1.0, -1.0)
        assert lab.occlusion == -1

    def test_blank_lines_skipped(self):
        labels = parse_label_file("\n" + PED_LINE + "\n\n")
        assert len(labels) == 1

    def test_wrong_field_count_reports_line(self):
        text = PED_LINE + "\nCar 0.0 0\n"
        with pytest.raises(LabelFormatError, match="line 2") as exc_info:
            parse_label_file(text)
        assert exc_info.value.line == 2

    def test_non_numeric_field(self):
        bad = PED_LINE.replace("8.41", "abc")
        with pytest.raises(LabelFormatError, match="line 1"):
            parse_label_file(bad)

    def test_negative_dims_rejected_for_evaluated_class(self):
        bad = PED_LINE.replace("1.89 0.48 1.2", "-1.89 0.48 1.2")
        with pytest.raises(LabelFormatError, match="dimensions"):
            parse_label_file(bad)

    def test_degenerate_bbox_rejected_even_for_dontcare(self):
        bad = DONTCARE_LINE.replace("590.61", "503.89")
        with pytest.raises(LabelFormatError, match="2D box"):
            parse_label_file(bad)

    def test_truncation_out_of_range(self):
        bad = PED_LINE.replace("Pedestrian 0.0", "Pedestrian 1.5")
        with pytest.raises(LabelFormatError, match="truncation"):
            parse_label_file(bad)


class TestLabelRoundTrip:
    def test_exact_round_trip(self):
        labels = parse_label_file(PED_LINE + " 0.73\n" + DONTCARE_LINE + "\n")
        text = format_label_file(labels)
        assert parse_label_file(text) == labels

    @settings(max_examples=50, deadline=None)
    @given(
        trunc=st.floats(0, 1),
        occ=st.integers(0, 3),
        alpha=st.floats(-math.pi, math.pi),
        rot=st.floats(-math.pi, math.pi),
        dims=st.tuples(
            st.floats(0.1, 5, allow_nan=False),
            st.floats(0.1, 5, allow_nan=False),
            st.floats(0.1, 5, allow_nan=False),
        ),
        loc=st.tuples(st.floats(-50, 50), st.floats(-3, 3), st.floats(0, 80)),
    )
    def test_round_trip_identity_random(self, trunc, occ, alpha, rot, dims, loc):
        lab = ObjectLabel(
            class_name="Car",
            truncation=trunc,
            occlusion=occ,
            alpha=alpha,
            bbox2d=(10.0, 20.0, 110.5, 220.25),
            dims=dims,
            location=loc,
            rotation_y=rot,
        )
        assert parse_label_file(format_label_file([lab])) == [lab]


class TestCalibration:
    def test_parse(self):
        calib = parse_calib_file(CALIB_TEXT)
        assert calib.P2.shape == (3, 4)
        np.testing.assert_array_equal(calib.R0_rect, np.eye(3))
        assert calib.Tr_velo_to_cam[0, 3] == -0.06

    def test_missing_key(self):
        text = "\n".join(line for line in CALIB_TEXT.splitlines() if not line.startswith("P2"))
        with pytest.raises(CalibrationError, match="P2"):
            parse_calib_file(text)

    def test_wrong_value_count(self):
        with pytest.raises(CalibrationError, match="12"):
            parse_calib_file(CALIB_TEXT.replace(" 0.002745884", ""))

    def test_non_orthonormal_rectification_rejected(self):
        with pytest.raises(CalibrationError, match="orthonormal"):
            parse_calib_file(CALIB_TEXT.replace("R0_rect: 1.0", "R0_rect: 2.0"))

    def test_extra_keys_ignored(self):
        calib = parse_calib_file("P0: 1 2 3\n" + CALIB_TEXT)
        assert calib.P2[0, 0] == 721.5377

    def test_matrices_read_only(self):
        calib = parse_calib_file(CALIB_TEXT)
        with pytest.raises(ValueError):
            calib.P2[0, 0] = 0.0


class TestPointCloud:
    def test_decode(self):
        raw = np.array([[1, 2, 3, 0.5], [-4, 5, -6, 0.0]], dtype="<f4")
        pc = read_point_cloud(raw.tobytes())
        assert len(pc) == 2
        assert pc.frame is Frame.VELODYNE
        np.testing.assert_array_equal(pc.xyz, raw[:, :3])

    def test_truncated_blob_rejected(self):
        with pytest.raises(PointCloudFormatError, match="multiple of 16"):
            read_point_cloud(b"\x00" * 15)

    def test_non_finite_coordinates_rejected(self):
        raw = np.array([[np.nan, 0, 0, 0]], dtype="<f4")
        with pytest.raises(ValueError, match="non-finite"):
            read_point_cloud(raw.tobytes())

    def test_points_read_only(self):
        pc = read_point_cloud(np.zeros((3, 4), dtype="<f4").tobytes())
        with pytest.raises(ValueError):
            pc.points[0, 0] = 1.0


class TestTransform:
    def test_matches_homogeneous_matrix_product(self):
        calib = parse_calib_file(CALIB_TEXT)
        rng = np.random.default_rng(7)
        pts = rng.uniform(-20, 20, (100, 4))
        pc = read_point_cloud(pts.astype("<f4").tobytes())
        rect = transform_to_rect_camera(pc, calib)

        tr = np.vstack([calib.Tr_velo_to_cam, [0, 0, 0, 1]])
        homo = np.hstack([pc.xyz.astype(np.float64), np.ones((100, 1))])
        expected = (calib.R0_rect @ (tr @ homo.T)[:3]).T
        np.testing.assert_allclose(rect.xyz, expected, atol=1e-12)
        assert rect.frame is Frame.RECT_CAMERA
        np.testing.assert_array_equal(rect.points[:, 3], pc.points[:, 3])

    def test_forward_axis_mapping(self):
        # With this extrinsic, velodyne +x (forward) maps to camera +z.
        calib = parse_calib_file(CALIB_TEXT)
        pc = read_point_cloud(np.array([[10, 0, 0, 0]], dtype="<f4").tobytes())
        rect = transform_to_rect_camera(pc, calib)
        assert rect.xyz[0, 2] == pytest.approx(10 - 0.27)

    def test_rejects_already_rectified_cloud(self):
        calib = parse_calib_file(CALIB_TEXT)
        pc = read_point_cloud(np.zeros((1, 4), dtype="<f4").tobytes())
        rect = transform_to_rect_camera(pc, calib)
        with pytest.raises(ValueError, match="velodyne"):
            transform_to_rect_camera(rect, calib)


class TestFrameDataset:
    def test_from_split_file(self, fixture_root):
        ds = FrameDataset.from_split_file(fixture_root, fixture_root / "split.txt")
        assert len(ds.frame_ids) == 20
        assert list(ds.frame_ids) == sorted(ds.frame_ids)

    def test_from_directory_matches_split(self, fixture_root, dataset):
        scanned = FrameDataset.from_directory(fixture_root)
        assert scanned.frame_ids == dataset.frame_ids

    def test_read_labels(self, dataset):
        labels = dataset.read_labels(dataset.frame_ids[0])
        assert labels
        assert all(lab.class_name == "Pedestrian" for lab in labels)

    def test_missing_frame_names_frame(self, dataset):
        with pytest.raises(DatasetError, match="frame 999999"):
            dataset.read_labels("999999")

    def test_read_points_rect(self, dataset):
        rect = dataset.read_points_rect(dataset.frame_ids[0])
        assert rect.frame is Frame.RECT_CAMERA
        assert len(rect) > 0

    def test_duplicate_ids_rejected(self, fixture_root):
        with pytest.raises(ValueError, match="unique"):
            FrameDataset(fixture_root, ("000001", "000001"))

    def test_unsorted_ids_rejected(self, fixture_root):
        with pytest.raises(ValueError, match="sorted"):
            FrameDataset(fixture_root, ("000002", "000001"))

    def test_split_ids_skip_blanks(self, tmp_path):
        p = tmp_path / "split.txt"
        p.write_text("000001\n\n000000\n")
        assert load_split_ids(p) == ["000001", "000000"]

    def test_from_directory_empty_root(self, tmp_path):
        (tmp_path / "label_2").mkdir()
        with pytest.raises(DatasetError, match="no label files"):
            FrameDataset.from_directory(tmp_path)
