import numpy as np
import pytest

from autolabel3d.geometry import Box3D, iou_3d
from autolabel3d.kitti_io import (DatasetError, ObjectAnnotation,
                                  camera_label_to_lidar_box,
                                  lidar_box_to_camera_label, read_calib_file,
                                  read_frame, read_label_file, read_split,
                                  read_velodyne, write_frame, write_label_file,
                                  write_split, write_velodyne)
from autolabel3d.synth import default_calibration, synth_scene

from oracles import random_box


def test_camera_lidar_round_trip(rng):
    calib = default_calibration()
    for _ in range(50):
        box = random_box(rng, 10.0)
        loc, dims, rotation_y, _ = lidar_box_to_camera_label(box, calib)
        back = camera_label_to_lidar_box(loc, dims, rotation_y, calib)
        assert np.abs(back.as_array()[:6] - box.as_array()[:6]).max() < 1e-9
        assert iou_3d(back, box) == pytest.approx(1.0, abs=1e-9)


def test_frame_round_trip(tmp_path):
    frame = synth_scene(3, n_objects=2, sparsity=(60, 100))
    write_frame(tmp_path, frame)
    back = read_frame(tmp_path, frame.frame_id)
    assert np.array_equal(back.cloud, frame.cloud)
    assert np.array_equal(back.image, frame.image)
    assert np.allclose(back.calib.P, frame.calib.P)
    assert len(back.objects) == len(frame.objects)
    for a, b in zip(back.objects, frame.objects):
        assert a.cls == b.cls
        assert abs(a.box2d.u_min - b.box2d.u_min) < 1e-9
        assert np.abs(a.box3d.as_array() - b.box3d.as_array()).max() < 1e-9


def test_velodyne_two_points(tmp_path):
    path = tmp_path / "p.bin"
    cloud = np.arange(8, dtype=np.float64).reshape(2, 4)
    write_velodyne(path, cloud)
    assert path.stat().st_size == 32
    assert np.array_equal(read_velodyne(path), cloud)


def test_velodyne_truncated_binary(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"\x00" * 20)
    with pytest.raises(DatasetError, match="divisible"):
        read_velodyne(path)


def test_read_missing_frame(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_frame(tmp_path, "000042")


def test_label_fixture_hand_parsed(tmp_path):
    calib = default_calibration()
    path = tmp_path / "l.txt"
    path.write_text(
        "Car 0.1 2 -1.5 100.0 80.0 200.0 160.0 1.5 1.7 4.2 1.0 1.2 15.0 0.3\n")
    (obj,) = read_label_file(path, calib)
    assert obj.cls == "Car"
    assert obj.truncated == 0.1
    assert obj.occluded == 2
    assert obj.difficulty == 2
    assert obj.alpha == -1.5
    assert (obj.box2d.u_min, obj.box2d.v_max) == (100.0, 160.0)
    # dims come in h,w,l order
    assert (obj.box3d.h, obj.box3d.w, obj.box3d.l) == (1.5, 1.7, 4.2)
    expected = camera_label_to_lidar_box((1.0, 1.2, 15.0), (1.5, 1.7, 4.2), 0.3, calib)
    assert np.abs(obj.box3d.as_array() - expected.as_array()).max() == 0.0


def test_label_weak_annotation_placeholders(tmp_path):
    calib = default_calibration()
    path = tmp_path / "l.txt"
    box = Box3D(12.0, 1.0, -0.7, 4.0, 1.6, 1.5, 0.2)
    objs = [ObjectAnnotation("Car", obj_box2d(), None),
            ObjectAnnotation("Car", obj_box2d(), box, score=0.75)]
    write_label_file(path, objs, calib)
    back = read_label_file(path, calib)
    assert back[0].box3d is None
    assert back[0].score is None
    assert back[1].score == 0.75
    assert np.abs(back[1].box3d.as_array() - box.as_array()).max() < 1e-9


def obj_box2d():
    from autolabel3d.geometry import Box2D

    return Box2D(10.0, 20.0, 60.0, 70.0)


def test_label_malformed_line_reports_number(tmp_path):
    calib = default_calibration()
    path = tmp_path / "l.txt"
    path.write_text("Car 0 0 0 1 2 3 4\n")
    with pytest.raises(DatasetError, match=":1"):
        read_label_file(path, calib)


def test_calib_malformed(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("P2: 1 2 three\n")
    with pytest.raises(DatasetError, match="malformed"):
        read_calib_file(path)


def test_calib_missing_key(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("P2: " + " ".join(["0.0"] * 12) + "\n")
    with pytest.raises(DatasetError, match="missing"):
        read_calib_file(path)


def test_split_round_trip(tmp_path):
    write_split(tmp_path, "train", ["000000", "000002"])
    assert read_split(tmp_path, "train") == ["000000", "000002"]
