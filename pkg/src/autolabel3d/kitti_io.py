"""KITTI-style dataset reading and writing.

Layout under a dataset root:
    calib/<id>.txt  label_2/<id>.txt  velodyne/<id>.bin  image_2/<id>.png
    split/train.txt  split/val.txt

Labels on disk follow the KITTI camera-frame convention (location at the
bottom face center, y down, rotation about the camera y axis). read_frame
converts them to the internal LiDAR-frame Box3D with a geometric center;
write_label_file converts back. All model code operates in the LiDAR frame.
"""

import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .geometry import Box2D, Box3D, Calibration, normalize_angle


class DatasetError(ValueError):
    pass


@dataclass
class ObjectAnnotation:
    cls: str
    box2d: Box2D
    box3d: Box3D | None
    truncated: float = 0.0
    occluded: int = 0
    alpha: float = 0.0
    score: float | None = None

    @property
    def difficulty(self):
        """Passthrough difficulty tag derived from dataset metadata."""
        return int(self.occluded)


@dataclass
class FrameRecord:
    frame_id: str
    cloud: np.ndarray            # [N,4] x,y,z,intensity
    image: np.ndarray            # [h,w,3] float in [0,1]
    calib: Calibration
    objects: list
    meta: object = field(default=None, repr=False, compare=False)


# -- box frame conversions --------------------------------------------------

def camera_label_to_lidar_box(loc, dims, rotation_y, calib):
    """KITTI camera label (bottom-center location, h/w/l, ry) -> Box3D."""
    h, w, l = dims
    center_rect = np.array([loc[0], loc[1] - h / 2.0, loc[2]])
    cx, cy, cz = calib.rect_to_lidar(center_rect[None])[0]
    heading_cam = np.array([math.cos(rotation_y), 0.0, -math.sin(rotation_y)])
    rot = calib.R0 @ calib.Tr[:, :3]
    d = np.linalg.inv(rot) @ heading_cam
    return Box3D(cx, cy, cz, l, w, h, math.atan2(d[1], d[0]))


def lidar_box_to_camera_label(box, calib):
    """Box3D -> (location, dims hwl, rotation_y, alpha) in the camera frame."""
    center_rect = calib.lidar_to_rect(np.array([[box.cx, box.cy, box.cz]]))[0]
    loc = center_rect + np.array([0.0, box.h / 2.0, 0.0])
    rot = calib.R0 @ calib.Tr[:, :3]
    d = rot @ np.array([math.cos(box.ry), math.sin(box.ry), 0.0])
    rotation_y = normalize_angle(math.atan2(-d[2], d[0]))
    alpha = normalize_angle(rotation_y - math.atan2(loc[0], loc[2]))
    return loc, (box.h, box.w, box.l), rotation_y, alpha


# -- calibration ------------------------------------------------------------

def read_calib_file(path):
    values = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                key, rest = line.split(":", 1)
                values[key.strip()] = np.array([float(x) for x in rest.split()])
            except ValueError as exc:
                raise DatasetError(f"{path}:{ln}: malformed calibration line") from exc
    try:
        return Calibration(P=values["P2"].reshape(3, 4),
                           R0=values["R0_rect"].reshape(3, 3),
                           Tr=values["Tr_velo_to_cam"].reshape(3, 4))
    except KeyError as exc:
        raise DatasetError(f"{path}: missing calibration key {exc}") from exc


def write_calib_file(path, calib):
    with open(path, "w") as fh:
        fh.write("P2: " + " ".join(repr(float(v)) for v in calib.P.ravel()) + "\n")
        fh.write("R0_rect: " + " ".join(repr(float(v)) for v in calib.R0.ravel()) + "\n")
        fh.write("Tr_velo_to_cam: " + " ".join(repr(float(v)) for v in calib.Tr.ravel()) + "\n")


# -- labels -----------------------------------------------------------------

def read_label_file(path, calib):
    objects = []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) not in (15, 16):
                raise DatasetError(f"{path}:{ln}: expected 15 or 16 fields, got {len(parts)}")
            try:
                cls = parts[0]
                truncated = float(parts[1])
                occluded = int(float(parts[2]))
                alpha = float(parts[3])
                bbox = [float(x) for x in parts[4:8]]
                dims = tuple(float(x) for x in parts[8:11])
                loc = tuple(float(x) for x in parts[11:14])
                rotation_y = float(parts[14])
                score = float(parts[15]) if len(parts) == 16 else None
            except ValueError as exc:
                raise DatasetError(f"{path}:{ln}: malformed label line") from exc
            box2d = Box2D(bbox[0], bbox[1], bbox[2], bbox[3])
            # KITTI uses -1/-1000 placeholders for weak (2D-only) annotations
            box3d = None
            if min(dims) > 0 and loc[2] > -999:
                box3d = camera_label_to_lidar_box(loc, dims, rotation_y, calib)
            objects.append(ObjectAnnotation(cls, box2d, box3d, truncated,
                                            occluded, alpha, score))
    return objects


def _fmt(x):
    # repr keeps full precision so write/read round-trips are faithful
    return repr(float(x))


def write_label_file(path, objects, calib):
    lines = []
    for obj in objects:
        b = obj.box2d
        if obj.box3d is not None:
            loc, dims, rotation_y, alpha = lidar_box_to_camera_label(obj.box3d, calib)
        else:
            loc, dims, rotation_y, alpha = (-1000.0, -1000.0, -1000.0), (-1, -1, -1), -10.0, -10.0
        fields = [obj.cls, _fmt(obj.truncated), str(obj.occluded), _fmt(alpha),
                  _fmt(b.u_min), _fmt(b.v_min), _fmt(b.u_max), _fmt(b.v_max),
                  *[_fmt(v) for v in dims], *[_fmt(v) for v in loc], _fmt(rotation_y)]
        if obj.score is not None:
            fields.append(_fmt(obj.score))
        lines.append(" ".join(fields))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


# -- point clouds and images ------------------------------------------------

def read_velodyne(path):
    raw = np.fromfile(path, dtype="<f4")
    if raw.size % 4 != 0:
        raise DatasetError(f"{path}: truncated point binary ({raw.size * 4} bytes, "
                           "not divisible by 16)")
    return raw.reshape(-1, 4).astype(np.float64)


def write_velodyne(path, cloud):
    np.asarray(cloud, dtype="<f4").tofile(path)


def read_image(path):
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_image(path, image):
    arr = np.clip(np.asarray(image) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr, "RGB").save(path, format="PNG")


# -- frames -----------------------------------------------------------------

def frame_paths(root, frame_id):
    return {
        "calib": os.path.join(root, "calib", f"{frame_id}.txt"),
        "label": os.path.join(root, "label_2", f"{frame_id}.txt"),
        "velodyne": os.path.join(root, "velodyne", f"{frame_id}.bin"),
        "image": os.path.join(root, "image_2", f"{frame_id}.png"),
    }


def read_frame(root, frame_id):
    paths = frame_paths(root, frame_id)
    for name, p in paths.items():
        if not os.path.exists(p):
            raise FileNotFoundError(f"missing {name} file for frame {frame_id}: {p}")
    calib = read_calib_file(paths["calib"])
    objects = read_label_file(paths["label"], calib)
    cloud = read_velodyne(paths["velodyne"])
    if len(cloud) == 0:
        raise DatasetError(f"frame {frame_id}: empty point cloud")
    image = read_image(paths["image"])
    return FrameRecord(frame_id, cloud, image, calib, objects)


def write_frame(root, frame):
    for sub in ("calib", "label_2", "velodyne", "image_2"):
        os.makedirs(os.path.join(root, sub), exist_ok=True)
    paths = frame_paths(root, frame.frame_id)
    write_calib_file(paths["calib"], frame.calib)
    write_label_file(paths["label"], frame.objects, frame.calib)
    write_velodyne(paths["velodyne"], frame.cloud)
    write_image(paths["image"], frame.image)


def read_split(root, name):
    path = os.path.join(root, "split", f"{name}.txt")
    with open(path) as fh:
        return [line.strip() for line in fh if line.strip()]


def write_split(root, name, frame_ids):
    os.makedirs(os.path.join(root, "split"), exist_ok=True)
    with open(os.path.join(root, "split", f"{name}.txt"), "w") as fh:
        fh.write("\n".join(frame_ids) + ("\n" if frame_ids else ""))
