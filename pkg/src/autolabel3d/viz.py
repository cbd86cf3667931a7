"""Static visual artifact export: BEV renders and attention overlays."""

import numpy as np
from PIL import Image, ImageDraw

from .geometry import box_corners

# blue -> cyan -> yellow -> red
_STOPS = np.array([[0.1, 0.15, 0.8], [0.1, 0.8, 0.9], [0.95, 0.9, 0.1], [0.9, 0.1, 0.1]])


def colormap(t):
    """Map values in [0,1] to RGB tuples along a fixed 4-stop ramp."""
    t = np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0)
    pos = t * (len(_STOPS) - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, len(_STOPS) - 1)
    f = (pos - lo)[..., None]
    rgb = _STOPS[lo] * (1 - f) + _STOPS[hi] * f
    return (rgb * 255).astype(np.uint8)


def attention_scores(predictions):
    """Average attention received per context point, normalized to sum 1."""
    n_c = predictions.n_context
    if not predictions.attention:
        raise ValueError("forward must run with keep_attention=True")
    acc = np.zeros(n_c)
    for layer_maps in predictions.attention:
        # mean over heads and query rows of the context columns
        acc += layer_maps[:, :, :n_c].mean(axis=(0, 1))
    total = acc.sum()
    if total <= 0:
        raise ValueError("degenerate attention maps")
    return acc / total


class BEVCanvas:
    """Orthographic top-down canvas with a fixed world-to-pixel mapping."""

    def __init__(self, x_range, y_range, px_per_m=12, margin=20):
        self.x_range = x_range
        self.y_range = y_range
        self.scale = px_per_m
        self.margin = margin
        self.width = int((y_range[1] - y_range[0]) * px_per_m) + 2 * margin
        self.height = int((x_range[1] - x_range[0]) * px_per_m) + 2 * margin
        self.img = Image.new("RGB", (self.width, self.height), (18, 18, 24))
        self.draw = ImageDraw.Draw(self.img)

    def world_to_pixel(self, x, y):
        """x forward maps up, y left maps left."""
        px = self.margin + (self.y_range[1] - y) * self.scale
        py = self.margin + (self.x_range[1] - x) * self.scale
        return px, py

    def points(self, xy, colors=None):
        for i, (x, y) in enumerate(xy):
            px, py = self.world_to_pixel(x, y)
            c = tuple(int(v) for v in colors[i]) if colors is not None else (170, 170, 170)
            self.draw.ellipse([px - 1.5, py - 1.5, px + 1.5, py + 1.5], fill=c)

    def box(self, box3d, color, width=2):
        corners = box_corners(box3d)[:4]
        poly = [self.world_to_pixel(c[0], c[1]) for c in corners]
        self.draw.line(poly + [poly[0]], fill=color, width=width)
        # heading tick from center to the front face midpoint
        front = ((corners[0] + corners[3]) / 2.0)
        self.draw.line([self.world_to_pixel(box3d.cx, box3d.cy),
                        self.world_to_pixel(front[0], front[1])], fill=color, width=width)

    def save(self, path):
        self.img.save(path, format="PNG")


def _bev_ranges(cloud, boxes):
    xs = [cloud[:, 0].min(), cloud[:, 0].max()]
    ys = [cloud[:, 1].min(), cloud[:, 1].max()]
    for b in boxes:
        c = box_corners(b)
        xs += [c[:, 0].min(), c[:, 0].max()]
        ys += [c[:, 1].min(), c[:, 1].max()]
    return (min(xs) - 1, max(xs) + 1), (min(ys) - 1, max(ys) + 1)


GT_COLOR = (70, 110, 255)       # blue: ground truth
PRED_COLOR = (60, 220, 90)      # green: generated


def export_bev(frame, pred_boxes, gt_boxes, out_path, canvas=None):
    """Top-down render of the cloud with prediction/ground-truth boxes."""
    if canvas is None:
        x_range, y_range = _bev_ranges(frame.cloud, list(pred_boxes) + list(gt_boxes))
        canvas = BEVCanvas(x_range, y_range)
    canvas.points(frame.cloud[:, :2])
    for b in gt_boxes:
        canvas.box(b, GT_COLOR)
    for b in pred_boxes:
        canvas.box(b, PRED_COLOR)
    canvas.save(out_path)
    return canvas


def export_attention(sample, predictions, frame, out_path, upscale=3):
    """Received-attention overlay: image-crop dots next to a BEV scatter."""
    scores = attention_scores(predictions)
    rel = scores / scores.max() if scores.max() > 0 else scores
    colors = colormap(rel)

    b = sample.box2d
    h, w = frame.image.shape[:2]
    u0, v0 = max(0, int(b.u_min) - 4), max(0, int(b.v_min) - 4)
    u1, v1 = min(w, int(b.u_max) + 5), min(h, int(b.v_max) + 5)
    crop = (frame.image[v0:v1, u0:u1] * 255).astype(np.uint8)
    crop_img = Image.fromarray(crop, "RGB").resize(
        ((u1 - u0) * upscale, (v1 - v0) * upscale), Image.NEAREST)
    draw = ImageDraw.Draw(crop_img)
    n_c = sample.n_context
    for i in range(n_c):
        u, v = sample.uv[i]
        px, py = (u - u0) * upscale, (v - v0) * upscale
        draw.ellipse([px - 2, py - 2, px + 2, py + 2], fill=tuple(int(c) for c in colors[i]))

    xyz = sample.world_xyz()
    x_range = (xyz[:, 0].min() - 1, xyz[:, 0].max() + 1)
    y_range = (xyz[:, 1].min() - 1, xyz[:, 1].max() + 1)
    bev = BEVCanvas(x_range, y_range, px_per_m=30, margin=12)
    bev.points(xyz[:, :2], colors=colors)

    width = crop_img.width + bev.img.width + 8
    height = max(crop_img.height, bev.img.height)
    panel = Image.new("RGB", (width, height), (0, 0, 0))
    panel.paste(crop_img, (0, 0))
    panel.paste(bev.img, (crop_img.width + 8, 0))
    panel.save(out_path, format="PNG")
    return scores
