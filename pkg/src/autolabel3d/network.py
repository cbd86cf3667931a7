"""The multimodal transformer: embeddings, asymmetric self-attention, heads.

Element order inside a sample is fixed: context points [0, n_c), padding
pixels [n_c, n'), target pixels [n', n'+m), then the object-level token as
the last row. Context points with known 3D coordinates are the only
elements others may reference (C-pts); padding, target, and deliberately
masked context elements are T-pts that attend to themselves plus C-pts;
the object token attends to everything.
"""

import json
import math
import struct
from dataclasses import dataclass, asdict, field

import numpy as np

from . import tensor as tz
from .geometry import Box3D, normalize_angle
from .tensor import Tensor

CKPT_MAGIC = b"A3DCKPT1"


@dataclass
class ModelConfig:
    d: int = 768
    layers: int = 4
    heads: int = 12
    n_prime: int = 512
    m: int = 784
    patch_k: int = 7
    detection_mode: bool = False
    conv_channels: tuple = (16, 32)
    # dimension decode prior (meters); exp(raw) scales these, so a zero
    # head output starts at a plausible car instead of a 1 m cube
    dims_prior: tuple = (3.9, 1.6, 1.5)
    # decode gains for the residual center (meters per raw unit) and yaw
    # (radians per raw unit); Adam's per-parameter step size is invariant to
    # gradient scale, so these set how far one step moves the decoded box
    center_gain: float = 3.0
    yaw_gain: float = 6.0

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ValueError(f"hidden size {self.d} not divisible by {self.heads} heads")
        if self.d % 2 != 0:
            raise ValueError("hidden size must be even (u/v split)")
        self.conv_channels = tuple(self.conv_channels)
        self.dims_prior = tuple(self.dims_prior)
        if min(self.dims_prior) <= 0:
            raise ValueError("dimension prior must be positive")


class ModelParameters:
    """Named trainable tensors."""

    def __init__(self, tensors):
        self.tensors = dict(tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def named(self):
        return sorted(self.tensors.items())

    def values(self):
        return [t for _, t in self.named()]

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None


def init_parameters(config, seed):
    """Small-uniform linear maps, unit norms, seeded-normal special tokens."""
    rng = np.random.default_rng(seed)
    p = {}

    def linear(name, fan_in, fan_out):
        a = 1.0 / math.sqrt(fan_in)
        p[f"{name}_w"] = Tensor(rng.uniform(-a, a, size=(fan_in, fan_out)), True)
        p[f"{name}_b"] = Tensor(np.zeros(fan_out), True)

    def conv(name, c_in, c_out):
        a = 1.0 / math.sqrt(c_in * 9)
        p[f"{name}_k"] = Tensor(rng.uniform(-a, a, size=(c_out, c_in, 3, 3)), True)
        p[f"{name}_b"] = Tensor(np.zeros(c_out), True)

    d = config.d
    c1, c2 = config.conv_channels
    conv("conv1", 4, c1)
    conv("conv2", c1, c2)
    conv("conv3", c2, d)
    linear("mlp3d_1", 3, d)
    linear("mlp3d_2", d, d)
    linear("fuse", 3 * d, d)
    p["cls_token"] = Tensor(rng.normal(0.0, 0.02, size=d), True)
    p["mask_embed"] = Tensor(rng.normal(0.0, 0.02, size=d), True)
    for i in range(config.layers):
        for proj in ("q", "k", "v", "o"):
            linear(f"att{i}_{proj}", d, d)
        p[f"att{i}_ln1_g"] = Tensor(np.ones(d), True)
        p[f"att{i}_ln1_b"] = Tensor(np.zeros(d), True)
        linear(f"att{i}_ffn1", d, 4 * d)
        linear(f"att{i}_ffn2", 4 * d, d)
        p[f"att{i}_ln2_g"] = Tensor(np.ones(d), True)
        p[f"att{i}_ln2_b"] = Tensor(np.zeros(d), True)
    linear("seg_1", d, d)
    linear("seg_2", d, 2)
    linear("xyz_1", d, d)
    linear("xyz_2", d, 3)
    linear("box_1", 3 * d, d)
    linear("box_2", d, 7)
    # zero output layer: every box starts exactly at the context centroid
    # with prior dimensions instead of decode-gain-amplified noise
    p["box_2_w"] = Tensor(np.zeros((d, 7)), True)
    linear("dir_1", 3 * d, d)
    linear("dir_2", d, 2)
    if config.detection_mode:
        linear("conf_1", 3 * d, d)
        linear("conf_2", d, 1)
    return ModelParameters(p)


# -- embeddings -------------------------------------------------------------

def sinusoidal_embedding(positions, d_half):
    """Standard sin/cos encoding of scalar positions into d_half dims."""
    positions = np.asarray(positions, dtype=np.float64)
    n_freq = d_half // 2
    freqs = 1.0 / (10000.0 ** (2.0 * np.arange(n_freq) / d_half))
    ang = positions[:, None] * freqs[None, :]
    out = np.empty((len(positions), d_half))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


def embed_2d(uv, d):
    """Concatenated u/v sinusoidal position embedding, [N, d] constant."""
    if d % 2 != 0:
        raise ValueError("2D embedding needs an even hidden size")
    uv = np.asarray(uv, dtype=np.float64)
    return np.concatenate([sinusoidal_embedding(uv[:, 0], d // 2),
                           sinusoidal_embedding(uv[:, 1], d // 2)], axis=1)


def _linear(x, params, name):
    return tz.matmul(x, params[f"{name}_w"]) + params[f"{name}_b"]


def patch_features(patches, params):
    """3-layer conv stack then spatial mean-pool: [N,4,k,k] -> [N,d]."""
    x = tz.gelu(tz.conv2d(patches, params["conv1_k"], params["conv1_b"]))
    x = tz.gelu(tz.conv2d(x, params["conv2_k"], params["conv2_b"]))
    x = tz.conv2d(x, params["conv3_k"], params["conv3_b"])
    return x.mean(axis=3).mean(axis=2)


def embed_elements(sample, params, config, masked_indices=()):
    """Fused per-element embeddings plus the appended object token.

    Returns (F [n'+m+1, d], F_s [d]) where F_s is the averaged patch
    feature. Padding, target, and masked context rows receive the
    trainable substitute vector in place of the 3D embedding.
    """
    d = config.d
    n_total = sample.n_elements
    f2d = patch_features(Tensor(sample.patches), params)          # [N,d]
    f_s = f2d.mean(axis=0)
    c2d = Tensor(embed_2d(sample.uv, d))                           # constant

    n_c = sample.n_context
    masked = np.zeros(n_c, dtype=bool)
    masked[list(masked_indices)] = True
    unmasked_idx = np.flatnonzero(~masked)

    ones = np.ones((n_total, 1))
    embed_rows = tz.matmul(Tensor(ones), tz.reshape(params["mask_embed"], (1, d)))
    if len(unmasked_idx):
        h = tz.gelu(_linear(Tensor(sample.xyz[unmasked_idx]), params, "mlp3d_1"))
        mlp = _linear(h, params, "mlp3d_2")                        # [n_u,d]
        scatter = np.zeros((n_total, len(unmasked_idx)))
        scatter[unmasked_idx, np.arange(len(unmasked_idx))] = 1.0
        sub = tz.matmul(Tensor(ones[:len(unmasked_idx)]),
                        tz.reshape(params["mask_embed"], (1, d)))
        c3d = embed_rows + tz.matmul(Tensor(scatter), mlp - sub)
    else:
        c3d = embed_rows

    fused = _linear(tz.concat([f2d, c2d, c3d], axis=1), params, "fuse")
    full = tz.concat([fused, tz.reshape(params["cls_token"], (1, d))], axis=0)
    return full, f_s


# -- attention --------------------------------------------------------------

def build_attention_mask(n_context, n_prime, m, masked_indices=()):
    """Boolean key-allowance matrix for [C-pts | T-pts | object token].

    C rows see C columns; T row i sees {i} plus C columns; the object
    token row sees everything. Masked context indices are T-pts.
    """
    if n_context < 1:
        raise ValueError("attention mask needs at least one context point")
    n = n_prime + m + 1
    is_c = np.zeros(n, dtype=bool)
    is_c[:n_context] = True
    is_c[list(masked_indices)] = False
    if not is_c.any():
        raise ValueError("attention mask needs at least one unmasked context point")
    allow = np.zeros((n, n), dtype=bool)
    allow[:, is_c] = True                       # everyone sees C columns
    t_rows = np.flatnonzero(~is_c)[:-1]         # all but the object token
    allow[t_rows, t_rows] = True                # T self-attention
    allow[-1, :] = True                         # object token sees all
    return allow


def attention_layer(x, allow, params, config, layer, collect=None):
    """Masked multi-head self-attention + feed-forward, post-norm residuals."""
    d, heads = config.d, config.heads
    dh = d // heads
    n = x.shape[0]
    q = _linear(x, params, f"att{layer}_q")
    k = _linear(x, params, f"att{layer}_k")
    v = _linear(x, params, f"att{layer}_v")

    def split(t):   # [n,d] -> [heads,n,dh]
        return tz.transpose(tz.reshape(t, (n, heads, dh)), (1, 0, 2))

    qh, kh, vh = split(q), split(k), split(v)
    scores = tz.matmul(qh, tz.transpose(kh, (0, 2, 1))) * (1.0 / math.sqrt(dh))
    probs = tz.masked_softmax(scores, allow[None])
    if collect is not None:
        collect.append(probs.data.copy())
    ctx = tz.reshape(tz.transpose(tz.matmul(probs, vh), (1, 0, 2)), (n, d))
    att = _linear(ctx, params, f"att{layer}_o")
    x = tz.layer_norm(x + att, params[f"att{layer}_ln1_g"], params[f"att{layer}_ln1_b"])
    ffn = _linear(tz.gelu(_linear(x, params, f"att{layer}_ffn1")), params, f"att{layer}_ffn2")
    return tz.layer_norm(x + ffn, params[f"att{layer}_ln2_g"], params[f"att{layer}_ln2_b"])


# -- forward ----------------------------------------------------------------

@dataclass
class Predictions:
    seg_logits: Tensor          # [n_context, 2]
    xyz: Tensor                 # [n'+m, 3] centroid-normalized coordinates
    box_raw: Tensor             # [7] raw head output
    box_scalars: tuple          # 7 decoded scalar tensors (world frame)
    dir_logits: Tensor          # [2]
    conf: Tensor | None
    attention: list             # per layer: [heads, N+1, N+1] numpy arrays
    centroid: np.ndarray
    n_context: int

    def decoded_box(self):
        """Plain-float Box3D from the decoded scalars (yaw normalized)."""
        cx, cy, cz, l, w, h, ry = (float(s) for s in self.box_scalars)
        return Box3D(cx, cy, cz, l, w, h, normalize_angle(ry))

    def direction(self):
        return int(np.argmax(self.dir_logits.data))


def forward(sample, params, config, masked_indices=(), keep_attention=False):
    """Run the network on one sample; masked context rows lose their 3D input."""
    if sample.n_prime != config.n_prime or sample.m != config.m:
        raise ValueError(
            f"sample sized (n'={sample.n_prime}, m={sample.m}) does not match "
            f"config (n'={config.n_prime}, m={config.m})")
    n_total = sample.n_elements
    x, f_s = embed_elements(sample, params, config, masked_indices)
    allow = build_attention_mask(sample.n_context, sample.n_prime, sample.m,
                                 masked_indices)
    maps = [] if keep_attention else None
    for i in range(config.layers):
        x = attention_layer(x, allow, params, config, i, collect=maps)

    elems = x[:n_total]
    cls_out = x[n_total]
    seg_logits = _linear(tz.gelu(_linear(elems[:sample.n_context], params, "seg_1")),
                         params, "seg_2")
    xyz_pred = _linear(tz.gelu(_linear(elems, params, "xyz_1")), params, "xyz_2")

    obj = tz.concat([cls_out, elems.mean(axis=0), f_s], axis=0)
    obj = tz.reshape(obj, (1, 3 * config.d))
    box_raw = tz.reshape(_linear(tz.gelu(_linear(obj, params, "box_1")), params, "box_2"), (7,))
    dir_logits = tz.reshape(_linear(tz.gelu(_linear(obj, params, "dir_1")), params, "dir_2"), (2,))
    conf = None
    if config.detection_mode:
        conf = tz.sigmoid(tz.reshape(
            _linear(tz.gelu(_linear(obj, params, "conf_1")), params, "conf_2"), ()))

    # decode: residual center from the context centroid, exponential dims
    # scaled by the class prior
    pl, pw, ph = config.dims_prior
    g, gy = config.center_gain, config.yaw_gain
    box_scalars = (g * box_raw[0] + sample.centroid[0],
                   g * box_raw[1] + sample.centroid[1],
                   g * box_raw[2] + sample.centroid[2],
                   pl * tz.exp(box_raw[3]), pw * tz.exp(box_raw[4]),
                   ph * tz.exp(box_raw[5]), gy * box_raw[6])
    return Predictions(seg_logits=seg_logits, xyz=xyz_pred, box_raw=box_raw,
                       box_scalars=box_scalars, dir_logits=dir_logits, conf=conf,
                       attention=maps if keep_attention else [],
                       centroid=sample.centroid, n_context=sample.n_context)


def generate_points(sample, predictions):
    """Densified cloud: original context points plus predicted T-pt coordinates."""
    n_c = sample.n_context
    predicted = predictions.xyz.data[n_c:] + sample.centroid
    return np.concatenate([sample.world_xyz(), predicted], axis=0)


# -- checkpointing ----------------------------------------------------------

def save_checkpoint(path, params, config):
    """Self-describing container: magic, JSON header, raw little-endian f64."""
    entries = []
    offset = 0
    blobs = []
    for name, t in params.named():
        data = np.ascontiguousarray(t.data, dtype="<f8")
        entries.append({"name": name, "shape": list(t.shape), "offset": offset})
        blobs.append(data.tobytes())
        offset += data.nbytes
    header = json.dumps({"version": 1, "config": asdict(config),
                         "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (magic {magic!r})")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode())
        if header.get("version") != 1:
            raise ValueError(f"{path}: unsupported checkpoint version")
        payload = fh.read()
    cfg_dict = header["config"]
    config = ModelConfig(**cfg_dict)
    tensors = {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f8", count=n,
                            offset=e["offset"]).reshape(e["shape"]).copy()
        tensors[e["name"]] = Tensor(arr, requires_grad=True)
    return ModelParameters(tensors), config
