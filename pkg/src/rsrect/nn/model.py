"""Motion block and row block.

Motion block: a shared three-conv base followed by two heads (translation
and rotation), each three stride-2 convs and two fully connected layers
ending in one value per image row.  Row block: five stride-1 convs whose
single-channel output is a residual added to ``A(i, j) = i``.

Every conv is followed by batch norm; ReLU follows every conv and hidden FC
layer except the last layer of each output path.

The rotation head's last layer works in degrees and is scaled to radians on
the way out (``RZ_UNIT``).  With radians straight out of the FC layer the
targets are a few hundredths, so a fixed-size ADAM step on its weights
becomes a visible jitter in the predicted angle.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import layers as L

BASE_CHANNELS = (3, 16, 32, 32)
HEAD_CHANNELS = (32, 32, 16, 8)
ROW_CHANNELS = (3, 16, 32, 32, 16, 1)
FC_HIDDEN = 256
BN_EPS = 1e-5
BN_MOMENTUM = 0.9
FORMAT_VERSION = 1
RZ_UNIT = math.pi / 180.0


@dataclass
class ConvSpec:
    name: str
    cin: int
    cout: int
    stride: int
    relu: bool


def _conv_specs(r):
    base = [ConvSpec(f"base.conv{i + 1}", BASE_CHANNELS[i], BASE_CHANNELS[i + 1], 1, True) for i in range(3)]
    heads = {}
    for head in ("tx", "rz"):
        heads[head] = [ConvSpec(f"{head}.conv{i + 1}", HEAD_CHANNELS[i], HEAD_CHANNELS[i + 1], 2, True)
                       for i in range(3)]
    row = [ConvSpec(f"row.conv{i + 1}", ROW_CHANNELS[i], ROW_CHANNELS[i + 1], 1, i < 4) for i in range(5)]
    return base, heads, row


def head_feature_size(r):
    s = r
    for _ in range(3):
        s = L.conv_out_size(s, 3, 2, 1)
    return s * s * HEAD_CHANNELS[-1]


@dataclass
class RSNet:
    """Parameters, batch-norm buffers and forward/backward passes for both blocks."""
    r: int
    seed: int = 0
    dtype: type = np.float32
    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.r < 8:
            raise ValueError("image size must be at least 8")
        self.base, self.heads, self.row = _conv_specs(self.r)
        if not self.params:
            self._init_params()

    # -- parameters -----------------------------------------------------

    def layer_shapes(self):
        """Ordered ``(name, shape)`` for every parameter and buffer."""
        shapes = []
        for spec in self.base + self.heads["tx"] + self.heads["rz"] + self.row:
            shapes += [(spec.name + ".w", (3, 3, spec.cin, spec.cout)), (spec.name + ".b", (spec.cout,))]
            bn = spec.name.replace("conv", "bn")
            shapes += [(bn + ".gamma", (spec.cout,)), (bn + ".beta", (spec.cout,))]
        feat = head_feature_size(self.r)
        for head in ("tx", "rz"):
            shapes += [(f"{head}.fc1.w", (feat, FC_HIDDEN)), (f"{head}.fc1.b", (FC_HIDDEN,)),
                       (f"{head}.fc2.w", (FC_HIDDEN, self.r)), (f"{head}.fc2.b", (self.r,))]
        return shapes

    def buffer_shapes(self):
        out = []
        for spec in self.base + self.heads["tx"] + self.heads["rz"] + self.row:
            bn = spec.name.replace("conv", "bn")
            out += [(bn + ".mean", (spec.cout,)), (bn + ".var", (spec.cout,))]
        return out

    def _init_params(self):
        rng = np.random.default_rng(self.seed)
        for name, shape in self.layer_shapes():
            if name.endswith(".w"):
                fan_in = int(np.prod(shape[:-1]))
                lim = np.sqrt(6.0 / fan_in)
                self.params[name] = rng.uniform(-lim, lim, shape).astype(self.dtype)
            elif name.endswith(".gamma"):
                self.params[name] = np.ones(shape, self.dtype)
            else:
                self.params[name] = np.zeros(shape, self.dtype)
        for name, shape in self.buffer_shapes():
            self.buffers[name] = (np.zeros if name.endswith(".mean") else np.ones)(shape, self.dtype)

    def motion_param_names(self):
        return [n for n, _ in self.layer_shapes() if not n.startswith("row.")]

    def row_param_names(self):
        return [n for n, _ in self.layer_shapes() if n.startswith("row.")]

    def astype(self, dtype):
        return RSNet(self.r, self.seed, dtype,
                     {k: v.astype(dtype) for k, v in self.params.items()},
                     {k: v.astype(dtype) for k, v in self.buffers.items()})

    # -- building blocks ------------------------------------------------

    def _conv_stack(self, x, specs, train, update_stats):
        caches = []
        p, b = self.params, self.buffers
        for spec in specs:
            x, cc = L.conv2d_fwd(x, p[spec.name + ".w"], p[spec.name + ".b"], spec.stride, 1)
            bn = spec.name.replace("conv", "bn")
            x, bc = L.batchnorm_fwd(x, p[bn + ".gamma"], p[bn + ".beta"], b[bn + ".mean"], b[bn + ".var"],
                                    train, BN_MOMENTUM, BN_EPS, update_stats)
            rc = None
            if spec.relu:
                x, rc = L.relu_fwd(x)
            caches.append((spec, cc, bc, rc))
        return x, caches

    def _conv_stack_bwd(self, d, caches, grads):
        for spec, cc, bc, rc in reversed(caches):
            if rc is not None:
                d = L.relu_bwd(d, rc)
            bn = spec.name.replace("conv", "bn")
            d, grads[bn + ".gamma"], grads[bn + ".beta"] = L.batchnorm_bwd(d, bc)
            d, grads[spec.name + ".w"], grads[spec.name + ".b"] = L.conv2d_bwd(d, cc)
        return d

    def _check_input(self, x):
        x = np.asarray(x)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[1:] != (self.r, self.r, 3):
            raise ValueError(f"expected input of shape (N, {self.r}, {self.r}, 3), got {x.shape}")
        return x.astype(self.dtype, copy=False)

    # -- motion block ---------------------------------------------------

    def motion_forward(self, x, train=True, update_stats=True):
        """Per-row ``(tx, rz)`` predictions, each ``(N, r)``, plus a cache."""
        x = self._check_input(x)
        feat, base_c = self._conv_stack(x, self.base, train, update_stats)
        outs, head_c = {}, {}
        p = self.params
        for head in ("tx", "rz"):
            h, cs = self._conv_stack(feat, self.heads[head], train, update_stats)
            flat = h.reshape(h.shape[0], -1)
            z, f1 = L.fc_fwd(flat, p[f"{head}.fc1.w"], p[f"{head}.fc1.b"])
            z, r1 = L.relu_fwd(z)
            out, f2 = L.fc_fwd(z, p[f"{head}.fc2.w"], p[f"{head}.fc2.b"])
            outs[head] = out * self.dtype(RZ_UNIT) if head == "rz" else out
            head_c[head] = (cs, h.shape, f1, r1, f2)
        return outs["tx"], outs["rz"], (base_c, head_c)

    def motion_backward(self, dtx, drz, cache):
        base_c, head_c = cache
        grads = {}
        dfeat = 0
        drz = np.asarray(drz, dtype=self.dtype) * self.dtype(RZ_UNIT)
        for head, dout in (("tx", dtx), ("rz", drz)):
            cs, hshape, f1, r1, f2 = head_c[head]
            d, grads[f"{head}.fc2.w"], grads[f"{head}.fc2.b"] = L.fc_bwd(np.asarray(dout, dtype=self.dtype), f2)
            d = L.relu_bwd(d, r1)
            d, grads[f"{head}.fc1.w"], grads[f"{head}.fc1.b"] = L.fc_bwd(d, f1)
            dfeat = dfeat + self._conv_stack_bwd(d.reshape(hshape), cs, grads)
        self._conv_stack_bwd(dfeat, base_c, grads)
        return grads

    # -- row block ------------------------------------------------------

    def row_forward(self, x, train=True, update_stats=True):
        """Row maps ``(N, r, r)``: learned residual plus ``A(i, j) = i``."""
        x = self._check_input(x)
        res, cache = self._conv_stack(x, self.row, train, update_stats)
        base = np.arange(self.r, dtype=self.dtype)[None, :, None]
        return res[..., 0] + base, cache

    def row_backward(self, drows, cache):
        grads = {}
        self._conv_stack_bwd(np.asarray(drows, dtype=self.dtype)[..., None], cache, grads)
        return grads


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(path, model, extra=None):
    """JSON header (length-prefixed) followed by little-endian float32 data."""
    entries = model.layer_shapes() + model.buffer_shapes()
    header = {
        "format_version": FORMAT_VERSION,
        "r": model.r,
        "init_seed": model.seed,
        "layers": [[name, list(shape)] for name, shape in entries],
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name, _ in entries:
            src = model.params if name in model.params else model.buffers
            fh.write(np.ascontiguousarray(src[name], dtype="<f4").tobytes())


def load_checkpoint(path, dtype=np.float32):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated checkpoint")
    (n,) = struct.unpack("<I", raw[:4])
    header = json.loads(raw[4:4 + n])
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    model = RSNet(int(header["r"]), int(header["init_seed"]), dtype)
    expected = model.layer_shapes() + model.buffer_shapes()
    declared = [(name, tuple(shape)) for name, shape in header["layers"]]
    if declared != expected:
        raise ValueError(f"{path}: layer layout does not match this architecture")
    off = 4 + n
    for name, shape in declared:
        count = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape).astype(dtype)
        off += count * 4
        (model.params if name in model.params else model.buffers)[name] = arr
    if off != len(raw):
        raise ValueError(f"{path}: trailing bytes after payload")
    return model, header
