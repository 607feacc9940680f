"""Small differentiable layer library on numpy float64 arrays.

Every layer caches what it needs during ``forward`` and returns the input
gradient from ``backward``; parameter gradients accumulate in ``grads`` until
``zero_grad``.  Feature maps are (N, C, H, W); fully-connected inputs are (N, D).
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np


class ConfigurationError(ValueError):
    pass


class DegenerateRoiError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class DivergenceError(FloatingPointError):
    pass


def make_rng(seed, *stream):
    """Counter-based generator keyed by ``seed`` and an optional stream path."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, stream)])))


class Layer:
    kind = "layer"

    def __init__(self):
        self.params = {}
        self.grads = {}
        self._cache = None

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def _need_cache(self):
        if self._cache is None:
            raise StateError(f"{self.kind}: backward called without a cached forward pass")
        return self._cache


def _init_weight(rng, shape, fan_in, std):
    if std is None:
        std = np.sqrt(2.0 / fan_in)
    return rng.normal(0.0, std, size=shape)


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, in_ch, out_ch, kernel=3, stride=1, padding=None, dilation=1, rng=None, init_std=None,
                 pad_mode="zeros"):
        super().__init__()
        if stride < 1 or dilation < 1:
            raise ConfigurationError("stride and dilation must be >= 1")
        if pad_mode not in ("zeros", "edge"):
            raise ConfigurationError(f"unknown pad_mode {pad_mode!r}")
        if padding is None:
            padding = dilation * (kernel - 1) // 2
        self.pad_mode = pad_mode
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride, self.padding, self.dilation = kernel, stride, padding, dilation
        rng = rng if rng is not None else make_rng(0)
        self.params["W"] = _init_weight(rng, (out_ch, in_ch, kernel, kernel), in_ch * kernel * kernel, init_std)
        self.params["b"] = np.zeros(out_ch)
        self.zero_grad()

    def _out_size(self, n):
        return (n + 2 * self.padding - self.dilation * (self.kernel - 1) - 1) // self.stride + 1

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ConfigurationError(f"conv2d expects (N, {self.in_ch}, H, W), got {x.shape}")
        k, s, d, p = self.kernel, self.stride, self.dilation, self.padding
        n, c, h, w = x.shape
        ho, wo = self._out_size(h), self._out_size(w)
        if ho < 1 or wo < 1:
            raise ConfigurationError(f"conv2d input {h}x{w} too small")
        mode = "edge" if self.pad_mode == "edge" else "constant"
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), mode=mode) if p else x
        # im2col laid out as (c*k*k, n*ho*wo) so forward and both gradients are single GEMMs
        cols = np.empty((c, k, k, n, ho, wo))
        for i in range(k):
            for j in range(k):
                win = xp[:, :, i * d:i * d + s * (ho - 1) + 1:s, j * d:j * d + s * (wo - 1) + 1:s]
                cols[:, i, j] = win.transpose(1, 0, 2, 3)
        cols = cols.reshape(c * k * k, n * ho * wo)
        wm = self.params["W"].reshape(self.out_ch, -1)
        y = (wm @ cols + self.params["b"][:, None]).reshape(self.out_ch, n, ho, wo)
        self._cache = (x.shape, xp.shape, cols)
        return np.ascontiguousarray(y.transpose(1, 0, 2, 3))

    def backward(self, dy):
        x_shape, xp_shape, cols = self._need_cache()
        k, s, d, p = self.kernel, self.stride, self.dilation, self.padding
        n, c = x_shape[:2]
        ho, wo = dy.shape[2:]
        dyf = np.ascontiguousarray(dy.transpose(1, 0, 2, 3)).reshape(self.out_ch, n * ho * wo)
        self.grads["W"] += (dyf @ cols.T).reshape(self.params["W"].shape)
        self.grads["b"] += dyf.sum(axis=1)
        wm = self.params["W"].reshape(self.out_ch, -1)
        dcols = (wm.T @ dyf).reshape(c, k, k, n, ho, wo)
        dxp = np.zeros(xp_shape)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i * d:i * d + s * (ho - 1) + 1:s, j * d:j * d + s * (wo - 1) + 1:s] += \
                    dcols[:, i, j].transpose(1, 0, 2, 3)
        if p and self.pad_mode == "edge":
            # replicated border cells send their gradient back to the edge pixel they copy
            dxp[:, :, :, p] += dxp[:, :, :, :p].sum(axis=3)
            dxp[:, :, :, -p - 1] += dxp[:, :, :, -p:].sum(axis=3)
            dxp[:, :, p, :] += dxp[:, :, :p, :].sum(axis=2)
            dxp[:, :, -p - 1, :] += dxp[:, :, -p:, :].sum(axis=2)
        if p:
            dxp = dxp[:, :, p:-p, p:-p]
        return dxp


class Shift(Layer):
    """Adds a fixed constant (zero-centres [0, 1] images)."""

    kind = "shift"

    def __init__(self, offset=-0.5):
        super().__init__()
        self.offset = offset

    def forward(self, x):
        return x + self.offset

    def backward(self, dy):
        return dy


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        mask = x > 0
        self._cache = mask
        return np.where(mask, x, 0.0)

    def backward(self, dy):
        return np.where(self._need_cache(), dy, 0.0)


class MaxPool2d(Layer):
    """Non-overlapping ``size`` x ``size`` max pool; trailing rows/cols are dropped."""

    kind = "maxpool2d"

    def __init__(self, size=2):
        super().__init__()
        self.size = size

    def forward(self, x):
        n, c, h, w = x.shape
        k = self.size
        ho, wo = h // k, w // k
        if ho < 1 or wo < 1:
            raise ConfigurationError(f"maxpool input {h}x{w} too small")
        win = x[:, :, :ho * k, :wo * k].reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5)
        win = win.reshape(n, c, ho, wo, k * k)
        arg = win.argmax(axis=-1)  # first maximum = smallest flat index in the window
        self._cache = (x.shape, arg)
        return np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(self, dy):
        x_shape, arg = self._need_cache()
        n, c, h, w = x_shape
        k = self.size
        ho, wo = arg.shape[2:]
        win = np.zeros((n, c, ho, wo, k * k))
        np.put_along_axis(win, arg[..., None], dy[..., None], axis=-1)
        win = win.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * k, wo * k)
        dx = np.zeros(x_shape)
        dx[:, :, :ho * k, :wo * k] = win
        return dx


class Linear(Layer):
    kind = "fully-connected"

    def __init__(self, in_dim, out_dim, rng=None, init_std=None):
        super().__init__()
        rng = rng if rng is not None else make_rng(0)
        self.in_dim, self.out_dim = in_dim, out_dim
        self.params["W"] = _init_weight(rng, (out_dim, in_dim), in_dim, init_std)
        self.params["b"] = np.zeros(out_dim)
        self.zero_grad()

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ConfigurationError(f"fully-connected expects (N, {self.in_dim}), got {x.shape}")
        self._cache = x
        return x @ self.params["W"].T + self.params["b"]

    def backward(self, dy):
        x = self._need_cache()
        self.grads["W"] += dy.T @ x
        self.grads["b"] += dy.sum(axis=0)
        return dy @ self.params["W"]


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._need_cache())


class SoftmaxRows(Layer):
    kind = "softmax-rows"

    def forward(self, x):
        y = softmax(x, axis=1)
        self._cache = y
        return y

    def backward(self, dy):
        y = self._need_cache()
        return y * (dy - (dy * y).sum(axis=1, keepdims=True))


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x):
        y = sigmoid(x)
        self._cache = y
        return y

    def backward(self, dy):
        y = self._need_cache()
        return dy * y * (1.0 - y)


class GlobalMaxPool(Layer):
    """(N, C, H, W) -> (N, C) spatial maximum; gradient goes to the first maximal cell."""

    kind = "global-maxpool"

    def forward(self, x):
        n, c = x.shape[:2]
        flat = x.reshape(n, c, -1)
        arg = flat.argmax(axis=-1)
        self._cache = (x.shape, arg)
        return np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(self, dy):
        shape, arg = self._need_cache()
        dx = np.zeros((shape[0], shape[1], int(np.prod(shape[2:]))))
        np.put_along_axis(dx, arg[..., None], dy[..., None], axis=-1)
        return dx.reshape(shape)


def roi_cell_ranges(rois, stride, feat_h, feat_w):
    """Snap image-space boxes onto feature cells: floor for x1/y1, ceil for x2/y2 (exclusive)."""
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    if np.any(rois[:, 2] <= rois[:, 0]) or np.any(rois[:, 3] <= rois[:, 1]):
        raise DegenerateRoiError("roi with zero area")
    x0 = np.clip(np.floor(rois[:, 0] / stride), 0, feat_w - 1).astype(int)
    y0 = np.clip(np.floor(rois[:, 1] / stride), 0, feat_h - 1).astype(int)
    x1 = np.clip(np.ceil(rois[:, 2] / stride), 1, feat_w).astype(int)
    y1 = np.clip(np.ceil(rois[:, 3] / stride), 1, feat_h).astype(int)
    x1 = np.maximum(x1, x0 + 1)
    y1 = np.maximum(y1, y0 + 1)
    return x0, y0, x1, y1


def _bin_edges(start, length, bins):
    p = np.arange(bins)
    lo = start[:, None] + np.floor(p[None, :] * length[:, None] / bins).astype(int)
    hi = start[:, None] + np.ceil((p[None, :] + 1) * length[:, None] / bins).astype(int)
    return lo, hi


class RoiPool(Layer):
    """Max-pool each roi's cell range into a fixed ``out_h`` x ``out_w`` grid.

    Input is a single feature map (1, C, H, W) and ``rois`` in image pixels;
    output is (R, C, out_h, out_w).
    """

    kind = "roi-pool"

    def __init__(self, out_h=7, out_w=7, stride=4):
        super().__init__()
        self.out_h, self.out_w, self.stride = out_h, out_w, stride

    def _gather_index(self, rois, h, w):
        """Per-roi flat cell indices (R, oh, ow, kh*kw) grouped by padded bin size."""
        x0, y0, x1, y1 = roi_cell_ranges(rois, self.stride, h, w)
        ylo, yhi = _bin_edges(y0, y1 - y0, self.out_h)
        xlo, xhi = _bin_edges(x0, x1 - x0, self.out_w)
        kh_r = (yhi - ylo).max(axis=1)
        kw_r = (xhi - xlo).max(axis=1)
        groups = []
        for kh, kw in sorted(set(zip(kh_r.tolist(), kw_r.tolist()))):
            sel = np.nonzero((kh_r == kh) & (kw_r == kw))[0]
            # padded slots repeat the bin's first cell so they never win a strict max
            oy = ylo[sel, :, None] + np.arange(kh)[None, None, :]
            oy = np.where(oy < yhi[sel, :, None], oy, ylo[sel, :, None])
            ox = xlo[sel, :, None] + np.arange(kw)[None, None, :]
            ox = np.where(ox < xhi[sel, :, None], ox, xlo[sel, :, None])
            flat = oy[:, :, None, :, None] * w + ox[:, None, :, None, :]
            groups.append((sel, flat.reshape(len(sel), self.out_h, self.out_w, kh * kw)))
        return groups

    def forward(self, x, rois):
        if x.ndim != 4 or x.shape[0] != 1:
            raise ConfigurationError("roi-pool expects a single (1, C, H, W) feature map")
        _, c, h, w = x.shape
        rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
        r = len(rois)
        out = np.zeros((r, self.out_h, self.out_w, c))
        cells = np.zeros((r, self.out_h, self.out_w, c), dtype=np.intp)
        feat = np.ascontiguousarray(x[0].reshape(c, h * w).T)
        for sel, idx in (self._gather_index(rois, h, w) if r else []):
            # running strict max over bin slots: ties keep the earlier (smaller) cell index
            best = feat[idx[..., 0]]
            cell = np.repeat(idx[..., 0, None], c, axis=-1)
            for k in range(1, idx.shape[-1]):
                v = feat[idx[..., k]]
                upd = v > best
                best = np.where(upd, v, best)
                cell = np.where(upd, idx[..., k, None], cell)
            out[sel] = best
            cells[sel] = cell
        self._cache = (x.shape, cells)
        return out.transpose(0, 3, 1, 2).copy()

    def backward(self, dy):
        x_shape, cells = self._need_cache()
        _, c, h, w = x_shape
        flat = (cells + np.arange(c) * (h * w)).ravel()
        dx = np.bincount(flat, weights=dy.transpose(0, 2, 3, 1).ravel(), minlength=c * h * w)
        return dx.reshape(x_shape)


class Network:
    """Ordered layer stack. ``forward`` caches every activation for backward and excitation."""

    def __init__(self, layers, name="net"):
        self.layers = list(layers)
        self.name = name
        self.activations = None

    def forward(self, x, rois=None):
        has_roi = any(isinstance(layer, RoiPool) for layer in self.layers)
        if has_roi and rois is None:
            raise ConfigurationError(f"{self.name}: rois required by roi-pool layer")
        acts = [x]
        for layer in self.layers:
            x = layer.forward(x, rois) if isinstance(layer, RoiPool) else layer.forward(x)
            acts.append(x)
        self.activations = acts
        return x

    def backward(self, dy):
        if self.activations is None:
            raise StateError(f"{self.name}: backward without forward")
        if dy.shape != self.activations[-1].shape:
            raise ConfigurationError(f"{self.name}: grad shape {dy.shape} != output {self.activations[-1].shape}")
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def named_params(self):
        for i, layer in enumerate(self.layers):
            for k in sorted(layer.params):
                yield f"{self.name}.{i}.{k}", layer.params, layer.grads, k

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def __call__(self, x, rois=None):
        return self.forward(x, rois)


class Module:
    """A named bundle of Networks that trains and checkpoints as one unit."""

    def networks(self):
        return [v for v in vars(self).values() if isinstance(v, Network)]

    def named_params(self):
        for net in self.networks():
            yield from net.named_params()

    def zero_grad(self):
        for net in self.networks():
            net.zero_grad()

    def state_dict(self):
        return {name: params[key].copy() for name, params, _, key in self.named_params()}

    def load_state_dict(self, state, strict=True):
        for name, params, _, key in self.named_params():
            if name not in state:
                if strict:
                    raise KeyError(f"checkpoint lacks {name}")
                continue
            if state[name].shape != params[key].shape:
                raise ConfigurationError(f"{name}: shape {state[name].shape} != {params[key].shape}")
            params[key] = np.array(state[name], dtype=np.float64)


def head_block(in_ch, out_ch, name, rng, dilation=2, layers=2):
    """Dilated 3x3 conv stack that each module places on top of the shared backbone."""
    seq, c = [], in_ch
    for _ in range(layers):
        seq += [Conv2d(c, out_ch, 3, dilation=dilation, rng=rng, pad_mode="edge"), ReLU()]
        c = out_ch
    return Network(seq, name)


def backbone_net(rng, name="backbone"):
    """Input centring, then three conv blocks (16, 32, 64 channels), 2x2 max pool after the first two: stride 4."""
    return Network([
        Shift(-0.5),
        Conv2d(3, 16, 3, rng=rng, pad_mode="edge"), ReLU(), MaxPool2d(2),
        Conv2d(16, 32, 3, rng=rng, pad_mode="edge"), ReLU(), MaxPool2d(2),
        Conv2d(32, 64, 3, rng=rng, pad_mode="edge"), ReLU(),
    ], name)


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def sigmoid(x):
    out = np.empty_like(np.asarray(x, dtype=np.float64))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


class SGD:
    """Momentum SGD: v <- momentum*v + grad + weight_decay*param; param <- param - lr*v."""

    def __init__(self, momentum=0.9, weight_decay=0.0005):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {}

    def step(self, named, lr):
        if lr <= 0:
            raise ConfigurationError("learning rate must be positive")
        for name, params, grads, key in named:
            g = grads[key]
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient in {name}")
            p = params[key]
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(p)
            v = self.momentum * v + g + self.weight_decay * p
            self.velocity[name] = v
            params[key] = p - lr * v


def sgd_step(params, grads, lr, momentum=0.0, weight_decay=0.0, velocity=None):
    """Functional form over plain arrays; returns (new params, new velocity)."""
    if lr <= 0:
        raise ConfigurationError("learning rate must be positive")
    out, vel = [], []
    velocity = velocity if velocity is not None else [np.zeros_like(np.asarray(p, dtype=float)) for p in params]
    for p, g, v in zip(params, grads, velocity):
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient")
        v = momentum * v + g + weight_decay * p
        out.append(p - lr * v)
        vel.append(v)
    return out, vel


def save_checkpoint(path, tensors):
    """Write ``{name: array}`` as a one-line JSON manifest followed by little-endian float32 data."""
    manifest, blobs, offset = [], [], 0
    for name in tensors:
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape), "byte_offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"tensors": manifest}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)


def load_checkpoint(path):
    data = Path(path).read_bytes()
    (n,) = struct.unpack("<Q", data[:8])
    manifest = json.loads(data[8:8 + n])
    base = 8 + n
    out = {}
    for t in manifest["tensors"]:
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        start = base + t["byte_offset"]
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=start)
        out[t["name"]] = arr.astype(np.float64).reshape(t["shape"])
    return out
