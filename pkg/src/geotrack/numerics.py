"""Dense-tensor kernel: softmax pooling, losses, and small MLPs.

Everything runs on 64-bit numpy arrays. The MLP layers implement exact
backpropagation for the fixed compositions used by the pose head and the
pair scorer, and ``grad_check`` verifies any scalar objective against
central finite differences.
"""

import json
from dataclasses import dataclass

import numpy as np

from .errors import OutOfBoundsError, ShapeMismatchError

LOG2 = float(np.log(2.0))


# --- softmax / pooling ---------------------------------------------------------


def softmax_map(a):
    """Softmax over all entries of a 2-D map (max-subtracted for stability)."""
    a = np.asarray(a, dtype=np.float64)
    e = np.exp(a - a.max())
    return e / e.sum()


def attention_pool(feature_map, logits, weighted=False):
    """Pool an (H, W, E) feature map under a softmax attention map.

    Default is the literal composition: weight the map by the normalized
    attention, then average-pool, i.e. G = (1/(H*W)) * sum(a_ij * F_ij).
    With ``weighted=True`` the 1/(H*W) factor is dropped, which makes G the
    attention-weighted mean instead.
    """
    feature_map = np.asarray(feature_map, dtype=np.float64)
    logits = np.asarray(logits, dtype=np.float64)
    if feature_map.ndim != 3 or logits.shape != feature_map.shape[:2]:
        raise ShapeMismatchError(
            f"feature map {feature_map.shape} does not match attention {logits.shape}"
        )
    attn = softmax_map(logits)
    pooled = np.einsum("ij,ije->e", attn, feature_map)
    if weighted:
        return pooled
    return pooled / (feature_map.shape[0] * feature_map.shape[1])


def sample_multires(maps, center, image_size):
    """Concatenate per-map feature vectors sampled at one pixel position.

    Each (H_j, W_j, C_j) map is sampled at the nearest (floor) cell of the
    proportionally scaled center position; outputs are concatenated in map
    order.
    """
    c_x, c_y = float(center[0]), float(center[1])
    width, height = image_size
    if not (0 <= c_x <= width and 0 <= c_y <= height):
        raise OutOfBoundsError(f"center ({c_x}, {c_y}) outside {width}x{height} image")
    parts = []
    for m in maps:
        m = np.asarray(m, dtype=np.float64)
        h_j, w_j = m.shape[0], m.shape[1]
        row = min(int(c_y / height * h_j), h_j - 1)
        col = min(int(c_x / width * w_j), w_j - 1)
        parts.append(m[row, col].reshape(-1))
    return np.concatenate(parts)


# --- losses ---------------------------------------------------------------------


def loss_trans(t, t_hat):
    """Euclidean distance between translation (or regression-target) vectors."""
    d = np.asarray(t, dtype=np.float64) - np.asarray(t_hat, dtype=np.float64)
    return float(np.linalg.norm(d))


def loss_trans_grad(t, t_hat):
    """Gradient of loss_trans in t_hat (zero subgradient at coincidence)."""
    d = np.asarray(t_hat, dtype=np.float64) - np.asarray(t, dtype=np.float64)
    norm = np.linalg.norm(d)
    if norm == 0.0:
        return np.zeros_like(d)
    return d / norm


def _logcosh(x):
    # log(cosh(x)) = |x| + log1p(exp(-2|x|)) - log 2, stable for large |x|
    ax = np.abs(x)
    return ax + np.log1p(np.exp(-2.0 * ax)) - LOG2


def loss_rot(r, r_hat):
    """Sum of log-cosh errors over the two facing-direction components."""
    d = np.asarray(r, dtype=np.float64) - np.asarray(r_hat, dtype=np.float64)
    return float(np.sum(_logcosh(d)))


def loss_rot_grad(r, r_hat):
    d = np.asarray(r_hat, dtype=np.float64) - np.asarray(r, dtype=np.float64)
    return np.tanh(d)


def loss_pose(pose, pose_hat, beta=0.1):
    """Rotation loss plus beta-weighted translation loss.

    Accepts (T, R) tuples where T may be either the 3D translation or the
    (c_x, c_y, T_z) regression target; the formula is the same.
    """
    t, r = pose
    t_hat, r_hat = pose_hat
    return loss_rot(r, r_hat) + beta * loss_trans(t, t_hat)


# --- MLP -------------------------------------------------------------------------


def _relu(z):
    return np.maximum(z, 0.0)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


_ACTS = {
    "linear": (lambda z: z, lambda z, y: np.ones_like(z)),
    "relu": (_relu, lambda z, y: (z > 0).astype(np.float64)),
    "tanh": (np.tanh, lambda z, y: 1.0 - y * y),
    "sigmoid": (_sigmoid, lambda z, y: y * (1.0 - y)),
}


@dataclass
class Layer:
    """One dense layer: weights (fan_in, fan_out), bias, activation tag."""

    w: np.ndarray
    b: np.ndarray
    act: str = "linear"

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64).reshape(-1)
        if self.w.ndim != 2 or self.w.shape[1] != self.b.shape[0]:
            raise ShapeMismatchError(
                f"layer weights {self.w.shape} do not match bias {self.b.shape}"
            )
        if self.act not in _ACTS:
            raise ShapeMismatchError(f"unknown activation {self.act!r}")


def init_mlp(sizes, activations, rng):
    """Glorot-uniform initialized MLP: weights in +-sqrt(6/(fan_in+fan_out))."""
    if len(activations) != len(sizes) - 1:
        raise ShapeMismatchError("need one activation per layer")
    layers = []
    for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append(
            Layer(rng.uniform(-bound, bound, size=(fan_in, fan_out)),
                  np.zeros(fan_out), act)
        )
    return layers


def _check_chain(layers, x):
    if x.shape[-1] != layers[0].w.shape[0]:
        raise ShapeMismatchError(
            f"input dim {x.shape[-1]} != first layer fan-in {layers[0].w.shape[0]}"
        )
    for prev, nxt in zip(layers[:-1], layers[1:]):
        if prev.w.shape[1] != nxt.w.shape[0]:
            raise ShapeMismatchError(
                f"layer dims {prev.w.shape} -> {nxt.w.shape} do not chain"
            )


def mlp_forward(layers, x, cache=None):
    """Forward pass; x is a single vector or a (batch, fan_in) matrix.

    When ``cache`` is a list it is filled with the per-layer inputs and
    activations needed by mlp_backward. The matrix product goes through
    einsum rather than BLAS gemm: each output row is then reduced in a
    fixed order independent of the batch, which keeps batched and
    row-at-a-time calls bit-identical.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = x.reshape(1, -1) if single else x
    _check_chain(layers, h)
    for layer in layers:
        z = np.einsum("nd,dk->nk", h, layer.w) + layer.b
        y = _ACTS[layer.act][0](z)
        if cache is not None:
            cache.append((h, z, y))
        h = y
    return h[0] if single else h


def mlp_backward(layers, cache, upstream):
    """Exact gradients for a cached forward pass.

    Returns (grads, dx): grads is a list of (dW, db) matching ``layers``,
    dx the gradient with respect to the network input.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    single = upstream.ndim == 1
    grad = upstream.reshape(1, -1) if single else upstream
    grads = [None] * len(layers)
    for idx in range(len(layers) - 1, -1, -1):
        h, z, y = cache[idx]
        layer = layers[idx]
        dz = grad * _ACTS[layer.act][1](z, y)
        grads[idx] = (h.T @ dz, dz.sum(axis=0))
        grad = dz @ layer.w.T
    return grads, (grad[0] if single else grad)


# --- gradient checking -------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_error: float
    worst_param: str
    tolerance: float
    errors: dict

    @property
    def passed(self):
        return self.max_error < self.tolerance


def grad_check(f, params, tolerance=1e-4, step=1e-5):
    """Compare analytic gradients of f against central finite differences.

    ``params`` maps names to arrays; ``f(params)`` must return
    (loss, grads-by-name). The per-entry error is relative,
    |a - b| / max(|a|, |b|, floor), where the floor is the roundoff noise
    that a central difference of this loss at this step cannot beat
    (about eps * |loss| / step), rescaled by the tolerance. Gradient
    entries below that resolution limit therefore pass on absolute
    agreement instead of drowning in quantization noise.
    """
    loss, grads = f(params)
    noise = 8.0 * np.finfo(np.float64).eps * max(1.0, abs(loss)) / step
    floor = noise / tolerance
    errors = {}
    worst = ("", 0.0)
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeMismatchError(f"gradient shape mismatch for {name}")
        err = 0.0
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + step
            hi = f(params)[0]
            p[idx] = orig - step
            lo = f(params)[0]
            p[idx] = orig
            fd = (hi - lo) / (2.0 * step)
            a, b = float(g[idx]), fd
            e = abs(a - b) / max(abs(a), abs(b), floor)
            err = max(err, e)
        errors[name] = err
        if err >= worst[1]:
            worst = (name, err)
    return GradCheckReport(
        max_error=worst[1], worst_param=worst[0], tolerance=tolerance, errors=errors
    )


# --- parameter checkpoints ------------------------------------------------------------


def layers_to_doc(layers):
    return [
        {"w": [[float(v) for v in row] for row in layer.w],
         "b": [float(v) for v in layer.b],
         "act": layer.act}
        for layer in layers
    ]


def layers_from_doc(doc):
    return [Layer(np.asarray(d["w"], dtype=np.float64),
                  np.asarray(d["b"], dtype=np.float64), d["act"]) for d in doc]


def save_layers(layers, path):
    with open(path, "w") as handle:
        json.dump({"format": 1, "layers": layers_to_doc(layers)}, handle)


def load_layers(path):
    with open(path) as handle:
        doc = json.load(handle)
    return layers_from_doc(doc["layers"])
