"""Small dense-layer toolkit with hand-written backward passes.

Tensors are plain ``numpy.float64`` arrays laid out batch-first; convolutional
activations are ``(B, C, H, W)``. Every layer caches what its backward pass
needs during ``forward`` so a ``LayerStack`` can be trained with ``adam_step``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class NonFiniteGradError(FloatingPointError):
    pass


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step_count: int = 0


@dataclass
class Parameter:
    value: np.ndarray
    name: str = "param"
    grad: np.ndarray = field(init=False)
    state: AdamState = field(init=False)

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)
        self.state = AdamState(np.zeros_like(self.value), np.zeros_like(self.value))

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def zero_grad(self):
        self.grad[...] = 0.0


def adam_step(params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update; zeroes every grad afterwards."""
    params = list(params)
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradError(f"non-finite gradient in parameter {p.name!r}")
    for p in params:
        st = p.state
        st.step_count += 1
        st.m *= beta1
        st.m += (1.0 - beta1) * p.grad
        st.v *= beta2
        st.v += (1.0 - beta2) * p.grad * p.grad
        m_hat = st.m / (1.0 - beta1 ** st.step_count)
        v_hat = st.v / (1.0 - beta2 ** st.step_count)
        p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
        p.zero_grad()


def _init_uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Layer:
    """Base layer. Subclasses fill ``_cache`` in forward and consume it in backward."""

    kind = "layer"

    def __init__(self):
        self._cache = None

    def parameters(self):
        return []

    def output_shape(self, input_shape):
        return tuple(input_shape)

    def parameter_count(self):
        return sum(p.size for p in self.parameters())

    def forward(self, x):
        raise NotImplementedError

    def backward(self, g):
        raise NotImplementedError

    def spec(self):
        return {"kind": self.kind}

    def _need_cache(self):
        if self._cache is None:
            raise StateError(f"{type(self).__name__}.backward called before forward")
        return self._cache


class Affine(Layer):
    kind = "affine"

    def __init__(self, in_features, out_features, rng=None, name="affine"):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features, self.out_features = in_features, out_features
        self.weight = Parameter(_init_uniform(rng, in_features, (out_features, in_features)), f"{name}.weight")
        self.bias = Parameter(np.zeros(out_features), f"{name}.bias")

    def parameters(self):
        return [self.weight, self.bias]

    def output_shape(self, input_shape):
        if tuple(input_shape) != (self.in_features,):
            raise ShapeError(f"affine expects ({self.in_features},), got {tuple(input_shape)}")
        return (self.out_features,)

    def forward(self, x):
        self._cache = x
        return x @ self.weight.value.T + self.bias.value

    def backward(self, g):
        x = self._need_cache()
        self.weight.grad += g.T @ x
        self.bias.grad += g.sum(axis=0)
        return g @ self.weight.value

    def spec(self):
        return {"kind": self.kind, "in": self.in_features, "out": self.out_features}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        mask = x > 0
        self._cache = (mask, x)
        return np.where(mask, x, 0.0)

    def backward(self, g):
        mask, _ = self._need_cache()
        return np.where(mask, g, 0.0)

    def preactivation(self):
        return self._need_cache()[1]


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x):
        y = 0.5 * (1.0 + np.tanh(0.5 * x))
        self._cache = y
        return y

    def backward(self, g):
        y = self._need_cache()
        return g * y * (1.0 - y)


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)

    def forward(self, x):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, g):
        return g.reshape(self._need_cache())


class Reshape(Layer):
    kind = "reshape"

    def __init__(self, shape):
        super().__init__()
        self.shape = tuple(int(s) for s in shape)

    def output_shape(self, input_shape):
        if int(np.prod(input_shape)) != int(np.prod(self.shape)):
            raise ShapeError(f"cannot reshape {tuple(input_shape)} to {self.shape}")
        return self.shape

    def forward(self, x):
        self._cache = x.shape
        return x.reshape((x.shape[0],) + self.shape)

    def backward(self, g):
        return g.reshape(self._need_cache())

    def spec(self):
        return {"kind": self.kind, "shape": list(self.shape)}


def _conv_out(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(xp, kernel, stride, ho, wo):
    # (B, C, H, W) padded -> (B, C, k, k, Ho, Wo)
    b, c = xp.shape[:2]
    cols = np.empty((b, c, kernel, kernel, ho, wo), dtype=xp.dtype)
    for i in range(kernel):
        for j in range(kernel):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols


def _col2im(cols, padded_shape, kernel, stride, ho, wo):
    out = np.zeros(padded_shape, dtype=cols.dtype)
    for i in range(kernel):
        for j in range(kernel):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    return out


def _unpad(x, padding):
    if padding == 0:
        return x
    return x[:, :, padding:-padding, padding:-padding]


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0, rng=None, name="conv"):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride, self.padding = kernel, stride, padding
        fan_in = in_channels * kernel * kernel
        self.weight = Parameter(_init_uniform(rng, fan_in, (out_channels, in_channels, kernel, kernel)), f"{name}.weight")
        self.bias = Parameter(np.zeros(out_channels), f"{name}.bias")

    def parameters(self):
        return [self.weight, self.bias]

    def output_shape(self, input_shape):
        c, h, w = input_shape
        if c != self.in_channels:
            raise ShapeError(f"conv2d expects {self.in_channels} channels, got {c}")
        ho = _conv_out(h, self.kernel, self.stride, self.padding)
        wo = _conv_out(w, self.kernel, self.stride, self.padding)
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv2d output would be empty for input {tuple(input_shape)}")
        return (self.out_channels, ho, wo)

    def forward(self, x):
        p, k, s = self.padding, self.kernel, self.stride
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        ho = _conv_out(x.shape[2], k, s, p)
        wo = _conv_out(x.shape[3], k, s, p)
        cols = _im2col(xp, k, s, ho, wo)
        out = np.tensordot(cols, self.weight.value, axes=([1, 2, 3], [1, 2, 3]))  # B,Ho,Wo,O
        out = out.transpose(0, 3, 1, 2) + self.bias.value[None, :, None, None]
        self._cache = (cols, xp.shape, ho, wo)
        return np.ascontiguousarray(out)

    def backward(self, g):
        cols, padded_shape, ho, wo = self._need_cache()
        self.weight.grad += np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))
        self.bias.grad += g.sum(axis=(0, 2, 3))
        dcols = np.tensordot(self.weight.value, g, axes=([0], [1]))  # C,k,k,B,Ho,Wo
        dcols = dcols.transpose(3, 0, 1, 2, 4, 5)
        dxp = _col2im(dcols, padded_shape, self.kernel, self.stride, ho, wo)
        return _unpad(dxp, self.padding)

    def spec(self):
        return {"kind": self.kind, "in": self.in_channels, "out": self.out_channels,
                "kernel": self.kernel, "stride": self.stride, "padding": self.padding}


class ConvTranspose2d(Layer):
    """Adjoint of ``Conv2d``: output size ``(H - 1) * stride - 2 * padding + kernel``."""

    kind = "conv_transpose2d"

    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0, rng=None, name="convT"):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride, self.padding = kernel, stride, padding
        fan_in = in_channels * kernel * kernel
        self.weight = Parameter(_init_uniform(rng, fan_in, (in_channels, out_channels, kernel, kernel)), f"{name}.weight")
        self.bias = Parameter(np.zeros(out_channels), f"{name}.bias")

    def parameters(self):
        return [self.weight, self.bias]

    def output_shape(self, input_shape):
        c, h, w = input_shape
        if c != self.in_channels:
            raise ShapeError(f"conv_transpose2d expects {self.in_channels} channels, got {c}")
        ho = (h - 1) * self.stride - 2 * self.padding + self.kernel
        wo = (w - 1) * self.stride - 2 * self.padding + self.kernel
        return (self.out_channels, ho, wo)

    def forward(self, x):
        b, _, h, w = x.shape
        k, s, p = self.kernel, self.stride, self.padding
        hp, wp = (h - 1) * s + k, (w - 1) * s + k
        cols = np.tensordot(self.weight.value, x, axes=([0], [1]))  # O,k,k,B,H,W
        cols = cols.transpose(3, 0, 1, 2, 4, 5)
        out = _col2im(cols, (b, self.out_channels, hp, wp), k, s, h, w)
        out = _unpad(out, p) + self.bias.value[None, :, None, None]
        self._cache = (x, (b, self.out_channels, hp, wp))
        return np.ascontiguousarray(out)

    def backward(self, g):
        x, padded_shape = self._need_cache()
        k, s, p = self.kernel, self.stride, self.padding
        h, w = x.shape[2:]
        gp = np.pad(g, ((0, 0), (0, 0), (p, p), (p, p))) if p else g
        gcols = _im2col(gp, k, s, h, w)  # B,O,k,k,H,W
        self.weight.grad += np.tensordot(x, gcols, axes=([0, 2, 3], [0, 4, 5]))
        self.bias.grad += g.sum(axis=(0, 2, 3))
        dx = np.tensordot(gcols, self.weight.value, axes=([1, 2, 3], [1, 2, 3]))  # B,H,W,C
        return np.ascontiguousarray(dx.transpose(0, 3, 1, 2))

    def spec(self):
        return {"kind": self.kind, "in": self.in_channels, "out": self.out_channels,
                "kernel": self.kernel, "stride": self.stride, "padding": self.padding}


class InstanceNorm2d(Layer):
    """Per-sample, per-channel standardisation over H x W with a trainable affine."""

    kind = "instance_norm"

    def __init__(self, channels, eps=1e-5, name="in"):
        super().__init__()
        if eps <= 0:
            raise ValueError("instance norm eps must be > 0")
        self.channels, self.eps = channels, eps
        self.gamma = Parameter(np.ones(channels), f"{name}.gamma")
        self.beta = Parameter(np.zeros(channels), f"{name}.beta")

    def parameters(self):
        return [self.gamma, self.beta]

    def output_shape(self, input_shape):
        if input_shape[0] != self.channels:
            raise ShapeError(f"instance norm expects {self.channels} channels, got {input_shape[0]}")
        return tuple(input_shape)

    def forward(self, x):
        mu = x.mean(axis=(2, 3), keepdims=True)
        xc = x - mu
        sigma = np.sqrt((xc * xc).mean(axis=(2, 3), keepdims=True) + self.eps)
        xhat = xc / sigma
        self._cache = (xhat, sigma)
        return self.gamma.value[None, :, None, None] * xhat + self.beta.value[None, :, None, None]

    def backward(self, g):
        xhat, sigma = self._need_cache()
        self.gamma.grad += (g * xhat).sum(axis=(0, 2, 3))
        self.beta.grad += g.sum(axis=(0, 2, 3))
        gx = g * self.gamma.value[None, :, None, None]
        mean_g = gx.mean(axis=(2, 3), keepdims=True)
        mean_gx = (gx * xhat).mean(axis=(2, 3), keepdims=True)
        return (gx - mean_g - xhat * mean_gx) / sigma

    def spec(self):
        return {"kind": self.kind, "channels": self.channels, "eps": self.eps}


class LayerStack:
    """Ordered layers with a declared per-sample input shape."""

    def __init__(self, layers, input_shape):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
        self.output_shape = shape
        self._ran_forward = False

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def parameter_count(self):
        return sum(layer.parameter_count() for layer in self.layers)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def forward(self, x):
        x = np.asarray(x, dtype=DTYPE)
        unbatched = x.shape == self.input_shape
        if unbatched:
            x = x[None]
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"stack expects (*, {', '.join(map(str, self.input_shape))}), got {x.shape}")
        for layer in self.layers:
            x = layer.forward(x)
        self._ran_forward = True
        self._unbatched = unbatched
        return x[0] if unbatched else x

    __call__ = forward

    def backward(self, g):
        if not self._ran_forward:
            raise StateError("backward called before forward")
        g = np.asarray(g, dtype=DTYPE)
        if self._unbatched:
            g = g[None]
        if g.shape[1:] != self.output_shape:
            raise ShapeError(f"upstream grad shape {g.shape} does not match output (*, {self.output_shape})")
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g[0] if self._unbatched else g

    def relu_preactivations(self):
        return [layer.preactivation() for layer in self.layers if isinstance(layer, ReLU)]

    def spec(self):
        return {"input_shape": list(self.input_shape), "layers": [l.spec() for l in self.layers]}


def build_stack(spec, rng=None):
    """Rebuild a stack from ``LayerStack.spec()`` output (parameters freshly initialised)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    layers = []
    for i, ls in enumerate(spec["layers"]):
        kind = ls["kind"]
        if kind == "affine":
            layers.append(Affine(ls["in"], ls["out"], rng, name=f"l{i}"))
        elif kind == "conv2d":
            layers.append(Conv2d(ls["in"], ls["out"], ls["kernel"], ls["stride"], ls["padding"], rng, name=f"l{i}"))
        elif kind == "conv_transpose2d":
            layers.append(ConvTranspose2d(ls["in"], ls["out"], ls["kernel"], ls["stride"], ls["padding"], rng, name=f"l{i}"))
        elif kind == "relu":
            layers.append(ReLU())
        elif kind == "sigmoid":
            layers.append(Sigmoid())
        elif kind == "flatten":
            layers.append(Flatten())
        elif kind == "reshape":
            layers.append(Reshape(ls["shape"]))
        elif kind == "instance_norm":
            layers.append(InstanceNorm2d(ls["channels"], ls["eps"], name=f"l{i}"))
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
    return LayerStack(layers, spec["input_shape"])


# ---------------------------------------------------------------- losses

def mse_loss(pred, target):
    """Mean over all elements; returns (loss, dloss/dpred)."""
    diff = pred - target
    n = diff.size
    return float(np.sum(diff * diff) / n), 2.0 * diff / n


def log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits, labels):
    """Mean natural-log cross entropy over the batch."""
    labels = np.asarray(labels, dtype=np.int64)
    logp = log_softmax(logits)
    n = len(labels)
    loss = -float(logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def sigmoid_cross_entropy(logits, targets):
    """Multi-label binary cross entropy, mean over batch and labels."""
    targets = np.asarray(targets, dtype=DTYPE)
    loss = np.maximum(logits, 0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))
    probs = 0.5 * (1.0 + np.tanh(0.5 * logits))
    return float(loss.mean()), (probs - targets) / logits.size


# ---------------------------------------------------------- grad checking

@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    skipped: int
    worst: str = ""

    def passed(self, tolerance):
        return self.max_rel_error < tolerance


def relative_error(analytic, numeric, floor=1e-6):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_diff_check(stack, x, tolerance=1e-4, h=1e-5, seed=0, max_coords=40, include_input=True):
    """Compare backward() against central differences of ``sum(R * stack(x))``.

    Coordinates whose +/-h perturbation flips any ReLU mask are skipped, since the
    function is not differentiable there. At most ``max_coords`` entries per
    parameter are probed (all of them when the parameter is smaller).
    """
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=DTYPE)
    out = stack.forward(x)
    proj = rng.standard_normal(out.shape)

    def loss_and_masks():
        y = stack.forward(x)
        masks = [m > 0 for m in stack.relu_preactivations()]
        return float(np.sum(proj * y)), masks

    stack.zero_grad()
    base = float(np.sum(np.abs(proj * stack.forward(x))))
    gx = stack.backward(proj)
    # central differences carry ~eps*sum|terms|/h of roundoff; true-zero grads are judged against it
    floor = 1e-6 * max(1.0, base)
    targets = [(p.name, p.value, p.grad.copy()) for p in stack.parameters()]
    if include_input:
        targets.append(("input", x, gx))

    worst, worst_name, checked, skipped = 0.0, "", 0, 0
    for name, arr, analytic in targets:
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            lp, mp = loss_and_masks()
            flat[i] = orig - h
            lm, mm = loss_and_masks()
            flat[i] = orig
            if any(not np.array_equal(a, b) for a, b in zip(mp, mm)):
                skipped += 1
                continue
            numeric = (lp - lm) / (2 * h)
            err = relative_error(float(analytic.reshape(-1)[i]), numeric, floor)
            checked += 1
            if err > worst:
                worst, worst_name = err, f"{name}[{i}]"
    stack.zero_grad()
    stack.forward(x)
    return GradCheckReport(worst, checked, skipped, worst_name)
