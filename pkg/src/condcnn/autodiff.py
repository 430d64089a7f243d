"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything is float64: it keeps finite-difference checks and oracle
comparisons sharp. The graph is built eagerly during the forward pass
(each op records its inputs and a backward closure) and torn down when
the output goes out of scope; backward() visits every reachable node
exactly once in reverse topological order.

Convolution uses the cross-correlation convention (no kernel flip).
"""

import numpy as np

from .errors import ConfigError, DataError, NumericError, ShapeError

# When enabled (the default), every op validates that its output is finite
# and raises NumericError otherwise. Non-finite values are never silent.
_FINITE_CHECKS = True


def set_finite_checks(enabled):
    """Globally enable/disable per-op finite-value validation."""
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


class Tensor:
    """A dense n-d float64 array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_children", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        # Leaf parameters carry an always-present gradient buffer so that
        # parameters untouched by a loss read as zero gradient.
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._children = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0
        elif self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self):
        """Reverse-mode sweep from this (scalar) node through the graph."""
        if self.data.size != 1:
            raise ShapeError(
                f"backward requires a scalar, got shape {self.data.shape}"
            )
        topo = _topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.requires_grad:
                node._backward(node.grad)

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _lift(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def _topo_order(root):
    # Iterative DFS; graphs from deep models overflow Python's recursion limit.
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for child in node._children:
            if id(child) not in visited:
                stack.append((child, False))
    return order


def _result(data, children, backward, op_name):
    data = np.asarray(data, dtype=np.float64)
    if _FINITE_CHECKS and not np.all(np.isfinite(data)):
        raise NumericError(f"{op_name} produced non-finite values")
    out = Tensor(data)
    out.requires_grad = any(c.requires_grad for c in children)
    if out.requires_grad:
        out._children = tuple(children)
        out._backward = backward
    return out


def _accumulate(tensor, grad):
    if not tensor.requires_grad:
        return
    if tensor.grad is None:
        tensor.grad = np.zeros_like(tensor.data)
    tensor.grad += grad


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise arithmetic ----------------------------------------------

def add(a, b):
    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    def backward(g):
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    with np.errstate(divide="ignore", invalid="ignore"):
        value = a.data / b.data
    return _result(value, (a, b), backward, "div")


def neg(a):
    def backward(g):
        _accumulate(a, -g)

    return _result(-a.data, (a,), backward, "neg")


def power(a, exponent):
    if not isinstance(exponent, (int, float)):
        raise ConfigError("power exponent must be a plain number")

    def backward(g):
        _accumulate(a, g * exponent * a.data ** (exponent - 1))

    return _result(a.data ** exponent, (a,), backward, "power")


def texp(a):
    with np.errstate(over="ignore"):
        value = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * value)

    return _result(value, (a,), backward, "exp")


def tlog(a):
    with np.errstate(divide="ignore", invalid="ignore"):
        value = np.log(a.data)

    def backward(g):
        _accumulate(a, g / a.data)

    return _result(value, (a,), backward, "log")


def tsqrt(a):
    value = np.sqrt(a.data)

    def backward(g):
        _accumulate(a, g * 0.5 / value)

    return _result(value, (a,), backward, "sqrt")


# -- activations -----------------------------------------------------------

def relu(a):
    def backward(g):
        _accumulate(a, g * (a.data > 0))

    return _result(np.maximum(a.data, 0.0), (a,), backward, "relu")


def leaky_relu(a, slope=0.01):
    def backward(g):
        _accumulate(a, g * np.where(a.data > 0, 1.0, slope))

    return _result(np.where(a.data > 0, a.data, slope * a.data), (a,), backward, "leaky_relu")


def elu(a, alpha=1.0):
    with np.errstate(over="ignore"):
        value = np.where(a.data > 0, a.data, alpha * (np.exp(a.data) - 1.0))

    def backward(g):
        _accumulate(a, g * np.where(a.data > 0, 1.0, value + alpha))

    return _result(value, (a,), backward, "elu")


def sigmoid(a):
    value = _sigmoid_stable(a.data)

    def backward(g):
        _accumulate(a, g * value * (1.0 - value))

    return _result(value, (a,), backward, "sigmoid")


def _sigmoid_stable(x):
    with np.errstate(over="ignore", invalid="ignore"):
        positive = 1.0 / (1.0 + np.exp(-x))
        e = np.exp(x)
        negative = e / (1.0 + e)
    return np.where(x >= 0, positive, negative)


def tanh(a):
    value = np.tanh(a.data)

    def backward(g):
        _accumulate(a, g * (1.0 - value * value))

    return _result(value, (a,), backward, "tanh")


# -- reductions and shape ----------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    value = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.data.shape).copy())

    return _result(value, (a,), backward, "sum")


def tmean(a, axis=None, keepdims=False):
    value = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in np.atleast_1d(axis)]
    )

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g / count, a.data.shape).copy())

    return _result(value, (a,), backward, "mean")


def reshape(a, shape):
    original = a.data.shape

    def backward(g):
        _accumulate(a, g.reshape(original))

    return _result(a.data.reshape(shape), (a,), backward, "reshape")


# -- linear algebra ----------------------------------------------------------

def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(
            f"matmul expects 2-d operands, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.data.shape} x {b.data.shape}"
        )

    def backward(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _result(a.data @ b.data, (a, b), backward, "matmul")


# -- temporal convolution ------------------------------------------------------

def _same_padding(t, k, stride):
    out = -(-t // stride)  # ceil division
    total = max(0, (out - 1) * stride + k - t)
    return total // 2, total - total // 2


def conv_temporal(x, kernel, stride=1, padding="same"):
    """Cross-correlate `x` (batch, T, C_in) along its temporal axis.

    `kernel` is (K, C_in, C_out) for a shared kernel or
    (batch, K, C_in, C_out) for per-example kernels; both run through the
    same contraction so a shared kernel broadcast over the batch produces
    bitwise-identical output to the per-example path.
    """
    if x.data.ndim != 3:
        raise ShapeError(f"conv input must be (batch, T, C_in), got {x.data.shape}")
    if kernel.data.ndim not in (3, 4):
        raise ShapeError(
            f"kernel must be (K, C_in, C_out) or (batch, K, C_in, C_out), "
            f"got {kernel.data.shape}"
        )
    per_example = kernel.data.ndim == 4
    batch, t_in, c_in = x.data.shape
    k = kernel.data.shape[1] if per_example else kernel.data.shape[0]
    kc_in = kernel.data.shape[2] if per_example else kernel.data.shape[1]
    if per_example and kernel.data.shape[0] != batch:
        raise ShapeError(
            f"per-example kernel batch {kernel.data.shape[0]} != input batch {batch}"
        )
    if kc_in != c_in:
        raise ShapeError(
            f"kernel expects {kc_in} input channels, input has {c_in}"
        )
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")

    if padding == "same":
        left, right = _same_padding(t_in, k, stride)
    elif padding == "valid":
        left = right = 0
    else:
        raise ConfigError(f"padding must be 'same' or 'valid', got {padding!r}")
    t_padded = t_in + left + right
    if k > t_padded:
        raise ConfigError(
            f"kernel length {k} exceeds padded input length {t_padded}"
        )

    if left or right:
        padded = np.zeros((batch, t_padded, c_in), dtype=np.float64)
        padded[:, left:left + t_in, :] = x.data
    else:
        padded = x.data
    # windows[b, t, c, k] == padded[b, t*stride + k, c]; a strided view, no copy
    windows = np.lib.stride_tricks.sliding_window_view(padded, k, axis=1)[:, ::stride]
    t_out = windows.shape[1]

    kdata = kernel.data if per_example else np.broadcast_to(
        kernel.data, (batch,) + kernel.data.shape
    )
    value = np.einsum("btck,bkco->bto", windows, kdata, optimize=True)

    def backward(g):
        if kernel.requires_grad:
            if per_example:
                dk = np.einsum("btck,bto->bkco", windows, g, optimize=True)
            else:
                dk = np.einsum("btck,bto->kco", windows, g, optimize=True)
            _accumulate(kernel, dk)
        if x.requires_grad:
            dwin = np.einsum("bto,bkco->btck", g, kdata, optimize=True)
            dpad = np.zeros((batch, t_padded, c_in), dtype=np.float64)
            for j in range(k):
                # for fixed j the target indices t*stride + j are distinct
                dpad[:, j:j + (t_out - 1) * stride + 1:stride, :] += dwin[:, :, :, j]
            _accumulate(x, dpad[:, left:left + t_in, :])

    return _result(value, (x, kernel), backward, "conv_temporal")


def max_pool_temporal(x, size, stride):
    """Per-channel max over temporal windows of `size`, advanced by `stride`."""
    if x.data.ndim != 3:
        raise ShapeError(f"pool input must be (batch, T, C), got {x.data.shape}")
    batch, t_in, channels = x.data.shape
    if size > t_in:
        raise ConfigError(f"pool size {size} exceeds temporal length {t_in}")
    if size < 1 or stride < 1:
        raise ConfigError("pool size and stride must be >= 1")

    windows = np.lib.stride_tricks.sliding_window_view(x.data, size, axis=1)[:, ::stride]
    value = windows.max(axis=-1)
    argmax = windows.argmax(axis=-1)
    t_out = value.shape[1]

    def backward(g):
        dx = np.zeros_like(x.data)
        b_idx, t_idx, c_idx = np.ogrid[:batch, :t_out, :channels]
        np.add.at(dx, (b_idx, t_idx * stride + argmax, c_idx), g)
        _accumulate(x, dx)

    return _result(value, (x,), backward, "max_pool_temporal")


# -- classification ops ---------------------------------------------------------

def softmax(x):
    """Row-wise softmax of a (batch, classes) tensor, max-subtracted."""
    if x.data.ndim != 2:
        raise ShapeError(f"softmax input must be 2-d, got {x.data.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    value = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        dot = (g * value).sum(axis=1, keepdims=True)
        _accumulate(x, value * (g - dot))

    return _result(value, (x,), backward, "softmax")


def _check_labels(labels, n_classes):
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ShapeError(f"labels must be a 1-d vector, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        labels = labels.astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise DataError(
            f"labels must lie in [0, {n_classes}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    return labels


def cross_entropy(probs, labels):
    """Mean negative log-likelihood of integer labels under given class
    probabilities. Rows are expected to already sum to 1."""
    if probs.data.ndim != 2:
        raise ShapeError(f"probs must be 2-d, got {probs.data.shape}")
    batch, n_classes = probs.data.shape
    labels = _check_labels(labels, n_classes)
    picked = probs.data[np.arange(batch), labels]
    with np.errstate(divide="ignore"):
        value = -np.log(picked).mean()

    def backward(g):
        dp = np.zeros_like(probs.data)
        dp[np.arange(batch), labels] = -g / (batch * picked)
        _accumulate(probs, dp)

    return _result(value, (probs,), backward, "cross_entropy")


def softmax_cross_entropy(logits, labels):
    """Fused softmax + cross-entropy on logits; the numerically stable
    training-loss path."""
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be 2-d, got {logits.data.shape}")
    batch, n_classes = logits.data.shape
    labels = _check_labels(labels, n_classes)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(e.sum(axis=1, keepdims=True))
    value = -log_probs[np.arange(batch), labels].mean()

    def backward(g):
        d = probs.copy()
        d[np.arange(batch), labels] -= 1.0
        _accumulate(logits, g * d / batch)

    return _result(value, (logits,), backward, "softmax_cross_entropy")


def dropout(x, rate, rng, train=True):
    """Inverted dropout: zero with probability `rate`, survivors scaled by
    1/(1-rate). Identity when `train` is false or rate is 0."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    mask = (rng.random(x.data.shape) >= rate) / (1.0 - rate)

    def backward(g):
        _accumulate(x, g * mask)

    return _result(x.data * mask, (x,), backward, "dropout")


# -- gradient checking -----------------------------------------------------------

def grad_check(f, x, eps=1e-5):
    """Compare reverse-mode gradients of scalar-valued `f` at `x` against
    central finite differences.

    Returns the max over coordinates of
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ConfigError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    if not x.requires_grad:
        raise ConfigError("grad_check input must have requires_grad=True")
    x.data = np.ascontiguousarray(x.data)  # in-place perturbation needs a view
    x.zero_grad()
    out = f(x)
    if out.data.size != 1:
        raise ShapeError(f"grad_check target must be scalar, got {out.data.shape}")
    out.backward()
    analytic = x.grad.copy()

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        up = float(f(x).data)
        flat[i] = saved - eps
        down = float(f(x).data)
        flat[i] = saved
        numeric[i] = (up - down) / (2.0 * eps)
    numeric = numeric.reshape(x.data.shape)
    if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
        raise NumericError("grad_check encountered non-finite derivatives")

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float((np.abs(analytic - numeric) / denom).max())
