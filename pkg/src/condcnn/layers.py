"""Standard layers composing the baseline temporal CNN.

Layers are stateless apart from parameters, batch-norm running statistics,
and the training-mode flag. Random state (dropout masks) is injected per
call so a whole training run is reproducible from one seeded generator.
"""

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError


def he_normal(rng, shape, fan_in):
    """Fan-in-scaled normal init, suited to ReLU stacks."""
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Layer:
    """Base class: a named graph node with parameters and a mode flag."""

    def __init__(self, name=""):
        self.name = name or type(self).__name__.lower()
        self.training = True

    def forward(self, x, rng=None):
        raise NotImplementedError

    def params(self):
        return {}

    def buffers(self):
        """Non-learnable state that still belongs in a checkpoint."""
        return {}

    def __call__(self, x, rng=None):
        return self.forward(x, rng=rng)


class TemporalConv(Layer):
    """Shared-kernel convolution along the temporal axis, with bias."""

    def __init__(self, c_in, c_out, kernel_len, rng, stride=1, padding="same", name=""):
        super().__init__(name)
        self.c_in, self.c_out, self.kernel_len = c_in, c_out, kernel_len
        self.stride, self.padding = stride, padding
        self.kernel = Tensor(
            he_normal(rng, (kernel_len, c_in, c_out), kernel_len * c_in),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)

    def forward(self, x, rng=None):
        return ad.conv_temporal(x, self.kernel, self.stride, self.padding) + self.bias

    def params(self):
        return {"kernel": self.kernel, "bias": self.bias}


def dense(x, w, b):
    """Affine map x @ w + b for a (batch, d) input."""
    if x.data.ndim != 2:
        raise ShapeError(f"dense input must be 2-d, got {x.data.shape}")
    return ad.matmul(x, w) + b


class Dense(Layer):
    def __init__(self, d_in, d_out, rng, name=""):
        super().__init__(name)
        self.d_in, self.d_out = d_in, d_out
        self.w = Tensor(he_normal(rng, (d_in, d_out), d_in), requires_grad=True)
        self.b = Tensor(np.zeros(d_out), requires_grad=True)

    def forward(self, x, rng=None):
        return dense(x, self.w, self.b)

    def params(self):
        return {"w": self.w, "b": self.b}


class BatchNorm(Layer):
    """Per-channel standardization of (batch, T, C) activations.

    Train mode normalizes by batch statistics over the (batch, T) axes and
    updates running statistics by exponential moving average; eval mode
    uses only the running statistics.
    """

    def __init__(self, channels, momentum=0.1, epsilon=1e-5, name=""):
        super().__init__(name)
        self.channels = channels
        self.momentum = momentum
        self.epsilon = epsilon
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def forward(self, x, rng=None):
        if x.data.ndim != 3:
            raise ShapeError(f"batch norm input must be (batch, T, C), got {x.data.shape}")
        if x.data.shape[2] != self.channels:
            raise ShapeError(
                f"batch norm built for {self.channels} channels, input has {x.data.shape[2]}"
            )
        if self.training:
            if x.data.shape[0] * x.data.shape[1] < 2:
                raise ConfigError(
                    "batch norm needs at least 2 samples per channel in train mode"
                )
            mu = x.mean(axis=(0, 1))
            centered = x - mu
            var = (centered * centered).mean(axis=(0, 1))
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mu.data
            self.running_var = (1 - m) * self.running_var + m * var.data
            scale = self.gamma / ad.tsqrt(var + Tensor(self.epsilon))
            return centered * scale + self.beta
        norm = (x - Tensor(self.running_mean)) / Tensor(
            np.sqrt(self.running_var + self.epsilon)
        )
        return norm * self.gamma + self.beta

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}


class ReLU(Layer):
    def forward(self, x, rng=None):
        return ad.relu(x)


class MaxPool(Layer):
    def __init__(self, size=2, stride=2, name=""):
        super().__init__(name)
        self.size, self.stride = size, stride

    def forward(self, x, rng=None):
        return ad.max_pool_temporal(x, self.size, self.stride)


class GlobalAvgPool(Layer):
    """Average over the temporal axis: (batch, T, C) -> (batch, C)."""

    def forward(self, x, rng=None):
        return x.mean(axis=1)


class Dropout(Layer):
    def __init__(self, rate=0.5, name=""):
        super().__init__(name)
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x, rng=None):
        if not self.training:
            return x
        if rng is None:
            raise ConfigError("train-mode dropout needs a random generator")
        return ad.dropout(x, self.rate, rng, train=True)


class Softmax(Layer):
    def forward(self, x, rng=None):
        return ad.softmax(x)


class Model:
    """An ordered stack of layers ending in a Softmax head."""

    def __init__(self, layers, meta=None):
        if not layers or not isinstance(layers[-1], Softmax):
            raise ConfigError("a model must end with a softmax layer")
        self.layers = list(layers)
        self.meta = dict(meta or {})

    def logits(self, x, rng=None):
        """Forward pass through everything except the final softmax."""
        if not isinstance(x, Tensor):
            x = Tensor(x)
        for layer in self.layers[:-1]:
            x = layer.forward(x, rng=rng)
        return x

    def forward(self, x, rng=None):
        return self.layers[-1].forward(self.logits(x, rng=rng))

    def train(self):
        for layer in self.layers:
            layer.training = True
        return self

    def eval(self):
        for layer in self.layers:
            layer.training = False
        return self

    @property
    def training(self):
        return self.layers[0].training if self.layers else True

    def named_params(self):
        out = {}
        for layer in self.layers:
            for key, tensor in layer.params().items():
                out[f"{layer.name}.{key}"] = tensor
        return out

    def params(self):
        return list(self.named_params().values())

    def named_buffers(self):
        out = {}
        for layer in self.layers:
            for key, value in layer.buffers().items():
                out[f"{layer.name}.{key}"] = value
        return out

    def load_buffers(self, named):
        for layer in self.layers:
            for key in layer.buffers():
                full = f"{layer.name}.{key}"
                if full in named:
                    setattr(layer, key, np.array(named[full]))

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()
