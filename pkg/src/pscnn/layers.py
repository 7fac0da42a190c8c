"""Parameter containers shared by the localization and classification nets."""

import numpy as np

from .tensor import Tensor, conv2d, maxpool2d, relu


def he_normal(rng, shape, fan_in, dtype=np.float32):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Module:
    """Holds named parameter tensors in insertion order."""

    def __init__(self):
        self.params = {}

    def add_param(self, name, value):
        t = Tensor(np.asarray(value), requires_grad=True)
        self.params[name] = t
        return t

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state, strict=True):
        for name, t in self.params.items():
            if name not in state:
                if strict:
                    raise KeyError(f"missing parameter {name}")
                continue
            arr = np.asarray(state[name], dtype=t.dtype)
            if arr.shape != t.shape:
                raise ValueError(f"parameter {name}: shape {arr.shape} != {t.shape}")
            t.data = arr.copy()
        if strict:
            extra = set(state) - set(self.params)
            if extra:
                raise KeyError(f"unexpected parameters {sorted(extra)}")

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def set_dtype(self, dtype):
        for t in self.params.values():
            t.data = t.data.astype(dtype)
            t.grad = None
        return self

    def num_params(self):
        return sum(t.data.size for t in self.params.values())


class ConvStack(Module):
    """Conv (+ReLU) and max-pool layers laid out by a NetworkGeometry."""

    def __init__(self, geom, in_channels, rng, prefix=""):
        super().__init__()
        self.geom = geom
        self.prefix = prefix
        self.layers = []
        c_in = in_channels
        widths = iter(geom.channels)
        for i, (layer, name) in enumerate(zip(geom.layers, geom.layer_names())):
            if layer.kind == "pool":
                self.layers.append((layer, None, None))
                continue
            c_out = next(widths)
            fan_in = c_in * layer.kernel * layer.kernel
            w = self.add_param(f"{prefix}{name}.weight", he_normal(rng, (c_out, c_in, layer.kernel, layer.kernel), fan_in))
            b = self.add_param(f"{prefix}{name}.bias", np.zeros(c_out, np.float32))
            self.layers.append((layer, w, b))
            c_in = c_out
        self.out_channels = c_in

    def forward(self, x):
        for layer, w, b in self.layers:
            if w is None:
                x = maxpool2d(x, layer.kernel, layer.stride)
            else:
                x = relu(conv2d(x, w, b, layer.stride, layer.pad))
        return x
