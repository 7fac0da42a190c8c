"""SGD with momentum, L2 weight decay and step learning-rate decay."""

import numpy as np


class SGD:
    def __init__(self, params, lr, momentum=0.9, weight_decay=5e-4, decay=0.1, step_epochs=None):
        if lr < 0:
            raise ValueError(f"learning rate must be non-negative, got {lr}")
        self.params = dict(params)
        self.base_lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.decay = decay
        self.step_epochs = step_epochs
        self.velocity = {k: np.zeros_like(t.data) for k, t in self.params.items()}

    def lr_at(self, epoch):
        if not self.step_epochs:
            return self.base_lr
        return self.base_lr * self.decay ** (epoch // self.step_epochs)

    def step(self, epoch):
        lr = self.lr_at(epoch)
        for name, t in self.params.items():
            if t.grad is None:
                continue
            g = t.grad + t.data.dtype.type(self.weight_decay) * t.data
            v = self.velocity[name]
            v *= t.data.dtype.type(self.momentum)
            v += g
            if lr:
                t.data -= t.data.dtype.type(lr) * v

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None
