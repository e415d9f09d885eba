"""
Energy view of a classifier's logits.

E(x, y) = -f(x)[y], E(x) = -logsumexp_y f(x)[y], and p(y|x) is the softmax of
the logits. The partition function is never represented: every density here is
an unnormalised log density.
"""

import logging

import numpy as np

from . import diffcore as dc
from .diffcore import Network

logger = logging.getLogger(__name__)


def _squeeze_like(values: np.ndarray, x: np.ndarray):
    return float(values) if np.ndim(x) == 1 else values


class JemModel:
    """Joint energy model over (x, y) derived from a Network's logits."""

    def __init__(self, net: Network):
        self.net = net

    @property
    def num_classes(self) -> int:
        return self.net.num_classes

    @property
    def input_dim(self) -> int:
        return self.net.input_dim

    def logits(self, x) -> np.ndarray:
        return dc.forward(self.net, x).data

    def energy_xy(self, x, y):
        """-f(x)[y]; y is a class index, or one index per row for a batch."""
        logits = dc.forward(self.net, x)
        return _squeeze_like(-dc.index_select(logits, y).data, np.asarray(x))

    def energy_x(self, x):
        """-logsumexp_y f(x)[y]."""
        return _squeeze_like(-dc.logsumexp(dc.forward(self.net, x)).data, np.asarray(x))

    def log_p_tilde(self, x):
        """Unnormalised log p(x) = -E(x)."""
        return _squeeze_like(dc.logsumexp(dc.forward(self.net, x)).data, np.asarray(x))

    def log_p_y_given_x(self, x) -> np.ndarray:
        return dc.log_softmax(dc.forward(self.net, x)).data

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.logits(x), axis=-1)

    def grad_logp_x(self, x) -> np.ndarray:
        """Gradient of log p(x) in x; the normaliser does not depend on x."""
        return dc.grad_input(self.net, x, lambda f: dc.sum(dc.logsumexp(f))).data

    def grad_logit(self, x, y) -> np.ndarray:
        """Gradient of f(x)[y] in x, the drift of the class-conditional chain."""
        y = _broadcast_labels(y, x)
        return dc.grad_input(self.net, x, lambda f: dc.sum(dc.index_select(f, y))).data

    def grad_log_p_y(self, x, y) -> np.ndarray:
        """Gradient of log p(y|x) in x."""
        y = _broadcast_labels(y, x)

        def objective(f):
            return dc.sum(dc.index_select(dc.log_softmax(f), y))

        return dc.grad_input(self.net, x, objective).data


def _broadcast_labels(y, x):
    x = np.asarray(x)
    if x.ndim == 1:
        return int(y)
    y = np.asarray(y, dtype=np.int64)
    return np.full(x.shape[0], int(y)) if y.ndim == 0 else y


class QuadraticEnergy:
    """
    Single-class reference density log p(x) = -||x - center||^2 / (2 scale^2).

    Its stationary law is a Gaussian with standard deviation `scale`, which
    makes it an exact oracle for the sampler and the gradient-based scores.
    """

    num_classes = 1

    def __init__(self, input_dim: int, scale: float = 1.0, center=None):
        self.input_dim = input_dim
        self.scale = scale
        self.center = np.zeros(input_dim) if center is None else np.asarray(center, dtype=np.float64)

    def logits(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        diff = x - self.center
        return (-0.5 * np.sum(diff * diff, axis=-1) / self.scale ** 2)[..., None]

    def log_p_tilde(self, x):
        return _squeeze_like(self.logits(x)[..., 0], np.asarray(x))

    def energy_x(self, x):
        return -self.log_p_tilde(x)

    def log_p_y_given_x(self, x) -> np.ndarray:
        return np.zeros_like(self.logits(x))

    def predict(self, x) -> np.ndarray:
        return np.zeros(np.asarray(x).shape[:-1], dtype=np.int64)

    def grad_logp_x(self, x) -> np.ndarray:
        return -(np.asarray(x, dtype=np.float64) - self.center) / self.scale ** 2

    def grad_logit(self, x, y) -> np.ndarray:
        return self.grad_logp_x(x)

    def grad_log_p_y(self, x, y) -> np.ndarray:
        return np.zeros_like(np.asarray(x, dtype=np.float64))
