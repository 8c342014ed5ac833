"""Network-utilisation metrics at a single layer.

Entropies are in nats.
"""

from dataclasses import asdict, dataclass

import numpy as np

from .exceptions import ValidationError
from .network import Conv2D, Dense


@dataclass
class UtilizationReport:
    neurons_on: float
    peak_peb: float
    entropy_activations: float
    entropy_peb: float
    conservative_filters: int
    delta_threshold: float
    width: int = 0
    total_filters: int = 0

    def as_dict(self):
        return asdict(self)


def neurons_on(activations):
    """Mean number of strictly positive entries per sample."""
    a = np.asarray(activations)
    if a.size == 0:
        raise ValidationError("no activations given")
    a = a.reshape(-1, a.shape[-1]) if a.ndim > 1 else a[None]
    return float(np.mean((a > 0).sum(axis=1)))


def entropy(v, normalize=True):
    """Shannon entropy ``-sum q ln q`` of one vector (``0 ln 0 = 0``)."""
    q = np.asarray(v, dtype=np.float64)
    if (q < 0).any():
        raise ValidationError("entropy needs non-negative entries")
    if normalize:
        s = q.sum()
        if s <= 0:
            raise ValidationError("cannot normalise an all-zero vector")
        q = q / s
    nz = q[q > 0]
    return float(-(nz * np.log(nz)).sum())


def row_entropies(rows):
    """Entropy of every row after normalisation; all-zero rows score 0."""
    q = np.asarray(rows, dtype=np.float64)
    s = q.sum(axis=1, keepdims=True)
    q = np.divide(q, s, out=np.zeros_like(q), where=s > 0)
    logq = np.log(q, out=np.zeros_like(q), where=q > 0)
    return -(q * logq).sum(axis=1)


def peak_peb(dist):
    return float(np.max(getattr(dist, "probs", dist)))


def filter_deltas(net, layer):
    """L2 distance from initialisation of every filter of ``layers[layer]``.

    A conv filter is one kernel plus its bias; a fully-connected filter is
    one output neuron's incoming weights plus its bias.
    """
    obj = net.layers[layer]
    if not isinstance(obj, (Conv2D, Dense)):
        raise ValidationError(f"layer {layer} ({obj!r}) has no weights")
    w0, b0 = net.initial_weights[net.param_index(layer)]
    dw = obj.weights.astype(np.float64) - w0
    db = obj.bias.astype(np.float64) - b0
    if isinstance(obj, Conv2D):
        sq = (dw.reshape(dw.shape[0], -1) ** 2).sum(axis=1)
    else:
        sq = (dw ** 2).sum(axis=0)
    return np.sqrt(sq + db ** 2)


def conservative_filters(net, layer, threshold):
    """Number of filters whose distance from initialisation is below ``threshold``."""
    return int((filter_deltas(net, layer) < threshold).sum())
