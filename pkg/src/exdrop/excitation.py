"""Top-down excitation backprop.

A probability distribution over the output units is pushed down the network
through excitatory (non-negative) connections only. Each parent splits its
mass among its children in proportion to ``activation * weight``; a child
collects mass from all of its parents.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .exceptions import DimensionError, ValidationError
from .network import Conv2D, Dense, Flatten, MaxPool2D, ReLU

SUM_TOL = 1e-6


@dataclass
class SaliencyDistribution:
    layer_index: int
    probs: np.ndarray
    sample_index: int = 0

    def __len__(self):
        return len(self.probs)


@dataclass
class OutputPrior:
    """Either a single class index or an explicit distribution over classes."""

    class_index: int = None
    probs: np.ndarray = None

    def __post_init__(self):
        if (self.class_index is None) == (self.probs is None):
            raise ValidationError("give exactly one of class_index or probs")
        if self.probs is not None:
            p = np.asarray(self.probs, dtype=np.float64)
            if p.ndim != 1 or (p < 0).any() or abs(p.sum() - 1.0) > SUM_TOL:
                raise ValidationError("prior must be a non-negative vector summing to 1")
            self.probs = p

    def vector(self, num_classes):
        if self.probs is not None:
            if len(self.probs) != num_classes:
                raise DimensionError(f"prior over {len(self.probs)} classes, net has {num_classes}")
            return self.probs
        if not 0 <= self.class_index < num_classes:
            raise ValidationError(f"class {self.class_index} outside [0, {num_classes})")
        v = np.zeros(num_classes)
        v[self.class_index] = 1.0
        return v


def eb_conditional(parent_prob, child_activations, weights_into_parent):
    """Mass that one parent hands to each of its children."""
    a = np.asarray(child_activations, dtype=np.float64)
    w = np.asarray(weights_into_parent, dtype=np.float64)
    if a.shape != w.shape:
        raise DimensionError(f"{a.shape} activations vs {w.shape} weights")
    terms = a * np.maximum(w, 0.0)
    z = terms.sum()
    if z <= 0 or parent_prob == 0:
        return np.zeros_like(terms)
    return parent_prob * terms / z


def _ratio(p, denom):
    out = np.zeros_like(p)
    np.divide(p, denom, out=out, where=denom > 0)
    return out


def _renormalise(p):
    """Rescale each sample's layer mass to 1; all-zero rows become uniform."""
    flat = p.reshape(p.shape[0], -1)
    s = flat.sum(axis=1, keepdims=True)
    dead = s[:, 0] <= 0
    flat = np.where(s > 0, flat / np.where(s > 0, s, 1.0), 0.0)
    if dead.any():
        flat[dead] = 1.0 / flat.shape[1]
    return flat.reshape(p.shape)


def _step_down(layer, p_out, x, cache):
    """Distribution over a layer's inputs given the one over its outputs."""
    if isinstance(layer, (ReLU,)):
        return p_out
    if isinstance(layer, Flatten):
        return p_out.reshape(cache)
    if isinstance(layer, MaxPool2D):
        idx, x_shape = cache
        return T.unpool(p_out, idx, x_shape).astype(np.float64)
    if (x < 0).any():
        raise ValidationError(f"excitation backprop needs non-negative inputs to {layer!r}")
    if isinstance(layer, Dense):
        wp = np.maximum(layer.weights, 0).astype(np.float64)
        xd = x.astype(np.float64)
        ratio = _ratio(p_out, xd @ wp)
        return xd * (ratio @ wp.T)
    if isinstance(layer, Conv2D):
        wp = np.maximum(layer.weights, 0)
        K = wp.shape[0]
        denom = T.conv2d(x, wp, np.zeros(K, T.DTYPE), layer.stride, layer.pad)
        ratio = _ratio(p_out, denom.astype(np.float64))
        back = layer.input_adjoint(T.as_tensor(ratio), x.shape, weights=wp)
        return x.astype(np.float64) * back
    raise ValidationError(f"no excitation rule for {layer!r}")


def excitation_backprop_batch(net, trace, priors, target_layer, all_layers=False):
    """Per-sample saliency at the output of ``target_layer``.

    ``priors`` is a ``B x K`` array of output distributions. ``target_layer``
    of -1 means the network input. Returns a ``B x N`` float64 array, or with
    ``all_layers`` a dict mapping each visited layer index to its array.
    """
    n = len(net.layers)
    if not -1 <= target_layer < n:
        raise ValidationError(f"target layer {target_layer} outside [-1, {n})")
    if trace.net_id != id(net):
        raise ValidationError("trace was not produced by this network")
    p = np.asarray(priors, dtype=np.float64)
    B = trace.batch_size
    if p.shape != (B, net.num_classes):
        raise DimensionError(f"priors {p.shape} for batch {B} x {net.num_classes}")
    seen = {n - 1: p}
    for l in range(n - 1, target_layer, -1):
        p = _step_down(net.layers[l], p, trace.inputs[l], trace.caches[l])
        p = _renormalise(p)
        seen[l - 1] = p
    if all_layers:
        return {k: v.reshape(B, -1) for k, v in seen.items()}
    return p.reshape(B, -1)


def priors_from_labels(labels, num_classes):
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def excitation_backprop(net, trace, prior, target_layer, sample=0):
    """Saliency distribution for one sample of ``trace``."""
    if not 0 <= sample < trace.batch_size:
        raise ValidationError(f"sample {sample} outside batch of {trace.batch_size}")
    if not isinstance(prior, OutputPrior):
        prior = OutputPrior(class_index=int(prior))
    priors = np.zeros((trace.batch_size, net.num_classes))
    priors[:] = prior.vector(net.num_classes)
    # Other rows are computed too; the batch path is cheaper than re-slicing the trace.
    probs = excitation_backprop_batch(net, trace, priors, target_layer)[sample]
    return SaliencyDistribution(target_layer, probs, sample)


def spatial_saliency_map(dist, layer_shape):
    """Channel-summed ``H x W`` map of a saliency distribution over ``C x H x W``."""
    probs = dist.probs if isinstance(dist, SaliencyDistribution) else np.asarray(dist)
    C, H, W = layer_shape
    if probs.size != C * H * W:
        raise DimensionError(f"distribution of length {probs.size} vs layer {layer_shape}")
    return probs.reshape(C, H, W).sum(axis=0)
