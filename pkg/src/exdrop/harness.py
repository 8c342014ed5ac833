"""Datasets, the training loop, evaluation, test-time ablations and file outputs."""

from dataclasses import asdict, dataclass, field, fields
import csv
import logging
import os

import numpy as np

from . import tensor as T
from .dropout import DropoutPlan, Strategy, make_plan
from .excitation import excitation_backprop_batch, priors_from_labels, spatial_saliency_map
from .exceptions import FormatError, ValidationError
from .metrics import (UtilizationReport, conservative_filters, filter_deltas, row_entropies)
from .network import Dense, Conv2D, backward, forward, forward_from, loss_softmax_ce, sgd_step

log = logging.getLogger(__name__)

CIFAR_RECORD = 3073
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        self.images = T.as_tensor(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels) or len(self.labels) == 0:
            raise ValidationError("dataset needs matching, non-empty images and labels")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValidationError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def input_shape(self):
        return tuple(self.images.shape[1:])

    def batches(self, batch_size):
        for i in range(0, len(self), batch_size):
            yield self.images[i:i + batch_size], self.labels[i:i + batch_size]


# -- CIFAR-10 ---------------------------------------------------------------

def read_cifar10_batch(path):
    """Raw ``uint8`` images (``M x 3 x 32 x 32``) and labels from one binary batch file."""
    path = str(path)
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except FileNotFoundError:
        raise FormatError("missing CIFAR-10 batch file", 0, path) from None
    if len(buf) == 0:
        raise FormatError("empty CIFAR-10 batch file", 0, path)
    if len(buf) % CIFAR_RECORD:
        n_full = len(buf) // CIFAR_RECORD
        raise FormatError("short CIFAR-10 record", n_full * CIFAR_RECORD, path)
    rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise FormatError(f"label {labels[bad[0]]} out of range", int(bad[0]) * CIFAR_RECORD, path)
    return rec[:, 1:].reshape(-1, 3, 32, 32), labels


def _cifar_dir(directory):
    sub = os.path.join(directory, "cifar-10-batches-bin")
    return sub if os.path.isdir(sub) else directory


def stratified_subset(labels, n, num_classes, rng):
    """Sorted indices of ``n`` samples with per-class counts differing by at most one."""
    labels = np.asarray(labels)
    base, extra = divmod(n, num_classes)
    picked = []
    for c in range(num_classes):
        idx = np.flatnonzero(labels == c)
        want = base + (1 if c < extra else 0)
        if want > len(idx):
            raise ValidationError(f"class {c} has {len(idx)} samples, {want} requested")
        picked.append(idx[rng.permutation(len(idx))[:want]])
    return np.sort(np.concatenate(picked))


def _center(train_u8, test_u8):
    train = train_u8.astype(np.float32) / 255.0
    test = test_u8.astype(np.float32) / 255.0
    mean = train.mean(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)[None, :, None, None]
    return train - mean, test - mean


def load_cifar10(directory, n_train=None, n_test=None, seed=0):
    """Train and test splits from the standard binary batches.

    Images are scaled to [0, 1] and centred with the per-channel means of the
    (possibly subsetted) training split.
    """
    d = _cifar_dir(str(directory))
    parts = [read_cifar10_batch(os.path.join(d, f)) for f in CIFAR_TRAIN_FILES]
    tr_x = np.concatenate([p[0] for p in parts])
    tr_y = np.concatenate([p[1] for p in parts])
    te_x, te_y = read_cifar10_batch(os.path.join(d, CIFAR_TEST_FILE))
    rng = T.Rng(seed)
    if n_train is not None:
        idx = stratified_subset(tr_y, n_train, 10, rng.spawn(0))
        tr_x, tr_y = tr_x[idx], tr_y[idx]
    if n_test is not None:
        idx = stratified_subset(te_y, n_test, 10, rng.spawn(1))
        te_x, te_y = te_x[idx], te_y[idx]
    tr, te = _center(tr_x, te_x)
    return Dataset(tr, tr_y, "train", 10), Dataset(te, te_y, "test", 10)


def make_blobs(num_classes=3, per_class=100, dims=2, spread=0.1, seed=0, test_fraction=0.2):
    """Gaussian clusters shaped ``M x dims x 1 x 1``, split per class into train and test."""
    if per_class < 2:
        raise ValidationError("per_class must be >= 2")
    rng = T.Rng(seed)
    centers = rng.normal((num_classes, dims), std=3.0)
    n_test = min(max(1, int(round(per_class * test_fraction))), per_class - 1)
    xs, ys = {"train": [], "test": []}, {"train": [], "test": []}
    for c in range(num_classes):
        pts = centers[c] + spread * rng.normal((per_class, dims))
        xs["train"].append(pts[n_test:])
        xs["test"].append(pts[:n_test])
        ys["train"].append(np.full(per_class - n_test, c))
        ys["test"].append(np.full(n_test, c))
    out = []
    for split in ("train", "test"):
        x = np.concatenate(xs[split])
        y = np.concatenate(ys[split])
        order = rng.permutation(len(y))
        out.append(Dataset(x[order].reshape(-1, dims, 1, 1), y[order], split, num_classes))
    return tuple(out)


# -- training ---------------------------------------------------------------

@dataclass
class TrainConfig:
    strategy: str = "excitation"
    base_p: float = 0.5
    gamma: float = 5e-4
    layer_index: int = None
    lr: float = 1e-3
    lr_drop_iter: int = 2500
    batch_size: int = 100
    iters: int = 5000
    seed: int = 0
    eval_every: int = 500

    def __post_init__(self):
        self.strategy = Strategy.parse(self.strategy).value
        if self.lr <= 0 or self.batch_size < 1 or self.iters < 1:
            raise ValidationError("need lr > 0, batch_size >= 1 and iters >= 1")
        if not 0 < self.base_p <= 1:
            raise ValidationError(f"base_p must lie in (0, 1], got {self.base_p}")
        if self.strategy == Strategy.EXCITATION.value and self.base_p >= 1:
            raise ValidationError("excitation dropout needs base_p < 1")
        if self.gamma < 0:
            raise ValidationError("gamma must be >= 0")

    def as_dict(self):
        return asdict(self)


@dataclass
class TrainLog:
    losses: list = field(default_factory=list)
    records: list = field(default_factory=list)  # (iter, train_loss, test_acc)


def _minibatches(n, batch_size, rng):
    if batch_size > n:
        raise ValidationError(f"batch size {batch_size} exceeds {n} training samples")
    while True:
        order = rng.permutation(n)
        for i in range(0, n - batch_size + 1, batch_size):
            yield order[i:i + batch_size]


def train_step(net, x, y, cfg, layer, t, mask_rng, lr):
    """One iteration; returns the minibatch loss."""
    strategy = Strategy(cfg.strategy)
    width = net.width(layer)
    if strategy is Strategy.EXCITATION:
        trace = forward(net, x)
        sal = excitation_backprop_batch(net, trace, priors_from_labels(y, net.num_classes), layer)
        plan = make_plan(strategy, layer, width, len(y), mask_rng, cfg.base_p, saliency=sal)
        trace = forward_from(net, trace, plan)
    else:
        plan = None
        if strategy is not Strategy.NONE:
            plan = make_plan(strategy, layer, width, len(y), mask_rng, cfg.base_p,
                             cfg.gamma, iteration=t)
        trace = forward(net, x, plan)
    loss, d = loss_softmax_ce(trace.logits, y)
    sgd_step(net, backward(net, trace, d, plan), lr)
    return loss


def train(net, data, cfg, rng=None, test=None, on_eval=None):
    """Minibatch SGD under ``cfg.strategy``.

    Batch order and dropout masks come from separate child streams of
    ``rng``, so strategies that draw no masks see the same batches.
    """
    if tuple(data.input_shape) != net.input_shape:
        raise ValidationError(f"data {data.input_shape} vs network {net.input_shape}")
    rng = rng if rng is not None else T.Rng(cfg.seed)
    batch_rng, mask_rng = rng.spawn(1), rng.spawn(2)
    layer = cfg.layer_index if cfg.layer_index is not None else net.dropout_layer()
    tlog = TrainLog()
    window = []
    batches = _minibatches(len(data), cfg.batch_size, batch_rng)
    for t in range(cfg.iters):
        idx = next(batches)
        lr = cfg.lr / 10 if 0 < cfg.lr_drop_iter <= t else cfg.lr
        loss = train_step(net, data.images[idx], data.labels[idx], cfg, layer, t, mask_rng, lr)
        tlog.losses.append(loss)
        window.append(loss)
        done = t + 1
        if cfg.eval_every > 0 and (done % cfg.eval_every == 0 or done == cfg.iters):
            acc = evaluate(net, test)[0] if test is not None else float("nan")
            rec = (done, float(np.mean(window)), acc)
            tlog.records.append(rec)
            window = []
            if on_eval is not None:
                on_eval(*rec)
    return tlog


# -- evaluation -------------------------------------------------------------

EVAL_BATCH = 500


def _gt(probs, labels):
    return probs[np.arange(len(labels)), labels]


def evaluate(net, data, batch_size=EVAL_BATCH):
    """Accuracy and mean ground-truth probability with no dropout."""
    correct = 0
    gt_sum = 0.0
    for x, y in data.batches(batch_size):
        probs = forward(net, x).probs
        correct += int((probs.argmax(axis=1) == y).sum())
        gt_sum += float(_gt(probs, y).sum())
    return correct / len(data), gt_sum / len(data)


def weight_layer_for(net, layer):
    """Nearest parameterised layer at or below ``layer``."""
    for i in range(layer, -1, -1):
        if isinstance(net.layers[i], (Dense, Conv2D)):
            return i
    raise ValidationError(f"no weighted layer at or below {layer}")


def utilization(net, data, layer=None, delta=0.25, batch_size=EVAL_BATCH):
    """Utilisation metrics at ``layer`` (default: the dropout layer) over ``data``."""
    layer = net.dropout_layer() if layer is None else layer
    on = peak = ent_a = ent_p = 0.0
    for x, y in data.batches(batch_size):
        trace = forward(net, x)
        acts = trace.outputs[layer].reshape(len(y), -1)
        sal = excitation_backprop_batch(net, trace, priors_from_labels(y, net.num_classes), layer)
        on += float((acts > 0).sum())
        peak += float(sal.max(axis=1).sum())
        ent_a += float(row_entropies(acts).sum())
        ent_p += float(row_entropies(sal).sum())
    n = len(data)
    wl = weight_layer_for(net, layer)
    return UtilizationReport(
        neurons_on=on / n,
        peak_peb=peak / n,
        entropy_activations=ent_a / n,
        entropy_peb=ent_p / n,
        conservative_filters=conservative_filters(net, wl, delta),
        delta_threshold=float(delta),
        width=net.width(layer),
        total_filters=len(filter_deltas(net, wl)),
    )


# -- ablations --------------------------------------------------------------

@dataclass
class AblationCurve:
    mode: str
    points: list

    def __post_init__(self):
        xs = [p[0] for p in self.points]
        if any(b <= a for a, b in zip(xs, xs[1:])):
            raise ValidationError("ablation x values must be strictly increasing")

    @property
    def xs(self):
        return np.array([p[0] for p in self.points], dtype=np.float64)

    @property
    def ys(self):
        return np.array([p[1] for p in self.points], dtype=np.float64)

    def area(self):
        """Trapezoidal area under the curve."""
        x, y = self.xs, self.ys
        return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2))


def _check_grid(grid):
    grid = [float(g) for g in grid]
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValidationError("grid must be strictly increasing")
    return grid


def cumulative_drop_counts(sal, p_c):
    """Per row, size of the smallest top-saliency prefix whose mass reaches ``p_c``.

    Neurons are ranked by descending saliency, ties to the lower index.
    Returns the counts and the rank of every neuron.
    """
    order = np.argsort(-sal, axis=1, kind="stable")
    cum = np.cumsum(np.take_along_axis(sal, order, axis=1), axis=1)
    if p_c <= 0:
        k = np.zeros(len(sal), dtype=np.int64)
    else:
        k = np.minimum((cum < p_c).sum(axis=1) + 1, sal.shape[1])
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(sal.shape[1])[None].repeat(len(sal), 0), axis=1)
    return k, ranks


def _ablation_plan(layer, keep):
    return DropoutPlan(None, layer, keep, np.ones(keep.shape, np.float32))


def ablate_cumulative(net, data, layer=None, p_c_grid=None, batch_size=EVAL_BATCH):
    """Mean ground-truth probability after removing the most salient neurons."""
    layer = net.dropout_layer() if layer is None else layer
    grid = _check_grid(p_c_grid if p_c_grid is not None else np.round(np.arange(20) * 0.05, 2))
    if any(not 0 <= g < 1 for g in grid):
        raise ValidationError("p_c values must lie in [0, 1)")
    sums = np.zeros(len(grid))
    for x, y in data.batches(batch_size):
        trace = forward(net, x)
        sal = excitation_backprop_batch(net, trace, priors_from_labels(y, net.num_classes), layer)
        for gi, p_c in enumerate(grid):
            k, ranks = cumulative_drop_counts(sal, p_c)
            keep = ranks >= k[:, None]
            probs = forward_from(net, trace, _ablation_plan(layer, keep)).probs
            sums[gi] += float(_gt(probs, y).sum())
    return AblationCurve("cumulative", list(zip(grid, (sums / len(data)).tolist())))


def ablate_random(net, data, layer=None, k_grid=None, rng=None, trials=1, batch_size=EVAL_BATCH):
    """Mean ground-truth probability with ``k`` uniformly chosen neurons removed."""
    layer = net.dropout_layer() if layer is None else layer
    width = net.width(layer)
    grid = [int(k) for k in (k_grid if k_grid is not None else range(0, width + 1, max(1, width // 16)))]
    _check_grid(grid)
    if grid and (grid[0] < 0 or grid[-1] > width):
        raise ValidationError(f"k must lie in [0, {width}]")
    rng = rng if rng is not None else T.Rng(0)
    sums = np.zeros(len(grid))
    for x, y in data.batches(batch_size):
        trace = forward(net, x)
        for gi, k in enumerate(grid):
            for _ in range(trials):
                ranks = np.argsort(rng.uniform((len(y), width)), axis=1, kind="stable")
                keep = ranks >= k
                probs = forward_from(net, trace, _ablation_plan(layer, keep)).probs
                sums[gi] += float(_gt(probs, y).sum())
    return AblationCurve("random", list(zip(grid, (sums / (len(data) * trials)).tolist())))


def saliency_after_drop(net, image, label, k, drop_layer=None, map_layer=None):
    """Spatial saliency map at ``map_layer`` with the ``k`` most salient ``drop_layer`` neurons off."""
    drop_layer = net.dropout_layer() if drop_layer is None else drop_layer
    map_layer = net.last_conv_layer() if map_layer is None else map_layer
    if not 0 <= k <= net.width(drop_layer):
        raise ValidationError(f"k must lie in [0, {net.width(drop_layer)}]")
    prior = priors_from_labels([label], net.num_classes)
    trace = forward(net, image)
    sal = excitation_backprop_batch(net, trace, prior, drop_layer)
    order = np.argsort(-sal[0], kind="stable")
    keep = np.ones_like(sal, dtype=bool)
    keep[0, order[:k]] = False
    trace = forward_from(net, trace, _ablation_plan(drop_layer, keep))
    dist = excitation_backprop_batch(net, trace, prior, map_layer)[0]
    return spatial_saliency_map(dist, net.shapes[map_layer])


# -- file outputs -----------------------------------------------------------

def export_saliency_pgm(smap, path):
    """8-bit binary PGM, min-max normalised; a constant map becomes mid-grey."""
    m = np.asarray(smap, dtype=np.float64)
    if m.ndim != 2:
        raise ValidationError(f"saliency map must be 2-D, got {m.shape}")
    lo, hi = m.min(), m.max()
    if hi > lo:
        px = np.floor((m - lo) / (hi - lo) * 255.0)
    else:
        px = np.full(m.shape, 128.0)
    px = np.clip(px, 0, 255).astype(np.uint8)
    h, w = m.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(px.tobytes())


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_csv(rows, path, header):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv(path):
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r)
        return header, [row for row in r]


def write_run_cfg(values, path):
    with open(path, "w", newline="\n") as f:
        for k, v in values.items():
            f.write(f"{k}={'' if v is None else _fmt(v)}\n")


def read_run_cfg(path):
    out = {}
    with open(path) as f:
        for n, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValidationError(f"{path}:{n}: expected key=value")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def config_from_strings(values):
    """``TrainConfig`` from ``key=value`` strings, ignoring unrelated keys."""
    kwargs = {}
    for f in fields(TrainConfig):
        if f.name not in values:
            continue
        raw = values[f.name]
        if raw in ("", "None"):
            kwargs[f.name] = None
        elif f.name == "strategy":
            kwargs[f.name] = raw
        elif f.name in ("base_p", "gamma", "lr"):
            kwargs[f.name] = float(raw)
        else:
            kwargs[f.name] = int(raw)
    return TrainConfig(**kwargs)
