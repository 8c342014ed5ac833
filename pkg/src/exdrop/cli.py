"""Command-line front end.

Exit codes: 0 success, 1 usage or validation error, 2 I/O or format error.
"""

import argparse
import os
import sys

from . import harness as H
from .dropout import Strategy
from .exceptions import FormatError, ValidationError
from .network import ARCHITECTURES, load_checkpoint, save_checkpoint
from .tensor import Rng

DEFAULT_P_C = [round(0.05 * i, 2) for i in range(20)]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# Defaults live here rather than in argparse so that a --config file can sit
# between them and explicit flags.
TRAIN_DEFAULTS = {
    "data": None,
    "arch": "auto",
    "hidden": 64,
    "strategy": "excitation",
    "p": 0.5,
    "gamma": 5e-4,
    "layer": None,
    "lr": 1e-3,
    "lr_drop_iter": 2500,
    "batch_size": 100,
    "iters": 5000,
    "seed": 0,
    "eval_every": 500,
    "train_size": 5000,
    "test_size": 1000,
    "data_seed": 0,
    "out": None,
    "out_dir": None,
}

_TYPES = {
    "hidden": int, "p": float, "gamma": float, "layer": int, "lr": float,
    "lr_drop_iter": int, "batch_size": int, "iters": int, "seed": int,
    "eval_every": int, "train_size": int, "test_size": int, "data_seed": int,
}


def _float_list(text):
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"malformed grid {text!r}") from None


def _strategy(text):
    try:
        return Strategy.parse(text).value
    except ValidationError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def _data_flags(p, need_ckpt=True):
    if need_ckpt:
        p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="CIFAR-10 directory or 'blobs[:key=val,...]'")
    p.add_argument("--train-size", type=int, default=5000)
    p.add_argument("--test-size", type=int, default=1000)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--out-dir", default=None)


def build_parser():
    parser = _Parser(prog="exdrop", description="Excitation Dropout experiments")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    t = sub.add_parser("train", help="train a network")
    t.add_argument("--config")
    t.add_argument("--data")
    t.add_argument("--arch", choices=["auto", *ARCHITECTURES])
    t.add_argument("--hidden", type=int)
    t.add_argument("--strategy", type=_strategy)
    t.add_argument("--p", type=float)
    t.add_argument("--gamma", type=float)
    t.add_argument("--layer", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lr-drop-iter", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--iters", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--eval-every", type=int)
    t.add_argument("--train-size", type=int)
    t.add_argument("--test-size", type=int)
    t.add_argument("--data-seed", type=int)
    t.add_argument("--out")
    t.add_argument("--out-dir")

    e = sub.add_parser("eval", help="test accuracy of a checkpoint")
    _data_flags(e)

    m = sub.add_parser("metrics", help="utilisation metrics at the dropout layer")
    _data_flags(m)
    m.add_argument("--delta", type=_float_list, default=[0.25],
                   help="conservative-filter threshold(s), comma separated")
    m.add_argument("--layer", type=int)
    m.add_argument("--label", help="strategy column value (default: from run.cfg)")

    a = sub.add_parser("ablate", help="test-time neuron removal curves")
    _data_flags(a)
    a.add_argument("--mode", choices=["cumulative", "random"], required=True)
    a.add_argument("--grid", type=_float_list)
    a.add_argument("--layer", type=int)
    a.add_argument("--trials", type=int, default=1)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--ablate-samples", type=int, help="use only the first N test samples")

    s = sub.add_parser("saliency", help="saliency map after removing top neurons")
    _data_flags(s)
    s.add_argument("--sample", type=int, default=0)
    s.add_argument("--drop-top", type=int, default=0)
    s.add_argument("--out", required=True)
    return parser


def load_data(source, train_size=None, test_size=None, seed=0):
    """Datasets named by a ``--data`` value."""
    if source.startswith("blobs"):
        kw = {"num_classes": 3, "per_class": 100, "dims": 2, "spread": 0.5}
        if ":" in source:
            for item in source.split(":", 1)[1].split(","):
                k, _, v = item.partition("=")
                if k not in kw:
                    raise ValidationError(f"unknown blobs option {k!r}")
                kw[k] = float(v) if k == "spread" else int(v)
        return H.make_blobs(seed=seed, **kw)
    if not os.path.isdir(source):
        raise FileNotFoundError(f"data directory not found: {source}")
    return H.load_cifar10(source, train_size, test_size, seed)


def _resolve_train(args):
    cfg = dict(TRAIN_DEFAULTS)
    if args.config:
        for k, v in H.read_run_cfg(args.config).items():
            if k not in cfg:
                raise ValidationError(f"unknown config key {k!r}")
            cfg[k] = None if v in ("", "None") else _TYPES.get(k, str)(v)
    for k in TRAIN_DEFAULTS:
        v = getattr(args, k)
        if v is not None:
            cfg[k] = v
    if cfg["data"] is None or cfg["out"] is None:
        raise UsageError("train requires --data and --out")
    cfg["strategy"] = Strategy.parse(cfg["strategy"]).value
    if cfg["out_dir"] is None:
        cfg["out_dir"] = os.path.dirname(os.path.abspath(cfg["out"]))
    return cfg


def _echo(cfg):
    for k, v in cfg.items():
        print(f"{k}={'' if v is None else v}")


def cmd_train(args):
    cfg = _resolve_train(args)
    _echo(cfg)
    train, test = load_data(cfg["data"], cfg["train_size"], cfg["test_size"], cfg["data_seed"])
    arch = cfg["arch"]
    if arch == "auto":
        arch = "mlp" if train.input_shape[1:] == (1, 1) else "cnn2"
    rng = Rng(cfg["seed"])
    kw = {"hidden": cfg["hidden"]} if arch == "mlp" else {}
    net = ARCHITECTURES[arch](train.num_classes, train.input_shape, rng.spawn(0), **kw)
    tcfg = H.TrainConfig(
        strategy=cfg["strategy"], base_p=cfg["p"], gamma=cfg["gamma"], layer_index=cfg["layer"],
        lr=cfg["lr"], lr_drop_iter=cfg["lr_drop_iter"], batch_size=min(cfg["batch_size"], len(train)),
        iters=cfg["iters"], seed=cfg["seed"], eval_every=cfg["eval_every"],
    )
    os.makedirs(cfg["out_dir"], exist_ok=True)
    H.write_run_cfg(cfg, os.path.join(cfg["out_dir"], "run.cfg"))

    def report(it, loss, acc):
        print(f"iter={it} loss={loss:.6f} test_acc={acc:.6f}", flush=True)

    tlog = H.train(net, train, tcfg, rng, test=test, on_eval=report)
    save_checkpoint(net, cfg["out"])
    H.write_csv(tlog.records, os.path.join(cfg["out_dir"], "accuracy.csv"),
                ["iter", "train_loss", "test_acc"])
    return 0


def _common(args):
    for k in ("ckpt", "data", "train_size", "test_size", "data_seed"):
        print(f"{k}={getattr(args, k)}")
    net = load_checkpoint(args.ckpt)
    _, test = load_data(args.data, args.train_size, args.test_size, args.data_seed)
    out_dir = args.out_dir or os.path.dirname(os.path.abspath(args.ckpt))
    os.makedirs(out_dir, exist_ok=True)
    return net, test, out_dir


def cmd_eval(args):
    net, test, _ = _common(args)
    acc, gt = H.evaluate(net, test)
    print(f"test_acc={acc:.6f} mean_gt_prob={gt:.6f}")
    return 0


def cmd_metrics(args):
    net, test, out_dir = _common(args)
    label = args.label
    if label is None:
        run_cfg = os.path.join(os.path.dirname(os.path.abspath(args.ckpt)), "run.cfg")
        label = H.read_run_cfg(run_cfg).get("strategy", "unknown") if os.path.exists(run_cfg) else "unknown"
    rows = []
    for delta in args.delta:
        r = H.utilization(net, test, args.layer, delta)
        rows.append([label, r.neurons_on, r.peak_peb, r.entropy_activations, r.entropy_peb,
                     r.conservative_filters, r.delta_threshold])
        print(f"strategy={label} neurons_on={r.neurons_on:.3f} peak_peb={r.peak_peb:.6f} "
              f"entropy_act_nats={r.entropy_activations:.4f} entropy_peb_nats={r.entropy_peb:.4f} "
              f"conservative_filters={r.conservative_filters} delta={delta}")
    H.write_csv(rows, os.path.join(out_dir, "metrics.csv"),
                ["strategy", "neurons_on", "peak_peb", "entropy_act", "entropy_peb",
                 "conservative_filters", "delta"])
    return 0


def cmd_ablate(args):
    net, test, out_dir = _common(args)
    if args.ablate_samples is not None:
        n = args.ablate_samples
        if n < 1:
            raise ValidationError("--ablate-samples must be >= 1")
        test = H.Dataset(test.images[:n], test.labels[:n], test.split, test.num_classes)
    if args.mode == "cumulative":
        curve = H.ablate_cumulative(net, test, args.layer, args.grid or DEFAULT_P_C)
    else:
        layer = net.dropout_layer() if args.layer is None else args.layer
        grid = args.grid
        if grid is not None:
            if any(g != int(g) for g in grid):
                raise ValidationError("random-mode grid values must be integers")
            grid = [int(g) for g in grid]
        curve = H.ablate_random(net, test, layer, grid, Rng(args.seed), args.trials)
    for x, y in curve.points:
        print(f"x={x} mean_gt_prob={y:.6f}")
    H.write_csv(curve.points, os.path.join(out_dir, f"ablation_{args.mode}.csv"),
                ["x", "mean_gt_prob"])
    return 0


def cmd_saliency(args):
    net, test, _ = _common(args)
    if not 0 <= args.sample < len(test):
        raise ValidationError(f"--sample must lie in [0, {len(test)})")
    smap = H.saliency_after_drop(net, test.images[args.sample], int(test.labels[args.sample]),
                                 args.drop_top)
    H.export_saliency_pgm(smap, args.out)
    print(f"wrote {args.out} ({smap.shape[0]}x{smap.shape[1]})")
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "metrics": cmd_metrics,
            "ablate": cmd_ablate, "saliency": cmd_saliency}


def main(argv=None):
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        if not argv:
            raise UsageError(parser.format_help())
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    except FormatError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValidationError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
