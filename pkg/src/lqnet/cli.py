"""Command-line surface.

Subcommands: quantize, infer, eval, train, inspect.  Exit codes are a
stable contract: 0 success, 2 file/format problems, 3 shape or contract
violations, 4 dataset mismatches, 5 internal invariant violations.

``train`` reads a plain key=value config file (unknown keys rejected;
command-line flags win over file values), writes an LQM checkpoint per
epoch, a metrics.csv log and rendered training-curve figures next to it.

All numeric output uses fixed formats so golden-file comparisons are
portable.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import converter, engine, model, oracle, trainer, zoo
from .errors import (
    ContractError,
    DataMismatchError,
    FormatError,
    InputDomainError,
    LqnetError,
)
from .model import LayerKind, ScaleMode, layer_stats

_SCALE_MODES = {"single": ScaleMode.SINGLE_STEP, "two": ScaleMode.TWO_STEP}

_TRAIN_KEYS = {
    "data_dir": str, "out_dir": str, "mode": str, "init": str,
    "epochs": int, "batch_size": int, "lr": float, "momentum": float,
    "weight_decay": float, "seed": int, "train_subset": int,
    "eval_subset": int, "init_epochs": int, "init_lr": float,
    "threads": int,
}

_TRAIN_DEFAULTS = {
    "data_dir": "", "out_dir": "runs/train", "mode": "qat", "init": "float",
    "epochs": 10, "batch_size": 64, "lr": 0.0002, "momentum": 0.9,
    "weight_decay": 0.0001, "seed": 0, "train_subset": 0, "eval_subset": 2000,
    "init_epochs": 6, "init_lr": 0.02, "threads": 1,
}


def _read_config(path) -> dict:
    values = {}
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{ln}: expected key=value")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in _TRAIN_KEYS:
            raise FormatError(f"{path}:{ln}: unknown config key '{key}'")
        try:
            values[key] = _TRAIN_KEYS[key](val)
        except ValueError as exc:
            raise FormatError(f"{path}:{ln}: bad value for {key}") from exc
    return values


def _load_input_tensor(path):
    path = Path(path)
    if path.suffix == ".ft":
        shape, values = engine.load_ft(path)
        codes = trainer.fixed_quantize_array(values).astype(np.int8)
        return engine.QTensor(shape, codes)
    return engine.load_qt(path)


def cmd_quantize(args) -> int:
    fm = model.load_fpm(args.fpm)
    cal_dir = Path(args.calibration)
    tensors = []
    for p in sorted(cal_dir.glob("*.ft")):
        _, values = engine.load_ft(p)
        tensors.append(values)
    if not tensors:
        raise ContractError(f"no .ft calibration tensors in {cal_dir}")
    factors = converter.calibrate_activations(fm, tensors)
    qm = converter.quantize_model(
        fm, tensors, _SCALE_MODES[args.scale_mode], factors=factors
    )
    model.save_lqm(args.out, qm)
    print("layer  kind             f_W      f_A      shift")
    for i, layer in enumerate(fm.layers):
        wexp = factors.weight_exp[i]
        aexp = factors.act_exp[i + 1]
        q = qm.layers[i]
        fw = "-" if wexp is None else f"2^{wexp}"
        shift = "-" if layer.spec.kind == LayerKind.MAXPOOL2D else (
            f"{q.shift1}" if args.scale_mode == "single"
            else f"({q.shift1},{q.shift2})"
        )
        print(f"{i:<6d} {layer.spec.kind.name:<16s} {fw:<8s} "
              f"2^{aexp:<6d} {shift}")
    for warning in factors.warnings:
        print(f"warning: {warning}")
    print(f"wrote {args.out}")
    return 0


def cmd_infer(args) -> int:
    m = model.load_lqm(args.model)
    qt = _load_input_tensor(args.input)
    out, trace = engine.run_model(
        m, qt, trace=args.trace, threads=args.threads
    )
    if args.oracle:
        ref = oracle.rational_quantized_forward(m, qt)
        if not np.array_equal(ref.data, out.data):
            diff = int(np.count_nonzero(ref.data != out.data))
            raise LqnetError(
                f"engine disagrees with rational oracle on {diff} elements"
            )
        print("oracle check: exact match")
    engine.save_qt(args.output, out)
    if trace is not None:
        base = Path(args.output)
        print("layer  output-shape        acc-min      acc-max")
        for i, (tens, (lo, hi)) in enumerate(
            zip(trace.layer_outputs, trace.acc_extrema)
        ):
            p = base.with_suffix(f".layer{i:02d}.qt")
            engine.save_qt(p, tens)
            shape = "x".join(str(d) for d in tens.shape)
            print(f"{i:<6d} {shape:<19s} {lo:<12d} {hi:<12d}")
    print(f"wrote {args.output}")
    return 0


def cmd_eval(args) -> int:
    m = model.load_lqm(args.model)
    images = trainer.load_idx_images(args.images)
    labels = trainer.load_idx_labels(args.labels)
    if len(images) != len(labels):
        raise DataMismatchError(
            f"{len(images)} images vs {len(labels)} labels"
        )
    codes = trainer.images_to_codes(images)
    result = trainer.evaluate(m, codes, labels, threads=args.threads)
    print(f"top1 = {100.0 * result['top1']:.3f}")
    return 0


def cmd_inspect(args) -> int:
    m = model.load_lqm(args.model)
    stats = model.model_stats(m)
    print("layer  kind             shape                weights  "
          "packed-B  shift      madds")
    cur = m.input_shape
    for i, layer in enumerate(m.layers):
        st = layer_stats(layer.spec, cur)
        shape = "x".join(str(d) for d in layer.spec.shape)
        if layer.spec.scale_mode == ScaleMode.TWO_STEP:
            shift = f"({layer.shift1},{layer.shift2})"
        elif layer.spec.kind == LayerKind.MAXPOOL2D:
            shift = "-"
        else:
            shift = str(layer.shift1)
        print(f"{i:<6d} {layer.spec.kind.name:<16s} {shape:<20s} "
              f"{st['weight_count']:<8d} {st['packed_weight_bytes']:<9d} "
              f"{shift:<10s} {st['madds']}")
        cur = st["output_shape"]
    print(f"total weights      : {stats['weight_count']}")
    print(f"packed weight bytes: {stats['packed_weight_bytes']}")
    print(f"weights (MB)       : {stats['packed_weight_bytes'] / 1e6:.2f}")
    print(f"bias bytes         : {stats['bias_bytes']}")
    print(f"shift-add ops/pass : {stats['total_madds']}")
    return 0


def _plot_metrics(history, out_png) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    epochs = [row["epoch"] for row in history]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    axes[0].plot(epochs, [row["loss"] for row in history], marker="o")
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("training loss")
    axes[0].grid(True, alpha=0.3)
    top1 = [row.get("top1") for row in history]
    if any(v is not None for v in top1):
        axes[1].plot(epochs, [100.0 * v if v is not None else np.nan
                              for v in top1], marker="o", color="tab:green")
    axes[1].set_xlabel("epoch")
    axes[1].set_ylabel("top-1 (%)")
    axes[1].grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def _load_mnist_style(data_dir: Path):
    def find(stem):
        for name in (stem, stem + ".gz"):
            p = data_dir / name
            if p.exists():
                return p
        raise FileNotFoundError(f"{data_dir} has no {stem}[.gz]")

    train_x = trainer.load_idx_images(find("train-images-idx3-ubyte"))
    train_y = trainer.load_idx_labels(find("train-labels-idx1-ubyte"))
    test_x = trainer.load_idx_images(find("t10k-images-idx3-ubyte"))
    test_y = trainer.load_idx_labels(find("t10k-labels-idx1-ubyte"))
    if len(train_x) != len(train_y) or len(test_x) != len(test_y):
        raise DataMismatchError("image/label counts differ")
    return train_x, train_y, test_x, test_y


def cmd_train(args) -> int:
    cfg = dict(_TRAIN_DEFAULTS)
    if args.config:
        cfg.update(_read_config(args.config))
    for key in ("data_dir", "out_dir", "epochs", "batch_size", "seed",
                "threads"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if not cfg["data_dir"]:
        raise ContractError("train needs data_dir (config key or --data-dir)")
    if cfg["mode"] not in ("qat", "float"):
        raise FormatError(f"mode must be qat or float, got '{cfg['mode']}'")
    if cfg["init"] not in ("float", "cold"):
        raise FormatError(f"init must be float or cold, got '{cfg['init']}'")

    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    train_x, train_y, test_x, test_y = _load_mnist_style(Path(cfg["data_dir"]))
    if cfg["train_subset"]:
        train_x, train_y = train_x[:cfg["train_subset"]], \
            train_y[:cfg["train_subset"]]
    eval_n = cfg["eval_subset"] or len(test_x)
    inputs = trainer.decode_fixed_array(trainer.images_to_codes(train_x))
    eval_inputs = trainer.decode_fixed_array(
        trainer.images_to_codes(test_x[:eval_n])
    )
    eval_targets = test_y[:eval_n]

    quantized = cfg["mode"] == "qat"
    rng = np.random.default_rng(cfg["seed"])
    specs = zoo.lenet5_specs()
    if quantized and cfg["init"] == "float":
        shadows = _float_pretrain(inputs, train_y, cfg, rng)
    else:
        shadows = trainer.ShadowParams.cold_start(
            zoo.LENET_INPUT_SHAPE, specs, rng
        )

    tc = trainer.TrainConfig(
        lr=cfg["lr"], momentum=cfg["momentum"],
        weight_decay=cfg["weight_decay"], batch_size=cfg["batch_size"],
        epochs=cfg["epochs"], seed=cfg["seed"],
    )

    csv_path = out_dir / "metrics.csv"
    checkpoint = out_dir / "checkpoint.lqm"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "top1"])

        def on_epoch(row):
            writer.writerow([row["epoch"], f"{row['loss']:.6f}",
                             f"{row.get('top1', float('nan')):.6f}"])
            fh.flush()
            model.save_lqm(checkpoint, shadows.export())
            print(f"epoch {row['epoch']:>3d}  loss {row['loss']:.6f}  "
                  f"top1 {100.0 * row.get('top1', float('nan')):.3f}")

        shadows, qm, history = trainer.train(
            shadows, inputs, train_y, tc, quantized=quantized,
            eval_set=(eval_inputs, eval_targets), on_epoch=on_epoch,
        )
    model.save_lqm(out_dir / "model.lqm", qm)
    if history:
        _plot_metrics(history, out_dir / "metrics.png")
    print(f"wrote {out_dir / 'model.lqm'}")
    return 0


def _float_pretrain(inputs, targets, cfg, rng):
    """Train a float model briefly, then hand over calibrated shadows."""
    specs = zoo.lenet5_specs()
    shadows = trainer.ShadowParams.cold_start(
        zoo.LENET_INPUT_SHAPE, specs, rng
    )
    tc = trainer.TrainConfig(
        lr=cfg["init_lr"], momentum=cfg["momentum"],
        weight_decay=cfg["weight_decay"], batch_size=cfg["batch_size"],
        epochs=cfg["init_epochs"], seed=cfg["seed"] + 1,
    )
    print(f"float pre-training: {tc.epochs} epochs")
    trainer.train(shadows, inputs, targets, tc, quantized=False)
    fm = _shadows_to_float(shadows)
    cal = [inputs[i] for i in
           rng.choice(len(inputs), size=min(256, len(inputs)), replace=False)]
    return trainer.ShadowParams.from_float(fm, cal)


def _shadows_to_float(shadows):
    layers = []
    for spec, w, b in zip(shadows.specs, shadows.weights, shadows.biases):
        layers.append(model.FloatLayer(spec, w.reshape(-1), b))
    return model.FloatModel(shadows.input_shape, layers)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lqnet",
        description="Multiplier-free CNN pipeline: quantize, run, train.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("quantize", help="convert an FPM float model to LQM")
    p.add_argument("fpm")
    p.add_argument("calibration", help="directory of .ft calibration tensors")
    p.add_argument("out")
    p.add_argument("--scale-mode", choices=("single", "two"),
                   default="single")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("infer", help="run a model on one tensor")
    p.add_argument("model")
    p.add_argument("input", help=".qt codes or .ft floats")
    p.add_argument("output", help="output .qt path")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--trace", action="store_true")
    p.add_argument("--oracle", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="top-1 accuracy over an IDX dataset")
    p.add_argument("model")
    p.add_argument("images")
    p.add_argument("labels")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("train", help="train the bundled LeNet on IDX data")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--data-dir", dest="data_dir")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("inspect", help="layer table and storage stats")
    p.add_argument("model")
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ContractError, InputDomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except DataMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except LqnetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
