"""Command-line entry point: ``bpa <command> [--config FILE] [flags]``.

Experiment commands read an optional key=value file; flags override its values.
On failure the exit code is nonzero and the message names the failing stage.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data, harness
from .attacks import attack, draw_targets
from .models import REGISTRY, build
from .train import TrainConfig, train
from .weights import save_weights

log = logging.getLogger("bpa")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage} failed: {cause}")
        self.stage = stage


@contextmanager
def stage(name: str):
    try:
        yield
    except StageError:
        raise
    except Exception as e:  # noqa: BLE001 - reported with the stage name
        raise StageError(name, e) from e


# ---------------------------------------------------------------------------
# argument parsing

# flag name -> settings key
EXPERIMENT_FLAGS = {
    "--surrogate": "surrogate",
    "--surrogate-weights": "surrogate_weights",
    "--victims": "victims",
    "--models-dir": "models_dir",
    "--data-dir": "data_dir",
    "--policy": "policy",
    "--policies": "policies",
    "--method": "method",
    "--epsilon": "epsilon",
    "--alpha": "alpha",
    "--iters": "iters",
    "--mu": "mu",
    "--vmi-samples": "vmi_samples",
    "--vmi-beta": "vmi_beta",
    "--temperature": "temperature",
    "--relu-start": "relu_start",
    "--blocks": "blocks",
    "--gamma": "gamma",
    "--lambda": "lambda",
    "--mask-prob": "mask_prob",
    "--mask-stage": "mask_stage",
    "--recover-prob": "relu_recover_prob",
    "--pool-recover-prob": "pool_recover_prob",
    "--dim-prob": "dim_prob",
    "--dim-canvas": "dim_canvas",
    "--tim-size": "tim_size",
    "--tim-sigma": "tim_sigma",
    "--seed": "seed",
    "--n": "n",
    "--workers": "workers",
    "--chunk": "chunk",
    "--step": "step",
    "--out": "out",
}
SWITCHES = {"--targeted": "targeted", "--dim": "dim", "--tim": "tim"}


def _experiment_parser(sub, name: str, help_: str):
    p = sub.add_parser(name, help=help_)
    p.add_argument("--config", help="key=value experiment file; flags override it")
    for flag, key in EXPERIMENT_FLAGS.items():
        p.add_argument(flag, dest=key, default=None)
    for flag, key in SWITCHES.items():
        p.add_argument(flag, dest=key, action="store_const", const="true", default=None)
    p.add_argument("--random-init", dest="random_init", action="store_const", const="true", default=None)
    p.add_argument("--no-random-init", dest="random_init", action="store_const", const="false")
    if name == "sweep":
        p.add_argument("--sweep", dest="sweep", default=None, help="param=v1,v2,... e.g. mask_prob=0,0.5,1")
    return p


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bpa", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one architecture and write a BPAW weight file")
    t.add_argument("--arch", required=True, choices=sorted(REGISTRY))
    t.add_argument("--data-dir")
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--lr", type=float, default=0.05)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--weight-decay", type=float, default=5e-4)
    t.add_argument("--batch-size", type=int, default=128)
    t.add_argument("--limit", type=int, default=None, help="train on the first N images only")
    t.add_argument("--no-augment", action="store_true")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)

    s = sub.add_parser("synth-data", help="write a synthetic dataset in CIFAR-10 binary layout")
    s.add_argument("--out", required=True)
    s.add_argument("--n-train", type=int, default=10000)
    s.add_argument("--n-test", type=int, default=2000)
    s.add_argument("--seed", type=int, default=0)

    _experiment_parser(sub, "attack", "attack the eval set on the surrogate; per-image CSV")
    _experiment_parser(sub, "transfer", "transfer success rates for one policy")
    _experiment_parser(sub, "sweep", "success rates over a grid of one policy parameter")
    _experiment_parser(sub, "ablate", "ReLU x max-pool on/off grid")
    _experiment_parser(sub, "relevance", "mean gradient relevance per policy")
    return ap


def settings_from_args(args) -> dict:
    settings: dict = {}
    if getattr(args, "config", None):
        settings.update(harness.read_kv(args.config))
    for key in list(EXPERIMENT_FLAGS.values()) + list(SWITCHES.values()) + ["random_init"]:
        v = getattr(args, key, None)
        if v is not None:
            settings[key] = v
    sweep = getattr(args, "sweep", None)
    if sweep:
        if "=" not in sweep:
            raise harness.HarnessError(f"--sweep expects param=v1,v2,..., got {sweep!r}")
        settings["sweep_param"], settings["sweep_values"] = sweep.split("=", 1)
    if "sweep" in settings and "sweep_param" not in settings:
        settings["sweep_param"], settings["sweep_values"] = str(settings.pop("sweep")).split("=", 1)
    if getattr(args, "command", None) == "sweep":
        settings.setdefault("n", 500)  # sweeps run many grid points
    return settings


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    with stage("write dataset"):
        root = data.write_synthetic(args.out, args.n_train, args.n_test, args.seed)
    print(f"wrote synthetic CIFAR-format dataset to {root}")
    return 0


def cmd_train(args) -> int:
    with stage("load data"):
        x, y = data.load_cifar10(args.data_dir, "train")
        xt, yt = data.load_cifar10(args.data_dir, "test")
        if args.limit is not None:
            x, y = x[: args.limit], y[: args.limit]
    with stage("train"):
        model = build(args.arch)
        cfg = TrainConfig(args.epochs, args.lr, args.momentum, args.weight_decay, args.batch_size,
                          augment=not args.no_augment, seed=args.seed)
        store = train(model, (x, y), (xt, yt), cfg, progress=lambda m: print(m, file=sys.stderr))
    with stage("write weights"):
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        save_weights(store, args.out)
    print(f"{args.arch}: clean test accuracy {100 * store.meta['clean_accuracy']:.2f}% -> {args.out}")
    return 0


def _prepare(args):
    with stage("read config"):
        spec = harness.spec_from_settings(settings_from_args(args))
    with stage("load models"):
        for ref in (spec.surrogate,) + spec.victims:
            harness.load_model(ref)
    with stage("load data"):
        harness._test_split(spec.data_dir)
    return spec


def _emit(text: str, out) -> None:
    with stage("write output"):
        if out:
            Path(out).parent.mkdir(parents=True, exist_ok=True)
            Path(out).write_text(text)
        else:
            sys.stdout.write(text)


def cmd_attack(args) -> int:
    spec = _prepare(args)
    with stage("select eval set"):
        ids, x, y = harness.eval_set(spec)
    with stage("attack"):
        model, weights = harness.load_model(spec.surrogate)
        policy = harness.expand_preset(spec.policy, model, spec.options)
        targets = draw_targets(y, ids, spec.attack.seed) if spec.attack.targeted else None
        preds, linf = [], []
        for sl in harness._chunks(len(ids), spec.chunk):
            res = attack(model, weights, policy, x[sl], spec.attack, y[sl],
                         None if targets is None else targets[sl], ids[sl])
            preds.append(res.prediction)
            linf.append(np.abs(res.adv - x[sl]).reshape(len(res.adv), -1).max(axis=1))
        pred, linf = np.concatenate(preds), np.concatenate(linf)
    buf = io.StringIO()
    header = harness._header(spec, "attack", {spec.policy: policy})
    for k, v in header.items():
        buf.write(f"# {k}={v}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["image", "label", "target", "prediction", "success", "linf"])
    for i in range(len(ids)):
        tgt = "" if targets is None else int(targets[i])
        ok = pred[i] == targets[i] if targets is not None else pred[i] != y[i]
        w.writerow([int(ids[i]), int(y[i]), tgt, int(pred[i]), int(ok), f"{linf[i] * 255:.4f}/255"])
    _emit(buf.getvalue(), spec.out)
    return 0


def _run(kind: str, args) -> int:
    spec = _prepare(args)
    out = spec.out
    spec = replace(spec, out=None)
    with stage(f"run {kind}"):
        if kind == "transfer":
            text = harness.run_transfer(spec).to_csv()
        elif kind == "sweep":
            text = harness.run_sweep(spec).to_long_csv()
        elif kind == "ablate":
            text = harness.run_ablation_grid(spec).to_csv()
        else:
            text = harness.run_relevance(spec).to_csv()
    _emit(text, out)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "synth-data":
            return cmd_synth(args)
        if args.command == "train":
            return cmd_train(args)
        if args.command == "attack":
            return cmd_attack(args)
        return _run(args.command, args)
    except StageError as e:
        print(f"bpa {args.command}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
