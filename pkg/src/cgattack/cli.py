"""Command-line entry point: ``cgattack <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from . import io
from .attack import TRANSFER_MODES, AttackConfig
from .classifier import ARCHS, AdvLossSpec, TrainConfig, train_classifier
from .data import DataConfig, train_test
from .energy import KLTrainConfig, pretrain_flow
from .experiment import (ExperimentReport, run_campaign, run_experiment, verify_assumption1,
                         verify_report)
from .flow import FlowConfig
from .latent import DctDecoder, default_scale


def _common(p: argparse.ArgumentParser, *names: str) -> None:
    defaults = {
        "seed": dict(type=int, default=0),
        "epsilon": dict(type=float, default=0.1, help="l-infinity radius"),
        "ratio": dict(type=float, default=0.5, help="DCT downsampling ratio r"),
        "budget": dict(type=int, default=2000, help="queries per image"),
        "mode": dict(default="untargeted", help="untargeted or targeted:<t>"),
        "transfer": dict(choices=TRANSFER_MODES, default="partial"),
        "pop": dict(type=int, default=20, help="CMA-ES population"),
        "lambda": dict(type=float, default=200.0, dest="lam", help="energy temperature"),
        "out": dict(required=True, help="output path"),
    }
    for name in names:
        p.add_argument(f"--{name}", **defaults[name])


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cgattack", description="Flow-guided query attacks at desk scale.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic train/test dataset pair")
    _common(p, "seed", "out")
    p.add_argument("--test-out", help="also write a test split here")
    p.add_argument("--num-classes", type=int, default=8)
    p.add_argument("--n-per-class", type=int, default=200)
    p.add_argument("--n-test-per-class", type=int, default=50)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--channels", type=int, default=1)

    p = sub.add_parser("train-classifier", help="train one classifier checkpoint")
    _common(p, "seed", "out")
    p.add_argument("--data", required=True)
    p.add_argument("--test-data")
    p.add_argument("--arch", choices=ARCHS, required=True)
    p.add_argument("--epochs", type=int, default=12)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--batch", type=int, default=64)

    p = sub.add_parser("pretrain-flow", help="fit the conditional flow on surrogate classifiers")
    _common(p, "seed", "epsilon", "ratio", "mode", "lambda", "out")
    p.add_argument("--data", required=True)
    p.add_argument("--surrogates", nargs="+", required=True, help="classifier checkpoints")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--K", type=int, default=32)
    p.add_argument("--lr", type=float, default=5e-3)
    p.add_argument("--batch-images", type=int, default=4)
    p.add_argument("--pixel-std", type=float, default=1.0,
                   help="pixel std of a standard-normal latent, in units of epsilon")
    p.add_argument("--log", help="write per-step training records (NDJSON)")

    p = sub.add_parser("attack", help="attack a dataset with a pretrained flow")
    _common(p, "seed", "epsilon", "ratio", "budget", "mode", "transfer", "pop", "out")
    p.add_argument("--target", required=True, help="classifier checkpoint")
    p.add_argument("--flow", required=True, help="flow checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--n-images", type=int)
    p.add_argument("--step0", type=float, default=1.0)

    p = sub.add_parser("run", help="run a campaign from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="print and verify a campaign report")
    p.add_argument("report")

    p = sub.add_parser("verify-assumption", help="compare two flows and measure one-shot transfer")
    _common(p, "seed", "epsilon")
    p.add_argument("--flow-a", required=True)
    p.add_argument("--flow-b", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--target")
    p.add_argument("--n-images", type=int, default=50)
    p.add_argument("--samples", type=int, default=64)

    sub.add_parser("selftest", help="run the built-in oracle checks")
    return ap


def _cmd_gen_data(a) -> dict:
    cfg = DataConfig(a.num_classes, a.n_per_class, a.size, a.size, a.channels, a.seed)
    train, test = train_test(cfg, a.n_test_per_class)
    io.save_dataset(train, a.out)
    if a.test_out:
        io.save_dataset(test, a.test_out)
    return {"train": a.out, "test": a.test_out, "train_size": len(train), "test_size": len(test)}


def _cmd_train(a) -> dict:
    ds = io.load_dataset(a.data)
    test = io.load_dataset(a.test_data, "test") if a.test_data else None
    model, rep = train_classifier(ds.images, ds.labels, a.arch, TrainConfig(a.epochs, a.lr, a.batch, a.seed),
                                  ds.num_classes, None if test is None else (test.images, test.labels))
    io.save_classifier(model, a.out)
    return {"out": a.out, "train_accuracy": rep.train_accuracy, "test_accuracy": rep.test_accuracy}


def _cmd_pretrain(a) -> dict:
    ds = io.load_dataset(a.data)
    surrogates = [io.load_classifier(p) for p in a.surrogates]
    h, w, c = ds.image_shape
    if h != w:
        raise ValueError("the DCT decoder needs square images")
    d_r = DctDecoder(h, a.ratio, c, 1.0).subspace.d_r
    decoder = DctDecoder(h, a.ratio, c, a.pixel_std * 3.0 * default_scale(a.epsilon, h, d_r))
    cfg = KLTrainConfig(K=a.K, steps=a.steps, lr=a.lr, batch_images=a.batch_images, seed=a.seed)
    res = pretrain_flow(surrogates, ds.images, ds.labels, decoder, cfg, AdvLossSpec.parse(a.mode, a.epsilon),
                        lam=a.lam, flow_config=FlowConfig(decoder.latent_shape, decoder.cond_channels))
    io.save_flow(res.flow, decoder, a.out)
    if a.log:
        res.write_log(a.log)
    return {"out": a.out, "steps": len(res.log), "aborted": res.aborted}


def _cmd_attack(a) -> dict:
    target = io.load_classifier(a.target)
    flow, decoder = io.load_flow(a.flow)
    data = io.load_dataset(a.data, "test")
    n = len(data) if a.n_images is None else a.n_images
    cfg = AttackConfig(budget=a.budget, epsilon=a.epsilon, mode=a.mode, pop=a.pop, r=a.ratio,
                       transfer_mode=a.transfer, seed=a.seed, step0=a.step0)
    report, totals = run_campaign(target, flow, decoder, data.images[:n], data.labels[:n], cfg)
    report.save(a.out)
    print(report.table())
    return {"out": a.out, "asr": report.asr, "queries": totals.queries, "infeasible": totals.infeasible}


def _cmd_run(a) -> dict:
    report = run_experiment(a.config)
    report.save(a.out)
    print(report.table())
    return {"out": a.out, "asr": report.asr}


def _cmd_report(a) -> dict:
    report = ExperimentReport.load(a.report)
    print(report.table())
    ok = verify_report(report)
    if not ok:
        raise ValueError("report summary does not match its per-example records")
    return {"verified": ok}


def _cmd_verify(a) -> dict:
    flow_a, decoder = io.load_flow(a.flow_a)
    flow_b, _ = io.load_flow(a.flow_b)
    probe = io.load_dataset(a.data, "test")
    probe = probe.subset(np.arange(min(a.n_images, len(probe))))
    target = io.load_classifier(a.target) if a.target else None
    return verify_assumption1(flow_a, flow_b, decoder, probe, target, a.epsilon, a.samples, a.seed)


def _cmd_selftest(a) -> dict:
    from .selftest import run_all

    results = run_all()
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
    failed = [name for name, ok, _ in results if not ok]
    if failed:
        raise AssertionError(f"self-test failures: {failed}")
    return {"passed": len(results)}


COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train-classifier": _cmd_train,
    "pretrain-flow": _cmd_pretrain,
    "attack": _cmd_attack,
    "run": _cmd_run,
    "report": _cmd_report,
    "verify-assumption": _cmd_verify,
    "selftest": _cmd_selftest,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = COMMANDS[args.command](args)
    except Exception as exc:  # reported as JSON with a nonzero exit
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps(result, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
