"""Command-line front end: ``embdyn {train,simulate,eval,gradcheck}``.

Exit codes: 0 success, 1 invalid configuration or unreadable input,
2 numerical-check failure.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from pathlib import Path

from . import reporting as rep
from .checkpoint import CheckpointError, load_state, save_state
from .config import ConfigError, RunConfig, dump_config, load_config, rng_stream
from .dynamics import TRAJECTORY_COLUMNS, init_system, run_simulation
from .evaluation import ProbeConfig, knn_classify, linear_probe
from .gradcheck import Sizes, format_table, run_gradcheck, select_cases
from .losses import LossWeights
from .train import TRAIN_COLUMNS, build_datasets, eval_features, train

logger = logging.getLogger("embdyn")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2

EVAL_COLUMNS = ("protocol", "accuracy", "eval_features", "knn_k", "seed", "checkpoint_sha256")
SVG_COLUMNS = TRAJECTORY_COLUMNS[1:]


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; here 2 means a failed numerical check."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="config file (sectioned key = value)")
    p.add_argument("--seed", type=int, help="master seed (overrides run.seed)")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE", help="section.key=value, repeatable")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="embdyn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _common(sub.add_parser("train", help="self-supervised training run"))
    _common(sub.add_parser("simulate", help="network-free particle simulation"))
    ev = sub.add_parser("eval", help="kNN / linear-probe evaluation of a checkpoint")
    _common(ev)
    ev.add_argument("--checkpoint", type=Path, required=True)
    ev.add_argument("--protocol", choices=("knn", "linear", "both"))
    gc = sub.add_parser("gradcheck", help="finite-difference check of every op and loss")
    _common(gc)
    gc.add_argument("--ops", help="comma-separated op names (default: all); empty string checks nothing")
    gc.add_argument("--sizes", help="n,K,d of the random instances")
    return parser


def _config(args) -> RunConfig:
    overrides = list(args.override)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    return load_config(args.config, overrides)


def cmd_train(cfg: RunConfig, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(dump_config(cfg), encoding="utf-8")
    metrics = out / "metrics.csv"
    rep.write_csv(metrics, TRAIN_COLUMNS, [], rep.TRAIN_SCHEMA)

    def on_row(row):
        rep.append_csv(metrics, TRAIN_COLUMNS, [row], rep.TRAIN_SCHEMA)

    result = train(cfg, on_row=on_row)
    save_state(out / "checkpoint_init.bin", result.initial_state)
    save_state(out / "checkpoint_final.bin", result.state)
    print(f"wrote {metrics} ({len(result.rows)} epochs) and checkpoints to {out}")
    return EXIT_OK


def cmd_simulate(cfg: RunConfig, out: Path) -> int:
    s = cfg.simulate
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(dump_config(cfg), encoding="utf-8")
    weights = LossWeights(K=s.K, lambda_s=s.lambda_s, lambda_b=s.lambda_b, lambda_c=s.lambda_c)
    system = init_system(
        s.n, s.K, s.d, weights, rng_stream(cfg.run.seed, "init"), init=s.init, scale=s.init_scale,
        tau=s.tau, step_size=s.step_size, momentum=s.momentum, seed=cfg.run.seed,
    )
    system.rng = rng_stream(cfg.run.seed, "noise")
    result = run_simulation(system, s.steps, dump_path=out / "final_state.bin")
    text = rep.csv_text(TRAJECTORY_COLUMNS, result.rows, rep.SIMULATE_SCHEMA)
    (out / "trajectory.csv").write_text(text, encoding="utf-8", newline="")
    if s.svg:
        for col, svg in rep.svgs_from_csv(text, "step", SVG_COLUMNS).items():
            (out / f"trajectory_{col}.svg").write_text(svg, encoding="utf-8")
    last = result.rows[-1]
    print(
        f"step {last['step']}: mean_pairwise_dist={last['mean_pairwise_dist']:.6g} "
        f"within_group_spread={last['within_group_spread']:.6g} "
        f"sigma=[{last['sigma_min']:.6g}, {last['sigma_max']:.6g}]"
    )
    return EXIT_OK


def cmd_eval(cfg: RunConfig, out: Path, checkpoint: Path, protocol: str | None) -> int:
    state = load_state(checkpoint)
    train_ds, test_ds = build_datasets(cfg)
    if state.spec.input_dim != train_ds.input_dim:
        raise CheckpointError(
            f"checkpoint expects input width {state.spec.input_dim}, dataset has {train_ds.input_dim}"
        )
    protocol = protocol or cfg.eval.protocol
    f_train = eval_features(state, train_ds.flat(), cfg)
    f_test = eval_features(state, test_ds.flat(), cfg)
    digest = hashlib.sha256(checkpoint.read_bytes()).hexdigest()[:16]
    rows = []
    if protocol in ("knn", "both"):
        acc = knn_classify(
            f_train, train_ds.labels, f_test, test_ds.labels, k=min(cfg.eval.knn_k, len(train_ds)),
            weighted=cfg.eval.knn_weighted, temperature=cfg.eval.knn_temperature,
        )
        rows.append({"protocol": f"knn{cfg.eval.knn_k}", "accuracy": acc})
    if protocol in ("linear", "both"):
        e = cfg.eval
        pcfg = ProbeConfig(
            epochs=e.probe_epochs, batch_size=e.probe_batch_size, base_lr=e.probe_lr,
            momentum=e.probe_momentum, weight_decay=e.probe_weight_decay,
        )
        acc = linear_probe(f_train, train_ds.labels, f_test, test_ds.labels, pcfg, rng=rng_stream(cfg.run.seed, "probe"))
        rows.append({"protocol": "linear", "accuracy": acc})
    for row in rows:
        row.update(eval_features=cfg.run.eval_features, knn_k=cfg.eval.knn_k, seed=cfg.run.seed, checkpoint_sha256=digest)
        print(f"{row['protocol']}: accuracy={row['accuracy']:.4f} ({cfg.run.eval_features} features)")
    out.mkdir(parents=True, exist_ok=True)
    rep.append_csv(out / "eval.csv", EVAL_COLUMNS, rows, rep.EVAL_SCHEMA)
    return EXIT_OK


def _parse_sizes(text: str | None, cfg: RunConfig) -> Sizes:
    g = cfg.gradcheck
    if text is None:
        return Sizes(n=g.n, K=g.K, d=g.d)
    try:
        n, K, d = (int(p) for p in text.split(","))
    except ValueError:
        raise ConfigError(f"--sizes must be n,K,d, got {text!r}") from None
    if n < 2 or K < 2 or d < 2:
        raise ConfigError("--sizes needs n >= 2, K >= 2, d >= 2")
    return Sizes(n=n, K=K, d=d)


def cmd_gradcheck(cfg: RunConfig, out: Path, ops: str | None, sizes: str | None) -> int:
    cases = select_cases(cfg.gradcheck.ops if ops is None else ops)
    results = run_gradcheck(cases, seed=cfg.run.seed, instances=cfg.gradcheck.instances, sizes=_parse_sizes(sizes, cfg))
    if not results:
        print("gradcheck: no ops selected (vacuous pass)")
        return EXIT_OK
    print(format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradcheck FAILED: {', '.join(failed)}")
        return EXIT_NUMERIC
    print(f"gradcheck passed: {len(results)} ops")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = _config(args)
        if args.command == "train":
            return cmd_train(cfg, args.out)
        if args.command == "simulate":
            return cmd_simulate(cfg, args.out)
        if args.command == "eval":
            return cmd_eval(cfg, args.out, args.checkpoint, args.protocol)
        return cmd_gradcheck(cfg, args.out, args.ops, args.sizes)
    except (ConfigError, CheckpointError) as exc:
        print(f"embdyn: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except FloatingPointError as exc:
        print(f"embdyn: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError) as exc:
        print(f"embdyn: error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
