"""Command-line entry point: synth, train, eval, and gradcheck.

Exit codes: 0 success, 1 verification/eval failure, 2 usage error,
3 data/format error. All randomness flows from --seed; reruns with
identical flags produce byte-identical outputs.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import checkpoint as ckpt
from . import data_io, evaluation, tensor, training, verify
from .errors import ConfigError, CpfError, DataError, FormatError, NumericError

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_USAGE = 2
EXIT_DATA = 3


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get("CPF_THREADS", "1")))
    except ValueError:
        return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cpf",
        description="Compositional zero-shot learning engine over precomputed embeddings.",
    )
    parser.add_argument("--config", help="key = value config file; flags override it")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate a synthetic dataset")
    synth.add_argument("--M", type=int, default=8, help="attribute count")
    synth.add_argument("--N", type=int, default=6, help="object count")
    synth.add_argument("--D", type=int, default=16, help="visual token width")
    synth.add_argument("--d", type=int, default=8, help="text embedding width")
    synth.add_argument("--T", type=int, default=6, help="patch tokens per image")
    synth.add_argument("--B", type=int, default=3, help="stored shallow blocks")
    synth.add_argument("--seen-frac", type=float, default=0.7, dest="seen_frac")
    synth.add_argument("--samples", type=int, default=40, help="train images per seen composition")
    synth.add_argument("--eval-samples", type=int, default=None, dest="eval_samples")
    synth.add_argument("--sigma", type=float, default=0.1, help="noise level")
    synth.add_argument("--kappa", type=float, default=0.8, help="attribute-object dependence strength")
    synth.add_argument("--signal-patches", type=int, default=3, dest="signal_patches")
    synth.add_argument("--clutter-gain", type=float, default=6.0, dest="clutter_gain")
    synth.add_argument("--feature-scale", type=float, default=6.0, dest="feature_scale")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--out", required=True, help="output directory")

    train = sub.add_parser("train", help="train the head on feature files")
    train.add_argument("--data", help="directory holding train.cpff, embeddings.cpft, splits.txt")
    train.add_argument("--features", help="training feature file (overrides --data)")
    train.add_argument("--embeddings", help="text embedding file (overrides --data)")
    train.add_argument("--splits", help="split file (overrides --data)")
    train.add_argument("--epochs", type=int, default=10)
    train.add_argument("--lr", type=float, default=1e-4)
    train.add_argument("--decay-factor", type=float, default=0.1, dest="decay_factor")
    train.add_argument("--decay-epoch", type=int, default=5, dest="decay_epoch")
    train.add_argument("--batch-size", type=int, default=1, dest="batch_size")
    train.add_argument("--tau", type=float, default=0.05)
    train.add_argument("--alpha1", type=float, default=0.6)
    train.add_argument("--alpha2", type=float, default=0.4)
    train.add_argument("--blocks", default=None, help="comma-separated shallow block indices (default: all stored)")
    train.add_argument("--variant", choices=["full", "no_teo", "no_teo_oga"], default="full")
    train.add_argument("--full-train-softmax", action="store_true", dest="full_train_softmax",
                       help="span the full M x N product in the training composition softmax")
    train.add_argument("--log-every", type=int, default=10, dest="log_every")
    train.add_argument("--seed", type=int, default=0)
    train.add_argument("--out", help="checkpoint path (default <data>/checkpoint.cpfc)")
    train.add_argument("--log", help="train log path (default <data>/train.log)")

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", help="directory holding test.cpff, embeddings.cpft, splits.txt")
    ev.add_argument("--features", help="test feature file (overrides --data)")
    ev.add_argument("--embeddings", help="text embedding file (overrides --data)")
    ev.add_argument("--splits", help="split file (overrides --data)")
    ev.add_argument("--setting", choices=["cw", "ow"], required=True)
    ev.add_argument("--bias-grid", type=int, default=None, dest="bias_grid",
                    help="use k evenly spaced biases instead of the exact margin grid")
    ev.add_argument("--threads", type=int, default=_default_threads())
    ev.add_argument("--report", help="report path (default <data>/report_<setting>.txt)")
    ev.add_argument("--curve", help="curve path (default <data>/report_<setting>.curve)")

    gc = sub.add_parser("gradcheck", help="verify gradients against central differences")
    gc.add_argument("--eps", type=float, default=1e-5, help="central difference step (default 1e-5)")
    gc.add_argument("--seeds", type=int, default=20)
    gc.add_argument("--tolerance", type=float, default=1e-4)
    gc.add_argument("--d", type=int, default=4)
    gc.add_argument("--D", type=int, default=6)
    gc.add_argument("--T", type=int, default=3)
    gc.add_argument("--B", type=int, default=3)
    gc.add_argument("--M", type=int, default=3)
    gc.add_argument("--N", type=int, default=2)
    gc.add_argument("--inject-backward-bug", action="store_true", dest="inject_bug",
                    help="negative control: corrupt one backward rule and expect failure")
    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> list[str]:
    """Fold `key = value` file entries in as subparser defaults; flags override."""
    if "--config" not in argv:
        return argv
    at = argv.index("--config")
    if at + 1 >= len(argv):
        parser.error("--config needs a path")
    path = argv[at + 1]
    rest = argv[:at] + argv[at + 2 :]
    if not rest:
        parser.error("--config requires a command")
    command = rest[0]
    sub_actions = next(
        a for a in parser._actions if isinstance(a, argparse._SubParsersAction)
    )
    if command not in sub_actions.choices:
        parser.error(f"unknown command {command!r}")
    sub = sub_actions.choices[command]
    known = {a.dest: a for a in sub._actions if a.dest != "help"}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as err:
        raise DataError(f"cannot read config file {path}: {err}") from err
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            parser.error(f"{path} line {lineno}: expected key = value")
        key, _, value = line.partition("=")
        dest = key.strip().replace("-", "_")
        value = value.strip()
        if dest not in known:
            parser.error(f"{path} line {lineno}: unknown key {key.strip()!r}")
        action = known[dest]
        if isinstance(action, argparse._StoreTrueAction):
            sub.set_defaults(**{dest: value.lower() in ("1", "true", "yes")})
        elif action.type is not None:
            try:
                sub.set_defaults(**{dest: action.type(value)})
            except ValueError as err:
                parser.error(f"{path} line {lineno}: bad value for {key.strip()!r}: {err}")
        else:
            sub.set_defaults(**{dest: value})
    return rest


def _resolve(args, name: str, default_name: str, must_exist: bool = True) -> Path:
    explicit = getattr(args, name)
    if explicit:
        path = Path(explicit)
    elif args.data:
        path = Path(args.data) / default_name
    else:
        raise ConfigError(f"--{name} or --data is required")
    if must_exist and not path.exists():
        raise DataError(f"missing input file: {path}")
    return path


def _parse_blocks(raw: str | None) -> tuple[int, ...] | None:
    if raw is None or raw == "all":
        return None
    try:
        return tuple(int(v) for v in raw.split(","))
    except ValueError as err:
        raise ConfigError(f"bad --blocks value {raw!r}: {err}") from err


def cmd_synth(args) -> int:
    cfg = data_io.SynthConfig(
        M=args.M, N=args.N, D=args.D, d=args.d, T=args.T, B=args.B,
        seen_fraction=args.seen_frac,
        samples_per_composition=args.samples,
        sigma=args.sigma, kappa=args.kappa, seed=args.seed,
        signal_patches=args.signal_patches,
        clutter_gain=args.clutter_gain,
        feature_scale=args.feature_scale,
        eval_samples=args.eval_samples,
    )
    ds = data_io.synth_generate(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, bundles in (("train", ds.train), ("val", ds.val), ("test", ds.test)):
        data_io.write_features(out / f"{name}.cpff", bundles, data_io.synth_header(cfg, len(bundles)))
    data_io.write_text_embeddings(out / "embeddings.cpft", ds.text)
    data_io.write_splits(out / "splits.txt", ds.space)
    n_seen, n_unseen = len(ds.space.seen_train), len(ds.space.test_unseen)
    print(f"compositions: {n_seen} seen / {n_unseen} unseen")
    print(f"images: train {len(ds.train)}, val {len(ds.val)}, test {len(ds.test)}")
    print(f"wrote train.cpff, val.cpff, test.cpff, embeddings.cpft, splits.txt to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    features = _resolve(args, "features", "train.cpff")
    embeddings = _resolve(args, "embeddings", "embeddings.cpft")
    splits = _resolve(args, "splits", "splits.txt")
    out_path = Path(args.out) if args.out else _resolve(args, "out", "checkpoint.cpfc", must_exist=False)
    log_path = Path(args.log) if args.log else _resolve(args, "log", "train.log", must_exist=False)
    bundles, _header = data_io.read_features(features)
    text = data_io.load_text_embeddings(embeddings)
    space = data_io.load_splits(splits)
    config = training.TrainConfig(
        epochs=args.epochs,
        base_lr=args.lr,
        decay_factor=args.decay_factor,
        decay_epoch=args.decay_epoch,
        batch_size=args.batch_size,
        seed=args.seed,
        alpha1=args.alpha1,
        alpha2=args.alpha2,
        tau=args.tau,
        shallow_blocks=_parse_blocks(args.blocks),
        variant=args.variant,
        full_train_softmax=args.full_train_softmax,
        log_every=args.log_every,
    )
    params, log = training.train(bundles, text, space, config)
    ckpt.save_checkpoint(out_path, params, config, args.seed)
    log_path.write_text(log.to_text(), encoding="utf-8")
    means = log.epoch_means()
    if means:
        print(f"epochs: {config.epochs}, final L_total {means[-1][3]:.6f}")
    else:
        print("epochs: 0, checkpoint equals initialization")
    print(f"wrote {out_path} and {log_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    features = _resolve(args, "features", "test.cpff")
    embeddings = _resolve(args, "embeddings", "embeddings.cpft")
    splits = _resolve(args, "splits", "splits.txt")
    loaded = ckpt.load_checkpoint(Path(args.checkpoint))
    bundles, _header = data_io.read_features(features)
    text = data_io.load_text_embeddings(embeddings)
    space = data_io.load_splits(splits)
    candidates = space.cw_candidates if args.setting == "cw" else space.ow_candidates
    print(f"setting {args.setting}: {len(candidates)} candidates")
    report = evaluation.evaluate(
        bundles,
        loaded.params,
        text,
        space,
        args.setting,
        variant=loaded.config.variant,
        threads=max(1, args.threads),
        bias_grid_size=args.bias_grid,
        shallow_blocks=loaded.config.shallow_blocks,
    )
    base = Path(args.data) if args.data else Path(args.checkpoint).parent
    report_path = Path(args.report) if args.report else base / f"report_{args.setting}.txt"
    curve_path = Path(args.curve) if args.curve else base / f"report_{args.setting}.curve"
    report_path.write_text(report.to_text(), encoding="utf-8")
    curve_path.write_text("\n".join(report.curve_lines()) + "\n", encoding="utf-8")
    print("AUC HM Seen Unseen")
    print(report.summary_line())
    print(f"wrote {report_path} and {curve_path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    dims = dict(d=args.d, D=args.D, T=args.T, B=args.B, M=args.M, N=args.N)
    injected = None
    if args.inject_bug:
        # Negative control: corrupt the cross-entropy backward (drop the
        # temperature division) and expect the harness to notice.
        injected = tensor._BACKWARD["cross-entropy"]

        def bad_backward(node, g):
            p, label, _temperature = node.saved
            d = p.copy()
            d[label] -= 1.0
            node.inputs[0]._add_grad(g[0, 0] * d.reshape(1, -1))

        tensor._BACKWARD["cross-entropy"] = bad_backward
    try:
        passed, results = verify.run_gradcheck(
            seeds=args.seeds, eps=args.eps, tolerance=args.tolerance, **dims
        )
    finally:
        if injected is not None:
            tensor._BACKWARD["cross-entropy"] = injected
    by_path: dict[str, float] = {}
    for r in results:
        by_path[r.path] = max(by_path.get(r.path, 0.0), r.max_error)
    for path, err in by_path.items():
        status = "ok" if err < args.tolerance else "FAIL"
        print(f"{path}: max relative error {err:.3e} [{status}]")
    if passed:
        print(f"all paths passed over {args.seeds} seeds at eps={args.eps!r}")
        return EXIT_OK
    failing = [p for p, e in by_path.items() if e >= args.tolerance]
    print(f"gradient check FAILED for paths: {', '.join(failing)}")
    return EXIT_VERIFY


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
        handler = {
            "synth": cmd_synth,
            "train": cmd_train,
            "eval": cmd_eval,
            "gradcheck": cmd_gradcheck,
        }[args.command]
        return handler(args)
    except SystemExit as err:
        # argparse exits 2 on usage errors; preserve its code.
        return int(err.code) if err.code is not None else EXIT_OK
    except (DataError, FormatError, NumericError, ConfigError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA
    except CpfError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
