"""Command-line interface: ``devias <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical failure.
Progress goes to standard error; machine-readable results go to standard
output (or ``--out`` where the command writes a file).

Every command takes ``--seed``, ``--config FILE`` (flat ``key = value`` lines
whose keys are the command's flag names, dashes or underscores) and
``--threads``. Flags given on the command line override the config file.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SPLIT_FILES = ("train", "test_in_context", "test_out_of_context", "test_scene_only", "teacher")
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


class UsageFailure(Exception):
    pass


def _progress(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# ---------------------------------------------------------------------------
# parser


def _train_config_flags(p: argparse.ArgumentParser) -> None:
    from .pipeline import TrainConfig
    for f in TrainConfig.__dataclass_fields__.values():
        if f.name == "seed":
            continue
        p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=argparse.SUPPRESS,
                       metavar=f.type.upper() if isinstance(f.type, str) else None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="devias", description="Action/scene disentanglement toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    def command(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text, argument_default=S)
        p.add_argument("--seed", type=int)
        p.add_argument("--config")
        p.add_argument("--threads", type=int)
        return p

    p = command("gen-data", "generate the synthetic splits as DVSW1 files")
    p.add_argument("--out", required=True)
    for name in ("n-actions", "n-scenes", "frames", "height", "width", "channels",
                 "n-train", "n-test", "n-teacher"):
        p.add_argument("--" + name, type=int)
    p.add_argument("--corr", type=float)

    p = command("train-teacher", "fit the frozen scene teacher on the teacher split")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)

    p = command("train", "train DEVIAS or a token baseline")
    p.add_argument("--data", required=True)
    p.add_argument("--teacher")
    p.add_argument("--out", required=True)
    p.add_argument("--metrics")
    _train_config_flags(p)

    p = command("eval", "accuracy, harmonic mean, K-NN and slot audit as one JSON report")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--splits")
    p.add_argument("--topk", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--out")

    p = command("knn", "K-NN normal / reverse feature probe")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--train-split")
    p.add_argument("--test-split")
    p.add_argument("--pca-out")
    p.add_argument("--out")

    p = command("export-attn", "write slot attention maps as PGM images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split")
    p.add_argument("--index", type=int)
    p.add_argument("--all-iters", action="store_true")
    p.add_argument("--out", required=True)

    p = command("grad-check", "finite-difference check of the full DEVIAS loss")
    p.add_argument("--precision", choices=("f64", "f32"))
    p.add_argument("--max-coords", type=int)
    p.add_argument("--tol", type=float)
    return parser


DEFAULTS = {
    "gen-data": {"n_actions": 4, "n_scenes": 4, "frames": 8, "height": 32, "width": 32,
                 "channels": 1, "n_train": 2000, "n_test": 400, "n_teacher": 800, "corr": 0.9},
    "train-teacher": {},
    "train": {"teacher": None, "metrics": None},
    "eval": {"splits": "all", "topk": 1, "k": 10, "out": None},
    "knn": {"k": 10, "train_split": "train", "test_split": "test_in_context", "pca_out": None,
            "out": None},
    "export-attn": {"split": "test_in_context", "index": 0, "all_iters": False},
    "grad-check": {"precision": "f64", "max_coords": 6, "tol": 1e-6},
}


def _resolve(parser: argparse.ArgumentParser, argv) -> dict:
    """defaults < config file < command-line flags."""
    try:
        ns = vars(parser.parse_args(argv))
    except SystemExit as exc:
        raise UsageFailure("bad arguments") if exc.code else exc
    command = ns.pop("command")
    merged = {"seed": 0, "threads": None, **DEFAULTS[command]}
    if ns.get("config"):
        from .pipeline import parse_config_text
        try:
            text = open(ns["config"]).read()
            entries = parse_config_text(text)
        except (OSError, ValueError) as exc:
            raise UsageFailure(f"config file: {exc}") from exc
        sub = _subparser(parser, command)
        dests = {a.dest for a in sub._actions}
        for key, value in entries.items():
            key = key.replace("-", "_")
            if key not in dests:
                raise UsageFailure(f"unknown config key {key!r} for {command}")
            merged[key] = _typed(sub, key, value)
    merged.update(ns)
    merged.pop("config", None)
    merged["command"] = command
    return merged


def _subparser(parser, command):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise AssertionError("no subcommands")


def _typed(sub, dest: str, value: str):
    for action in sub._actions:
        if action.dest == dest:
            if isinstance(action, argparse._StoreTrueAction):
                return value.strip().lower() in ("1", "true", "yes", "on")
            return action.type(value) if action.type else value
    return value


# ---------------------------------------------------------------------------
# commands


def _world_from(args):
    from .world import WorldConfig
    return WorldConfig(n_actions=args["n_actions"], n_scenes=args["n_scenes"], frames=args["frames"],
                       height=args["height"], width=args["width"], channels=args["channels"],
                       corr=args["corr"], n_train=args["n_train"], n_test=args["n_test"],
                       n_teacher=args["n_teacher"], seed=args["seed"])


def _load_split(data_dir: str, name: str):
    from .world import read_dvsw
    path = os.path.join(data_dir, f"{name}.dvsw")
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing dataset file {path}")
    return read_dvsw(path)


def cmd_gen_data(args) -> dict:
    from .world import make_split, write_dvsw
    cfg = _world_from(args)
    os.makedirs(args["out"], exist_ok=True)
    summary = {}
    for name in SPLIT_FILES:
        clips = make_split(cfg, name)
        write_dvsw(os.path.join(args["out"], f"{name}.dvsw"), clips)
        summary[name] = len(clips)
        _progress(f"wrote {name}: {len(clips)} clips")
    return {"out": args["out"], "clips": summary}


def cmd_train_teacher(args) -> dict:
    from dataclasses import replace

    from .pipeline import save_teacher
    from .teacher import TeacherConfig, train_scene_teacher
    cfg = TeacherConfig()
    if "epochs" in args:
        cfg = replace(cfg, epochs=args["epochs"])
    if "lr" in args:
        cfg = replace(cfg, lr=args["lr"])
    clips = _load_split(args["data"], "teacher")
    teacher = train_scene_teacher(clips, seed=args["seed"], cfg=cfg, log=_progress)
    save_teacher(args["out"], teacher)
    held_out = _load_split(args["data"], "test_scene_only")
    return {"out": args["out"], "held_out_accuracy": teacher.accuracy(held_out)}


def cmd_train(args) -> dict:
    from .pipeline import NumericalError, TrainConfig, load_teacher, save_checkpoint, train
    keys = set(TrainConfig.__dataclass_fields__)
    flat = {k: v for k, v in args.items() if k in keys}
    train_set = _load_split(args["data"], "train")
    flat.setdefault("n_actions", train_set.n_actions)
    flat.setdefault("n_scenes", train_set.n_scenes)
    _, t, h, w, c = train_set.frames.shape
    for key, val in (("frames", t), ("height", h), ("width", w), ("channels", c)):
        flat.setdefault(key, val)
    try:
        cfg = TrainConfig.from_flat(flat)
    except (KeyError, ValueError) as exc:
        raise UsageFailure(str(exc)) from exc
    teacher = load_teacher(args["teacher"]) if args.get("teacher") else None
    if teacher is None and cfg.resolved_augment == "scene_swap" and cfg.rho > 0:
        raise UsageFailure("scene swapping needs --teacher")
    try:
        ckpt, metrics = train(cfg, train_set, teacher, log=_progress, metrics_path=args.get("metrics"))
    except NumericalError as exc:
        if exc.checkpoint is not None:
            path = args["out"] + ".last_good"
            save_checkpoint(path, exc.checkpoint)
            _progress(f"last finite parameters saved to {path}")
        raise
    save_checkpoint(args["out"], ckpt)
    return {"out": args["out"], "steps": ckpt.step, "final": metrics[-1]}


def _predictions(ckpt, data_dir: str, names):
    from .pipeline import predict_set
    clipsets = {n: _load_split(data_dir, n) for n in names}
    return {n: predict_set(ckpt, cs) for n, cs in clipsets.items()}, clipsets


def cmd_eval(args) -> dict:
    from .evaluation import evaluate
    from .pipeline import load_checkpoint
    ckpt = load_checkpoint(args["ckpt"])
    tests = ["test_in_context", "test_out_of_context", "test_scene_only"]
    names = tests + ["train"] if args["splits"] == "all" else [s.strip() for s in args["splits"].split(",")]
    if not set(tests) <= set(names):
        raise UsageFailure(f"eval needs the splits {tests}")
    preds, clipsets = _predictions(ckpt, args["data"], names)
    report = evaluate(preds, clipsets, topk=args["topk"],
                      knn_train="train" if "train" in names else None, k=args["k"])
    return json.loads(report.to_json())


def cmd_knn(args) -> dict:
    import numpy as np

    from .evaluation import knn_table, pca_scatter_export
    from .pipeline import load_checkpoint
    ckpt = load_checkpoint(args["ckpt"])
    preds, clipsets = _predictions(ckpt, args["data"], [args["train_split"], args["test_split"]])
    tr, te = args["train_split"], args["test_split"]
    table = knn_table(preds[tr], clipsets[tr], preds[te], clipsets[te], args["k"])
    if args.get("pca_out"):
        p, cs = preds[te], clipsets[te]
        feats = np.concatenate([p.action_features, p.scene_features])
        labels = np.concatenate([cs.actions, cs.scenes])
        tasks = ["action"] * len(cs) + ["scene"] * len(cs)
        pca_scatter_export(feats, labels, args["pca_out"], tasks)
    return {"k": args["k"], "train": tr, "test": te, "knn": table}


def cmd_export_attn(args) -> dict:
    from .evaluation import export_attention
    from .pipeline import load_checkpoint
    ckpt = load_checkpoint(args["ckpt"])
    mcfg = ckpt.config.model_config
    if mcfg.variant != "devias":
        raise UsageFailure("attention export needs a DEVIAS checkpoint")
    clips = _load_split(args["data"], args["split"])
    i = args["index"]
    if not 0 <= i < len(clips):
        raise UsageFailure(f"index {i} outside split of {len(clips)} clips")
    pred = ckpt.predict(clips.frames[i:i + 1], keep_history=args["all_iters"])
    grid = mcfg.encoder.grid
    paths = []
    if args["all_iters"]:
        for it, attn in enumerate(pred.history):
            paths += export_attention(attn[0], grid, args["out"], mcfg.patch, stem=f"iter{it}")
    else:
        paths = export_attention(pred.attention[0], grid, args["out"], mcfg.patch)
    return {"files": [str(p) for p in paths], "k_action": int(pred.k_action[0]),
            "k_scene": int(pred.k_scene[0])}


def cmd_grad_check(args) -> dict:
    from .pipeline import grad_check
    err = grad_check(seed=args["seed"], precision=args["precision"], max_coords=args["max_coords"])
    passed = err <= args["tol"]
    return {"precision": args["precision"], "max_rel_error": err, "tol": args["tol"],
            "passed": passed}


COMMANDS = {"gen-data": cmd_gen_data, "train-teacher": cmd_train_teacher, "train": cmd_train,
            "eval": cmd_eval, "knn": cmd_knn, "export-attn": cmd_export_attn,
            "grad-check": cmd_grad_check}


def _emit(result: dict, out: str | None, command: str) -> None:
    text = json.dumps(result, indent=2, sort_keys=True, default=float)
    if out and command in ("eval", "knn"):
        with open(out, "w") as fh:
            fh.write(text + "\n")
    print(text)


def _cap_threads(argv) -> None:
    """Honour ``--threads`` before numpy (and its BLAS pool) is first imported."""
    for i, tok in enumerate(argv):
        value = tok.split("=", 1)[1] if tok.startswith("--threads=") else (
            argv[i + 1] if tok == "--threads" and i + 1 < len(argv) else None)
        if value is not None and value.isdigit() and int(value) > 0:
            for var in _THREAD_VARS:
                os.environ[var] = value


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _cap_threads(argv)
    parser = build_parser()
    try:
        args = _resolve(parser, argv)
    except UsageFailure as exc:
        _progress(f"usage error: {exc}")
        return EXIT_USAGE
    from .pipeline import NumericalError
    from .teacher import UsageError
    from .world import FormatError
    try:
        result = COMMANDS[args["command"]](args)
    except (UsageFailure, UsageError) as exc:
        _progress(f"usage error: {exc}")
        return EXIT_USAGE
    except NumericalError as exc:
        _progress(f"numerical failure: {exc}")
        return EXIT_NUMERIC
    except (FormatError, FileNotFoundError) as exc:
        _progress(f"data error: {exc}")
        return EXIT_DATA
    _emit(result, args.get("out"), args["command"])
    if args["command"] == "grad-check" and not result["passed"]:
        return EXIT_NUMERIC
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
