"""``lilac`` command line: data generation, training, evaluation, inference, self-checks.

Exit codes: 0 ok, 2 bad arguments or config, 3 I/O failure, 4 non-finite training
loss, 5 checkpoint/ablation flag mismatch, 6 prompter failure, 7 gradient check
failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

EXIT_OK, EXIT_ARGS, EXIT_IO, EXIT_TRAIN, EXIT_FLAGS, EXIT_PROMPTER, EXIT_GRADCHECK = 0, 2, 3, 4, 5, 6, 7

CONFIG_SECTIONS = ("data", "train", "eval", "prompter")


class CliError(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code


def _apply_threads(threads: int | None) -> None:
    """Cap BLAS worker threads; must run before numpy is first imported."""
    value = threads if threads is not None else os.environ.get("LILAC_THREADS")
    if value is None:
        return
    value = int(value)
    if value < 1:
        raise CliError(EXIT_ARGS, "--threads must be >= 1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(value)


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise CliError(EXIT_IO, f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_ARGS, f"config {p} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise CliError(EXIT_ARGS, f"config {p} must be a JSON object")
    unknown = set(cfg) - set(CONFIG_SECTIONS)
    if unknown:
        raise CliError(EXIT_ARGS, f"unknown config sections {sorted(unknown)}; allowed: {list(CONFIG_SECTIONS)}")
    for key, value in cfg.items():
        if not isinstance(value, dict):
            raise CliError(EXIT_ARGS, f"config section {key!r} must be an object")
    return cfg


def write_run_config(out_dir: Path, command: str, merged: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_config.json").write_text(
        json.dumps({"command": command, **merged}, indent=2, sort_keys=True) + "\n")


def _require_dir(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise CliError(EXIT_IO, f"{what} not found: {p}")
    return p


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(EXIT_IO, f"{what} not found: {p}")
    return p


# -- gen-data -------------------------------------------------------------------------
def cmd_gen_data(args, cfg: dict) -> int:
    from .datamodel import dataset_digest, validate
    from .synthbench import build_dataset, write_dataset

    data = {"episodes": 1000, "split": [0.8, 0.1, 0.1], "noise": 0.0, "horizon": 8, "points": 16}
    data.update(cfg.get("data", {}))
    for key in ("episodes", "split", "noise", "horizon", "points"):
        if getattr(args, key) is not None:
            data[key] = getattr(args, key)
    data["seed"] = args.seed
    if data["episodes"] < 1:
        raise CliError(EXIT_ARGS, "--episodes must be >= 1")
    if data["horizon"] < 2 or data["points"] < 1 or data["noise"] < 0:
        raise CliError(EXIT_ARGS, "--horizon must be >= 2, --points >= 1, --noise >= 0")
    try:
        ds = build_dataset(data["episodes"], tuple(data["split"]), seed=data["seed"],
                           noise_sigma=data["noise"], horizon=data["horizon"], n_points=data["points"])
    except ValueError as exc:
        raise CliError(EXIT_ARGS, str(exc)) from exc
    bad = [(e.id, v) for eps in ds.splits.values() for e in eps for v in validate(e)]
    if bad:
        raise CliError(EXIT_ARGS, f"generated episodes failed validation: {bad[:3]}")
    out = Path(args.out)
    try:
        write_dataset(ds, out)
        write_run_config(out, "gen-data", {"data": data})
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write dataset to {out}: {exc}") from exc
    for name, eps in ds.splits.items():
        print(f"{name}: {len(eps)}")
    print(f"digest: {dataset_digest(out)}")
    return EXIT_OK


# -- train ----------------------------------------------------------------------------
def _ablation_flags(ablate: list[str] | None) -> dict[str, bool]:
    flags = {"no_srl": False, "no_vp": False}
    for a in ablate or []:
        flags[a.replace("-", "_")] = True
    return flags


def _load_split(root: Path, split: str):
    from .datamodel import CorruptPayload, FormatVersionMismatch, MissingField, load_split

    if not (root / split / "manifest.json").is_file():
        raise CliError(EXIT_IO, f"split {split!r} not found under {root}")
    try:
        return load_split(root, split)
    except (OSError, CorruptPayload, FormatVersionMismatch, MissingField) as exc:
        raise CliError(EXIT_IO, f"cannot load {root / split}: {exc}") from exc


def _load_vocab(root: Path) -> dict | None:
    p = root / "vocab.json"
    return json.loads(p.read_text()) if p.is_file() else None


def cmd_train(args, cfg: dict) -> int:
    from .training import NonFiniteLoss, TrainConfig, load_flow_model, train_flow, train_refiner

    data_root = _require_dir(args.data, "dataset")
    if args.stage == "refiner" and args.flow_source == "predicted":
        if not args.flow_checkpoint:
            raise CliError(EXIT_ARGS, "--flow-source predicted needs --flow-checkpoint")
        _require_file(args.flow_checkpoint, "flow checkpoint")
    train = dict(cfg.get("train", {}))
    train.update({k: v for k, v in _ablation_flags(args.ablate).items() if v})
    for flag, key in (("lr", "lr"), ("steps", "max_steps"), ("batch_size", "batch_size"),
                      ("lambda_sem", "lambda_sem"), ("checkpoint_every", "checkpoint_every")):
        if getattr(args, flag) is not None:
            train[key] = getattr(args, flag)
    train["seed"] = args.seed
    try:
        tcfg = TrainConfig.from_dict(train)
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_ARGS, f"invalid training config: {exc}") from exc
    episodes = _load_split(data_root, args.split)
    out = Path(args.out)
    write_run_config(out, "train", {"train": tcfg.to_dict(), "stage": args.stage,
                                    "data": {"path": str(data_root), "split": args.split}})
    try:
        if args.stage == "flow":
            from .flowdecoder import FlowGenerator
            from .training import flow_model_config

            model = FlowGenerator(flow_model_config(tcfg, episodes), _load_vocab(data_root))
            result = train_flow(episodes, tcfg, out_dir=out, model=model)
        else:
            flow_model = load_flow_model(args.flow_checkpoint) if args.flow_source == "predicted" else None
            result = train_refiner(episodes, tcfg, args.flow_source, flow_model, out_dir=out)
    except NonFiniteLoss as exc:
        raise CliError(EXIT_TRAIN, f"{exc} (last good checkpoint: {exc.last_good})") from exc
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write training outputs to {out}: {exc}") from exc
    last = result.log.entries[-1]["loss"] if result.log.entries else float("nan")
    print(f"stage={args.stage} steps={len(result.log.entries)} final_loss={last:.6f}")
    print(f"checkpoint: {result.checkpoint_path} sha256={result.checkpoint.digest()}")
    return EXIT_OK


# -- eval -----------------------------------------------------------------------------
def cmd_eval(args, cfg: dict) -> int:
    from .checkpoint import Checkpoint, CheckpointError
    from .evaluation import (EvalConfig, MetricUndefined, evaluate, format_table, linear_predictor,
                             model_predictor, oracle_predictor, static_predictor)
    from .training import AblationMismatch, check_ablations, load_flow_model

    data_root = _require_dir(args.data, "dataset")
    sources = [bool(args.oracle), args.baseline is not None, args.checkpoint is not None]
    if sum(sources) != 1:
        raise CliError(EXIT_ARGS, "give exactly one of --checkpoint, --oracle, --baseline")
    if args.checkpoint:
        _require_file(args.checkpoint, "checkpoint")
    ecfg_d = dict(cfg.get("eval", {}))
    if args.delta_t is not None:
        ecfg_d["displacement_threshold"] = args.delta_t
    if args.radii is not None:
        ecfg_d["precision_radii"] = args.radii
    if args.auc_max_radius is not None:
        ecfg_d["auc_max_radius"] = args.auc_max_radius
    try:
        ecfg = EvalConfig.from_dict(ecfg_d)
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_ARGS, f"invalid eval config: {exc}") from exc
    episodes = _load_split(data_root, args.split)
    digest, ablations = None, {}
    if args.oracle:
        name, predictor = "oracle", oracle_predictor
    elif args.baseline:
        name, predictor = args.baseline, {"static": static_predictor, "linear": linear_predictor}[args.baseline]
    else:
        try:
            ckpt = Checkpoint.load(args.checkpoint)
            check_ablations(ckpt, _ablation_flags(args.ablate), force=args.force)
            model = load_flow_model(ckpt)
        except AblationMismatch as exc:
            raise CliError(EXIT_FLAGS, f"{exc}; pass --force to evaluate anyway") from exc
        except (CheckpointError, KeyError, ValueError) as exc:
            raise CliError(EXIT_FLAGS, f"checkpoint {args.checkpoint} unusable: {exc}") from exc
        name, predictor = "lilac", model_predictor(model)
        digest, ablations = ckpt.digest(), ckpt.meta.get("ablations", {})
        if any(ablations.values()):
            name += " w/o " + ",".join(k[3:] for k, v in sorted(ablations.items()) if v)
    try:
        report = evaluate(predictor, episodes, ecfg, name=name, checkpoint_digest=digest,
                          ablations=ablations)
    except MetricUndefined as exc:
        print(f"metrics undefined: {exc}", file=sys.stderr)
        return EXIT_OK
    out = Path(args.report)
    try:
        report.write(out)
        write_run_config(out.parent, "eval", {"eval": ecfg.to_dict(),
                                              "data": {"path": str(data_root), "split": args.split}})
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write report {out}: {exc}") from exc
    print(format_table([report]), end="")
    return EXIT_OK


# -- infer ----------------------------------------------------------------------------
def _read_image(path: Path):
    import numpy as np
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def _read_depth(path: Path):
    import numpy as np

    if path.suffix == ".npy":
        return np.load(path).astype(np.float64)
    from PIL import Image

    with Image.open(path) as im:  # 16-bit PNG in millimetres
        return np.asarray(im, dtype=np.float64) / 1000.0


def _overlay(rgb, coords):
    import numpy as np

    from .prompter import bresenham

    img = rgb.copy()
    h, w = img.shape[:2]
    for i in range(coords.shape[1]):
        for t in range(1, coords.shape[0]):
            (x0, y0), (x1, y1) = np.floor(coords[t - 1, i] + 0.5).astype(int), np.floor(coords[t, i] + 0.5).astype(int)
            for x, y in bresenham(x0, y0, x1, y1):
                if 0 <= x < w and 0 <= y < h:
                    img[y, x] = (0, 255, 0)
    return img


def cmd_infer(args, cfg: dict) -> int:
    import numpy as np
    from PIL import Image

    from .datamodel import (CameraModel, CorruptPayload, Episode, FlowSequence, FormatVersionMismatch,
                            MissingField, Pose6DoF, load_episode, validate)
    from .detokenizer import coarse_trajectory, export_trajectory, refine
    from .prompter import PrompterError, PrompterSource, get_prompt
    from .synthbench import sample_tracking_points
    from .training import load_flow_model, load_refiner

    _require_file(args.checkpoint, "flow checkpoint")
    if args.refiner:
        _require_file(args.refiner, "refiner checkpoint")
    if args.episode:
        try:
            e = load_episode(_require_file(args.episode, "episode file"))
        except (CorruptPayload, FormatVersionMismatch, MissingField) as exc:
            raise CliError(EXIT_IO, f"cannot read episode {args.episode}: {exc}") from exc
    else:
        if not (args.image and args.depth and args.camera and args.instruction):
            raise CliError(EXIT_ARGS, "give --episode, or all of --image --depth --camera --instruction")
        rgb = _read_image(_require_file(args.image, "image"))
        depth = _read_depth(_require_file(args.depth, "depth map"))
        cam = CameraModel.from_dict(json.loads(_require_file(args.camera, "camera file").read_text()))
        if args.prompt_source == "oracle":
            raise CliError(EXIT_ARGS, "the oracle prompter needs ground truth; use --episode")
        horizon = 2  # placeholder flow; only the image, depth and camera are consumed
        e = Episode(Path(args.image).stem, rgb, args.instruction, depth, cam,
                    FlowSequence(np.zeros((horizon, 1, 2))), [Pose6DoF.identity()] * horizon)
    if args.instruction:
        e = replace(e, instruction=args.instruction)
    psrc = dict(cfg.get("prompter", {}))
    psrc.update({k: v for k, v in {"kind": args.prompt_source, "path": args.prompt_store,
                                   "endpoint": args.endpoint, "timeout": args.timeout}.items()
                 if v is not None})
    psrc["seed"] = args.seed
    try:
        source = PrompterSource(**psrc)
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_ARGS, f"invalid prompter config: {exc}") from exc
    try:
        prompt = get_prompt(e, source, rng=np.random.default_rng(args.seed))
    except PrompterError as exc:
        raise CliError(EXIT_PROMPTER, f"prompter ({source.kind}) failed: {type(exc).__name__}: {exc}") from exc
    model = load_flow_model(args.checkpoint)
    if args.episode and not args.sample_points:
        points = e.gt_flow.coords[0]
    else:
        points = sample_tracking_points(prompt.bbox, model.cfg.n_points, args.seed).astype(np.float64)
    flow = model.generate_flow(e.rgb, e.instruction, prompt, points)
    coarse = coarse_trajectory(flow, e.depth, e.camera)
    poses = refine(coarse, flow, e.rgb, e.instruction, load_refiner(args.refiner)) if args.refiner \
        else coarse.poses
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    flow_doc = {"horizon": flow.horizon, "n_points": flow.n_points, "coords": flow.coords.tolist(),
                "prompt": prompt.to_json(), "instruction": e.instruction}
    (out / "flow.json").write_text(json.dumps(flow_doc, indent=2) + "\n")
    (out / "trajectory.json").write_text(export_trajectory(poses) + "\n")
    Image.fromarray(_overlay(e.rgb, flow.coords)).save(out / "overlay.png")
    check = Episode(e.id, e.rgb, e.instruction, e.depth, e.camera, flow, poses[: flow.horizon])
    problems = [v for v in validate(check) if v.startswith("flow")]
    write_run_config(out, "infer", {"prompter": {k: v for k, v in vars(source).items()}})
    print(f"flow: {out / 'flow.json'}  trajectory: {out / 'trajectory.json'}  overlay: {out / 'overlay.png'}")
    if problems:
        print("warning: " + "; ".join(problems), file=sys.stderr)
    return EXIT_OK


# -- gradcheck ------------------------------------------------------------------------
def cmd_gradcheck(args, cfg: dict) -> int:
    from .selfcheck import TOLERANCE, run_suite

    results = run_suite(seed=args.seed)
    for r in results:
        status = "ok" if r.ok else "FAIL"
        print(f"{r.module:12s} {r.case:24s} rel_err={r.error:.3e} {status}")
    worst = max(results, key=lambda r: r.error)
    print(f"worst relative error: {worst.error:.3e} ({worst.module}/{worst.case}), tolerance {TOLERANCE:g}")
    failed = [r for r in results if not r.ok]
    if failed:
        print(f"gradient check failed in module {failed[0].module}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------
class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Show defaults only where one exists; unset options fall back to the config."""

    def _get_help_string(self, action):
        if action.default in (None, False, argparse.SUPPRESS):
            return action.help
        return super()._get_help_string(action)


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    parser = argparse.ArgumentParser(prog="lilac", description="Language-conditioned flow and trajectory pipeline.",
                                     formatter_class=fmt)
    parser.add_argument("--seed", type=int, default=0, help="random seed for every stochastic step")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap on BLAS worker threads (env LILAC_THREADS); default: library choice")
    parser.add_argument("--config", default=None, help="JSON config with sections data/train/eval/prompter")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset", formatter_class=fmt)
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--episodes", type=int, default=None, help="episode count (config default 1000)")
    g.add_argument("--noise", type=float, default=None, help="tracker noise sigma in px (config default 0)")
    g.add_argument("--split", type=float, nargs=3, default=None, metavar=("TRAIN", "VAL", "TEST"),
                   help="split ratios (config default 0.8 0.1 0.1)")
    g.add_argument("--horizon", type=int, default=None, help="flow steps per episode (config default 8)")
    g.add_argument("--points", type=int, default=None, help="tracking points per episode (config default 16)")

    t = sub.add_parser("train", help="train the flow generator or the refiner", formatter_class=fmt)
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="output directory for checkpoint and log")
    t.add_argument("--split", default="train", help="split to train on")
    t.add_argument("--stage", choices=("flow", "refiner"), default="flow", help="which model to train")
    t.add_argument("--ablate", choices=("no-srl", "no-vp"), action="append", default=None,
                   help="ablation switch (repeatable)")
    t.add_argument("--steps", type=int, default=None, help="optimizer steps (config default 5000)")
    t.add_argument("--lr", type=float, default=None, help="learning rate (config default 3e-4)")
    t.add_argument("--batch-size", type=int, default=None, help="batch size (config default 8)")
    t.add_argument("--lambda-sem", type=float, default=None, help="semantic alignment weight (config default 1)")
    t.add_argument("--checkpoint-every", type=int, default=None, help="checkpoint cadence in steps, 0 = final only")
    t.add_argument("--flow-source", choices=("gt", "predicted"), default="gt",
                   help="refiner stage: teacher flow or flow-model predictions")
    t.add_argument("--flow-checkpoint", default=None, help="refiner stage: flow model for --flow-source predicted")

    e = sub.add_parser("eval", help="evaluate flow predictions", formatter_class=fmt)
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--split", default="test", help="split to evaluate")
    e.add_argument("--checkpoint", default=None, help="flow checkpoint to evaluate")
    e.add_argument("--oracle", action="store_true", help="evaluate ground truth as the prediction")
    e.add_argument("--baseline", choices=("static", "linear"), default=None, help="evaluate a baseline")
    e.add_argument("--report", required=True, help="report JSON path; a .txt table is written alongside")
    e.add_argument("--ablate", choices=("no-srl", "no-vp"), action="append", default=None,
                   help="ablation flags the checkpoint is expected to carry")
    e.add_argument("--force", action="store_true", help="evaluate despite mismatched ablation flags")
    e.add_argument("--delta-t", type=float, default=None, help="displacement threshold px (config default 2)")
    e.add_argument("--radii", type=float, nargs="+", default=None, help="P@K radii (config default 5 10 20)")
    e.add_argument("--auc-max-radius", type=int, default=None, help="AUC integration limit px (config default 30)")

    i = sub.add_parser("infer", help="flow and trajectory for one observation", formatter_class=fmt)
    i.add_argument("--checkpoint", required=True, help="flow checkpoint")
    i.add_argument("--refiner", default=None, help="refiner checkpoint; coarse trajectory if omitted")
    i.add_argument("--episode", default=None, help="episode record supplying image, depth, camera, instruction")
    i.add_argument("--image", default=None, help="RGB image file")
    i.add_argument("--depth", default=None, help="depth map (.npy metres or 16-bit PNG millimetres)")
    i.add_argument("--camera", default=None, help="camera JSON {fx, fy, cx, cy, width, height}")
    i.add_argument("--instruction", default=None, help="instruction text (overrides the episode's)")
    i.add_argument("--prompt-source", choices=("oracle", "recorded", "remote"), default="oracle",
                   help="visual prompt source")
    i.add_argument("--prompt-store", default=None, help="JSON-lines prompt store for --prompt-source recorded")
    i.add_argument("--endpoint", default=None, help="URL for --prompt-source remote")
    i.add_argument("--timeout", type=float, default=None, help="remote prompter timeout in seconds")
    i.add_argument("--sample-points", action="store_true",
                   help="sample tracking points in the prompt bbox instead of using the episode's")
    i.add_argument("--out", required=True, help="output directory")

    sub.add_parser("gradcheck", help="finite-difference check of every learned module", formatter_class=fmt)
    return parser


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer,
            "gradcheck": cmd_gradcheck}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _apply_threads(args.threads)
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
