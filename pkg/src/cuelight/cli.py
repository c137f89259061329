"""Command-line entry point: ``cuelight <command> [options]``.

Every run writes ``manifest.json`` to its output directory before doing any
work and ``summary.json`` (status, warning count, outputs) when it ends.
Exit status is 0 on success, 1 on runtime errors, 2 on configuration
errors and 3 when training diverges.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import json
import logging
import subprocess
import sys
import warnings
from pathlib import Path

from . import __version__, io
from . import config as config_mod
from .clip import ProjectionHead, fine_tune_projection, load_backend, matching_accuracy
from .curves import DCENet, enhance, load_enhancer, mac_breakdown, save_enhancer
from .data import describe, extract_quadrants, load_dataset, load_sources
from .errors import ConfigError, CuelightError, TrainingDiverged
from .evaluation import (
    average_precision,
    blend_report,
    blend_sweep,
    format_value,
    full_reference_report,
    load_detections,
    map_at_50,
    write_blend_images,
)
from .image import list_images, read_image, write_image
from .prior import PromptPair, learn_prompt_pair
from .train import TERMS, load_checkpoint, train_enhancer

log = logging.getLogger("cuelight")


class _WarningCounter(logging.Handler):
    def __init__(self):
        super().__init__(logging.WARNING)
        self.count = 0

    def emit(self, record):
        self.count += 1


def _git_describe() -> str | None:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return None
    return out.stdout.strip() or None


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


class Run:
    """Output directory bookkeeping for one command."""

    def __init__(self, command: str, out: Path, config_path, seed, cfg: dict | None = None):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        manifest = {
            "command": command,
            "argv": sys.argv[1:],
            "config_path": str(config_path) if config_path else None,
            "config": cfg,
            "seed": seed,
            "version": __version__,
            "git_describe": _git_describe(),
            "started": _now(),
            "output_dir": str(self.out),
        }
        (self.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        self.outputs: dict[str, str] = {}
        self.info: dict = {}

    def record(self, name: str, path) -> None:
        self.outputs[name] = str(path)

    def finish(self, status: str, warnings_count: int, error: str | None = None) -> None:
        summary = {"status": status, "warnings": warnings_count, "error": error, "finished": _now(),
                   "outputs": self.outputs, **self.info}
        (self.out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


# -- helpers -----------------------------------------------------------------


def _resolve(args, extra: dict | None = None) -> dict:
    overrides = {"seed": getattr(args, "seed", None)}
    if getattr(args, "mock_backend", False):
        overrides["backend.kind"] = "mock"
    overrides.update(extra or {})
    return config_mod.resolve(args.config, overrides)


def _dataset(cfg: dict):
    data = cfg["data"]
    if data["sources"]:
        return load_sources(data["sources"])
    if not data["images_dir"]:
        raise ConfigError("data.images_dir: no dataset path configured")
    if not Path(data["images_dir"]).is_dir():
        raise ConfigError(f"data.images_dir: {data['images_dir']} does not exist")
    if data["annotations"] and not Path(data["annotations"]).is_file():
        raise ConfigError(f"data.annotations: {data['annotations']} does not exist")
    return load_dataset(data["images_dir"], data["annotations"], min_confidence=data["min_confidence"])


def _patches(cfg: dict, dataset):
    data = cfg["data"]
    return [p for ai in dataset for p in extract_quadrants(ai, data["patch_size"], data["membership"])]


def _backend(cfg: dict):
    return load_backend(cfg["backend"]["kind"], cfg["seed"], cfg["backend"]["path"])


def _write_trace(path: Path, rows: list[dict], fields) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fields)
        for row in rows:
            writer.writerow([row[f] if isinstance(row[f], int) else repr(float(row[f])) for f in fields])


def load_weights(path) -> DCENet:
    """Enhancer weights from a weights container or a training checkpoint."""
    if not io.exists(path):
        raise ConfigError(f"--weights: no weights container at {path}")
    if "terms" in io.read_metadata(path):
        return load_checkpoint(path)[0]
    return load_enhancer(path)


# -- commands ----------------------------------------------------------------


def cmd_learn_prior(args, run: Run, cfg: dict) -> None:
    dataset = _dataset(cfg)
    backend = _backend(cfg)
    pcfg = config_mod.prior_config(cfg)
    prompts, trace = learn_prompt_pair([ai.image for ai in dataset], pcfg, backend)
    run.record("prompts", prompts.save(run.out / "prompts").with_suffix(".bin"))
    _write_trace(run.out / "trace.csv", [{"epoch": i + 1, "loss": v} for i, v in enumerate(trace)], ["epoch", "loss"])
    run.record("trace", run.out / "trace.csv")
    run.info["final_loss"] = trace[-1] if trace else None
    print(f"learned prompt pair from {len(dataset)} images; final loss {run.info['final_loss']}")


def cmd_fine_tune_heads(args, run: Run, cfg: dict) -> None:
    dataset = _dataset(cfg)
    backend = _backend(cfg)
    hcfg = config_mod.heads_config(cfg)
    patches = _patches(cfg, dataset)
    for task in ("content", "context"):
        pairs = []
        for p in patches:
            desc = describe(p)[0 if task == "content" else 1]
            if not desc.empty:
                pairs.append((p.image, desc.text))
        if not pairs:
            log.warning("no %s descriptions; keeping the pretrained head", task)
            head = backend.default_head(trainable=False)
            before = after = None
        else:
            head = fine_tune_projection(backend.default_head(), pairs, backend, task, hcfg)
            before = matching_accuracy(backend.head, backend, pairs)
            after = matching_accuracy(head, backend, pairs)
        path = head.save(run.out / "heads" / task, {"task": task, "backend": backend.identifier})
        run.record(f"{task}_head", Path(path).with_suffix(".bin"))
        run.info[f"{task}_accuracy"] = {"before": before, "after": after, "pairs": len(pairs)}
        print(f"{task}: {len(pairs)} pairs, matching accuracy {before} -> {after}")


def _load_heads(path) -> dict | None:
    if not path:
        return None
    path = Path(path)
    heads = {}
    for task in ("content", "context"):
        if not io.exists(path / task):
            raise ConfigError(f"train.heads: {path / (task + '.json')} does not exist")
        heads[task] = ProjectionHead.load(path / task)
    return heads


def cmd_train(args, run: Run, cfg: dict) -> None:
    tcfg = config_mod.train_config(cfg)
    prompts = None
    if cfg["train"]["prompts"]:
        path = cfg["train"]["prompts"]
        if not io.exists(path):
            raise ConfigError(f"train.prompts: no prompt container at {path}")
        prompts = PromptPair.load(path)
        run.info["prompts_sha256"] = io.sha256(io.container_stem(path).with_suffix(".bin"))
    if tcfg.lambda_prior > 0 and prompts is None:
        raise ConfigError("train.prompts: required when train.lambda_prior > 0")
    heads = _load_heads(cfg["train"]["heads"])
    need_backend = tcfg.lambda_prior > 0 or tcfg.lambda_content > 0 or tcfg.lambda_context > 0
    backend = _backend(cfg) if need_backend else None
    patches = _patches(cfg, _dataset(cfg))
    (run.out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    result = train_enhancer(patches, tcfg, backend, prompts, heads, checkpoint_dir=run.out / "checkpoints",
                            resume=args.resume)
    fields = ["step", "epoch", *TERMS]
    _write_trace(run.out / "trace.csv", result.trace, fields)
    run.record("trace", run.out / "trace.csv")
    weights = save_enhancer(run.out / "weights", result.net)
    run.record("weights", weights.with_suffix(".bin"))
    run.info["checkpoints"] = [str(p) for p in result.checkpoints]
    run.info["steps"] = len(result.trace)
    last = result.trace[-1]["total"] if result.trace else None
    print(f"trained {len(result.trace)} steps on {len(patches)} patches; final loss {last}")


def cmd_enhance(args, run: Run, cfg: dict) -> None:
    net = load_weights(args.weights)
    inputs = list_images(args.input)
    skipped = 0
    for path in inputs:
        try:
            img = read_image(path)
        except OSError as exc:
            log.warning("skipping unreadable image %s: %s", path.name, exc)
            skipped += 1
            continue
        write_image(run.out / path.name, enhance(img, net, args.scale))
    run.info.update({"written": len(inputs) - skipped, "skipped": skipped, "scale": args.scale})
    print(f"enhanced {len(inputs) - skipped} images, skipped {skipped}")
    if args.report_macs:
        if args.macs_size:
            h, w = args.macs_size
        elif inputs and not skipped:
            h, w = read_image(inputs[0]).shape[:2]
        else:
            h, w = 1024, 1024
        full = mac_breakdown(h, w, 1, net.channels, net.n_iterations)
        reduced = mac_breakdown(h, w, args.scale, net.channels, net.n_iterations)
        ratio = full["estimator"] / reduced["estimator"]
        run.info["macs"] = {"size": [h, w], "scale_1": full, f"scale_{args.scale}": reduced, "estimator_ratio": ratio}
        print(f"estimator MACs at {h}x{w}: scale 1 {full['estimator']}, scale {args.scale} {reduced['estimator']}, "
              f"ratio {ratio:.1f}")
        print(f"total MACs: scale 1 {full['total']}, scale {args.scale} {reduced['total']}")


def cmd_eval_fullref(args, run: Run, cfg: dict) -> None:
    report = full_reference_report(args.pred, args.ref, args.per_channel)
    report.to_csv(run.out / "fullref.csv")
    run.record("report", run.out / "fullref.csv")
    agg = report.aggregates
    print(f"{len(report.rows)} images: mean PSNR {format_value(agg['psnr_db']['mean'])} dB, "
          f"mean SSIM {format_value(agg['ssim']['mean'])}")


def _parse_alphas(text: str) -> list[float]:
    try:
        return [float(a) for a in text.split(",") if a.strip()]
    except ValueError as exc:
        raise ConfigError(f"--alphas: cannot parse {text!r}") from exc


def cmd_eval_blend(args, run: Run, cfg: dict) -> None:
    alphas = _parse_alphas(args.alphas)
    pairs = []
    for path in list_images(args.low):
        normal = Path(args.normal) / path.name
        if not normal.is_file():
            raise ConfigError(f"--normal: no counterpart for {path.name}")
        pairs.append((path.name, read_image(path), read_image(normal)))
    enhancer = None
    if args.weights:
        net = load_weights(args.weights)
        enhancer = lambda img: enhance(img, net, args.scale)  # noqa: E731
    rows = blend_sweep(pairs, alphas, enhancer)
    blend_report(rows).to_csv(run.out / "blend.csv", key_fields=("pair_id", "alpha"))
    write_blend_images(rows, run.out)
    run.record("report", run.out / "blend.csv")
    print(f"{len(pairs)} pairs x {len(alphas)} alphas -> {len(rows)} rows")


def cmd_eval_map(args, run: Run, cfg: dict) -> None:
    preds, truths = load_detections(args.pred), load_detections(args.truth)
    value = map_at_50(preds, truths)
    with open(run.out / "map.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["category", "ap50"])
        for c in sorted({t.category for t in truths}):
            ap = average_precision([p for p in preds if p.category == c], [t for t in truths if t.category == c])
            writer.writerow([c, repr(ap)])
        writer.writerow(["mean", repr(value)])
    run.record("report", run.out / "map.csv")
    run.info["map50"] = value
    print(f"mAP@0.5 = {value:.6f}")


def cmd_export_descriptions(args, run: Run, cfg: dict) -> None:
    patches = _patches(cfg, _dataset(cfg))
    path = run.out / "descriptions.jsonl"
    with open(path, "w") as fh:
        for p in patches:
            content, context = describe(p)
            fh.write(json.dumps({"patch_id": p.patch_id, "content_text": content.text, "context_text": context.text}) + "\n")
    run.record("descriptions", path)
    print(f"wrote {len(patches)} patch descriptions to {path}")


# -- parser ------------------------------------------------------------------


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from exc
    return h, w


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cuelight", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, type=Path, help="output directory")
    common.add_argument("--config", type=Path, help="TOML run configuration")
    common.add_argument("--seed", type=int, help="root seed (overrides config)")
    common.add_argument("--mock-backend", action="store_true", help="use the deterministic mock encoder")
    common.add_argument("--log-level", default="INFO", help="logging level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("learn-prior", parents=[common], help="learn the positive/negative prompt pair")
    p.add_argument("--epochs", type=int, help="prior.epochs override")
    p.set_defaults(func=cmd_learn_prior, flags=lambda a: {"prior.epochs": a.epochs})

    p = sub.add_parser("fine-tune-heads", parents=[common], help="fine-tune content/context projection heads")
    p.add_argument("--steps", type=int, help="heads.steps override")
    p.set_defaults(func=cmd_fine_tune_heads, flags=lambda a: {"heads.steps": a.steps})

    p = sub.add_parser("train", parents=[common], help="train the enhancer")
    p.add_argument("--epochs", type=int, help="train.epochs override")
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")
    p.add_argument("--prompts", help="learned prompt pair (train.prompts)")
    p.add_argument("--heads", help="directory with content/context heads (train.heads)")
    for name in ("prior", "content", "context"):
        p.add_argument(f"--lambda-{name}", type=float, help=f"train.lambda_{name} override")
    p.set_defaults(func=cmd_train, flags=lambda a: {
        "train.epochs": a.epochs,
        "train.prompts": a.prompts,
        "train.heads": a.heads,
        "train.lambda_prior": a.lambda_prior,
        "train.lambda_content": a.lambda_content,
        "train.lambda_context": a.lambda_context,
    })

    p = sub.add_parser("enhance", parents=[common], help="enhance a directory of images")
    p.add_argument("--weights", required=True, help="weights container or training checkpoint")
    p.add_argument("--input", required=True, type=Path, help="input image directory")
    p.add_argument("--scale", type=int, default=1, help="estimate curves at 1/scale resolution")
    p.add_argument("--report-macs", action="store_true", help="print estimator MACs versus scale 1")
    p.add_argument("--macs-size", type=_size, help="HxW used for --report-macs (default: first input)")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("eval", help="evaluation reports")
    ev = p.add_subparsers(dest="eval_command", required=True)
    q = ev.add_parser("fullref", parents=[common], help="PSNR/SSIM against references")
    q.add_argument("--pred", required=True, type=Path)
    q.add_argument("--ref", required=True, type=Path)
    q.add_argument("--per-channel", action="store_true", help="per-channel mean SSIM")
    q.set_defaults(func=cmd_eval_fullref)
    q = ev.add_parser("blend", parents=[common], help="alpha-blend severity sweep")
    q.add_argument("--low", required=True, type=Path)
    q.add_argument("--normal", required=True, type=Path)
    q.add_argument("--alphas", default="0,0.25,0.5,0.75,1")
    q.add_argument("--weights", help="optional enhancer applied to each blend")
    q.add_argument("--scale", type=int, default=1)
    q.set_defaults(func=cmd_eval_blend)
    q = ev.add_parser("map", parents=[common], help="mAP@0.5 over detection JSON files")
    q.add_argument("--pred", required=True, type=Path)
    q.add_argument("--truth", required=True, type=Path)
    q.set_defaults(func=cmd_eval_map)

    p = sub.add_parser("export-descriptions", parents=[common], help="write patch descriptions as JSONL")
    p.set_defaults(func=cmd_export_descriptions)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    command = args.command + (f" {args.eval_command}" if args.command == "eval" else "")
    try:
        flags = args.flags(args) if hasattr(args, "flags") else {}
        cfg = _resolve(args, flags)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    run = Run(command, args.out, args.config, cfg["seed"], cfg)
    counter = _WarningCounter()
    log.addHandler(counter)
    status, code, error = "ok", 0, None
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            try:
                args.func(args, run, cfg)
            finally:
                for w in caught:
                    log.warning("%s: %s", w.category.__name__, w.message)
    except ConfigError as exc:
        status, code, error = "config-error", 2, str(exc)
    except TrainingDiverged as exc:
        status, code, error = "diverged", 3, str(exc)
        if exc.checkpoint is not None:
            run.record("diverged_checkpoint", exc.checkpoint)
    except (CuelightError, OSError) as exc:
        status, code, error = "error", 1, str(exc)
    except BaseException as exc:
        log.removeHandler(counter)
        run.finish("crashed", counter.count, repr(exc))
        raise
    finally:
        log.removeHandler(counter)
    if error:
        print(f"error: {error}", file=sys.stderr)
    run.finish(status, counter.count, error)
    return code


if __name__ == "__main__":
    sys.exit(main())
