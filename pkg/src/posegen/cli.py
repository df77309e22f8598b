"""``posegen`` command line: gen-data, train, generate, eval, inspect, sweep.

Each command accepts ``--config FILE`` (flat ``key=value`` lines, ``#``
comments); explicit flags override file values and unknown keys are rejected.
A ``resolved.cfg`` holding every effective value is written next to the
outputs, so ``posegen <command> --config resolved.cfg`` reruns the command.

Exit codes: 0 success, 2 I/O error, 3 numeric failure, 4 configuration error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import torch

from .checkpoint import CheckpointFormatError
from .codec import CodecConfig
from .dit import DitConfig
from .errors import ConfigError, DivergenceError, ShapeError, UsageError
from .io import format_kv, parse_kv, read_frames, write_frames, write_ppm
from .kv_share import GateConfig, KvCache
from .long_video import (
    METRIC_COLUMNS,
    METRICS_VERSION,
    LongVideoInputs,
    SegmentPlan,
    generate_long,
    plan_segments,
    segment_metrics,
)
from .synth import DataConfig, export_sample, load_dataset, load_sample, make_dataset
from .trainer import Checkpoint, TrainConfig, train, write_loss_csv

log = logging.getLogger("posegen")

EXIT_OK, EXIT_IO, EXIT_NUMERIC, EXIT_CONFIG = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# ------------------------------------------------------------------ options


@dataclass(frozen=True)
class Opt:
    name: str
    type: Callable[[str], Any]
    default: Any
    help: str = ""


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 64x64, got {text!r}") from None


def _gate(text: str) -> str:
    if text != "default":
        try:
            kt, kl = (int(v) for v in text.split(","))
        except ValueError:
            raise argparse.ArgumentTypeError(f"gate must be 'default' or 'k_t,k_l', got {text!r}") from None
        if kt < 0 or kl < 0:
            raise argparse.ArgumentTypeError("gate sizes must be >= 0")
    return text


def _int_list(text: str) -> str:
    try:
        [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    return text


def _fmt(value: Any) -> str:
    if isinstance(value, tuple):
        return "x".join(map(str, value))
    return str(value)


MODEL_OPTS = [
    Opt("layers", int, 8, "transformer blocks L"),
    Opt("dim", int, 64, "embedding width d"),
    Opt("heads", int, 4, "attention heads"),
    Opt("lora_rank", int, 4, "LoRA rank"),
    Opt("lora_alpha", float, 4.0, "LoRA alpha"),
    Opt("image_shift", str, "width", "reference-token position shift: width|temporal"),
]

GEN_OPTS = [
    Opt("ref", str, None, "scene directory supplying reference.ppm and caption"),
    Opt("poses", str, None, "scene directory supplying pose/, hand/ and masks/ (default: --ref)"),
    Opt("length", int, 40, "output frame count"),
    Opt("segment_frames", int, 16, "frames per key/stitch segment"),
    Opt("retain_ratio", float, 0.25, "fraction of a stitch segment retained at each end"),
    Opt("base", str, None, "base-role checkpoint"),
    Opt("stitch", str, None, "stitch-role checkpoint"),
    Opt("steps", int, 20, "sampler steps T"),
    Opt("attn_mode", str, "literal", "shared attention weighting: literal|renorm"),
    Opt("seed", int, 0, "segment seed root"),
    Opt("out", str, None, "output directory"),
]

COMMANDS: dict[str, list[Opt]] = {
    "gen-data": [
        Opt("scenes", int, 32, "number of scenes"),
        Opt("frames", int, 17, "frames per scene"),
        Opt("size", _size, (64, 64), "HxW"),
        Opt("seed", int, 0, "dataset seed"),
        Opt("out", str, None, "output directory"),
    ],
    "train": [
        Opt("role", str, "base", "base|stitch"),
        Opt("data", str, None, "dataset directory written by gen-data"),
        Opt("steps", int, 200, "optimiser steps"),
        Opt("batch_size", int, 4, "scenes per step"),
        Opt("lr", float, 1e-3, "peak learning rate"),
        Opt("hand_dropout", float, 0.1, "hand-condition dropout probability"),
        Opt("retain_ratio", float, 0.25, "stitch-role retained fraction"),
        Opt("seed", int, 0, "training seed"),
        Opt("init", str, "", "optional checkpoint to warm-start adapters from"),
        *MODEL_OPTS,
        Opt("out", str, None, "checkpoint path (.pgck)"),
    ],
    "generate": [*GEN_OPTS, Opt("gate", _gate, "default", "'default' or 'k_t,k_l'")],
    "eval": [Opt("run", str, None, "output directory of a generate run")],
    "inspect": [
        Opt("cache", str, None, "cache file written by generate"),
        Opt("layer", int, 0, "layer to render (0: first cached entry)"),
        Opt("timestep", int, 0, "timestep to render (0: first cached entry)"),
        Opt("out", str, "", "PPM path for the rendered mask (default: next to the cache)"),
    ],
    "sweep": [
        *GEN_OPTS,
        Opt("k_t", _int_list, "0,1,5,20", "timestep gate sizes"),
        Opt("k_l", _int_list, "0,1,4,8", "layer gate sizes"),
    ],
}

REQUIRED = {
    "gen-data": ["out"],
    "train": ["data", "out"],
    "generate": ["ref", "base", "out"],
    "eval": ["run"],
    "inspect": ["cache"],
    "sweep": ["ref", "base", "out"],
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="posegen", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key=value file; flags override it")
        for o in opts:
            flag = "--" + o.name.replace("_", "-")
            p.add_argument(flag, dest=o.name, type=o.type, default=None,
                           help=f"{o.help} (default: {_fmt(o.default)})")
    return parser


def resolve(command: str, args: argparse.Namespace) -> dict[str, Any]:
    """Defaults, then the config file, then explicit flags."""
    opts = {o.name: o for o in COMMANDS[command]}
    values = {name: o.default for name, o in opts.items()}
    if args.config:
        try:
            items = parse_kv(Path(args.config).read_text())
        except OSError as exc:
            raise CliError(f"cannot read config: {exc}", EXIT_IO) from None
        except ValueError as exc:
            raise CliError(f"{args.config}: {exc}", EXIT_CONFIG) from None
        unknown = sorted(set(items) - set(opts))
        if unknown:
            raise CliError(f"{args.config}: unknown keys {', '.join(unknown)}", EXIT_CONFIG)
        for k, v in items.items():
            try:
                values[k] = opts[k].type(v) if v != "" or opts[k].type is str else None
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise CliError(f"{args.config}: bad value for {k}: {exc}", EXIT_CONFIG) from None
    for name in opts:
        v = getattr(args, name)
        if v is not None:
            values[name] = v
    missing = [k for k in REQUIRED[command] if values.get(k) in (None, "")]
    if missing:
        raise CliError(f"{command}: missing required option(s) {', '.join('--' + m for m in missing)}", EXIT_CONFIG)
    return values


def write_resolved(path: Path, command: str, values: dict[str, Any]) -> None:
    items = {k: ("" if v is None else _fmt(v)) for k, v in values.items()}
    path.write_text(format_kv(items, header=f"posegen {command} resolved config"))


def _workers() -> int:
    raw = os.environ.get("POSEGEN_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"POSEGEN_THREADS must be an integer, got {raw!r}", EXIT_CONFIG) from None
    if n < 1:
        raise CliError("POSEGEN_THREADS must be >= 1", EXIT_CONFIG)
    return n


def _mkdir(path: Path) -> None:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create {path}: {exc}", EXIT_IO) from None


# ----------------------------------------------------------------- commands


def cmd_gen_data(v: dict) -> None:
    H, W = v["size"]
    cfg = DataConfig(frames=v["frames"], height=H, width=W)
    if v["scenes"] < 1 or v["frames"] < 1:
        raise ConfigError("scenes and frames must be >= 1")
    out = Path(v["out"])
    _mkdir(out)
    for i, sample in enumerate(make_dataset(v["scenes"], cfg, v["seed"])):
        export_sample(sample, out / f"scene_{i:04d}")
    write_resolved(out / "resolved.cfg", "gen-data", v)
    print(f"wrote {v['scenes']} scenes to {out}")


def _model_config(v: dict) -> DitConfig:
    return DitConfig(L=v["layers"], d=v["dim"], heads=v["heads"], lora_rank=v["lora_rank"],
                     lora_alpha=v["lora_alpha"], image_shift=v["image_shift"])


def _load_ckpt(path: str, role: str | None = None) -> Checkpoint:
    try:
        ckpt = Checkpoint.load(path)
    except OSError as exc:
        raise CliError(f"cannot read checkpoint: {exc}", EXIT_IO) from None
    except (CheckpointFormatError, KeyError) as exc:
        raise CliError(f"{path}: not a usable checkpoint ({exc})", EXIT_IO) from None
    if role is not None and ckpt.role != role:
        raise CliError(f"{path}: expected a {role!r} checkpoint, found role {ckpt.role!r}", EXIT_CONFIG)
    return ckpt


def cmd_train(v: dict) -> None:
    dit_cfg = _model_config(v)
    cfg = TrainConfig(role=v["role"], steps=v["steps"], batch_size=v["batch_size"], peak_lr=v["lr"],
                      hand_dropout_p=v["hand_dropout"], retain_ratio=v["retain_ratio"], seed=v["seed"])
    try:
        dataset = load_dataset(v["data"])
    except OSError as exc:
        raise CliError(f"cannot load dataset: {exc}", EXIT_IO) from None
    init_state = None
    if v["init"]:
        init = _load_ckpt(v["init"])
        if init.dit != dit_cfg:
            raise CliError(f"{v['init']}: model configuration differs from the requested one", EXIT_CONFIG)
        init_state = init.state
    ckpt = train(dataset, cfg, dit_cfg, CodecConfig(c=dit_cfg.c, s=dit_cfg.s), init_state=init_state)
    out = Path(v["out"])
    _mkdir(out.parent)
    stem = out.with_suffix("")
    try:
        ckpt.save(out)
        write_loss_csv(f"{stem}.loss.csv", ckpt.losses)
    except OSError as exc:
        raise CliError(f"cannot write outputs: {exc}", EXIT_IO) from None
    write_resolved(Path(f"{stem}.resolved.cfg"), "train", v)
    final = ckpt.losses[-1][1] if ckpt.losses else float("nan")
    print(f"trained {cfg.role} for {cfg.steps} steps, final loss {final:.4f}; wrote {out}")


@dataclass
class GenerationSetup:
    plan: SegmentPlan
    inputs: LongVideoInputs
    gt_masks: torch.Tensor
    base: Checkpoint
    stitch: Checkpoint | None


def _setup_generation(v: dict) -> GenerationSetup:
    try:
        ref = load_sample(v["ref"])
        track = ref if not v["poses"] or v["poses"] == v["ref"] else load_sample(v["poses"])
    except (OSError, KeyError) as exc:
        raise CliError(f"cannot load scene: {exc}", EXIT_IO) from None
    if v["length"] < v["segment_frames"]:
        raise CliError(f"length {v['length']} is shorter than one segment ({v['segment_frames']})", EXIT_CONFIG)
    if track.frames < v["length"]:
        raise CliError(f"pose track has {track.frames} frames, {v['length']} requested", EXIT_CONFIG)
    if v["attn_mode"] not in ("literal", "renorm"):
        raise CliError(f"unknown attn_mode {v['attn_mode']!r}", EXIT_CONFIG)
    plan = plan_segments(v["length"], v["segment_frames"], v["retain_ratio"], seed=v["seed"])
    base = _load_ckpt(v["base"], "base")
    stitch = None
    if plan.stitches():
        if not v["stitch"]:
            raise CliError("this length needs stitch segments: pass --stitch", EXIT_CONFIG)
        stitch = _load_ckpt(v["stitch"], "stitch")
    inputs = LongVideoInputs(ref.reference, track.pose, track.hand, ref.spec.caption_tokens,
                             list(ref.spec.subject_token_indices))
    return GenerationSetup(plan, inputs, track.gt_subject_mask, base, stitch)


def _gate_for(spec: str, T: int, L: int) -> GateConfig:
    if spec == "default":
        return GateConfig.default(T, L)
    kt, kl = (int(x) for x in spec.split(","))
    return GateConfig(T, L, kt, kl)


def write_metrics_csv(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# {METRICS_VERSION}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for r in rows:
            writer.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in METRIC_COLUMNS])


def read_metrics_csv(path: str | Path) -> list[dict]:
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    return list(reader)


def cmd_generate(v: dict) -> None:
    setup = _setup_generation(v)
    gate = _gate_for(v["gate"], v["steps"], setup.base.dit.L)
    out = Path(v["out"])
    _mkdir(out)
    result = generate_long(setup.plan, setup.inputs, setup.base, setup.stitch, gate, v["steps"],
                           workers=_workers(), attn_mode=v["attn_mode"])
    rows = segment_metrics(setup.plan, result.video, result.pred_masks, setup.gt_masks,
                           v["gate"], result.cache.nbytes())
    _, f, h, w = next(iter(result.latents.values())).shape
    try:
        write_frames(out / "frames", result.video)
        write_frames(out / "pred_masks", result.pred_masks[None].expand(3, -1, -1, -1))
        (out / "plan.txt").write_text(format_kv(setup.plan.to_manifest(), header="posegen segment plan"))
        write_metrics_csv(out / "metrics.csv", rows)
        result.cache.save(out / "cache.pgck", meta={"f": f, "gh": h // 2, "gw": w // 2, "gate": v["gate"]})
    except OSError as exc:
        raise CliError(f"cannot write outputs: {exc}", EXIT_IO) from None
    write_resolved(out / "resolved.cfg", "generate", v)
    print(f"wrote {setup.plan.total_frames} frames ({len(setup.plan.segments)} segments) to {out}; "
          f"cache {len(result.cache)} entries, {result.cache.nbytes()} bytes")


def cmd_eval(v: dict) -> None:
    run = Path(v["run"])
    try:
        cfg = {k: x for k, x in parse_kv((run / "resolved.cfg").read_text()).items()}
        plan = SegmentPlan.from_manifest(parse_kv((run / "plan.txt").read_text()))
        video = read_frames(run / "frames")
        pred = read_frames(run / "pred_masks")[0]
        track = load_sample(cfg["poses"] or cfg["ref"])
        cache, _ = KvCache.load(run / "cache.pgck")
    except (OSError, KeyError) as exc:
        raise CliError(f"cannot read run artefacts: {exc}", EXIT_IO) from None
    rows = segment_metrics(plan, video, pred, track.gt_subject_mask, cfg["gate"], cache.nbytes())
    write_metrics_csv(run / "eval_metrics.csv", rows)
    write_resolved(run / "eval.resolved.cfg", "eval", v)
    worst = 0.0
    ref_path = run / "metrics.csv"
    if ref_path.exists():
        for old, new in zip(read_metrics_csv(ref_path), rows):
            for col in ("bg_mse_vs_source", "mask_iou"):
                worst = max(worst, abs(float(old[col]) - new[col]))
    for r in rows:
        print(f"{r['kind']:6s} {r['index']:2d} [{r['start']:4d},{r['end']:4d}) "
              f"bg_mse={r['bg_mse_vs_source']:.6f} iou={r['mask_iou']:.4f}")
    print(f"max deviation from run metrics: {worst:.3g}")


def render_mask(mask: torch.Tensor, f: int, gh: int, gw: int, scale: int = 8) -> torch.Tensor:
    """Token mask laid out as latent frames side by side, ``[3, gh*scale, f*gw*scale]``."""
    grid = mask.reshape(f, gh, gw)
    tiles = torch.cat(list(grid), dim=1)
    img = tiles.repeat_interleave(scale, 0).repeat_interleave(scale, 1)
    heat = torch.stack([img, img * 0.35, 1.0 - img])
    return heat


def cmd_inspect(v: dict) -> None:
    try:
        cache, meta = KvCache.load(v["cache"])
    except OSError as exc:
        raise CliError(f"cannot read cache: {exc}", EXIT_IO) from None
    except CheckpointFormatError as exc:
        raise CliError(f"{v['cache']}: {exc}", EXIT_IO) from None
    print(f"{len(cache)} entries, {cache.nbytes()} bytes")
    for l, t in cache.keys():
        e = cache.get(l, t)
        print(f"  layer {l} timestep {t}: K/V {tuple(e.k.shape)}, source subject tokens "
              f"{int(e.mask.sum())}/{e.mask.numel()}")
    if not len(cache):
        return
    l, t = (v["layer"], v["timestep"]) if v["layer"] and v["timestep"] else cache.keys()[0]
    try:
        entry = cache.get(l, t)
    except KeyError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    f, gh, gw = int(meta["f"]), int(meta["gh"]), int(meta["gw"])
    out = Path(v["out"]) if v["out"] else Path(v["cache"]).with_name(f"mask_l{l}_t{t}.ppm")
    write_ppm(out, render_mask(entry.mask, f, gh, gw))
    write_resolved(out.with_suffix(".resolved.cfg"), "inspect", v)
    print(f"wrote source mask for layer {l}, timestep {t} to {out}")


def cmd_sweep(v: dict) -> None:
    from .long_video import gate_sweep

    setup = _setup_generation(v)
    out = Path(v["out"])
    _mkdir(out)
    L = setup.base.dit.L
    cells = [(kt, kl) for kt in map(int, v["k_t"].split(",")) for kl in map(int, v["k_l"].split(","))]
    if any(kt > v["steps"] or kl > L for kt, kl in cells):
        raise CliError(f"gate cells must satisfy k_t <= {v['steps']} and k_l <= {L}", EXIT_CONFIG)
    rows = gate_sweep(setup.plan, setup.inputs, setup.base, setup.stitch, setup.gt_masks, cells,
                      v["steps"], workers=_workers(), attn_mode=v["attn_mode"])
    with open(out / "sweep.csv", "w", newline="") as fh:
        fh.write(f"# {METRICS_VERSION} gate sweep\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["k_t", "k_l", "bg_mse_vs_source", "mask_iou", "cache_bytes"])
        for r in rows:
            writer.writerow([r["k_t"], r["k_l"], repr(r["bg_mse_vs_source"]), repr(r["mask_iou"]), r["cache_bytes"]])
    write_resolved(out / "resolved.cfg", "sweep", v)
    for r in rows:
        print(f"k_t={r['k_t']:2d} k_l={r['k_l']:2d} bg_mse={r['bg_mse_vs_source']:.6f} iou={r['mask_iou']:.4f}")


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "generate": cmd_generate,
    "eval": cmd_eval,
    "inspect": cmd_inspect,
    "sweep": cmd_sweep,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        values = resolve(args.command, args)
        HANDLERS[args.command](values)
    except CliError as exc:
        print(f"posegen: {exc}", file=sys.stderr)
        return exc.code
    except DivergenceError as exc:
        print(f"posegen: training diverged: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ShapeError, UsageError) as exc:
        print(f"posegen: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"posegen: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
