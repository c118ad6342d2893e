"""Command-line pipeline: gen-data, divide, train, render, eval, warp-preview.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Every subcommand writes ``summary.json`` (resolved configuration, version
stamp, outputs; no timestamps) into its output directory.
"""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
from pathlib import Path

from . import __version__
from .dataset import DatasetError, SplitSpec, generate_phantom, load_dataset, preset_config, split
from .losses import NonFiniteLoss

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
CONFIG_ENV = "TUBERF_CONFIG"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _version_stamp() -> dict:
    stamp = {"version": __version__}
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if rev.returncode == 0:
            stamp["git"] = rev.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return stamp


def _write_summary(out_dir, command: str, args: dict, **extra):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    args = {k: v for k, v in args.items() if k != "func"}
    doc = {"command": command, "args": args, "stamp": _version_stamp(), **extra}
    (out / "summary.json").write_text(json.dumps(doc, indent=1, sort_keys=True, default=str))
    return doc


def read_config_file(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise DatasetError(f"{p}: config file missing")
    text = p.read_text()
    if p.suffix == ".json":
        return json.loads(text)
    if p.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        return tomllib.loads(text)
    raise UsageError(f"{p}: config must be .toml or .json")


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve_train_config(config_path=None, **overrides):
    """Preset (``desk`` unless the file says ``preset = "full"``) + config file + CLI overrides."""
    from .trainer import TrainConfig, desk_config

    file_cfg = read_config_file(config_path) if config_path else {}
    preset = file_cfg.pop("preset", "desk")
    if preset not in ("desk", "full"):
        raise UsageError(f"unknown preset {preset!r}")
    base = desk_config() if preset == "desk" else TrainConfig()
    merged = _merge(base.to_dict(), file_cfg)
    merged = _merge(merged, {k: v for k, v in overrides.items() if v is not None})
    try:
        return TrainConfig.from_dict(merged)
    except (KeyError, TypeError, ValueError) as e:
        raise UsageError(f"invalid training configuration: {e}") from e


def _split_frames(ds, which: str, test_every: int):
    train, test = split(ds.frames, SplitSpec(test_every=test_every))
    return {"train": train, "test": test, "all": list(ds.frames)}[which]


# --------------------------------------------------------------- subcommands

def cmd_gen_data(a) -> int:
    overrides = {"frames": a.frames, "texture_seed": a.seed}
    if a.size:
        overrides["width"] = overrides["height"] = a.size
    cfg = preset_config(a.preset, **overrides)
    ds = generate_phantom(cfg, a.out, jobs=a.jobs)
    _write_summary(a.out, "gen-data", vars(a), phantom=cfg.to_dict(), frames=len(ds), far=ds.far)
    return EXIT_OK


def cmd_divide(a) -> int:
    from .segmentation import Trajectory, divide_detailed

    ds = load_dataset(a.dataset)
    div = divide_detailed(Trajectory.from_frames(ds.frames), a.angle_threshold, a.min_block, a.overlap)
    out = Path(a.out)
    div.write(out)
    _write_summary(out.parent, "divide", vars(a), blocks=len(div.blocks), cuts=div.cuts)
    return EXIT_OK


def cmd_train(a) -> int:
    from .trainer import train_all

    cfg_path = a.config or os.environ.get(CONFIG_ENV)
    cfg = resolve_train_config(cfg_path, views=a.views, stage_count=a.stages, seed=a.seed,
                               iterations_per_stage=a.iterations)
    ds = load_dataset(a.dataset)
    train = _split_frames(ds, "train", a.test_every)
    threshold = 1e9 if a.single_block else a.angle_threshold
    manifest = train_all(ds, train, cfg, a.out, threshold, a.min_block, a.overlap, jobs=a.jobs)
    final = {}
    for k, ck in manifest["checkpoints"].items():
        from .autodiff import load_checkpoint

        header, _ = load_checkpoint(Path(a.out) / ck)
        final[k] = header["history"][-1] if header["history"] else None
    _write_summary(a.out, "train", vars(a), config=cfg.to_dict(), blocks=len(manifest["blocks"]),
                   errors=manifest["errors"], final_losses=final)
    return EXIT_NUMERIC if manifest["errors"] and any("NonFinite" in e for e in manifest["errors"].values()) else (
        EXIT_DATA if manifest["errors"] else EXIT_OK)


def _integration_config(a):
    from .integration import IntegrationConfig

    return IntegrationConfig(epsilon=a.epsilon, distance_threshold=a.distance_threshold,
                             visibility_threshold=a.visibility_threshold)


def _select_frames(ds, a):
    if a.frames:
        wanted = [int(x) for x in a.frames.split(",")]
        return [ds.by_id(i) for i in wanted]
    return _split_frames(ds, a.split, a.test_every)


def cmd_render(a) -> int:
    from .renderer import write_pfm, write_png
    from .trainer import load_model

    model = load_model(a.model)
    ds = load_dataset(a.dataset)
    out = Path(a.out)
    written = []
    for f in _select_frames(ds, a):
        rgb, depth, _ = model.render(f.pose, a.samples, _integration_config(a))
        write_png(out / "rgb" / f"{f.id:06d}.png", rgb)
        write_pfm(out / "depth" / f"{f.id:06d}.pfm", depth)
        written.append(int(f.id))
    _write_summary(out, "render", vars(a), frames=written)
    return EXIT_OK


def cmd_eval(a) -> int:
    from .metrics import config_hash
    from .trainer import load_model

    model = load_model(a.model)
    ds = load_dataset(a.dataset)
    frames = _select_frames(ds, a)
    report = model.evaluate(frames, a.samples, _integration_config(a),
                            config_hash=config_hash(model.manifest.get("train_config", {})))
    out = Path(a.out)
    report.write_json(out / "report.json")
    report.write_csv(out / "report.csv")
    _write_summary(out, "eval", vars(a), means=report.means(), frame_count=report.frame_count)
    return EXIT_OK


def cmd_warp_preview(a) -> int:
    from .densify import warp
    from .renderer import write_mask_png, write_pfm, write_png

    ds = load_dataset(a.dataset)
    src, dst = ds.by_id(a.frame), ds.by_id(a.to_frame)
    lab = warp(src.rgb, src.depth, src.pose, dst.pose, ds.intrinsics, source_frame=src.id)
    out = Path(a.out)
    write_png(out / "pseudo_rgb.png", lab.rgb)
    write_pfm(out / "pseudo_depth.pfm", lab.depth)
    write_mask_png(out / "valid_mask.png", lab.valid)
    v = lab.valid
    stats = {"valid_fraction": float(v.mean())}
    if v.any():
        stats["mean_abs_rgb_vs_target"] = float(abs(lab.rgb - dst.rgb)[v].mean())
        stats["mean_abs_depth_vs_target"] = float(abs(lab.depth - dst.depth)[v].mean())
    _write_summary(out, "warp-preview", vars(a), **stats)
    return EXIT_OK


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tuberf", description="Piecewise radiance-field reconstruction of tubular scenes.")
    p.add_argument("--version", action="version", version=f"tuberf {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="render a procedural tube phantom dataset")
    g.add_argument("--preset", default="curved-tube", help="straight-tube, curved-tube, l-tube or s-tube")
    g.add_argument("--frames", type=int, default=120)
    g.add_argument("--size", type=int, default=None, help="image width and height in pixels")
    g.add_argument("--seed", type=int, default=0, help="texture seed")
    g.add_argument("--out", required=True)
    g.add_argument("--jobs", type=int, default=1)
    g.set_defaults(func=cmd_gen_data)

    def division_flags(q):
        q.add_argument("--angle-threshold", type=float, default=25.0, help="cumulative heading turn per cut (deg)")
        q.add_argument("--min-block", type=int, default=20)
        q.add_argument("--overlap", type=float, default=0.30)

    d = sub.add_parser("divide", help="split the trajectory into overlapping blocks")
    d.add_argument("--dataset", required=True)
    d.add_argument("--out", required=True, help="block manifest JSON path")
    division_flags(d)
    d.set_defaults(func=cmd_divide)

    t = sub.add_parser("train", help="train every block")
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", default=None, help=f"TOML or JSON config (default: ${CONFIG_ENV})")
    t.add_argument("--views", type=int, choices=(1, 2, 3), default=None)
    t.add_argument("--stages", type=int, default=None)
    t.add_argument("--iterations", type=int, default=None, help="iterations per stage")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--test-every", type=int, default=4)
    t.add_argument("--single-block", action="store_true", help="skip trajectory division")
    t.add_argument("--jobs", type=int, default=1)
    division_flags(t)
    t.set_defaults(func=cmd_train)

    def model_flags(q):
        q.add_argument("--model", required=True, help="training output directory")
        q.add_argument("--dataset", required=True)
        q.add_argument("--out", required=True)
        q.add_argument("--split", choices=("train", "test", "all"), default="test")
        q.add_argument("--test-every", type=int, default=4)
        q.add_argument("--frames", default=None, help="comma-separated frame ids (overrides --split)")
        q.add_argument("--samples", type=int, default=None, help="samples per ray")
        q.add_argument("--epsilon", type=float, default=2.0, help="inverse-distance blend exponent")
        q.add_argument("--distance-threshold", type=float, default=None)
        q.add_argument("--visibility-threshold", type=float, default=0.05)
        q.add_argument("--jobs", type=int, default=1)

    r = sub.add_parser("render", help="render blended RGB/depth images")
    model_flags(r)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="score renders against ground truth")
    model_flags(e)
    e.set_defaults(func=cmd_eval)

    w = sub.add_parser("warp-preview", help="write a warped pseudo-label for inspection")
    w.add_argument("--dataset", required=True)
    w.add_argument("--frame", type=int, required=True)
    w.add_argument("--to-frame", type=int, required=True)
    w.add_argument("--out", required=True)
    w.set_defaults(func=cmd_warp_preview)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE
    if not getattr(a, "command", None):
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return a.func(a)
    except UsageError as e:
        print(f"tuberf: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteLoss, FloatingPointError) as e:
        print(f"tuberf: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, FileNotFoundError, KeyError, ValueError, RuntimeError, OSError) as e:
        print(f"tuberf: data error: {e}", file=sys.stderr)
        return EXIT_DATA


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
