"""Command-line entry point: ``densemarks <command> [--config F] [--set k=v] [--out DIR] [--seed N]``.

Every command reads a flat ``key = value`` configuration, writes the resolved
configuration next to its outputs and prints one ``key=value`` summary line.
Exit codes: 0 success, 2 usage, 3 malformed input, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import embedder as emb
from . import pose as posemod
from . import stereo
from . import synthetic as synth
from .evaluation import matching_quality
from .geometry import Camera, UVWMap
from .io import (FormatError, parse_floats, read_pgm, read_ppm, read_uvw, write_correspondence, write_ppm,
                 write_uvw)
from .matcher import find_point, nn_warp
from .stereo import DegenerateTriangulation

log = logging.getLogger("densemarks")

EXIT_USAGE, EXIT_FORMAT, EXIT_NUMERIC = 2, 3, 4


class UsageError(Exception):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _list(text: str) -> list:
    return [p.strip() for p in text.split(",") if p.strip()]


def _opt_float(text: str):
    return None if text.strip().lower() in ("none", "off", "") else float(text)


_TYPES = {int: int, float: float, str: str, bool: _bool}


def _train_keys() -> dict:
    out = {}
    for f in fields(emb.TrainConfig):
        out[f.name] = (_TYPES[type(f.default)], f.default)
    return out


COMMON = {"seed": (int, 0)}
SCHEMA = {
    "synth": {"num_sequences": (int, 4), "frames": (int, 12), "size": (int, 64), "track_budget": (int, 256)},
    "train": {"data": (str, ""), "held_out": (int, 0), **_train_keys()},
    "embed": {"checkpoint": (str, ""), "image": (str, ""), "mask": (str, "")},
    "warp": {"source_uvw": (str, ""), "target_uvw": (str, ""), "source_image": (str, ""),
             "method": (str, "auto")},
    "query": {"reference_uvw": (str, ""), "x": (int, -1), "y": (int, -1), "targets": (_list, [])},
    "triangulate": {"uvw": (_list, []), "cameras": (_list, []), "images": (_list, []),
                    "downsample_factor": (float, 4.0), "min_track_len": (int, 2), "uvw_tol": (float, 0.05),
                    "track_tol": (float, 0.10), "reproj_thresh_px": (float, 10.0),
                    "subpixel_tol": (_opt_float, 0.005)},
    "fit": {"observed": (str, ""), "camera": (str, ""), "init": (str, "0 0 0 0 0 0 0"), "iters": (int, 50)},
    "eval": {"checkpoint": (str, ""), "data": (str, ""), "pairs_per_sequence": (int, 4)},
}


def _format_value(v) -> str:
    if isinstance(v, list):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_config_text(text: str, path="<config>") -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    offset = 0
    for line in text.splitlines(keepends=True):
        body = line.split("#", 1)[0].strip()
        if body:
            if "=" not in body:
                raise FormatError(path, offset, f"expected 'key = value', got {body!r}")
            k, v = body.split("=", 1)
            out[k.strip()] = v.strip()
        offset += len(line.encode())
    return out


def resolve_config(command: str, raw: dict) -> dict:
    schema = {**COMMON, **SCHEMA[command]}
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise UsageError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
    cfg = {}
    for key, (kind, default) in schema.items():
        if key in raw:
            try:
                cfg[key] = kind(raw[key])
            except ValueError as exc:
                raise UsageError(f"bad value for {key}: {exc}") from None
        else:
            cfg[key] = default
    return cfg


def write_resolved(cfg: dict, out: Path, command: str) -> None:
    lines = [f"# resolved configuration for {command}"] + [f"{k} = {_format_value(v)}" for k, v in cfg.items()]
    (out / "config.resolved").write_text("\n".join(lines) + "\n")


def _require(cfg: dict, *keys) -> None:
    for k in keys:
        if cfg[k] in ("", [], None):
            raise UsageError(f"missing required key: {k}")


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"no such file or directory: {p}")
    return p


def _load_map(path: str) -> UVWMap:
    coords, valid = read_uvw(_existing(path))
    return UVWMap(coords, valid)


def _summary(**kv) -> str:
    return " ".join(f"{k}={_format_value(v) if not isinstance(v, float) else f'{v:.6g}'}" for k, v in kv.items())


def _sequence_dirs(data: str) -> list:
    root = _existing(data)
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and p.name.startswith("seq_"))
    if not dirs:
        raise UsageError(f"no seq_* directories under {root}")
    return dirs


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: dict, out: Path) -> str:
    if cfg["num_sequences"] < 1:
        raise UsageError("num_sequences must be >= 1")
    tpl = synth.make_template()
    cam = synth.default_camera(cfg["size"])
    pairs = 0
    for n in range(cfg["num_sequences"]):
        seq = synth.generate_sequence(cfg["seed"] + n, cfg["frames"], cfg["size"], cam,
                                      track_budget=cfg["track_budget"], template=tpl)
        synth.save_sequence(seq, out / f"seq_{n:04d}")
        pairs += len(seq.tracks)
    return _summary(command="synth", sequences=cfg["num_sequences"], frames=cfg["frames"], pairs=pairs)


def _train_config(cfg: dict) -> emb.TrainConfig:
    names = {f.name for f in fields(emb.TrainConfig)}
    return emb.TrainConfig(**{k: v for k, v in cfg.items() if k in names})


def cmd_train(cfg: dict, out: Path) -> str:
    _require(cfg, "data")
    dirs = _sequence_dirs(cfg["data"])
    held = cfg["held_out"]
    if held < 0 or held >= len(dirs):
        raise UsageError("held_out must leave at least one training sequence")
    train_dirs = dirs[:len(dirs) - held]
    tcfg = _train_config(cfg)
    data = [synth.load_sequence(d) for d in train_dirs]
    res = emb.train(data, tcfg)
    emb.save_model(out / "model.dmn", res.params, res.grid, res.seghead)
    rows = ["step,loss,contrastive"] + [f"{i},{l!r},{c!r}" for i, (l, c) in enumerate(zip(res.losses, res.contrastive))]
    (out / "losses.csv").write_text("\n".join(rows) + "\n")
    final = res.losses[-1] if res.losses else float("nan")
    summary = dict(command="train", steps=tcfg.steps, mode=tcfg.mode, final_loss=final, skipped=res.skipped)
    if held:
        mae, rmse = matching_quality(res.params, [synth.load_sequence(d) for d in dirs[-held:]])
        summary.update(MAE=mae, RMSE=rmse)
    return _summary(**summary)


def cmd_embed(cfg: dict, out: Path) -> str:
    _require(cfg, "checkpoint", "image")
    params, _, _ = emb.load_model(_existing(cfg["checkpoint"]))
    image = read_ppm(_existing(cfg["image"])).astype(np.float64) / 255.0
    if cfg["mask"]:
        mask = read_pgm(_existing(cfg["mask"])) > 0
    else:
        mask = np.ones(image.shape[:2], dtype=bool)
    m = emb.embed_image(params, image, mask)
    if m.coords.shape[-1] == 3:
        write_uvw(out / "uvw.dmv", m.coords, m.valid)
        write_ppm(out / "uvw.ppm", np.where(m.valid[..., None], np.clip(m.coords, 0, 1), 0.0))
    else:
        np.save(out / "features.npy", m.coords)
    return _summary(command="embed", valid=int(m.valid.sum()), channels=m.coords.shape[-1])


def cmd_warp(cfg: dict, out: Path) -> str:
    _require(cfg, "source_uvw", "target_uvw")
    src, tgt = _load_map(cfg["source_uvw"]), _load_map(cfg["target_uvw"])
    if cfg["source_image"]:
        rgb = read_ppm(_existing(cfg["source_image"])).astype(np.float64) / 255.0
    else:
        rgb = np.where(src.valid[..., None], np.clip(src.coords, 0, 1), 0.0)
    warped, fld = nn_warp(src, rgb, tgt, cfg["method"])
    write_ppm(out / "warped.ppm", warped)
    write_correspondence(out / "field.dmc", fld.source_xy, fld.distance)
    ys, xs = np.nonzero(fld.valid)
    disp = np.linalg.norm(fld.source_xy[ys, xs] - np.stack([xs, ys], axis=1), axis=1)
    mae = float(disp.mean()) if len(disp) else float("nan")
    return _summary(command="warp", valid=len(xs), MAE=mae)


def cmd_query(cfg: dict, out: Path) -> str:
    _require(cfg, "reference_uvw", "targets")
    ref = _load_map(cfg["reference_uvw"])
    x, y = cfg["x"], cfg["y"]
    if not (0 <= x < ref.width and 0 <= y < ref.height) or not ref.valid[y, x]:
        raise UsageError(f"reference pixel ({x}, {y}) is not a valid pixel of the reference map")
    key = ref.coords[y, x]
    lines = []
    for path in cfg["targets"]:
        (px, py), d = find_point(_load_map(path), key)
        lines.append(f"{path} {px} {py} {d!r}")
    (out / "query.txt").write_text("\n".join(lines) + "\n")
    return _summary(command="query", targets=len(lines), key=" ".join(f"{v:.6f}" for v in key).replace(" ", ","))


def cmd_triangulate(cfg: dict, out: Path) -> str:
    views = cfg["uvw"]
    if len(views) < 2:
        raise UsageError("triangulate needs at least two views (uvw = a.dmv,b.dmv,...)")
    if len(cfg["cameras"]) != len(views):
        raise UsageError("need one camera file per view")
    if cfg["images"] and len(cfg["images"]) != len(views):
        raise UsageError("need one image per view")
    maps = [_load_map(p) for p in views]
    cams = [Camera.load(_existing(p)) for p in cfg["cameras"]]
    images = [read_ppm(_existing(p)).astype(np.float64) / 255.0 for p in cfg["images"]] or None
    try:
        scfg = stereo.StereoConfig(cfg["downsample_factor"], cfg["min_track_len"], cfg["uvw_tol"],
                                   cfg["track_tol"], cfg["reproj_thresh_px"], cfg["subpixel_tol"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    rec = stereo.reconstruct(maps, cams, scfg, images)
    rec.save(out / "cloud.ply", out / "stats.txt")
    return _summary(command="triangulate", views=len(views), **rec.stats)


def cmd_fit(cfg: dict, out: Path) -> str:
    _require(cfg, "observed", "camera")
    observed = _load_map(cfg["observed"])
    cam = Camera.load(_existing(cfg["camera"]))
    try:
        init = parse_floats("<init>", cfg["init"], expected=7)
    except FormatError as exc:
        raise UsageError(f"init must hold 7 numbers (ax ay az tx ty tz log_s): {exc}") from None
    if cfg["iters"] < 1:
        raise UsageError("iters must be >= 1")
    res = posemod.fit_pose(synth.make_template(), cam, observed, posemod.RigidPose.from_vector(init), cfg["iters"])
    (out / "pose.txt").write_text(res.pose.to_text(res.cost, res.iterations) + "\n")
    (out / "trace.txt").write_text("".join(f"{c!r}\n" for c in res.trace))
    return _summary(command="fit", iters=res.iterations, cost=res.cost)


def cmd_eval(cfg: dict, out: Path) -> str:
    _require(cfg, "checkpoint", "data")
    params, _, _ = emb.load_model(_existing(cfg["checkpoint"]))
    seqs = [synth.load_sequence(d) for d in _sequence_dirs(cfg["data"])]
    mae, rmse = matching_quality(params, seqs, cfg["pairs_per_sequence"], cfg["seed"])
    (out / "metrics.txt").write_text(f"MAE {mae!r}\nRMSE {rmse!r}\n")
    return _summary(command="eval", sequences=len(seqs), MAE=mae, RMSE=rmse)


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "embed": cmd_embed, "warp": cmd_warp, "query": cmd_query,
    "triangulate": cmd_triangulate, "fit": cmd_fit, "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="densemarks", description="Canonical-coordinate correspondence toolkit.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="key = value configuration file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one key")
        sp.add_argument("--out", default=".", help="output directory (default: current)")
        sp.add_argument("--seed", type=int, help="random seed (overrides config)")
        sp.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        raw = {}
        if args.config:
            path = _existing(args.config)
            raw.update(parse_config_text(path.read_text(), path))
        for item in args.set:
            if "=" not in item:
                raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
            k, v = item.split("=", 1)
            raw[k.strip()] = v.strip()
        if args.seed is not None:
            raw["seed"] = str(args.seed)
        cfg = resolve_config(args.command, raw)
        out = Path(args.out)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise UsageError(f"cannot create output directory {out}: {exc}") from None
        write_resolved(cfg, out, args.command)
        line = COMMANDS[args.command](cfg, out)
    except UsageError as exc:
        print(f"densemarks {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, FileNotFoundError) as exc:
        print(f"densemarks {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FORMAT if isinstance(exc, FormatError) else EXIT_USAGE
    except (FloatingPointError, np.linalg.LinAlgError, DegenerateTriangulation,
            posemod.InitializationError) as exc:
        print(f"densemarks {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"densemarks {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(line)
    return 0


if __name__ == "__main__":
    sys.exit(main())
