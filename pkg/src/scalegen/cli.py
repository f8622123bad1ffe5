"""Command-line surface: reproducible workflows over the library modules.

Exit codes: 0 success, 2 usage/config error, 3 runtime numerical abort.
All randomness flows from --seed (or the config seed) through named
substreams, so identical invocations produce identical outputs byte for byte.
"""

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, seeding
from .datapipe import Manifest, generate_corpus, ingest, save_image
from .geometry import PatchSpec
from .netcore import (CheckpointError, draw_latents, load_checkpoint,
                      synthesize_image, synthesize_patch)
from .train import (ConfigError, TrainConfig, TrainingDiverged, config_hash,
                    run_phase)

OUT_ROOT_ENV = "SCALEGEN_OUT_ROOT"


def code_hash() -> str:
    """Content hash of the installed package sources (provenance stamp)."""
    pkg = Path(__file__).parent
    h = hashlib.sha1()
    for f in sorted(pkg.glob("*.py")):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()[:16]


def _resolve_out(arg, command: str) -> Path:
    if arg is not None:
        return Path(arg)
    root = os.environ.get(OUT_ROOT_ENV)
    if root is None:
        raise ConfigError(f"--out not given and {OUT_ROOT_ENV} is not set")
    return Path(root) / command


def _write_provenance(outdir: Path, command: str, cfg_dict: dict | None = None):
    outdir.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, "code_hash": code_hash(),
               "version": __version__}
    if cfg_dict is not None:
        payload["config"] = cfg_dict
        blob = json.dumps(cfg_dict, sort_keys=True).encode()
        payload["config_hash"] = hashlib.sha256(blob).hexdigest()[:16]
    (outdir / "provenance.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _load_train_config(args) -> TrainConfig:
    with open(args.config) as fh:
        raw = json.load(fh)
    cfg = TrainConfig.from_dict(raw)
    overrides = {}
    for key in ("seed", "lambda_teacher", "s_lo", "s_hi"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    if getattr(args, "steps", None) is not None:
        overrides["steps_phase1" if args.cmd == "pretrain"
                  else "steps_phase2"] = args.steps
    if overrides:
        cfg = TrainConfig.from_dict({**cfg.to_dict(), **overrides})
    return cfg


def _parse_center(text: str) -> tuple[float, float]:
    parts = text.split(",")
    if len(parts) != 2:
        raise ConfigError(f"--center expects 'vx,vy', got {text!r}")
    return float(parts[0]), float(parts[1])


def _parse_scales(text: str) -> list:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --scales {text!r}: {exc}") from exc


def _latent_for(checkpoint_meta: dict, seed: int, d_z: int) -> np.ndarray:
    return draw_latents(seeding.substream(seed, "cli-latent"), 1, d_z)[0]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_make_corpus(args) -> int:
    out = _resolve_out(args.out, "corpus")
    sizes = _parse_scales(args.sizes)
    paths = generate_corpus(out, count=args.count, sizes=sizes, seed=args.seed)
    print(json.dumps({"out": str(out), "count": len(paths)}))
    return 0


def cmd_ingest(args) -> int:
    manifest = ingest(args.dir, p=args.patch_size, hr_threshold=args.split_rule,
                      out_manifest=args.out_manifest)
    print(json.dumps({
        "manifest": str(args.out_manifest or Path(args.dir) / "manifest.jsonl"),
        "records": len(manifest.records),
        "lr": len(manifest.lr_records),
        "hr": len(manifest.hr_records),
        "skipped": manifest.skipped,
    }))
    return 0


def _run_training(args, phase: int) -> int:
    cfg = _load_train_config(args)
    manifest = Manifest.load(args.manifest, p=cfg.p)
    out = _resolve_out(args.out, "pretrain" if phase == 1 else "train-patches")
    result = run_phase(cfg, manifest, phase, out,
                       init_checkpoint=getattr(args, "init_checkpoint", None),
                       resume=getattr(args, "resume", False))
    _write_provenance(out, args.cmd, cfg.to_dict())
    print(json.dumps({"workdir": str(result.workdir),
                      "final_checkpoint": str(result.final_checkpoint),
                      "metrics": str(result.metrics_path),
                      "config_hash": config_hash(cfg)}))
    return 0


def cmd_pretrain(args) -> int:
    return _run_training(args, 1)


def cmd_train_patches(args) -> int:
    if not args.resume and args.init_checkpoint is None:
        raise ConfigError("train-patches requires --init-checkpoint "
                          "(or --resume)")
    return _run_training(args, 2)


def cmd_sample(args) -> int:
    bundle = load_checkpoint(args.checkpoint)
    gen = bundle.gen
    spec = PatchSpec(s=args.scale, v=_parse_center(args.center), p=gen.cfg.p)
    z = _latent_for(bundle.meta, args.seed, gen.cfg.d_z)
    img = synthesize_patch(gen, z, spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_image(out, img)
    sidecar = {"command": "sample", "checkpoint": str(args.checkpoint),
               "seed": args.seed, "scale": args.scale, "center": args.center,
               "code_hash": code_hash(),
               "config_hash": bundle.meta.get("config_hash")}
    out.with_suffix(out.suffix + ".json").write_text(
        json.dumps(sidecar, sort_keys=True, indent=2) + "\n")
    print(json.dumps({"out": str(out)}))
    return 0


def cmd_render(args) -> int:
    bundle = load_checkpoint(args.checkpoint)
    gen = bundle.gen
    z = _latent_for(bundle.meta, args.seed, gen.cfg.d_z)
    img = synthesize_image(gen, z, args.res)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_image(out, img)
    sidecar = {"command": "render", "checkpoint": str(args.checkpoint),
               "seed": args.seed, "res": args.res, "code_hash": code_hash(),
               "config_hash": bundle.meta.get("config_hash")}
    out.with_suffix(out.suffix + ".json").write_text(
        json.dumps(sidecar, sort_keys=True, indent=2) + "\n")
    print(json.dumps({"out": str(out)}))
    return 0


def cmd_eval(args) -> int:
    from .metrics import Embedder, fid_at_res, pfid, spectrum_profile
    from .netcore import batch_synthesizer, image_synthesizer

    bundle = load_checkpoint(args.checkpoint)
    gen = bundle.gen
    embedder = Embedder(seed=args.seed)
    chash = bundle.meta.get("config_hash")

    if args.metric in ("pfid", "ds-pfid"):
        if args.manifest is None:
            raise ConfigError(f"--manifest is required for {args.metric}")
        manifest = Manifest.load(args.manifest, p=gen.cfg.p)
        report = pfid(manifest, batch_synthesizer(gen), embedder,
                      n_patches=args.n, seed=args.seed,
                      downsample=args.metric == "ds-pfid", config_hash=chash)
    elif args.metric == "fid":
        if args.manifest is None:
            raise ConfigError("--manifest is required for fid")
        res = args.res or gen.cfg.p
        manifest = Manifest.load(args.manifest, p=gen.cfg.p)
        report = fid_at_res(manifest, image_synthesizer(gen, res), res,
                            embedder, n=args.n, seed=args.seed,
                            config_hash=chash)
    elif args.metric == "spectrum":
        out = _resolve_out(args.out, "eval-spectrum")
        out.mkdir(parents=True, exist_ok=True)
        res = args.res or gen.cfg.p
        images = image_synthesizer(gen, res)(
            seeding.substream(args.seed, "spectrum"), args.n)
        freqs, log_power = spectrum_profile(images)
        csv_path = out / "spectrum.csv"
        csv_path.write_text("frequency,log_power\n" + "".join(
            f"{f:.1f},{lp:.8g}\n" for f, lp in zip(freqs, log_power)))
        png_path = out / "spectrum.png"
        _plot_spectrum(freqs, log_power, png_path)
        _write_provenance(out, "eval-spectrum")
        report = {"metric": "spectrum", "n": args.n, "res": res,
                  "csv": str(csv_path), "png": str(png_path),
                  "seed": args.seed, "config_hash": chash}
    else:  # pragma: no cover - argparse choices guard this
        raise ConfigError(f"unknown metric {args.metric}")

    print(json.dumps(report, sort_keys=True))
    return 0


def _plot_spectrum(freqs, log_power, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(freqs, log_power)
    ax.set_xlabel("frequency (cycles/image)")
    ax.set_ylabel("log10 power")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def cmd_extrapolate(args) -> int:
    from .metrics import Embedder, extrapolation_sweep

    bundle = load_checkpoint(args.checkpoint)
    gen = bundle.gen
    scales = _parse_scales(args.scales)
    if not scales:
        raise ConfigError("--scales must list at least one scale")
    out = _resolve_out(args.out, "extrapolate")
    out.mkdir(parents=True, exist_ok=True)
    z_set = draw_latents(seeding.substream(args.seed, "extrapolate"),
                         args.n_z, gen.cfg.d_z)
    manifest = embedder = None
    if args.manifest is not None:
        manifest = Manifest.load(args.manifest, p=gen.cfg.p)
        embedder = Embedder(seed=args.seed)
    report = extrapolation_sweep(
        gen, z_set, scales, manifest=manifest, embedder=embedder,
        n_pfid=args.n, seed=args.seed, train_stats=bundle.meta.get("stats"),
        out_png=out / "sweep.png")
    (out / "report.json").write_text(json.dumps(report, sort_keys=True,
                                                indent=2) + "\n")
    _write_provenance(out, "extrapolate")
    print(json.dumps(report, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scalegen",
        description="continuous-scale patch generator: data, training, "
                    "synthesis and evaluation")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="cmd", required=True)

    sp = sub.add_parser("make-corpus", help="write a procedural test corpus")
    sp.add_argument("--out", default=None)
    sp.add_argument("--count", type=int, default=64)
    sp.add_argument("--sizes", default="64,96,128,192,256")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_make_corpus)

    sp = sub.add_parser("ingest", help="scan an image directory into a manifest")
    sp.add_argument("--dir", required=True)
    sp.add_argument("--out-manifest", default=None)
    sp.add_argument("--split-rule", type=int, default=None,
                    help="HR threshold: records with min side >= this are HR")
    sp.add_argument("--patch-size", type=int, required=True)
    sp.set_defaults(func=cmd_ingest)

    for name, fn in (("pretrain", cmd_pretrain),
                     ("train-patches", cmd_train_patches)):
        sp = sub.add_parser(name, help=f"run training phase "
                                       f"{1 if name == 'pretrain' else 2}")
        sp.add_argument("--config", required=True)
        sp.add_argument("--manifest", required=True)
        sp.add_argument("--out", default=None)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--steps", type=int, default=None)
        sp.add_argument("--lambda-teacher", dest="lambda_teacher", type=float,
                        default=None)
        sp.add_argument("--s-lo", dest="s_lo", type=int, default=None)
        sp.add_argument("--s-hi", dest="s_hi", type=int, default=None)
        if name == "train-patches":
            sp.add_argument("--init-checkpoint", default=None)
            sp.add_argument("--resume", action="store_true")
        sp.set_defaults(func=fn)

    sp = sub.add_parser("sample", help="emit one p x p patch at (scale, center)")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--scale", type=int, required=True)
    sp.add_argument("--center", default="0.5,0.5")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("render", help="emit a full image at an arbitrary "
                                       "resolution via tiled synthesis")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--res", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("eval", help="compute an evaluation metric")
    sp.add_argument("--metric", required=True,
                    choices=["pfid", "fid", "ds-pfid", "spectrum"])
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", default=None)
    sp.add_argument("--n", type=int, default=2048)
    sp.add_argument("--res", type=int, default=None)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("extrapolate", help="scale sweep with contact sheet")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--scales", required=True)
    sp.add_argument("--out", default=None)
    sp.add_argument("--manifest", default=None)
    sp.add_argument("--n", type=int, default=256)
    sp.add_argument("--n-z", dest="n_z", type=int, default=3)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_extrapolate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"scalegen: numerical abort: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, CheckpointError, ValueError, FileNotFoundError,
            NotADirectoryError) as exc:
        print(f"scalegen: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
