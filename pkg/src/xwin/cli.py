"""Command-line interface.

Subcommands: phantom, render, train, probe, finetune, reconstruct, metrics,
ablate. Every command accepts --config (flat key = value file), --seed, and
repeated --set key=value overrides.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np
import torch

from . import fileio
from .config import TrainConfig, config_to_text, load_config
from .evaluation import (FeatureTable, build_labeled_images, encoder_for_eval,
                         extract_features, few_shot_finetune, linear_probe_report)
from .phantoms import cylinder_volume, generate_phantom, random_phantom_spec
from .projector import Action, ConeBeamGeometry, pose_from_action, render_drr, to_display
from .recon import (VQDecoder, decoder_training_samples, fdk_reconstruct, psnr,
                    render_latent_projection, ssim, train_decoder)
from .training import (PhantomBank, build_real_pool, init_state, load_checkpoint,
                       save_checkpoint, train_loop)


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", default=None, help="flat key = value config file")
    p.add_argument("--seed", type=int, default=None, help="override train.seed")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="config override, repeatable")


def _config_from_args(args) -> TrainConfig:
    overrides = {}
    for item in args.overrides:
        if "=" not in item:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        overrides[key.strip()] = val.strip()
    if args.seed is not None:
        overrides.setdefault("train.seed", str(args.seed))
    return load_config(args.config, overrides)


def cmd_phantom(args):
    cfg = _config_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.data.phantom_seed if args.seed is None else args.seed
    index = []
    for i in range(args.count):
        spec = random_phantom_spec(seed + i)
        vol, labels = generate_phantom(spec, cfg.data.grid_n, cfg.data.grid_n,
                                       cfg.data.grid_n, cfg.data.grid_spacing_mm)
        name = f"phantom_{i:04d}.xwv"
        fileio.save_volume(out / name, vol)
        index.append({"file": name, "seed": seed + i, "labels": labels.as_dict()})
    (out / "labels.json").write_text(json.dumps(index, indent=2))
    print(f"wrote {args.count} phantoms to {out}")


def cmd_render(args):
    cfg = _config_from_args(args)
    vol = fileio.load_volume(args.volume)
    g = cfg.geom
    rig = ConeBeamGeometry(g.sod_mm, g.sdd_mm, g.nu, g.nv, g.pitch_mm)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k in range(args.views):
        action = Action(k, args.delta_phi)
        geom = pose_from_action(args.base, action, rig, bound_deg=360.0)
        img = render_drr(vol, geom)
        if args.display:
            img = to_display(img)
        fileio.save_projection(out / f"view_{k:03d}_beta{geom.beta:+08.2f}.xwp", img)
    print(f"rendered {args.views} views from {args.base} base to {out}")


def cmd_train(args):
    cfg = _config_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config_to_text(cfg))
    cache = out / "projection_cache" if args.cache else None
    bank = PhantomBank.generate(cfg, cache_dir=cache)
    real_pool = build_real_pool(cfg)
    state = init_state(cfg)
    steps = args.steps if args.steps is not None else cfg.train.total_steps
    train_loop(state, bank, real_pool, steps,
               metrics_path=out / "metrics.csv",
               checkpoint_path=out / "checkpoint.xwc",
               checkpoint_every=args.checkpoint_every)
    save_checkpoint(out / "checkpoint.xwc", state)
    print(f"trained {steps} steps; checkpoint + metrics in {out}")


def cmd_probe(args):
    state = load_checkpoint(args.checkpoint)
    cfg = state.config
    n = args.per_class
    seed = args.seed if args.seed is not None else 900000
    train_imgs, train_lab = build_labeled_images(cfg, n, seed)
    test_imgs, test_lab = build_labeled_images(cfg, max(n // 2, 8), seed + 10**6)
    enc = encoder_for_eval(state.model, args.encoder)
    train_tab = FeatureTable(extract_features(enc, train_imgs), train_lab, "train")
    test_tab = FeatureTable(extract_features(enc, test_imgs), test_lab, "test")
    results = linear_probe_report(train_tab, test_tab)
    out = Path(args.out) if args.out else None
    lines = [json.dumps({"task": t, "auroc": v, "encoder": args.encoder})
             for t, v in results.items()]
    if out:
        out.write_text("\n".join(lines) + "\n")
    for line in lines:
        print(line)


def cmd_finetune(args):
    state = load_checkpoint(args.checkpoint)
    cfg = state.config
    seed = args.seed if args.seed is not None else 910000
    n_train = max(args.shots * 4, 24)
    train_imgs, train_lab = build_labeled_images(cfg, n_train, seed)
    test_imgs, test_lab = build_labeled_images(cfg, max(n_train // 2, 12), seed + 10**6)
    report = few_shot_finetune(
        state.model, train_imgs, train_lab[args.task], test_imgs, test_lab[args.task],
        k=args.shots, seeds=tuple(range(args.runs)))
    line = json.dumps(report.as_dict())
    if args.out:
        Path(args.out).write_text(line + "\n")
    print(line)


def cmd_reconstruct(args):
    cfg_args = _config_from_args(args)
    n_views = args.views
    angles = [360.0 * i / n_views for i in range(n_views)]

    if args.source == "groundtruth":
        cfg = cfg_args
        if args.volume:
            vol = fileio.load_volume(args.volume)
        else:
            vol = cylinder_volume(70.0, 240.0, 0.02, cfg.data.grid_n,
                                  cfg.data.grid_spacing_mm, supersample=4)
        g = cfg.geom
        projs = []
        for b in angles:
            geom = ConeBeamGeometry(g.sod_mm, g.sdd_mm, args.det_n, args.det_n,
                                    args.det_pitch, b)
            projs.append(render_drr(vol, geom))
        rec = fdk_reconstruct(projs, n=vol.nx, spacing=vol.spacing[0])
        rows = []
    else:
        if not args.checkpoint:
            raise SystemExit("--source latent requires --checkpoint")
        state = load_checkpoint(args.checkpoint)
        cfg = state.config
        bank = PhantomBank.generate(cfg, n=1, seed=args.phantom_seed)
        if args.decoder:
            decoder, _ = load_decoder(args.decoder)
        else:
            # No decoder supplied: fit one on the checkpointed stack first.
            rng = np.random.default_rng(cfg.train.seed + 271)
            samples = decoder_training_samples(bank, cfg, rng, n_samples=48)
            decoder, report = train_decoder(state.model, samples,
                                            steps=args.decoder_steps,
                                            seed=cfg.train.seed)
            meta = {"embed_dim": cfg.model.embed_dim,
                    "grid_size": state.model.cfg.grid_size,
                    "patch_size": cfg.model.patch_size,
                    "codebook_size": decoder.codebook_size,
                    "codebook_dim": decoder.codebook.shape[1],
                    "dtype": cfg.model.dtype}
            save_decoder(str(args.output) + ".decoder.pt", decoder, meta)
        vol = bank.volumes[0]
        g = cfg.geom
        ctx = bank.context_display(0, "frontal")
        projs, rows = [], []
        for b in angles:
            geom = ConeBeamGeometry(g.sod_mm, g.sdd_mm, g.nu, g.nv, g.pitch_mm, b)
            rendered = render_latent_projection(
                state.model, decoder, ctx, math.radians(b), geom)
            gt = bank.raw_projection(0, b)
            rows.append({"beta": b, "proj_psnr": psnr(gt, rendered.data),
                         "proj_ssim": ssim(gt, rendered.data)})
            projs.append(rendered)
        rec = fdk_reconstruct(projs, n=vol.nx, spacing=vol.spacing[0])

    fileio.save_volume(args.output, rec)
    vol_metrics = {"vol_psnr": psnr(vol.data, rec.data), "vol_ssim": ssim(vol.data, rec.data)}
    lines = [json.dumps(r) for r in rows] + [json.dumps(vol_metrics)]
    if args.metrics_out:
        Path(args.metrics_out).write_text("\n".join(lines) + "\n")
    print(json.dumps(vol_metrics))


def save_decoder(path, decoder: VQDecoder, meta: dict):
    torch.save({"state": decoder.state_dict(), "meta": meta}, path)


def load_decoder(path):
    payload = torch.load(path, map_location="cpu", weights_only=True)
    meta = payload["meta"]
    decoder = VQDecoder(meta["embed_dim"], meta["grid_size"], meta["patch_size"],
                        meta["codebook_size"], meta["codebook_dim"])
    decoder = decoder.to(getattr(torch, meta.get("dtype", "float32")))
    decoder.load_state_dict(payload["state"])
    return decoder, meta


def cmd_metrics(args):
    def load_any(path):
        path = str(path)
        if path.endswith(".xwv"):
            return fileio.load_volume(path).data
        return fileio.load_projection(path).data

    ref = load_any(args.ref)
    test = load_any(args.test)
    out = {"psnr": psnr(ref, test), "ssim": ssim(ref, test)}
    if args.out:
        Path(args.out).write_text(json.dumps(out) + "\n")
    print(json.dumps(out))


def _short_train(cfg, steps):
    bank = PhantomBank.generate(cfg)
    pool = build_real_pool(cfg)
    state = init_state(cfg)
    train_loop(state, bank, pool, steps, log_every=0)
    return state, bank, pool


def _probe_auroc(state, seed=920000, per_class=24):
    cfg = state.config
    train_imgs, train_lab = build_labeled_images(cfg, per_class, seed)
    test_imgs, test_lab = build_labeled_images(cfg, per_class // 2, seed + 10**6)
    enc = encoder_for_eval(state.model)
    train_tab = FeatureTable(extract_features(enc, train_imgs), train_lab, "train")
    test_tab = FeatureTable(extract_features(enc, test_imgs), test_lab, "test")
    return linear_probe_report(train_tab, test_tab)["lesion_present"]


def cmd_ablate(args):
    cfg = _config_from_args(args)
    steps = args.steps
    out = Path(args.out)
    rows = []
    if args.what == "action_design":
        for mode in ("direct_yaw", "stepwise_yaw", "euler3"):
            run_cfg = _with(cfg, {"action.mode": mode})
            state, _, _ = _short_train(run_cfg, steps)
            rows.append({"mode": mode, "lesion_auroc": _probe_auroc(state)})
        fields = ["mode", "lesion_auroc"]
    elif args.what == "step_size":
        for dphi in (1.0, 3.0, 5.0, 10.0, 15.0):
            run_cfg = _with(cfg, {"action.delta_phi_deg": str(dphi),
                                  "action.bound_deg": "90.0"})
            state, _, _ = _short_train(run_cfg, steps)
            rows.append({"delta_phi": dphi, "lesion_auroc": _probe_auroc(state)})
        fields = ["delta_phi", "lesion_auroc"]
    elif args.what == "loss_weights":
        for lam in (0.0, 0.2, 0.4, 0.6, 1.0):
            run_cfg = _with(cfg, {"loss.lambda_affinity": str(lam)})
            state, _, _ = _short_train(run_cfg, steps)
            rows.append({"lambda_affinity": lam, "lesion_auroc": _probe_auroc(state)})
        fields = ["lambda_affinity", "lesion_auroc"]
    elif args.what == "codebook":
        rows = codebook_sweep(cfg, steps=steps, decoder_steps=args.decoder_steps,
                              views=args.views)
        fields = ["size", "dim", "usage", "proj_psnr", "proj_ssim", "vol_psnr", "vol_ssim"]
    else:
        raise SystemExit(f"unknown ablation {args.what!r}")
    with open(out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {len(rows)} rows to {out}")


def _with(cfg: TrainConfig, overrides: dict[str, str]) -> TrainConfig:
    from .config import parse_overrides

    return parse_overrides(cfg, overrides)


def codebook_sweep(cfg: TrainConfig, steps: int = 300, decoder_steps: int = 400,
                   views: int = 24, sizes=(1024, 2048), dims=(128, 256),
                   state=None, bank=None) -> list[dict]:
    """Codebook size/dim sweep: decoder training, rendering, FDK metrics.

    Returns rows shaped like the codebook results table: size, dim, usage,
    projection PSNR/SSIM, volume PSNR/SSIM.
    """
    if state is None or bank is None:
        state, bank, _ = _short_train(cfg, steps)
    rng = np.random.default_rng(cfg.train.seed + 314)
    samples = decoder_training_samples(bank, cfg, rng, n_samples=48)
    angles = [360.0 * i / views for i in range(views)]
    vol = bank.volumes[0]
    g = cfg.geom
    ctx = bank.context_display(0, "frontal")
    rows = []
    for size in sizes:
        for dim in dims:
            decoder, report = train_decoder(
                state.model, samples, codebook_size=size, codebook_dim=dim,
                steps=decoder_steps, seed=cfg.train.seed)
            proj_psnrs, proj_ssims, projs = [], [], []
            decoder.usage_counts.zero_()
            for b in angles:
                geom = ConeBeamGeometry(g.sod_mm, g.sdd_mm, g.nu, g.nv, g.pitch_mm, b)
                rendered = render_latent_projection(
                    state.model, decoder, ctx, math.radians(b), geom)
                gt = bank.raw_projection(0, b)
                proj_psnrs.append(psnr(gt, rendered.data))
                proj_ssims.append(ssim(gt, rendered.data))
                projs.append(rendered)
            usage = float((decoder.usage_counts > 0).double().mean())
            rec = fdk_reconstruct(projs, n=vol.nx, spacing=vol.spacing[0])
            rows.append({
                "size": size, "dim": dim, "usage": usage,
                "proj_psnr": float(np.mean(proj_psnrs)),
                "proj_ssim": float(np.mean(proj_ssims)),
                "vol_psnr": psnr(vol.data, rec.data),
                "vol_ssim": ssim(vol.data, rec.data),
            })
    return rows


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xwin", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate labeled phantom volumes")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=8)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("render", help="render projections of a volume")
    _add_common(p)
    p.add_argument("--volume", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--views", type=int, required=True)
    p.add_argument("--delta-phi", type=float, default=3.0)
    p.add_argument("--base", choices=("frontal", "lateral"), default="frontal")
    p.add_argument("--display", action="store_true",
                   help="save display-transformed images instead of line integrals")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("train", help="run pretraining")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--cache", action="store_true", help="cache projections on disk")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("probe", help="linear probing of a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--per-class", type=int, default=32)
    p.add_argument("--encoder", choices=("teacher", "student"), default="teacher")
    p.add_argument("--out", default=None, help="JSONL output path")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("finetune", help="few-shot fine-tuning evaluation")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--shots", type=int, required=True)
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--task", default="lesion_present")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("reconstruct", help="FDK reconstruction")
    _add_common(p)
    p.add_argument("--source", choices=("groundtruth", "latent"), required=True)
    p.add_argument("--views", type=int, default=120)
    p.add_argument("--output", required=True)
    p.add_argument("--volume", default=None, help="ground-truth volume file")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--decoder", default=None)
    p.add_argument("--phantom-seed", type=int, default=1000)
    p.add_argument("--det-n", type=int, default=160)
    p.add_argument("--det-pitch", type=float, default=2.6)
    p.add_argument("--decoder-steps", type=int, default=600)
    p.add_argument("--metrics-out", default=None)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("metrics", help="PSNR/SSIM between two files")
    _add_common(p)
    p.add_argument("--ref", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("ablate", help="run an ablation sweep, emit CSV")
    _add_common(p)
    p.add_argument("--what", required=True,
                   choices=("action_design", "step_size", "loss_weights", "codebook"))
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--decoder-steps", type=int, default=400)
    p.add_argument("--views", type=int, default=24)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
