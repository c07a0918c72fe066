"""End-to-end miniature of the whole pipeline.

Generates phantoms, pretrains briefly, probes the frozen encoder, fits a
VQ decoder on the frozen stack, renders a full circle of projections from
latents, and reconstructs a volume with FDK. Meant as a fast smoke of all
moving parts, not as a quality benchmark; bump --steps for real runs.

Usage:
    python scripts/end_to_end_demo.py [--steps 300] [--outdir demo_out]
"""

import argparse
import json
import math
from pathlib import Path

import numpy as np

from xwin import fileio
from xwin.config import TrainConfig, parse_overrides
from xwin.evaluation import (FeatureTable, build_labeled_images, encoder_for_eval,
                             extract_features, linear_probe_report)
from xwin.projector import ConeBeamGeometry
from xwin.recon import (decoder_training_samples, fdk_reconstruct, psnr,
                        render_latent_projection, ssim, train_decoder)
from xwin.training import PhantomBank, build_real_pool, init_state, save_checkpoint, train_loop


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--steps", type=int, default=300)
    parser.add_argument("--decoder-steps", type=int, default=400)
    parser.add_argument("--views", type=int, default=60)
    parser.add_argument("--outdir", default="demo_out")
    args = parser.parse_args()
    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)

    cfg = parse_overrides(TrainConfig(), {
        "geom.nu": "48", "geom.nv": "48", "geom.pitch_mm": "5.0",
        "model.image_size": "48", "model.embed_dim": "64",
        "model.encoder_depth": "3", "model.num_heads": "4",
        "model.predictor_dim": "32",
        "train.epochs": "10", "train.iters_per_epoch": "50",
    })

    print("== pretraining ==")
    bank = PhantomBank.generate(cfg)
    pool = build_real_pool(cfg)
    state = init_state(cfg)
    train_loop(state, bank, pool, args.steps, log_every=100)
    save_checkpoint(out / "checkpoint.xwc", state)

    print("== linear probe ==")
    train_imgs, train_lab = build_labeled_images(cfg, 32, seed=424200)
    test_imgs, test_lab = build_labeled_images(cfg, 16, seed=424200 + 10**6)
    enc = encoder_for_eval(state.model)
    probe = linear_probe_report(
        FeatureTable(extract_features(enc, train_imgs), train_lab, "train"),
        FeatureTable(extract_features(enc, test_imgs), test_lab, "test"))
    print(json.dumps(probe, indent=2))

    print("== VQ decoder on the frozen stack ==")
    rng = np.random.default_rng(7)
    samples = decoder_training_samples(bank, cfg, rng, n_samples=48)
    decoder, dec_report = train_decoder(state.model, samples,
                                        steps=args.decoder_steps, seed=0)
    print(f"decoder: final mse {dec_report.final_mse:.4f}, "
          f"usage {dec_report.usage:.1%}")

    print("== render full circle from latents + FDK ==")
    g = cfg.geom
    ctx = bank.context_display(0, "frontal")
    projs = []
    per_angle = []
    for i in range(args.views):
        beta = 360.0 * i / args.views
        geom = ConeBeamGeometry(g.sod_mm, g.sdd_mm, g.nu, g.nv, g.pitch_mm, beta)
        rendered = render_latent_projection(state.model, decoder, ctx,
                                            math.radians(beta), geom)
        gt = bank.raw_projection(0, beta)
        per_angle.append({"beta": beta, "psnr": psnr(gt, rendered.data),
                          "ssim": ssim(gt, rendered.data)})
        projs.append(rendered)
    vol = bank.volumes[0]
    rec = fdk_reconstruct(projs, n=vol.nx, spacing=vol.spacing[0])
    fileio.save_volume(out / "latent_recon.xwv", rec)
    summary = {
        "probe": probe,
        "projection_psnr_mean": float(np.mean([r["psnr"] for r in per_angle])),
        "projection_ssim_mean": float(np.mean([r["ssim"] for r in per_angle])),
        "volume_psnr": psnr(vol.data, rec.data),
        "volume_ssim": ssim(vol.data, rec.data),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
