"""Domain-adaptation A/B experiment.

Trains the model twice with identical seeds and data, differing only in
lambda_domain (0 vs 0.6), then measures the cosine similarity and L2
distance between the cluster centers of simulated and pseudo-real image
representations on held-out phantoms, plus lesion-probe AUROC for both
encoders against random-init baselines.

Usage:
    python scripts/domain_adaptation_ab.py [steps] [--out results.json]
"""

import argparse
import json
import time

import numpy as np
import torch

from xwin.config import TrainConfig, parse_overrides
from xwin.evaluation import (FeatureTable, build_labeled_images, domain_similarity,
                             encoder_for_eval, extract_features, linear_probe_report)
from xwin.models import WorldModel
from xwin.training import PhantomBank, build_real_pool, init_state, train_loop

OVERRIDES = {
    "geom.nu": "48", "geom.nv": "48", "geom.pitch_mm": "5.0",
    "model.image_size": "48", "model.embed_dim": "64", "model.encoder_depth": "3",
    "model.num_heads": "4", "model.predictor_dim": "32",
    "train.epochs": "40", "train.iters_per_epoch": "50",
    "data.n_phantoms": "8", "data.n_real": "16",
}


def run(lambda_domain: float, steps: int, seed: int = 0):
    cfg = parse_overrides(TrainConfig(), {**OVERRIDES,
                                          "loss.lambda_domain": str(lambda_domain),
                                          "train.seed": str(seed)})
    bank = PhantomBank.generate(cfg)
    pool = build_real_pool(cfg)
    state = init_state(cfg)
    t0 = time.time()
    train_loop(state, bank, pool, steps, log_every=500)
    print(f"lambda_domain={lambda_domain}: {steps} steps in {time.time() - t0:.0f}s")
    return state, cfg


def center_similarity(state, cfg, seed=777000, n=24):
    sim_imgs, _ = build_labeled_images(cfg, n, seed, pseudo_real=False)
    real_imgs, _ = build_labeled_images(cfg, n, seed + 10**6, pseudo_real=True)
    enc = encoder_for_eval(state.model)
    return domain_similarity(extract_features(enc, sim_imgs),
                             extract_features(enc, real_imgs))


def probe(model, cfg, seed=888000, per_class=64):
    train_imgs, train_lab = build_labeled_images(cfg, per_class, seed)
    test_imgs, test_lab = build_labeled_images(cfg, per_class // 2, seed + 10**6)
    enc = encoder_for_eval(model)
    tr = FeatureTable(extract_features(enc, train_imgs), train_lab, "train")
    te = FeatureTable(extract_features(enc, test_imgs), test_lab, "test")
    return linear_probe_report(tr, te)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("steps", nargs="?", type=int, default=2000)
    parser.add_argument("--out", default="domain_ab.json")
    args = parser.parse_args()

    state_on, cfg = run(0.6, args.steps)
    state_off, _ = run(0.0, args.steps)
    cos_on, l2_on = center_similarity(state_on, cfg)
    cos_off, l2_off = center_similarity(state_off, cfg)
    results = {
        "steps": args.steps,
        "center_similarity": {"with_domain_loss": {"cosine": cos_on, "l2": l2_on},
                              "without_domain_loss": {"cosine": cos_off, "l2": l2_off}},
        "probe_with_domain_loss": probe(state_on.model, cfg),
        "probe_without_domain_loss": probe(state_off.model, cfg),
    }
    baselines = []
    for s in range(5):
        torch.manual_seed(10_000 + s)
        baselines.append(probe(WorldModel(cfg.model_config()), cfg)["lesion_present"])
    results["probe_random_init_lesion"] = baselines
    results["lesion_gap_over_random"] = (
        results["probe_with_domain_loss"]["lesion_present"] - float(np.mean(baselines)))

    print(json.dumps(results, indent=2))
    with open(args.out, "w") as fh:
        json.dump(results, fh, indent=2)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
