"""Acceptance suite: one test per criterion, one printed pass/fail line each.

Run with `pytest tests/test_acceptance.py -s` to see the lines as they
complete. The full suite takes roughly half an hour on two laptop cores;
the two 2000-step adaptation runs dominate.
"""

import dataclasses
import math
import time

import numpy as np
import pytest
import torch

from util_grad import assert_grads_match, rand_tokens, small_model
from xwin.config import TrainConfig, config_to_text, load_config, parse_overrides
from xwin.evaluation import (FeatureTable, auroc, build_labeled_images,
                             domain_similarity, encoder_for_eval, extract_features,
                             linear_probe, logistic_probe_fit, probe_scores)
from xwin.losses import (LossWeights, affinity, affinity_loss, align_loss, cls_loss,
                         domain_loss, infonce, mim_loss, overall_loss,
                         similarity_matrix, softmax_rows)
from xwin.masking import MaskParams, sample_multiblock
from xwin.models import WorldModel
from xwin.phantoms import cylinder_volume, random_oracle_phantom
from xwin.projector import ConeBeamGeometry, ProjectionImage, render_drr, render_drr_exact
from xwin.recon import (codebook_usage, fdk_reconstruct, psnr, ssim, train_decoder,
                        vq_quantize)
from xwin.training import (PhantomBank, build_real_pool, init_state, load_checkpoint,
                           sample_actions, save_checkpoint, stop_gradient_report,
                           train_loop, train_step)
from xwin.cli import codebook_sweep


def report(num, name, ok, detail=""):
    status = "PASS" if ok else "FAIL"
    print(f"\nACCEPTANCE {num:>2} [{status}] {name}: {detail}")
    assert ok, f"criterion {num} ({name}): {detail}"


# Shared configs -------------------------------------------------------

AB_OVERRIDES = {
    "geom.nu": "48", "geom.nv": "48", "geom.pitch_mm": "5.0",
    "model.image_size": "48", "model.embed_dim": "64", "model.encoder_depth": "3",
    "model.num_heads": "4", "model.predictor_dim": "32",
    "train.epochs": "40", "train.iters_per_epoch": "50",
    "data.n_phantoms": "8", "data.n_real": "16",
}

SMALL_TRAIN = {
    "data.n_phantoms": "3", "data.n_real": "3", "data.grid_n": "32",
    "data.grid_spacing_mm": "8.0", "geom.nu": "32", "geom.nv": "32",
    "geom.pitch_mm": "8.0", "model.image_size": "32", "model.patch_size": "8",
    "model.embed_dim": "32", "model.encoder_depth": "2", "model.num_heads": "2",
    "model.predictor_dim": "16", "train.batch_volumes": "2", "train.batch_real": "2",
    "train.epochs": "2", "train.iters_per_epoch": "5",
}


def _cfg(overrides):
    return parse_overrides(TrainConfig(), dict(overrides))


@pytest.fixture(scope="module")
def ab_runs():
    """Two 2000-step runs differing only in lambda_domain (criteria 8, 9)."""
    runs = {}
    for lam in ("0.6", "0.0"):
        cfg = parse_overrides(_cfg(AB_OVERRIDES), {"loss.lambda_domain": lam})
        bank = PhantomBank.generate(cfg)
        pool = build_real_pool(cfg)
        state = init_state(cfg)
        train_loop(state, bank, pool, 2000, log_every=0)
        runs[lam] = (state, cfg)
    return runs


@pytest.fixture(scope="module")
def probe_sets(ab_runs):
    """Balanced pseudo-real evaluation images, shared by every probe."""
    _, cfg = ab_runs["0.6"]
    train = build_labeled_images(cfg, 64, seed=888000)
    test = build_labeled_images(cfg, 32, seed=888000 + 10**6)
    return train, test


# ----------------------------------------------------------------------


def test_criterion_01_projector_oracle():
    t0 = time.time()
    rng = np.random.default_rng(0)
    worst = 0.0
    for ph in range(5):
        vol = random_oracle_phantom(100 + ph)
        for _pose in range(20):
            geom = ConeBeamGeometry(541.0, 949.0, 64, 64, 4.0,
                                    float(rng.uniform(0.0, 360.0)),
                                    float(rng.uniform(-15.0, 15.0)),
                                    float(rng.uniform(-15.0, 15.0)))
            a = render_drr(vol, geom, step_mm=0.5 * min(vol.spacing))
            b = render_drr_exact(vol, geom)
            mask = b.data > 0.01
            rel = np.abs(a.data[mask] - b.data[mask]) / b.data[mask]
            worst = max(worst, float(rel.max()))
    elapsed = time.time() - t0
    report(1, "projector oracle", worst < 0.01 and elapsed < 60.0,
           f"max rel err {worst:.4%} over 5x20 poses, {elapsed:.1f}s (< 60s)")


def test_criterion_02_gradient_suite():
    instances = 20
    checked = []

    def nncore_case(rng, i):
        model = small_model(seed=i)
        img = torch.tensor(rng.random((1, 16, 16)), dtype=torch.float64,
                           requires_grad=True)
        w4 = torch.tensor(rng.standard_normal((1, 4, 16)), dtype=torch.float64)
        ctx = rand_tokens(rng, 1, 4, 16).requires_grad_(True)
        action = torch.tensor(rng.uniform(-1.5, 1.5), dtype=torch.float64,
                              requires_grad=True)
        vis_idx, masked_idx = [0, 2, 3], [1]
        vis = rand_tokens(rng, 1, 3, 16).requires_grad_(True)
        wm = torch.tensor(rng.standard_normal((1, 1, 16)), dtype=torch.float64)
        cases = {
            "patch_embed": (lambda: (model.encoder.patch_embed(img) * w4).sum(),
                            {"img": img, **dict(model.encoder.patch_embed.named_parameters())}),
            "encode": (lambda: (model.encoder(img) * w4).sum(),
                       {"img": img, **dict(model.encoder.named_parameters())}),
            "predict_view": (lambda: (model.view_predictor(ctx, action) * w4).sum(),
                             {"ctx": ctx, "action": action,
                              **dict(model.view_predictor.named_parameters())}),
            "predict_mask": (lambda: (model.mask_predictor(vis, vis_idx, masked_idx) * wm).sum(),
                             {"vis": vis, **dict(model.mask_predictor.named_parameters())}),
            "classify_domain": (lambda: model.classifier(ctx).sum(),
                                {"ctx": ctx, **dict(model.classifier.named_parameters())}),
            "global_avg_pool": (lambda: (ctx.mean(dim=1) ** 2).sum(), {"ctx": ctx}),
        }
        return cases

    def loss_case(rng, i):
        n, d = int(rng.integers(2, 9)), int(rng.integers(3, 17))
        z = rand_tokens(rng, 1, n, d)[0].requires_grad_(True)
        t = rand_tokens(rng, 1, n, d)[0]
        log_tau = torch.tensor(math.log(0.07), dtype=torch.float64, requires_grad=True)
        pred_r = rand_tokens(rng, 2, 3, d).requires_grad_(True)
        pred_s = rand_tokens(rng, 2, 2, d).requires_grad_(True)
        tgt_r, tgt_s = rand_tokens(rng, 2, 3, d), rand_tokens(rng, 2, 2, d)
        lg_r = torch.tensor(rng.standard_normal(n), dtype=torch.float64, requires_grad=True)
        lg_s = torch.tensor(rng.standard_normal(n), dtype=torch.float64, requires_grad=True)
        zp = rand_tokens(rng, n, 3, d).requires_grad_(True)
        tp = rand_tokens(rng, n, 3, d)
        lg_d = torch.tensor(rng.standard_normal(n), dtype=torch.float64, requires_grad=True)
        norm = bool(i % 2)
        reduction = "element_mean" if i % 2 else "token_sum"
        cases = {
            "align(2-6)": (lambda: align_loss(z, t, log_tau.exp(), torch.tensor(0.07),
                                              0.4, normalize=norm)[0],
                           {"z": z, "log_tau": log_tau}),
            "mim(7-8)": (lambda: mim_loss(pred_r, tgt_r, pred_s, tgt_s, reduction),
                         {"pred_r": pred_r, "pred_s": pred_s}),
            "cls(9)": (lambda: cls_loss(torch.sigmoid(lg_r), torch.sigmoid(lg_s)),
                       {"lg_r": lg_r, "lg_s": lg_s}),
            "domain(10)": (lambda: domain_loss(zp, tp, torch.sigmoid(lg_d)),
                           {"zp": zp, "lg_d": lg_d}),
        }
        return cases

    t0 = time.time()
    for i in range(instances):
        rng = np.random.default_rng(1000 + i)
        for name, (f, tensors) in {**nncore_case(rng, i), **loss_case(rng, i)}.items():
            assert_grads_match(f, tensors, rng, n_coords=3)
            if i == 0:
                checked.append(name)
    report(2, "gradient suite",
           True, f"{len(checked)} operations x {instances} instances "
                 f"({', '.join(checked)}), {time.time()-t0:.0f}s")


def test_criterion_03_loss_identities():
    rng = np.random.default_rng(3)
    z, t = [torch.tensor(rng.standard_normal((6, 8)), dtype=torch.float64)
            for _ in range(2)]
    p = softmax_rows(similarity_matrix(z, t), 0.07)
    eye = torch.eye(6, dtype=torch.float64)
    ok_identity = float(affinity_loss(eye, p)) == float(infonce(p))

    ok_uniform = all(
        abs(float(infonce(torch.full((n, n), 1.0 / n, dtype=torch.float64)))
            - math.log(n)) < 1e-6
        for n in (2, 4, 8))

    one = torch.tensor(1.3, dtype=torch.float64)
    total, rep = overall_loss(one, one, one, 2 * one, 3 * one, 4 * one, LossWeights())
    expected = rep.align + 1.0 * rep.mim + 0.6 * rep.domain + 1.0 * rep.cls
    ok_decomp = abs(rep.overall - expected) / abs(expected) < 1e-6

    targets = torch.tensor(rng.standard_normal((8, 16)), dtype=torch.float64)
    a = affinity(targets, 1e-3, normalize=True)
    ok_sharp = float(torch.diagonal(a).min()) > 0.99

    report(3, "loss identities", ok_identity and ok_uniform and ok_decomp and ok_sharp,
           f"affinity(I,P)==infonce exact; ln N at 1e-6; decomposition 1e-6; "
           f"min diag(A) at tau~=1e-3 is {float(torch.diagonal(a).min()):.4f}")


def test_criterion_04_stop_gradient_suite():
    cfg = _cfg(SMALL_TRAIN)
    bank = PhantomBank.generate(cfg)
    pool = build_real_pool(cfg)
    state = init_state(cfg)
    worst = {"teacher_total": 0.0, "fc_under_domain": 0.0, "theta_under_cls": 0.0}
    for _ in range(10):
        train_step(state, bank, pool)
        norms = stop_gradient_report(state, bank, pool)
        for k, v in norms.items():
            worst[k] = max(worst[k], v)
    ok = all(v == 0.0 for v in worst.values())
    report(4, "stop-gradient suite", ok, f"max norms over 10 steps: {worst}")


def test_criterion_05_determinism_and_resume(tmp_path):
    cfg = _cfg(SMALL_TRAIN)
    bank = PhantomBank.generate(cfg)
    pool = build_real_pool(cfg)

    s1 = init_state(cfg)
    r1 = [train_step(s1, bank, pool) for _ in range(10)]
    s2 = init_state(cfg)
    r2 = [train_step(s2, bank, pool) for _ in range(10)]
    ok_rerun = r1 == r2

    s3 = init_state(cfg)
    first5 = [train_step(s3, bank, pool) for _ in range(5)]
    ck = tmp_path / "mid.xwc"
    save_checkpoint(ck, s3)
    rest_uninterrupted = [train_step(s3, bank, pool) for _ in range(5)]
    resumed = load_checkpoint(ck)
    rest_resumed = [train_step(resumed, bank, pool) for _ in range(5)]
    ok_resume = rest_uninterrupted == rest_resumed and first5 == r1[:5]

    report(5, "determinism & resume", ok_rerun and ok_resume,
           f"10-step reruns bit-identical: {ok_rerun}; "
           f"mid-run resume reproduces trajectory: {ok_resume}")


def test_criterion_06_training_smoke(tmp_path):
    cfg_path = tmp_path / "default.cfg"
    cfg_path.write_text(config_to_text(TrainConfig()))
    cfg = load_config(cfg_path)
    ok_weights = (cfg.loss.lambda_affinity == 0.4 and cfg.loss.lambda_domain == 0.6)

    t0 = time.time()
    bank = PhantomBank.generate(cfg)  # default: 8 phantoms
    pool = build_real_pool(cfg)
    state = init_state(cfg)
    reports = train_loop(state, bank, pool, 200, log_every=0)
    elapsed = time.time() - t0
    first = float(np.mean([r.align for r in reports[:50]]))
    last = float(np.mean([r.align for r in reports[150:]]))
    ok = ok_weights and last < first and elapsed < 900.0
    report(6, "training smoke", ok,
           f"L_align mean steps 1-50: {first:.4f} -> steps 151-200: {last:.4f}; "
           f"weights from config: affinity={cfg.loss.lambda_affinity} "
           f"domain={cfg.loss.lambda_domain}; {elapsed:.0f}s (< 900s)")


def test_criterion_07_fdk_quantitative():
    t0 = time.time()
    gt = cylinder_volume(70.0, 240.0, 0.02, n=64, spacing=4.0, supersample=4)
    projs = []
    for i in range(120):
        geom = ConeBeamGeometry(541.0, 949.0, 160, 160, 2.6, 360.0 * i / 120.0)
        projs.append(render_drr(gt, geom, step_mm=2.0))
    rec = fdk_reconstruct(projs, n=64, spacing=4.0)
    m = round(64 * 0.1)
    sl = slice(m, 64 - m)
    value = psnr(gt.data[sl, sl, sl], rec.data[sl, sl, sl])

    zero = [ProjectionImage(np.zeros((160, 160), dtype=np.float32), p.geometry)
            for p in projs[::5]]
    ok_zero = bool(np.all(fdk_reconstruct(zero, n=32, spacing=8.0).data == 0.0))
    sub = projs[::5]
    rec1 = fdk_reconstruct(sub, n=32, spacing=8.0)
    rec2 = fdk_reconstruct([ProjectionImage(2.0 * p.data, p.geometry) for p in sub],
                           n=32, spacing=8.0)
    mask = rec1.data > 1e-6
    ok_linear = bool(np.allclose(rec2.data[mask], 2.0 * rec1.data[mask], rtol=1e-6))
    elapsed = time.time() - t0
    ok = value >= 25.0 and ok_zero and ok_linear and elapsed < 300.0
    report(7, "FDK quantitative", ok,
           f"cylinder PSNR {value:.2f} dB (>= 25) on central 80%; zero-input exact: "
           f"{ok_zero}; linearity 1e-6: {ok_linear}; {elapsed:.0f}s (< 300s)")


def test_criterion_08_domain_adaptation_ab(ab_runs):
    state_on, cfg = ab_runs["0.6"]
    state_off, _ = ab_runs["0.0"]
    sim_imgs, _ = build_labeled_images(cfg, 24, seed=777000, pseudo_real=False)
    real_imgs, _ = build_labeled_images(cfg, 24, seed=777000 + 10**6, pseudo_real=True)

    def centers(state):
        enc = encoder_for_eval(state.model)
        return domain_similarity(extract_features(enc, sim_imgs),
                                 extract_features(enc, real_imgs))

    cos_on, l2_on = centers(state_on)
    cos_off, l2_off = centers(state_off)
    report(8, "domain adaptation A/B", cos_on > cos_off,
           f"cluster-center cosine with L_domain {cos_on:.3f} > without {cos_off:.3f} "
           f"(L2 {l2_on:.2f} vs {l2_off:.2f})")


def test_criterion_09_downstream_probe(ab_runs, probe_sets):
    state_on, cfg = ab_runs["0.6"]
    (train_imgs, train_lab), (test_imgs, test_lab) = probe_sets

    def probe_with(model):
        enc = encoder_for_eval(model)
        train = FeatureTable(extract_features(enc, train_imgs), train_lab, "train")
        test = FeatureTable(extract_features(enc, test_imgs), test_lab, "test")
        return linear_probe(train, test, "lesion_present"), train, test

    pre_auroc, train_tab, test_tab = probe_with(state_on.model)
    base_aurocs = []
    for seed in range(5):
        torch.manual_seed(20_000 + seed)
        base_aurocs.append(probe_with(WorldModel(cfg.model_config()))[0])
    gap = pre_auroc - float(np.mean(base_aurocs))

    perm_aurocs = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        params = logistic_probe_fit(train_tab.features,
                                    rng.permutation(train_tab.labels["lesion_present"])
                                    .astype(float))
        scores = probe_scores(params, test_tab.features)
        perm_aurocs.append(auroc(scores, rng.permutation(test_tab.labels["lesion_present"])))
    perm_mean = float(np.mean(perm_aurocs))

    base_mean = float(np.mean(base_aurocs))
    ok = pre_auroc > base_mean and gap > 0.05 and abs(perm_mean - 0.5) < 0.1
    report(9, "downstream probe sanity", ok,
           f"pretrained AUROC {pre_auroc:.3f} vs random-init 5-seed mean "
           f"{base_mean:.3f} (gap {gap:.3f} > 0.05); "
           f"permuted-label mean {perm_mean:.3f} in 0.5 +- 0.1")


def test_fewshot_directional(ab_runs, probe_sets):
    # Not a numbered criterion: the few-shot analogue of the probe check.
    # Pretrained features beat a random-init encoder at k=16 on
    # lesion-present in 5-run mean (direction only, magnitude not claimed).
    from xwin.evaluation import few_shot_finetune

    state_on, cfg = ab_runs["0.6"]
    (train_imgs, train_lab), (test_imgs, test_lab) = probe_sets
    pre = few_shot_finetune(state_on.model, train_imgs, train_lab["lesion_present"],
                            test_imgs, test_lab["lesion_present"], k=16, epochs=30)
    torch.manual_seed(30_000)
    rnd_model = WorldModel(cfg.model_config())
    rnd = few_shot_finetune(rnd_model, train_imgs, train_lab["lesion_present"],
                            test_imgs, test_lab["lesion_present"], k=16, epochs=30)
    gap = pre.mean_auroc - rnd.mean_auroc
    print(f"\nfew-shot k=16: pretrained {pre.mean_auroc:.3f} vs random-init "
          f"{rnd.mean_auroc:.3f} (gap {gap:+.3f})")
    assert len(pre.auroc_per_seed) == 5
    assert gap > 0.0


def test_criterion_10_vq_codebook(tmp_path):
    codebook = torch.tensor([[0.0], [1.0]], dtype=torch.float64)
    idx_mid, _, _, _ = vq_quantize(torch.tensor([[[0.5]]], dtype=torch.float64), codebook)
    rng = np.random.default_rng(10)
    cb = torch.tensor(rng.standard_normal((32, 6)), dtype=torch.float64)
    toks = torch.tensor(rng.standard_normal((3, 7, 6)), dtype=torch.float64)
    i1, q1, _, _ = vq_quantize(toks, cb)
    i2, _, _, commit2 = vq_quantize(q1.detach(), cb)
    ok_exact = (int(idx_mid) == 0 and torch.equal(i1, i2) and float(commit2) == 0.0)

    ok_usage = (codebook_usage(np.zeros(9, int), 1024) == 1.0 / 1024
                and codebook_usage(np.arange(2048), 2048) == 1.0)

    model = small_model(seed=0)
    r = np.random.default_rng(11)
    samples = [(r.random((16, 16)), 0.1, r.random((16, 16)) * 3.0)]
    _, rep = train_decoder(model, samples, codebook_size=64, codebook_dim=16,
                           steps=2000, lr=3e-3, batch=1, seed=0, stop_mse=5e-4)
    ok_overfit = rep.final_mse < 1e-3 and rep.steps <= 2000

    cfg = _cfg(SMALL_TRAIN)
    bank = PhantomBank.generate(cfg)
    pool = build_real_pool(cfg)
    state = init_state(cfg)
    train_loop(state, bank, pool, 4, log_every=0)
    rows = codebook_sweep(cfg, decoder_steps=60, views=12, state=state, bank=bank)
    import csv

    out = tmp_path / "codebook.csv"
    with open(out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["size", "dim", "usage", "proj_psnr",
                                                "proj_ssim", "vol_psnr", "vol_ssim"])
        writer.writeheader()
        writer.writerows(rows)
    combos = {(r["size"], r["dim"]) for r in rows}
    ok_sweep = combos == {(1024, 128), (1024, 256), (2048, 128), (2048, 256)} \
        and all(np.isfinite(list(r.values())).all() for r in rows)

    ok = ok_exact and ok_usage and ok_overfit and ok_sweep
    report(10, "VQ / codebook", ok,
           f"tie-break+idempotence exact: {ok_exact}; usage 1/K and 1.0 exact: "
           f"{ok_usage}; overfit-one MSE {rep.final_mse:.2e} in {rep.steps} steps; "
           f"K x d sweep -> {out.name} with {len(rows)} rows")


def test_criterion_11_auroc_metric():
    scores = np.array([0.9, 0.8, 0.2, 0.1])
    labels = np.array([True, True, False, False])
    ok_cases = (auroc(scores, labels) == 1.0
                and auroc(-scores, labels) == 0.0
                and auroc(np.ones(4), labels) == 0.5)
    rng = np.random.default_rng(12)
    s = rng.standard_normal(30)
    y = rng.random(30) > 0.5
    if y.all() or not y.any():
        y[0] = ~y[0]
    base = auroc(s, y)
    ok_mono = (abs(auroc(np.exp(s), y) - base) < 1e-12
               and abs(auroc(3.0 * s + 7.0, y) - base) < 1e-12)
    report(11, "AUROC metric", ok_cases and ok_mono,
           f"constructed cases exact; monotone-transform invariant: {ok_mono}")
