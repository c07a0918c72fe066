"""Downstream evaluation: linear probing, few-shot fine-tuning, AUROC,
domain-similarity measurement, and patch-correspondence probing.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.stats import rankdata

from .domain import DomainStyle, pseudo_real_transform
from .models import Encoder, WorldModel, global_avg_pool
from .phantoms import TASKS, generate_phantom, random_phantom_spec
from .projector import BASE_BETAS, ConeBeamGeometry, render_drr, to_display


@dataclass
class FeatureTable:
    features: np.ndarray  # (n, embed_dim)
    labels: dict[str, np.ndarray]  # task -> (n,) bool
    split: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        for k, v in self.labels.items():
            self.labels[k] = np.asarray(v, dtype=bool)
            if len(self.labels[k]) != len(self.features):
                raise ValueError(f"label length mismatch for task {k!r}")


@dataclass
class EvalReport:
    task: str
    auroc_per_seed: list[float] = field(default_factory=list)

    @property
    def mean_auroc(self) -> float:
        return float(np.mean(self.auroc_per_seed))

    def as_dict(self):
        return {"task": self.task, "auroc_per_seed": self.auroc_per_seed,
                "mean_auroc": self.mean_auroc}


def build_labeled_images(
    cfg, n_per_class: int, seed: int, task: str = "lesion_present",
    view: str = "frontal", pseudo_real: bool = True, max_draws: int = 100000,
):
    """Balanced labeled evaluation images for downstream tasks.

    Draws random phantoms until n_per_class positives and negatives of the
    balancing task are collected, renders the requested view, and (by
    default) applies the pseudo-real transform so evaluation happens in the
    deployment domain. Returns (images, labels dict).
    """
    g = cfg.geom
    rig = ConeBeamGeometry(g.sod_mm, g.sdd_mm, g.nu, g.nv, g.pitch_mm,
                           BASE_BETAS[view])
    images = []
    labels: dict[str, list[bool]] = {t: [] for t in TASKS}
    counts = {True: 0, False: 0}
    draw = 0
    while min(counts.values()) < n_per_class or max(counts.values()) < n_per_class:
        spec = random_phantom_spec(seed + draw)
        draw += 1
        if draw > max_draws:
            raise RuntimeError("could not balance classes within max_draws")
        vol, lab = generate_phantom(spec, cfg.data.grid_n, cfg.data.grid_n,
                                    cfg.data.grid_n, cfg.data.grid_spacing_mm)
        value = lab.as_dict()[task]
        if counts[value] >= n_per_class:
            continue
        counts[value] += 1
        disp = to_display(render_drr(vol, rig))
        if pseudo_real:
            style = DomainStyle(cfg.style.blur_sigma, cfg.style.gamma,
                                cfg.style.noise_sigma, cfg.style.bias_amplitude,
                                cfg.style.seed + 100000 + draw)
            disp = pseudo_real_transform(disp, style)
        images.append(disp.data)
        for t, v in lab.as_dict().items():
            labels[t].append(v)
    return np.stack(images), {t: np.asarray(v, dtype=bool) for t, v in labels.items()}


def auroc(scores, labels) -> float:
    """Rank-based AUROC: Mann-Whitney U / (n_pos * n_neg), ties count 1/2.

    Invariant under strictly monotone transforms of the scores.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = int(len(labels) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("need both classes for AUROC")
    ranks = rankdata(scores, method="average")
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def extract_features(encoder: Encoder, images, batch: int = 32) -> np.ndarray:
    """Pooled final-token features for a list/array of display images."""
    imgs = np.asarray(images, dtype=np.float64)
    dtype = next(encoder.parameters()).dtype
    feats = []
    with torch.no_grad():
        for i in range(0, len(imgs), batch):
            x = torch.from_numpy(imgs[i : i + batch]).to(dtype)
            feats.append(global_avg_pool(encoder(x)).double().numpy())
    return np.concatenate(feats, axis=0)


def encoder_for_eval(model: WorldModel, which: str = "teacher") -> Encoder:
    """The paper-default evaluation encoder is the EMA teacher."""
    if which == "teacher":
        return model.teacher
    if which == "student":
        return model.encoder
    raise ValueError("which must be 'teacher' or 'student'")


def _param_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def logistic_probe_fit(
    x: np.ndarray, y: np.ndarray, lr: float = 0.1, max_iters: int = 5000,
    tol: float = 1e-6,
):
    """Full-batch gradient-descent logistic regression on standardized features.

    Deterministic (zero init, fixed step size, no line search). Returns
    (weights, bias, mean, std) where mean/std standardize new inputs.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    xs = (x - mean) / std
    w = np.zeros(x.shape[1])
    b = 0.0
    prev = np.inf
    n = len(y)
    for _ in range(max_iters):
        logits = xs @ w + b
        p = 1.0 / (1.0 + np.exp(-logits))
        eps = 1e-12
        loss = -np.mean(y * np.log(p + eps) + (1 - y) * np.log(1 - p + eps))
        grad = p - y
        w -= lr * (xs.T @ grad) / n
        b -= lr * grad.mean()
        if abs(prev - loss) < tol:
            break
        prev = loss
    return w, b, mean, std


def probe_scores(model_params, x: np.ndarray) -> np.ndarray:
    w, b, mean, std = model_params
    xs = (np.asarray(x, dtype=np.float64) - mean) / std
    return xs @ w + b


def linear_probe(train: FeatureTable, test: FeatureTable, task: str) -> float:
    """Train the logistic probe on frozen features; AUROC on the test split."""
    params = logistic_probe_fit(train.features, train.labels[task].astype(float))
    return auroc(probe_scores(params, test.features), test.labels[task])


def linear_probe_report(train: FeatureTable, test: FeatureTable,
                        tasks=None) -> dict[str, float]:
    tasks = tasks or sorted(train.labels)
    return {t: linear_probe(train, test, t) for t in tasks}


def stratified_few_shot(labels: np.ndarray, k: int, rng) -> np.ndarray:
    """Indices of exactly k samples per class; error if a class is smaller."""
    labels = np.asarray(labels, dtype=bool)
    picks = []
    for cls in (False, True):
        pool = np.flatnonzero(labels == cls)
        if len(pool) < k:
            raise ValueError(f"class {cls} has {len(pool)} samples, need {k}")
        picks.append(rng.choice(pool, size=k, replace=False))
    return np.sort(np.concatenate(picks))


def few_shot_finetune(
    model: WorldModel,
    train_images,
    train_labels,
    test_images,
    test_labels,
    k: int,
    seeds=(0, 1, 2, 3, 4),
    epochs: int = 40,
    lr: float = 1e-3,
    which: str = "teacher",
) -> EvalReport:
    """Unfreeze a copy of the encoder plus a linear head on k shots per class.

    Reports per-seed test AUROC over the given seeds (default five runs).
    The passed model is never mutated.
    """
    import copy

    report = EvalReport(task=f"few_shot_k{k}")
    train_images = np.asarray(train_images, dtype=np.float64)
    test_images = np.asarray(test_images, dtype=np.float64)
    train_labels = np.asarray(train_labels, dtype=bool)
    for seed in seeds:
        rng = np.random.default_rng(seed)
        idx = stratified_few_shot(train_labels, k, rng)
        torch.manual_seed(seed)
        enc = copy.deepcopy(encoder_for_eval(model, which))
        enc.requires_grad_(True)
        dtype = next(enc.parameters()).dtype
        head = torch.nn.Linear(model.cfg.embed_dim, 1).to(dtype)
        opt = torch.optim.Adam(list(enc.parameters()) + list(head.parameters()), lr=lr)
        x = torch.from_numpy(train_images[idx]).to(dtype)
        y = torch.from_numpy(train_labels[idx].astype(np.float64)).to(dtype)
        for _ in range(epochs):
            logits = head(global_avg_pool(enc(x))).squeeze(-1)
            loss = torch.nn.functional.binary_cross_entropy_with_logits(logits, y)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        with torch.no_grad():
            xt = torch.from_numpy(test_images).to(dtype)
            scores = head(global_avg_pool(enc(xt))).squeeze(-1).double().numpy()
        report.auroc_per_seed.append(auroc(scores, test_labels))
    return report


def domain_similarity(features_sim: np.ndarray, features_real: np.ndarray):
    """(cosine similarity, L2 distance) of the two feature-cluster centers."""
    c_sim = np.asarray(features_sim, dtype=np.float64).mean(axis=0)
    c_real = np.asarray(features_real, dtype=np.float64).mean(axis=0)
    denom = np.linalg.norm(c_sim) * np.linalg.norm(c_real)
    cos = float(c_sim @ c_real / denom) if denom > 0 else 0.0
    return cos, float(np.linalg.norm(c_sim - c_real))


def patch_correspondence(
    encoder: Encoder, sim_image: np.ndarray, real_image: np.ndarray,
    landmark_token: int,
) -> np.ndarray:
    """Cosine similarity of one simulated-image token against every token of
    the real image, reshaped to the token grid."""
    dtype = next(encoder.parameters()).dtype
    with torch.no_grad():
        toks_sim = encoder(torch.from_numpy(
            np.asarray(sim_image, dtype=np.float64)[None]).to(dtype))[0]
        toks_real = encoder(torch.from_numpy(
            np.asarray(real_image, dtype=np.float64)[None]).to(dtype))[0]
    q = toks_sim[landmark_token]
    q = q / q.norm()
    keys = toks_real / toks_real.norm(dim=-1, keepdim=True)
    heat = (keys @ q).double().numpy()
    grid = int(round(np.sqrt(len(heat))))
    return heat.reshape(grid, grid)


def probe_determinism_guard(encoder: Encoder):
    """Context manager asserting the encoder is unchanged by probing."""

    class _Guard:
        def __enter__(self):
            self.before = _param_hash(encoder)
            return self

        def __exit__(self, exc_type, exc, tb):
            if exc_type is None and _param_hash(encoder) != self.before:
                raise RuntimeError("probing mutated encoder parameters")
            return False

    return _Guard()
