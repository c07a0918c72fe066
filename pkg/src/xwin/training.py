"""Training orchestration.

Wires the four losses with their stop-gradient rules around one AdamW step
plus the EMA teacher update. All randomness (phantom draws, action
sampling, context-view choice, masks) flows through one numpy generator
held in TrainState, so single-worker runs are bit-reproducible and
checkpoints resume exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import fileio
from .config import TrainConfig, config_from_text, config_to_text
from .domain import DomainStyle, pseudo_real_transform
from .losses import LossReport, align_loss, cls_loss, domain_loss, mim_loss, overall_loss
from .masking import sample_multiblock
from .models import WorldModel, ema_update, global_avg_pool
from .phantoms import generate_phantom, random_phantom_spec
from .projector import (BASE_BETAS, Action, ConeBeamGeometry, ProjectionImage,
                        pose_from_action, render_drr, to_display)

METRICS_HEADER = ("step,loss_total,loss_align,loss_infonce,loss_affinity,"
                  "loss_mim,loss_cls,loss_domain,lr,momentum")


class TrainingAbort(RuntimeError):
    """Raised when a non-finite loss appears; carries the batch indices."""


def cosine_schedule(step: int, total: int, start: float, end: float) -> float:
    """end + (start - end) * (1 + cos(pi * step / total)) / 2."""
    if total <= 0:
        return end
    frac = min(max(step / total, 0.0), 1.0)
    return end + (start - end) * (1.0 + math.cos(math.pi * frac)) / 2.0


def sample_actions(action_cfg, rng, mode: str | None = None) -> list[Action]:
    """Draw N distinct step counts uniformly without replacement.

    Candidates are k in {-K, ..., +K} with K = bound / delta_phi. The
    euler3 mode adds uniform pitch/roll tilts within the configured bound.
    """
    mode = mode or action_cfg.mode
    k_max = action_cfg.max_k
    candidates = np.arange(-k_max, k_max + 1)
    ks = rng.choice(candidates, size=action_cfg.n_projections, replace=False)
    actions = []
    for k in ks:
        pitch = roll = 0.0
        if mode == "euler3":
            bound = action_cfg.euler_tilt_bound_deg
            pitch = float(rng.uniform(-bound, bound))
            roll = float(rng.uniform(-bound, bound))
        actions.append(Action(int(k), action_cfg.delta_phi_deg, pitch, roll))
    return actions


def stepwise_predict(model: WorldModel, ctx_tokens, k: int, delta_phi_deg: float):
    """Apply the view predictor |k| times with per-step action +-delta_phi.

    Each step's output tokens become the next context. k = 0 returns the
    input unchanged.
    """
    tokens = ctx_tokens
    step_rad = math.radians(math.copysign(delta_phi_deg, k)) if k != 0 else 0.0
    for _ in range(abs(int(k))):
        tokens = model.view_predictor(tokens, torch.tensor(step_rad))
    return tokens


class PhantomBank:
    """Phantom volumes plus a projection cache over every reachable angle.

    Targets are pre-rendered at base + k*delta_phi for both context bases,
    so any (context, action) pair during training is a cache lookup.
    Re-rendering any cached angle reproduces the cached image bit-exactly
    (the renderer is deterministic).
    """

    def __init__(self, volumes, labels, cfg: TrainConfig, cache_dir=None):
        self.volumes = list(volumes)
        self.labels = list(labels)
        g = cfg.geom
        self.rig = ConeBeamGeometry(g.sod_mm, g.sdd_mm, g.nu, g.nv, g.pitch_mm)
        self.action_cfg = cfg.action
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self._cache: dict[tuple[int, float], np.ndarray] = {}

    @classmethod
    def generate(cls, cfg: TrainConfig, n: int | None = None, seed: int | None = None,
                 cache_dir=None) -> "PhantomBank":
        """Procedurally generated phantoms, or loaded from data.volumes_dir
        (a directory of .xwv files plus labels.json) when that is set."""
        if cache_dir is None and cfg.data.cache_dir:
            cache_dir = cfg.data.cache_dir
        if cfg.data.volumes_dir:
            return cls.from_dir(cfg.data.volumes_dir, cfg, cache_dir=cache_dir)
        n = n if n is not None else cfg.data.n_phantoms
        seed = seed if seed is not None else cfg.data.phantom_seed
        vols, labels = [], []
        for i in range(n):
            spec = random_phantom_spec(seed + i)
            vol, lab = generate_phantom(
                spec, cfg.data.grid_n, cfg.data.grid_n, cfg.data.grid_n,
                cfg.data.grid_spacing_mm)
            vols.append(vol)
            labels.append(lab)
        return cls(vols, labels, cfg, cache_dir=cache_dir)

    @classmethod
    def from_dir(cls, volumes_dir, cfg: TrainConfig, cache_dir=None) -> "PhantomBank":
        import json

        from .phantoms import LabelSet

        root = Path(volumes_dir)
        index = json.loads((root / "labels.json").read_text())
        vols, labels = [], []
        for entry in index:
            vols.append(fileio.load_volume(root / entry["file"]))
            labels.append(LabelSet(**entry["labels"]))
        if not vols:
            raise ValueError(f"no volumes listed in {root / 'labels.json'}")
        return cls(vols, labels, cfg, cache_dir=cache_dir)

    def __len__(self):
        return len(self.volumes)

    def _angle_key(self, beta: float) -> float:
        return round(float(beta), 6)

    def _render(self, idx: int, beta: float) -> np.ndarray:
        geom = ConeBeamGeometry(self.rig.sod, self.rig.sdd, self.rig.nu,
                                self.rig.nv, self.rig.pitch, beta)
        return render_drr(self.volumes[idx], geom).data

    def raw_projection(self, idx: int, beta: float) -> np.ndarray:
        """Line-integral image at absolute yaw beta, cached."""
        key = (idx, self._angle_key(beta))
        if key not in self._cache:
            img = None
            path = None
            if self.cache_dir is not None:
                self.cache_dir.mkdir(parents=True, exist_ok=True)
                path = self.cache_dir / f"vol{idx:04d}_beta{key[1]:+09.3f}.xwp"
                if path.exists():
                    img = fileio.load_projection(path).data
            if img is None:
                img = self._render(idx, beta)
                if path is not None:
                    fileio.save_projection(path, ProjectionImage(img, self.rig))
            self._cache[key] = img
        return self._cache[key]

    def display_projection(self, idx: int, beta: float) -> np.ndarray:
        return to_display(ProjectionImage(self.raw_projection(idx, beta))).data

    def context_display(self, idx: int, base: str) -> np.ndarray:
        return self.display_projection(idx, BASE_BETAS[base])

    def target_display(self, idx: int, base: str, action: Action) -> np.ndarray:
        geom = pose_from_action(base, action, self.rig, self.action_cfg.bound_deg)
        if action.pitch == 0.0 and action.roll == 0.0:
            return self.display_projection(idx, geom.beta)
        # Tilted poses bypass the yaw-keyed cache.
        img = render_drr(self.volumes[idx], geom).data
        return to_display(ProjectionImage(img)).data


def build_real_pool(cfg: TrainConfig) -> list[np.ndarray]:
    """Pseudo-real display images from a phantom set disjoint from training.

    Emulates a separate real-CXR dataset: held-out phantoms, frontal or
    lateral view, pushed through the pseudo-real appearance pipeline.
    """
    g = cfg.geom
    rig = ConeBeamGeometry(g.sod_mm, g.sdd_mm, g.nu, g.nv, g.pitch_mm)
    pool = []
    for i in range(cfg.data.n_real):
        spec = random_phantom_spec(cfg.data.real_seed + i)
        vol, _ = generate_phantom(spec, cfg.data.grid_n, cfg.data.grid_n,
                                  cfg.data.grid_n, cfg.data.grid_spacing_mm)
        base = "frontal" if i % 2 == 0 else "lateral"
        geom = ConeBeamGeometry(g.sod_mm, g.sdd_mm, g.nu, g.nv, g.pitch_mm,
                                BASE_BETAS[base])
        disp = to_display(render_drr(vol, geom))
        style = DomainStyle(cfg.style.blur_sigma, cfg.style.gamma,
                            cfg.style.noise_sigma, cfg.style.bias_amplitude,
                            cfg.style.seed + i)
        pool.append(pseudo_real_transform(disp, style).data)
    return pool


@dataclass
class TrainState:
    config: TrainConfig
    model: WorldModel
    optimizer: torch.optim.AdamW
    np_rng: np.random.Generator
    step: int = 0
    running_loss: float = 0.0
    # Per-epoch context-view assignments; part of the checkpoint so a
    # resumed run keeps the choices already drawn this epoch.
    context_epoch: int = -1
    context_assign: dict[str, str] = field(default_factory=dict)

    @property
    def dtype(self):
        return self.model.cfg.torch_dtype


def _param_groups(model: WorldModel):
    decay, no_decay = [], []
    for name, p in model.trainable_parameters():
        (decay if p.ndim >= 2 else no_decay).append(p)
    return [
        {"params": decay, "weight_decay": 0.0},
        {"params": no_decay, "weight_decay": 0.0},
    ]


def init_state(cfg: TrainConfig) -> TrainState:
    torch.manual_seed(cfg.train.seed)
    model = WorldModel(cfg.model_config())
    optimizer = torch.optim.AdamW(
        _param_groups(model), lr=cfg.train.lr_start,
        betas=(0.9, 0.999), eps=1e-8)
    rng = np.random.default_rng(cfg.train.seed)
    return TrainState(cfg, model, optimizer, rng)


def _set_lr_wd(state: TrainState):
    cfg = state.config.train
    total = cfg.total_steps
    lr = cosine_schedule(state.step, total, cfg.lr_start, cfg.lr_end)
    wd = cosine_schedule(state.step, total, cfg.wd_start, cfg.wd_end)
    decay_group, no_decay_group = state.optimizer.param_groups
    decay_group["lr"] = lr
    decay_group["weight_decay"] = wd
    no_decay_group["lr"] = lr
    no_decay_group["weight_decay"] = 0.0
    momentum = cosine_schedule(state.step, total, cfg.momentum_start, cfg.momentum_end)
    return lr, wd, momentum


def _to_tensor(state: TrainState, arrays) -> torch.Tensor:
    stack = np.stack(arrays).astype(np.float64)
    return torch.from_numpy(stack).to(state.dtype)


def _context_view(state: TrainState, vol_idx: int) -> str:
    """Per-volume per-epoch uniform choice between frontal and lateral."""
    epoch = state.step // max(state.config.train.iters_per_epoch, 1)
    if state.context_epoch != epoch:
        state.context_epoch = epoch
        state.context_assign = {}
    key = str(vol_idx)
    if key not in state.context_assign:
        state.context_assign[key] = "frontal" if state.np_rng.random() < 0.5 else "lateral"
    return state.context_assign[key]


def _assemble_full_tokens(encoded_visible, predicted_masked, mask_spec):
    """Scatter visible and reconstructed tokens back to grid order."""
    b, _, d = encoded_visible.shape
    n = mask_spec.n_tokens
    full = encoded_visible.new_zeros(b, n, d)
    full[:, torch.as_tensor(mask_spec.visible, dtype=torch.long)] = encoded_visible
    full[:, torch.as_tensor(mask_spec.masked, dtype=torch.long)] = predicted_masked
    return full


def _predict_targets(state: TrainState, ctx_tokens, actions):
    """View-predictor outputs for each action on a (1, T, D) context."""
    model = state.model
    mode = state.config.action.mode
    outs = []
    for act in actions:
        if mode == "stepwise_yaw":
            outs.append(stepwise_predict(model, ctx_tokens, act.k, act.delta_phi))
        elif mode == "euler3":
            vec = torch.tensor(
                [act.angle_rad, math.radians(act.pitch), math.radians(act.roll)],
                dtype=state.dtype)
            outs.append(model.view_predictor(ctx_tokens, vec))
        else:
            outs.append(model.view_predictor(ctx_tokens, torch.tensor(act.angle_rad, dtype=state.dtype)))
    return outs


def _predict_batched(state: TrainState, ctx_tokens, actions_per_vol):
    """All volumes x actions in one predictor forward when possible.

    ctx_tokens: (B, T, D); actions_per_vol: list of B action lists, each of
    length N. Returns (B*N, T, D) ordered volume-major. The stepwise mode
    needs per-action recursion depth and falls back to a loop.
    """
    model = state.model
    mode = state.config.action.mode
    n = len(actions_per_vol[0])
    if mode == "stepwise_yaw":
        outs = []
        for i, actions in enumerate(actions_per_vol):
            outs.extend(_predict_targets(state, ctx_tokens[i : i + 1], actions))
        return torch.cat(outs, dim=0)
    rep = ctx_tokens.repeat_interleave(n, dim=0)
    if mode == "euler3":
        vecs = torch.tensor(
            [[a.angle_rad, math.radians(a.pitch), math.radians(a.roll)]
             for actions in actions_per_vol for a in actions],
            dtype=state.dtype)
    else:
        vecs = torch.tensor(
            [a.angle_rad for actions in actions_per_vol for a in actions],
            dtype=state.dtype)
    return model.view_predictor(rep, vecs)


def train_step(state: TrainState, bank: PhantomBank, real_pool) -> LossReport:
    """One optimization step over a sampled batch of volumes and real images.

    Order: render/fetch targets, teacher targets, view predictions,
    alignment loss, masked-image modeling on both streams, classifier loss
    on detached tokens, domain loss with the classifier frozen, one
    backward, AdamW update with scheduled lr/wd, then the EMA update.
    """
    cfg = state.config
    model = state.model
    rng = state.np_rng
    lr, wd, momentum = _set_lr_wd(state)

    n_vol = min(cfg.train.batch_volumes, len(bank))
    vol_ids = rng.choice(len(bank), size=n_vol, replace=False)
    real_ids = rng.choice(len(real_pool), size=min(cfg.train.batch_real, len(real_pool)),
                          replace=False)

    # (1)-(4): contrastive alignment of pooled pairs, per volume. All
    # volumes' contexts, predictions, and teacher targets run as single
    # batched forwards; the N x N alignment stays within each volume.
    n_act = cfg.action.n_projections
    bases, actions_per_vol, target_imgs, sim_mim_images = [], [], [], []
    for vol_idx in vol_ids:
        base = _context_view(state, int(vol_idx))
        actions = sample_actions(cfg.action, rng)
        targets = [bank.target_display(int(vol_idx), base, a) for a in actions]
        bases.append(base)
        actions_per_vol.append(actions)
        target_imgs.extend(targets)
        sim_mim_images.append(targets[int(rng.integers(0, len(targets)))])
    ctx = _to_tensor(state, [bank.context_display(int(v), b) for v, b in zip(vol_ids, bases)])
    ctx_tokens = model.encode(ctx, "student")
    z_patch_flat = _predict_batched(state, ctx_tokens, actions_per_vol)
    with torch.no_grad():
        t_patch_flat = model.encode(_to_tensor(state, target_imgs), "teacher")
    z_pool = global_avg_pool(z_patch_flat).reshape(n_vol, n_act, -1)
    t_pool = global_avg_pool(t_patch_flat).reshape(n_vol, n_act, -1)
    align_terms, nce_terms, aff_terms = [], [], []
    for i in range(n_vol):
        l_a, l_n, l_f = align_loss(
            z_pool[i], t_pool[i], model.tau, model.tau_tilde,
            cfg.loss.lambda_affinity, normalize=cfg.loss.normalize_sim)
        align_terms.append(l_a)
        nce_terms.append(l_n)
        aff_terms.append(l_f)
    l_align = torch.stack(align_terms).mean()
    l_nce = torch.stack(nce_terms).mean()
    l_aff = torch.stack(aff_terms).mean()

    # (5): masked image modeling, one mask per stream per step.
    grid = model.cfg.grid_size
    real_mask = sample_multiblock(grid, grid, cfg.mask, rng=rng)
    sim_mask = sample_multiblock(grid, grid, cfg.mask, rng=rng)
    real_imgs = _to_tensor(state, [real_pool[i] for i in real_ids])
    sim_imgs = _to_tensor(state, sim_mim_images[: len(real_ids)] or sim_mim_images)

    def mim_stream(imgs, mask_spec):
        vis = model.encode(imgs, "student", visible_idx=mask_spec.visible)
        pred = model.mask_predictor(vis, mask_spec.visible, mask_spec.masked)
        tgt = model.teacher_mim_targets(imgs, mask_spec.masked)
        return vis, pred, tgt

    vis_r, pred_r, tgt_r = mim_stream(real_imgs, real_mask)
    vis_s, pred_s, tgt_s = mim_stream(sim_imgs, sim_mask)
    l_mim = mim_loss(pred_r, tgt_r, pred_s, tgt_s, cfg.loss.mim_reduction)

    # (6): classifier trained on detached MIM-stream tokens.
    full_r = _assemble_full_tokens(vis_r, pred_r, real_mask).detach()
    full_s = _assemble_full_tokens(vis_s, pred_s, sim_mask).detach()
    l_cls = cls_loss(model.classifier(full_r), model.classifier(full_s))

    # (7): domain loss; classifier frozen so only z receives gradient.
    model.classifier.requires_grad_(False)
    p_dom = model.classifier(z_patch_flat)
    model.classifier.requires_grad_(True)
    l_domain = domain_loss(z_patch_flat, t_patch_flat, p_dom)

    total, report = overall_loss(l_align, l_nce, l_aff, l_mim, l_cls, l_domain,
                                 cfg.loss.weights())
    if not math.isfinite(report.overall):
        raise TrainingAbort(
            f"non-finite loss at step {state.step}: {report} "
            f"(volumes {sorted(int(v) for v in vol_ids)}, real {sorted(int(r) for r in real_ids)})")

    # (8): single backward + decoupled weight-decay adaptive update.
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()

    # (9): EMA teacher update with the scheduled momentum.
    ema_update(model.teacher, model.encoder, momentum)

    state.step += 1
    state.running_loss = (0.95 * state.running_loss + 0.05 * report.overall
                          if state.step > 1 else report.overall)
    return report


def metrics_row(step: int, report: LossReport, lr: float, momentum: float) -> str:
    vals = [step, *report.csv_values(), lr, momentum]
    return ",".join(repr(v) if isinstance(v, float) else str(v) for v in vals)


def train_loop(state: TrainState, bank: PhantomBank, real_pool, n_steps: int,
               metrics_path=None, checkpoint_path=None, checkpoint_every: int = 0,
               log_every: int = 50):
    """Run n_steps of training, appending metrics CSV rows as it goes."""
    fh = None
    if metrics_path is not None:
        path = Path(metrics_path)
        fresh = not path.exists() or path.stat().st_size == 0
        fh = open(path, "a", encoding="ascii")
        if fresh:
            fh.write(METRICS_HEADER + "\n")
    reports = []
    try:
        for _ in range(n_steps):
            cfg = state.config.train
            lr = cosine_schedule(state.step, cfg.total_steps, cfg.lr_start, cfg.lr_end)
            momentum = cosine_schedule(state.step, cfg.total_steps,
                                       cfg.momentum_start, cfg.momentum_end)
            report = train_step(state, bank, real_pool)
            reports.append(report)
            if fh is not None:
                fh.write(metrics_row(state.step - 1, report, lr, momentum) + "\n")
            if checkpoint_path and checkpoint_every and state.step % checkpoint_every == 0:
                save_checkpoint(checkpoint_path, state)
            if log_every and state.step % log_every == 0:
                print(f"step {state.step}: total {report.overall:.4f} "
                      f"align {report.align:.4f} mim {report.mim:.4f} "
                      f"cls {report.cls:.4f} domain {report.domain:.4f}")
    finally:
        if fh is not None:
            fh.close()
    return reports


# ----------------------------------------------------------------------
# Checkpointing: text head (step, config, rng state, tensor manifest)
# followed by a little-endian binary blob. save -> load -> save is
# byte-identical; resuming reproduces the uninterrupted loss trajectory.

CKPT_MAGIC = "XWINCKPT1"


class CheckpointError(ValueError):
    pass


def _state_tensors(state: TrainState) -> dict[str, torch.Tensor]:
    tensors = {}
    for name, t in state.model.state_dict().items():
        tensors[f"model.{name}"] = t
    name_by_param = {id(p): n for n, p in state.model.named_parameters()}
    for group in state.optimizer.param_groups:
        for p in group["params"]:
            pstate = state.optimizer.state.get(p)
            if not pstate:
                continue
            pname = name_by_param[id(p)]
            for key, val in pstate.items():
                if isinstance(val, torch.Tensor):
                    tensors[f"opt.{pname}.{key}"] = val
    tensors["torch_rng"] = torch.get_rng_state()
    return tensors


def save_checkpoint(path, state: TrainState) -> None:
    tensors = _state_tensors(state)
    names = sorted(tensors)
    blob_parts = []
    manifest = []
    offset = 0
    for name in names:
        t = tensors[name].detach().cpu()
        arr = t.numpy()
        raw = arr.astype(arr.dtype.newbyteorder("<")).tobytes(order="C")
        shape = ",".join(str(s) for s in arr.shape) or "-"
        manifest.append(f"{name} {arr.dtype.name} {shape} {offset} {len(raw)}")
        blob_parts.append(raw)
        offset += len(raw)
    blob = b"".join(blob_parts)

    cfg_text = config_to_text(state.config)
    rng_state = json.dumps(state.np_rng.bit_generator.state, sort_keys=True)
    context = json.dumps({"epoch": state.context_epoch, "assign": state.context_assign},
                         sort_keys=True)
    head_lines = [
        CKPT_MAGIC,
        f"step = {state.step}",
        f"running_loss = {state.running_loss!r}",
        f"np_rng = {rng_state}",
        f"context = {context}",
        f"config_lines = {len(cfg_text.splitlines())}",
        cfg_text.rstrip("\n"),
        f"manifest_lines = {len(manifest)}",
        *manifest,
        f"blob_bytes = {len(blob)}",
    ]
    Path(path).write_bytes(("\n".join(head_lines) + "\n").encode("ascii") + blob)


def load_checkpoint(path) -> TrainState:
    raw = Path(path).read_bytes()
    try:
        head_end = raw.index(b"blob_bytes = ")
        nl = raw.index(b"\n", head_end)
    except ValueError as exc:
        raise CheckpointError(f"{path}: missing blob marker") from exc
    head = raw[:nl].decode("ascii").splitlines()
    blob = raw[nl + 1 :]
    if head[0] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    declared = int(head[-1].split("=", 1)[1])
    if len(blob) != declared:
        raise CheckpointError(
            f"{path}: blob is {len(blob)} bytes, manifest declares {declared}")

    def take(prefix, line):
        if not line.startswith(prefix):
            raise CheckpointError(f"{path}: expected {prefix!r}, got {line!r}")
        return line[len(prefix):]

    step = int(take("step = ", head[1]))
    running_loss = float(take("running_loss = ", head[2]))
    rng_state = json.loads(take("np_rng = ", head[3]))
    context = json.loads(take("context = ", head[4]))
    n_cfg = int(take("config_lines = ", head[5]))
    cfg_text = "\n".join(head[6 : 6 + n_cfg])
    cursor = 6 + n_cfg
    n_manifest = int(take("manifest_lines = ", head[cursor]))
    manifest = head[cursor + 1 : cursor + 1 + n_manifest]

    cfg = config_from_text(cfg_text)
    state = init_state(cfg)
    tensors = {}
    seen = set()
    for line in manifest:
        name, dtype, shape, offset, nbytes = line.rsplit(" ", 4)
        if name in seen:
            raise CheckpointError(f"{path}: duplicate tensor {name}")
        seen.add(name)
        offset, nbytes = int(offset), int(nbytes)
        if offset + nbytes > len(blob):
            raise CheckpointError(f"{path}: tensor {name} overruns blob")
        arr = np.frombuffer(blob[offset : offset + nbytes], dtype=np.dtype(dtype))
        target_shape = () if shape == "-" else tuple(int(s) for s in shape.split(","))
        arr = arr.reshape(target_shape)
        tensors[name] = torch.from_numpy(arr.copy())

    model_sd = {n[len("model."):]: t for n, t in tensors.items() if n.startswith("model.")}
    state.model.load_state_dict(model_sd)

    params = dict(state.model.named_parameters())
    opt_state: dict[torch.nn.Parameter, dict] = {}
    for name, t in tensors.items():
        if not name.startswith("opt."):
            continue
        pname, key = name[len("opt."):].rsplit(".", 1)
        opt_state.setdefault(params[pname], {})[key] = t
    for p, pstate in opt_state.items():
        state.optimizer.state[p] = pstate

    torch.set_rng_state(tensors["torch_rng"].to(torch.uint8))
    state.np_rng.bit_generator.state = rng_state
    state.step = step
    state.running_loss = running_loss
    state.context_epoch = int(context["epoch"])
    state.context_assign = dict(context["assign"])
    return state


# ----------------------------------------------------------------------
# Debug-mode gradient accounting for the stop-gradient contracts.


def stop_gradient_report(state: TrainState, bank: PhantomBank, real_pool) -> dict[str, float]:
    """Gradient norms that the stop-gradient rules require to be zero.

    Runs one batch, backpropagates each loss separately, and reports:
      teacher_total   gradient norm of theta' under the overall loss
      fc_under_domain gradient norm of f_c under the domain loss alone
      theta_under_cls gradient norm of theta (encoder+predictors) under
                      the classifier loss alone
    """
    cfg = state.config
    model = state.model
    rng = state.np_rng

    vol_idx = int(rng.integers(0, len(bank)))
    base = "frontal"
    actions = sample_actions(cfg.action, rng)
    ctx = _to_tensor(state, [bank.context_display(vol_idx, base)])
    ctx_tokens = model.encode(ctx, "student")
    preds = _predict_targets(state, ctx_tokens, actions)
    tgt_imgs = _to_tensor(state, [bank.target_display(vol_idx, base, a) for a in actions])
    t_patch = model.encode(tgt_imgs, "teacher")
    z_patch = torch.cat(preds, dim=0)
    l_align, _, _ = align_loss(global_avg_pool(z_patch), global_avg_pool(t_patch),
                               model.tau, model.tau_tilde, cfg.loss.lambda_affinity,
                               normalize=cfg.loss.normalize_sim)

    grid = model.cfg.grid_size
    mask_spec = sample_multiblock(grid, grid, cfg.mask, rng=rng)
    real_imgs = _to_tensor(state, [real_pool[0]])
    sim_imgs = _to_tensor(state, [bank.target_display(vol_idx, base, actions[0])])
    vis_r = model.encode(real_imgs, "student", visible_idx=mask_spec.visible)
    pred_r = model.mask_predictor(vis_r, mask_spec.visible, mask_spec.masked)
    tgt_r = model.teacher_mim_targets(real_imgs, mask_spec.masked)
    vis_s = model.encode(sim_imgs, "student", visible_idx=mask_spec.visible)
    pred_s = model.mask_predictor(vis_s, mask_spec.visible, mask_spec.masked)
    tgt_s = model.teacher_mim_targets(sim_imgs, mask_spec.masked)
    l_mim = mim_loss(pred_r, tgt_r, pred_s, tgt_s, cfg.loss.mim_reduction)

    full_r = _assemble_full_tokens(vis_r, pred_r, mask_spec).detach()
    full_s = _assemble_full_tokens(vis_s, pred_s, mask_spec).detach()
    l_cls = cls_loss(model.classifier(full_r), model.classifier(full_s))

    model.classifier.requires_grad_(False)
    p_dom = model.classifier(z_patch)
    model.classifier.requires_grad_(True)
    l_domain = domain_loss(z_patch, t_patch, p_dom)

    def grad_norm(loss, params):
        state.optimizer.zero_grad(set_to_none=True)
        loss.backward(retain_graph=True)
        total = 0.0
        for p in params:
            if p.grad is not None:
                total += float(p.grad.pow(2).sum())
        return math.sqrt(total)

    teacher_params = list(model.teacher.parameters())
    fc_params = list(model.classifier.parameters())
    theta_params = [p for n, p in model.named_parameters()
                    if n.startswith(("encoder.", "view_predictor.", "mask_predictor."))]

    total = l_align + cfg.loss.lambda_mim * l_mim + cfg.loss.lambda_domain * l_domain \
        + cfg.loss.lambda_cls * l_cls
    out = {
        "teacher_total": grad_norm(total, teacher_params),
        "fc_under_domain": grad_norm(l_domain, fc_params),
        "theta_under_cls": grad_norm(l_cls, theta_params),
    }
    state.optimizer.zero_grad(set_to_none=True)
    return out
