"""Closing the 3D loop: vector-quantized projection rendering and FDK.

A small decoder regresses raw line-integral projections from quantized,
frozen encoder/view-predictor latents; filtered backprojection then
reconstructs a volume from rendered (or ground-truth) projections. The
decoder trains with plain reconstruction + codebook/commitment losses
(no adversarial term).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage, signal
from torch import nn

from .models import Block, WorldModel, sinusoidal_pe
from .phantoms import VoxelVolume
from .projector import ConeBeamGeometry, ProjectionImage


# ----------------------------------------------------------------------
# Vector quantization


class _StraightThrough(torch.autograd.Function):
    """Forward emits the quantized values exactly; backward copies the
    incoming gradient onto the pre-quantization tokens unchanged."""

    @staticmethod
    def forward(ctx, tokens, quant):
        return quant

    @staticmethod
    def backward(ctx, grad_out):
        return grad_out, None


def vq_quantize(tokens: torch.Tensor, codebook: torch.Tensor):
    """Nearest-codebook-entry quantization with a straight-through gradient.

    tokens: (..., d); codebook: (K, d). Ties go to the lowest index.
    Returns (indices, quantized tokens, codebook_loss, commitment_loss);
    the straight-through estimator copies the decoder gradient onto the
    pre-quantization tokens, and the two losses are element-means of the
    stop-gradient-split squared distances.
    """
    flat = tokens.reshape(-1, tokens.shape[-1])
    d2 = (
        flat.pow(2).sum(dim=1, keepdim=True)
        - 2.0 * flat @ codebook.T
        + codebook.pow(2).sum(dim=1)[None, :]
    )
    indices = d2.argmin(dim=1)
    quant = codebook[indices].reshape(tokens.shape)
    codebook_loss = (tokens.detach() - quant).pow(2).mean()
    commitment_loss = (tokens - quant.detach()).pow(2).mean()
    quant_st = _StraightThrough.apply(tokens, quant.detach())
    return indices.reshape(tokens.shape[:-1]), quant_st, codebook_loss, commitment_loss


def codebook_usage(indices, codebook_size: int) -> float:
    """Fraction of codebook entries that appear in an index stream."""
    idx = np.asarray(indices).reshape(-1)
    if idx.size == 0:
        raise ValueError("empty index stream")
    return float(len(np.unique(idx)) / codebook_size)


class VQDecoder(nn.Module):
    """Frozen-latent projection renderer.

    pre_quant maps encoder/predictor tokens to the codebook dimension;
    after quantization, transformer blocks and a per-token head emit the
    pixels of each patch, reassembled into the full detector image.
    """

    def __init__(self, embed_dim: int, grid_size: int, patch_size: int,
                 codebook_size: int = 1024, codebook_dim: int = 128,
                 depth: int = 2, num_heads: int = 4):
        super().__init__()
        self.grid_size = grid_size
        self.patch_size = patch_size
        self.codebook_size = codebook_size
        self.pre_quant = nn.Linear(embed_dim, codebook_dim)
        self.codebook = nn.Parameter(torch.randn(codebook_size, codebook_dim) * 0.1)
        self.post_quant = nn.Linear(codebook_dim, embed_dim)
        self.blocks = nn.ModuleList(Block(embed_dim, num_heads, 4.0) for _ in range(depth))
        self.norm = nn.LayerNorm(embed_dim)
        self.head = nn.Linear(embed_dim, patch_size * patch_size)
        self.register_buffer("pos_embed", sinusoidal_pe(grid_size**2, embed_dim))
        self.register_buffer("usage_counts", torch.zeros(codebook_size, dtype=torch.long))

    def quantize(self, latents):
        z = self.pre_quant(latents)
        return vq_quantize(z, self.codebook)

    def decode_quantized(self, quant):
        x = self.post_quant(quant) + self.pos_embed[None].to(quant.dtype)
        for blk in self.blocks:
            x = blk(x)
        patches = self.head(self.norm(x))
        b = patches.shape[0]
        g, p = self.grid_size, self.patch_size
        img = patches.reshape(b, g, g, p, p).permute(0, 1, 3, 2, 4)
        return img.reshape(b, g * p, g * p)

    def forward(self, latents):
        indices, quant, cb_loss, commit_loss = self.quantize(latents)
        self.usage_counts.scatter_add_(
            0, indices.reshape(-1), torch.ones_like(indices.reshape(-1)))
        return self.decode_quantized(quant), indices, cb_loss, commit_loss


def frozen_latents(model: WorldModel, ctx_display: np.ndarray, angle_rad: float) -> torch.Tensor:
    """Encoder + view-predictor tokens with no gradient into the stack."""
    dtype = model.cfg.torch_dtype
    img = torch.from_numpy(np.asarray(ctx_display, dtype=np.float64)[None]).to(dtype)
    with torch.no_grad():
        ctx_tokens = model.encoder(img)
        return model.view_predictor(ctx_tokens, torch.tensor(angle_rad, dtype=dtype))


def decoder_training_samples(bank, cfg, rng, n_samples: int):
    """(context display, action angle rad, raw line-integral target) triples
    drawn from a phantom bank for decoder fitting."""
    from .projector import BASE_BETAS, Action

    samples = []
    k_max = cfg.action.max_k
    for _ in range(n_samples):
        vol = int(rng.integers(0, len(bank)))
        base = "frontal" if rng.random() < 0.5 else "lateral"
        action = Action(int(rng.integers(-k_max, k_max + 1)), cfg.action.delta_phi_deg)
        ctx = bank.context_display(vol, base)
        target = bank.raw_projection(vol, BASE_BETAS[base] + action.angle_deg)
        samples.append((ctx, action.angle_rad, target))
    return samples


@dataclass
class DecoderTrainReport:
    steps: int
    first_loss: float
    final_loss: float
    final_mse: float
    usage: float
    dead_reinits: int


def train_decoder(
    model: WorldModel,
    samples: list[tuple[np.ndarray, float, np.ndarray]],
    codebook_size: int = 1024,
    codebook_dim: int = 128,
    steps: int = 2000,
    lr: float = 1e-3,
    batch: int = 8,
    commitment_weight: float = 0.25,
    seed: int = 0,
    dead_check_every: int = 1000,
    stop_mse: float | None = None,
):
    """Fit a VQDecoder on (context display image, action angle, target) pairs.

    Targets are raw line-integral images. The encoder and view predictor
    stay frozen (latents are computed under no_grad). Minimizes
    pixel MSE + codebook_loss + 0.25 * commitment_loss. If more than half
    the codebook stays unused over a checking window, the dead entries are
    re-initialized from recent latents with a warning. stop_mse ends
    training early once the pixel MSE drops below it.
    """
    cfg = model.cfg
    torch.manual_seed(seed)
    decoder = VQDecoder(cfg.embed_dim, cfg.grid_size, cfg.patch_size,
                        codebook_size, codebook_dim).to(cfg.torch_dtype)
    opt = torch.optim.Adam(decoder.parameters(), lr=lr)
    rng = np.random.default_rng(seed)

    latents = torch.cat(
        [frozen_latents(model, ctx, ang) for ctx, ang, _ in samples], dim=0)
    targets = torch.from_numpy(
        np.stack([t for _, _, t in samples]).astype(np.float64)).to(cfg.torch_dtype)

    first_loss = None
    final_loss = final_mse = 0.0
    dead_reinits = 0
    steps_run = 0
    window_counts = torch.zeros(codebook_size, dtype=torch.long)
    for step in range(steps):
        ids = rng.choice(len(samples), size=min(batch, len(samples)), replace=False)
        z = latents[ids]
        y = targets[ids]
        pred, indices, cb_loss, commit = decoder(z)
        mse = (pred - y).pow(2).mean()
        loss = mse + cb_loss + commitment_weight * commit
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        window_counts.scatter_add_(0, indices.reshape(-1).detach(),
                                   torch.ones_like(indices.reshape(-1)))
        if first_loss is None:
            first_loss = float(loss.detach())
        final_loss = float(loss.detach())
        final_mse = float(mse.detach())
        steps_run = step + 1
        if stop_mse is not None and final_mse < stop_mse:
            break
        if (step + 1) % dead_check_every == 0:
            dead = (window_counts == 0)
            if float(dead.float().mean()) > 0.5:
                warnings.warn(
                    f"{int(dead.sum())}/{codebook_size} codebook entries unused "
                    f"over the last {dead_check_every} steps; re-initializing them")
                with torch.no_grad():
                    pool = decoder.pre_quant(latents.reshape(-1, cfg.embed_dim))
                    pick = torch.from_numpy(
                        rng.integers(0, pool.shape[0], size=int(dead.sum())))
                    decoder.codebook[dead] = pool[pick]
                dead_reinits += 1
            window_counts.zero_()
    usage = codebook_usage(decoder.usage_counts.nonzero().numpy(), codebook_size) \
        if int(decoder.usage_counts.sum()) else 0.0
    report = DecoderTrainReport(steps_run, first_loss or 0.0, final_loss, final_mse,
                                usage, dead_reinits)
    return decoder, report


def render_latent_projection(
    model: WorldModel, decoder: VQDecoder, ctx_display: np.ndarray,
    angle_rad: float, geometry: ConeBeamGeometry | None = None,
) -> ProjectionImage:
    """Render a projection at an action angle purely from latents."""
    z = frozen_latents(model, ctx_display, angle_rad)
    with torch.no_grad():
        img, _, _, _ = decoder(z)
    data = np.maximum(img[0].double().numpy(), 0.0)
    return ProjectionImage(data.astype(np.float32), geometry)


# ----------------------------------------------------------------------
# Filtered backprojection


def ramp_kernel(n_taps: int, pitch: float) -> np.ndarray:
    """Band-limited ramp (Ram-Lak) kernel over offsets -(n-1)..(n-1).

    h[0] = 1/(4 pitch^2); h[n] = -1/(pi n pitch)^2 for odd n; 0 otherwise.
    """
    offsets = np.arange(-(n_taps - 1), n_taps)
    h = np.zeros_like(offsets, dtype=np.float64)
    h[offsets == 0] = 1.0 / (4.0 * pitch**2)
    odd = offsets % 2 != 0
    h[odd] = -1.0 / (np.pi * offsets[odd] * pitch) ** 2
    return h


def ramp_filter(row: np.ndarray, pitch: float) -> np.ndarray:
    """Convolve one detector row with the ramp kernel (direct form).

    The row is zero-padded to twice its length before the linear
    convolution so this and the transform-based path share semantics.
    """
    row = np.asarray(row, dtype=np.float64)
    n = len(row)
    padded = np.concatenate([row, np.zeros(n)])
    h = ramp_kernel(len(padded), pitch)
    full = np.convolve(padded, h)
    center = len(padded) - 1
    return full[center : center + n]


def ramp_filter_fft(row: np.ndarray, pitch: float) -> np.ndarray:
    """Transform-based ramp filtering; agrees with ramp_filter to ~1e-6."""
    row = np.asarray(row, dtype=np.float64)
    n = len(row)
    padded = np.concatenate([row, np.zeros(n)])
    h = ramp_kernel(len(padded), pitch)
    full = signal.fftconvolve(padded, h)
    center = len(padded) - 1
    return full[center : center + n]


def _filter_projection(img: np.ndarray, geom: ConeBeamGeometry, use_fft: bool) -> np.ndarray:
    """Cosine weighting + row-wise ramp filtering + FDK scaling."""
    nv, nu = img.shape
    u = (np.arange(nu) + 0.5 - nu / 2.0) * geom.pitch
    v = (np.arange(nv) + 0.5 - nv / 2.0) * geom.pitch
    cosw = geom.sdd / np.sqrt(geom.sdd**2 + u[None, :] ** 2 + v[:, None] ** 2)
    weighted = img.astype(np.float64) * cosw
    filt = ramp_filter_fft if use_fft else ramp_filter
    rows = np.stack([filt(weighted[r], geom.pitch) for r in range(nv)])
    # 1/2 folds the double coverage of a full circle; sdd/sod * pitch is
    # the detector-plane convolution step expressed at the isocenter plane.
    return 0.5 * (geom.sdd / geom.sod) * geom.pitch * rows


class ReconstructionError(ValueError):
    pass


def _angular_weights(betas_deg: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-view angular step (radians) and total coverage (degrees).

    Coverage counts the circle minus the largest gap between consecutive
    views; each view's weight is half its two adjacent gaps.
    """
    wrapped = np.mod(betas_deg, 360.0)
    order = np.argsort(wrapped, kind="stable")
    sorted_b = wrapped[order]
    gaps = np.diff(np.concatenate([sorted_b, [sorted_b[0] + 360.0]]))
    coverage = 360.0 - float(gaps.max()) if len(sorted_b) > 1 else 0.0
    weights = np.radians((np.roll(gaps, 1) + gaps) / 2.0)
    out = np.zeros_like(weights)
    out[order] = weights
    return out, coverage


def fdk_reconstruct(
    projections: list[ProjectionImage],
    geometries: list[ConeBeamGeometry] | None = None,
    n: int = 64,
    spacing: float = 4.0,
    origin=None,
    use_fft: bool = True,
) -> VoxelVolume:
    """Feldkamp-style filtered backprojection onto a cubic grid.

    Per view: cosine weighting, row-wise ramp filtering, then
    distance-weighted backprojection with per-view angular step weights.
    Views are processed in sorted-angle order so any input permutation
    yields a bit-identical volume. Output is clamped at >= 0.
    """
    if geometries is None:
        geometries = [p.geometry for p in projections]
        if any(g is None for g in geometries):
            raise ReconstructionError("projections lack attached geometries")
    if len(projections) != len(geometries):
        raise ReconstructionError("projection/geometry count mismatch")
    ref = geometries[0]
    for g in geometries:
        if (g.sod, g.sdd, g.nu, g.nv, g.pitch) != (ref.sod, ref.sdd, ref.nu, ref.nv, ref.pitch):
            raise ReconstructionError("geometries must share rig parameters")
        if g.pitch_angle != 0.0 or g.roll_angle != 0.0:
            raise ReconstructionError("tilted poses are not supported by FDK")
    for p, g in zip(projections, geometries):
        if p.data.shape != (g.nv, g.nu):
            raise ReconstructionError("projection shape does not match geometry")

    betas = np.array([g.beta for g in geometries], dtype=np.float64)
    weights, coverage = _angular_weights(betas)
    fan_deg = math.degrees(2.0 * math.atan((ref.nu / 2.0) * ref.pitch / ref.sdd))
    if coverage + 1e-9 < 180.0:
        raise ReconstructionError(
            f"angular coverage {coverage:.1f} deg < 180 deg (fan {fan_deg:.1f} deg)")

    if origin is None:
        origin = tuple(-(n - 1) / 2.0 * spacing for _ in range(3))
    xs = origin[0] + spacing * np.arange(n)
    ys = origin[1] + spacing * np.arange(n)
    zs = origin[2] + spacing * np.arange(n)
    X = xs[None, None, :]
    Y = ys[None, :, None]
    Z = zs[:, None, None]

    acc = np.zeros((n, n, n), dtype=np.float64)
    order = np.argsort(np.mod(betas, 360.0), kind="stable")
    for view in order:
        geom, img, dbeta = geometries[view], projections[view], weights[view]
        q = _filter_projection(img.data, geom, use_fft)
        src, det_center, u_axis, v_axis = geom.pose()
        d = (det_center - src) / geom.sdd
        rx = X - src[0]
        ry = Y - src[1]
        rz = Z - src[2]
        s = rx * d[0] + ry * d[1] + rz * d[2]
        scale = geom.sdd / s
        u_det = (rx * u_axis[0] + ry * u_axis[1] + rz * u_axis[2]) * scale
        v_det = (rx * v_axis[0] + ry * v_axis[1] + rz * v_axis[2]) * scale
        col = u_det / geom.pitch + geom.nu / 2.0 - 0.5
        rowp = v_det / geom.pitch + geom.nv / 2.0 - 0.5
        c0 = np.floor(col).astype(np.intp)
        r0 = np.floor(rowp).astype(np.intp)
        fc = col - c0
        fr = rowp - r0
        valid = (c0 >= 0) & (c0 < geom.nu - 1) & (r0 >= 0) & (r0 < geom.nv - 1) & (s > 0)
        c0c = np.clip(c0, 0, geom.nu - 2)
        r0c = np.clip(r0, 0, geom.nv - 2)
        q00 = q[r0c, c0c]
        q01 = q[r0c, c0c + 1]
        q10 = q[r0c + 1, c0c]
        q11 = q[r0c + 1, c0c + 1]
        interp = (q00 * (1 - fc) + q01 * fc) * (1 - fr) + (q10 * (1 - fc) + q11 * fc) * fr
        w = (geom.sod / np.where(s > 0, s, 1.0)) ** 2
        acc += dbeta * np.where(valid, interp * w, 0.0)

    data = np.maximum(acc, 0.0).astype(np.float32)
    return VoxelVolume(n, n, n, (spacing,) * 3, tuple(float(o) for o in origin), data)


# ----------------------------------------------------------------------
# Image fidelity metrics

PSNR_CAP_DB = 99.0


def psnr(a: np.ndarray, b: np.ndarray, data_range: float | None = None) -> float:
    """Peak signal-to-noise ratio in dB, capped at 99 (identical inputs).

    data_range defaults to max - min of the reference a.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if data_range is None:
        data_range = float(a.max() - a.min())
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0 or data_range <= 0.0:
        return PSNR_CAP_DB
    value = 20.0 * math.log10(data_range) - 10.0 * math.log10(mse)
    return min(value, PSNR_CAP_DB)


def ssim(a: np.ndarray, b: np.ndarray, data_range: float | None = None,
         window: int = 7, k1: float = 0.01, k2: float = 0.03) -> float:
    """Structural similarity with a uniform window, averaged over the
    interior (windows fully inside the image). Works on 2D or 3D arrays.

    data_range defaults to max - min of the reference a.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    if data_range is None:
        data_range = float(a.max() - a.min())
    if data_range <= 0:
        data_range = 1.0
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2

    def mean(x):
        return ndimage.uniform_filter(x, size=window, mode="nearest")

    mu_a = mean(a)
    mu_b = mean(b)
    var_a = mean(a * a) - mu_a**2
    var_b = mean(b * b) - mu_b**2
    cov = mean(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    smap = num / den
    r = window // 2
    core = smap[tuple(slice(r, dim - r) for dim in smap.shape)]
    return float(core.mean())
