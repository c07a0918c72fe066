"""The differentiable model stack.

A student encoder over patch tokens, an EMA teacher copy of it, an
action-conditioned view predictor, a mask predictor, and a small domain
classifier, all plain pre-layernorm transformers. No dropout or stochastic
depth anywhere: forwards are deterministic given parameters and inputs,
which the gradient and resume checks rely on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

DTYPES = {"float32": torch.float32, "float64": torch.float64}


class NumericalError(RuntimeError):
    """Non-finite activations encountered in a forward pass."""


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 128
    encoder_depth: int = 4
    num_heads: int = 4
    mlp_ratio: float = 4.0
    predictor_dim: int = 64
    predictor_depth: int = 2
    classifier_depth: int = 2
    dtype: str = "float32"
    mim_target_norm: bool = True
    tau_init: float = 0.07
    tau_tilde_init: float = 0.07
    action_inputs: int = 1  # 3 for the yaw/pitch/roll variant

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be divisible by patch_size")
        if self.embed_dim % self.num_heads != 0:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_tokens(self) -> int:
        return self.grid_size**2

    @property
    def torch_dtype(self) -> torch.dtype:
        return DTYPES[self.dtype]


def sinusoidal_pe(n_tokens: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Interleaved sin/cos positional encoding, base 10000.

    Row p: [sin(p*w_0), cos(p*w_0), sin(p*w_1), cos(p*w_1), ...] with
    w_i = 10000^(-2i/dim).
    """
    pos = torch.arange(n_tokens, dtype=torch.float64)[:, None]
    i = torch.arange(0, dim, 2, dtype=torch.float64)[None, :]
    ang = pos * torch.exp(-i / dim * math.log(10000.0))
    pe = torch.zeros(n_tokens, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(ang)
    pe[:, 1::2] = torch.cos(ang[:, : pe[:, 1::2].shape[1]])
    return pe.to(dtype)


def _check_finite(x: torch.Tensor, where: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NumericalError(f"non-finite activations in {where}")
    return x


class Attention(nn.Module):
    def __init__(self, dim, num_heads):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, return_weights=False):
        b, t, d = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.num_heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, d)
        out = self.proj(out)
        if return_weights:
            return out, attn
        return out


class Block(nn.Module):
    """Pre-layernorm transformer block with a GELU MLP."""

    def __init__(self, dim, num_heads, mlp_ratio):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x

    def attention_weights(self, x):
        _, w = self.attn(self.norm1(x), return_weights=True)
        return w


class PatchEmbed(nn.Module):
    """Non-overlapping patches -> linear projection (+ PE added by callers)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.patch_size = cfg.patch_size
        self.proj = nn.Conv2d(1, cfg.embed_dim, kernel_size=cfg.patch_size, stride=cfg.patch_size)

    def forward(self, img):
        if img.ndim == 3:
            img = img[:, None]
        x = self.proj(img)
        return x.flatten(2).transpose(1, 2)


class Encoder(nn.Module):
    """ViT trunk: patch embedding + PE, blocks, final layernorm."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg)
        self.blocks = nn.ModuleList(
            Block(cfg.embed_dim, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.encoder_depth)
        )
        self.norm = nn.LayerNorm(cfg.embed_dim)
        self.register_buffer("pos_embed", sinusoidal_pe(cfg.n_tokens, cfg.embed_dim))

    def tokenize(self, img):
        """Patch tokens with PE, not yet encoded."""
        tokens = self.patch_embed(img)
        return tokens + self.pos_embed[None, : tokens.shape[1]].to(tokens.dtype)

    def encode_tokens(self, tokens):
        for blk in self.blocks:
            tokens = blk(tokens)
        return _check_finite(self.norm(tokens), "encoder")

    def forward(self, img, visible_idx=None):
        """Encode an image; if visible_idx is given, only those tokens.

        visible_idx: token indices shared across the batch (any int sequence).
        """
        tokens = self.tokenize(img)
        if visible_idx is not None:
            tokens = tokens[:, torch.as_tensor(visible_idx, dtype=torch.long)]
        return self.encode_tokens(tokens)


class Predictor(nn.Module):
    """Narrow transformer operating in predictor_dim with I/O projections."""

    def __init__(self, cfg: ModelConfig, depth: int):
        super().__init__()
        self.proj_in = nn.Linear(cfg.embed_dim, cfg.predictor_dim)
        self.blocks = nn.ModuleList(
            Block(cfg.predictor_dim, cfg.num_heads, cfg.mlp_ratio) for _ in range(depth)
        )
        self.norm = nn.LayerNorm(cfg.predictor_dim)
        self.proj_out = nn.Linear(cfg.predictor_dim, cfg.embed_dim)

    def run(self, seq):
        for blk in self.blocks:
            seq = blk(seq)
        return self.norm(seq)


class ViewPredictor(Predictor):
    """Action-conditioned predictor of target-view representations."""

    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg, cfg.predictor_depth)
        self.action_embed = nn.Linear(cfg.action_inputs, cfg.predictor_dim)
        self.register_buffer("pos_embed", sinusoidal_pe(cfg.n_tokens, cfg.embed_dim))

    def forward(self, ctx_tokens, action_rad):
        """Predict target-view tokens for a rotation action (radians).

        ctx_tokens: (B, T, embed_dim) encoder outputs of the context view.
        action_rad: scalar, (B,), or (B, action_inputs) tensor of angles.
        Prepends one action token, runs the blocks, and returns only the
        patch positions, so the output token count equals the input's.
        """
        b, t, _ = ctx_tokens.shape
        a = torch.as_tensor(action_rad, dtype=ctx_tokens.dtype, device=ctx_tokens.device)
        if a.ndim == 0:
            a = a.expand(b, 1)
        elif a.ndim == 1:
            a = a[:, None] if a.shape[0] == b else a.expand(b, a.shape[0])
        act_tok = self.action_embed(a)[:, None]
        x = ctx_tokens + self.pos_embed[None, :t].to(ctx_tokens.dtype)
        seq = torch.cat([act_tok, self.proj_in(x)], dim=1)
        out = self.run(seq)[:, 1:]
        return _check_finite(self.proj_out(out), "view_predictor")


class MaskPredictor(Predictor):
    """Reconstructs representations at masked positions from visible ones."""

    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg, cfg.predictor_depth)
        self.mask_token = nn.Parameter(torch.zeros(cfg.predictor_dim))
        self.register_buffer("pos_embed", sinusoidal_pe(cfg.n_tokens, cfg.predictor_dim))

    def forward(self, visible_tokens, visible_idx, masked_idx):
        """visible_tokens: (B, V, embed_dim) encoder outputs of the visible set.

        Returns (B, M, embed_dim) predictions at masked_idx order; empty
        tensor when masked_idx is empty.
        """
        b = visible_tokens.shape[0]
        dt = visible_tokens.dtype
        visible_idx = torch.as_tensor(visible_idx, dtype=torch.long)
        masked_idx = torch.as_tensor(masked_idx, dtype=torch.long)
        n_masked = len(masked_idx)
        if n_masked == 0:
            return visible_tokens.new_zeros(b, 0, visible_tokens.shape[-1])
        pe = self.pos_embed.to(dt)
        vis = self.proj_in(visible_tokens) + pe[None, visible_idx]
        mask = self.mask_token.to(dt)[None, None, :] + pe[None, masked_idx]
        seq = torch.cat([vis, mask.expand(b, n_masked, -1)], dim=1)
        out = self.run(seq)[:, -n_masked:]
        return _check_finite(self.proj_out(out), "mask_predictor")


class DomainClassifier(nn.Module):
    """Token-level transformer blocks + mean pool + linear logit."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.blocks = nn.ModuleList(
            Block(cfg.embed_dim, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.classifier_depth)
        )
        self.head = nn.Linear(cfg.embed_dim, 1)

    def logits(self, tokens):
        for blk in self.blocks:
            tokens = blk(tokens)
        return self.head(tokens.mean(dim=1)).squeeze(-1)

    def forward(self, tokens):
        """Probability per sample that the tokens come from the real domain."""
        p = torch.sigmoid(self.logits(tokens))
        return clamp_probability(p)


def clamp_probability(p: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    return p.clamp(eps, 1.0 - eps)


def global_avg_pool(tokens: torch.Tensor) -> torch.Tensor:
    """(B, T, D) -> (B, D) mean over tokens."""
    return tokens.mean(dim=1)


class WorldModel(nn.Module):
    """Bundles all trainable components plus the gradient-free teacher."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.teacher = Encoder(cfg)
        self.view_predictor = ViewPredictor(cfg)
        self.mask_predictor = MaskPredictor(cfg)
        self.classifier = DomainClassifier(cfg)
        self.log_tau = nn.Parameter(torch.tensor(math.log(cfg.tau_init)))
        self.log_tau_tilde = nn.Parameter(torch.tensor(math.log(cfg.tau_tilde_init)))
        self.to(cfg.torch_dtype)
        self.teacher.load_state_dict(self.encoder.state_dict())
        self.teacher.requires_grad_(False)

    @property
    def tau(self):
        return self.log_tau.exp()

    @property
    def tau_tilde(self):
        return self.log_tau_tilde.exp()

    def encode(self, img, which: str = "student", visible_idx=None):
        if which == "student":
            return self.encoder(img, visible_idx)
        if which == "teacher":
            with torch.no_grad():
                return self.teacher(img, visible_idx)
        raise ValueError("which must be 'student' or 'teacher'")

    def teacher_mim_targets(self, img, masked_idx):
        """Teacher tokens at masked positions, optionally layer-normalized."""
        with torch.no_grad():
            t = self.teacher(img)[:, torch.as_tensor(masked_idx, dtype=torch.long)]
            if self.cfg.mim_target_norm:
                t = nn.functional.layer_norm(t, (t.shape[-1],))
        return t

    def trainable_parameters(self):
        for name, p in self.named_parameters():
            if not name.startswith("teacher."):
                yield name, p


def ema_update(teacher: nn.Module, student: nn.Module, momentum: float) -> None:
    """theta' <- m * theta' + (1 - m) * theta for every shared parameter.

    Operates on the encoder pair only; predictors, classifier, and
    temperatures have no teacher-side counterpart.
    """
    with torch.no_grad():
        s_params = dict(student.named_parameters())
        s_bufs = dict(student.named_buffers())
        for name, p in teacher.named_parameters():
            p.mul_(momentum).add_((1.0 - momentum) * s_params[name])
        for name, b in teacher.named_buffers():
            if b.dtype.is_floating_point and name in s_bufs:
                b.copy_(s_bufs[name])
