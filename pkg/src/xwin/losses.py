"""Training losses.

All losses are pure differentiable functions of tensors. Stop-gradient
rules enforced here: affinity targets and MIM/domain targets are detached
inside the loss, so the contracts hold regardless of the caller. Keeping
the domain classifier frozen under the domain loss is the trainer's job
(it controls which forward produced the probabilities).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch.nn import functional as F

from .models import clamp_probability

PROB_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    lambda_affinity: float = 0.4
    lambda_mim: float = 1.0
    lambda_domain: float = 0.6
    lambda_cls: float = 1.0


@dataclass(frozen=True)
class LossReport:
    """Scalar values of every component and their weighted combination."""

    infonce: float
    affinity: float
    align: float
    mim: float
    cls: float
    domain: float
    overall: float

    CSV_FIELDS = ("loss_total", "loss_align", "loss_infonce", "loss_affinity",
                  "loss_mim", "loss_cls", "loss_domain")

    def csv_values(self):
        return (self.overall, self.align, self.infonce, self.affinity,
                self.mim, self.cls, self.domain)


def similarity_matrix(z: torch.Tensor, t: torch.Tensor, normalize: bool = True) -> torch.Tensor:
    """S_ij = z_i . t_j, optionally on L2-normalized rows (cosine style)."""
    if normalize:
        z = F.normalize(z, dim=-1)
        t = F.normalize(t, dim=-1)
    return z @ t.T


def softmax_rows(s: torch.Tensor, tau) -> torch.Tensor:
    """Row softmax of S / tau with row-max subtraction for stability."""
    logits = s / tau
    logits = logits - logits.max(dim=-1, keepdim=True).values.detach()
    return logits.softmax(dim=-1)


def infonce(p: torch.Tensor) -> torch.Tensor:
    """-(1/N) sum_i log P_ii: identity-labeled contrastive cross-entropy."""
    return -torch.log(torch.diagonal(p)).mean()


def affinity(t: torch.Tensor, tau_tilde, normalize: bool = True) -> torch.Tensor:
    """Row-stochastic target-vs-target similarity, treated as a constant.

    Built from teacher outputs; detached so no gradient flows through it
    (including to tau_tilde).
    """
    s = similarity_matrix(t, t, normalize=normalize)
    return softmax_rows(s, tau_tilde).detach()


def affinity_loss(a: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    """-(1/N) sum_ij A_ij log P_ij; equals infonce(P) when A = I."""
    n = p.shape[0]
    return -(a * torch.log(p)).sum() / n


def align_loss(
    z: torch.Tensor,
    t: torch.Tensor,
    tau,
    tau_tilde,
    lambda_affinity: float,
    normalize: bool = True,
):
    """Contrastive alignment of pooled predicted/target pairs.

    Returns (loss, infonce_part, affinity_part). Targets are detached; the
    affinity matrix is a constant by construction.
    """
    t = t.detach()
    p = softmax_rows(similarity_matrix(z, t, normalize=normalize), tau)
    l_nce = infonce(p)
    a = affinity(t, tau_tilde, normalize=normalize)
    l_aff = affinity_loss(a, p)
    return l_nce + lambda_affinity * l_aff, l_nce, l_aff


def _masked_sq_err(pred: torch.Tensor, tgt: torch.Tensor, reduction: str) -> torch.Tensor:
    """Per-sample reduction of squared differences over (tokens, dim)."""
    sq = (pred - tgt.detach()) ** 2
    if reduction == "element_mean":
        return sq.mean(dim=(-2, -1))
    if reduction == "token_sum":
        return sq.sum(dim=-1).mean(dim=-1)
    raise ValueError("reduction must be 'element_mean' or 'token_sum'")


def mim_loss(pred_real, tgt_real, pred_sim, tgt_sim, reduction: str = "element_mean"):
    """Masked-token regression on the real and simulated streams, summed.

    Each argument is (B, M, D) or a list of (M_i, D) tensors when masked
    counts differ across the batch. Targets are detached.
    """

    def stream(pred, tgt):
        if isinstance(pred, (list, tuple)):
            per = [_masked_sq_err(p[None], t[None], reduction)[0] for p, t in zip(pred, tgt)]
            return torch.stack(per).mean()
        return _masked_sq_err(pred, tgt, reduction).mean()

    return stream(pred_real, tgt_real) + stream(pred_sim, tgt_sim)


def cls_loss(p_real: torch.Tensor, p_sim: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy teaching the classifier real=1, simulated=0.

    Probabilities are clamped to [1e-7, 1 - 1e-7]. The caller must feed
    probabilities computed from detached tokens so the encoder receives no
    gradient from this loss.
    """
    p_real = clamp_probability(p_real, PROB_EPS)
    p_sim = clamp_probability(p_sim, PROB_EPS)
    return -(torch.log(p_real) + torch.log1p(-p_sim)).mean()


def domain_loss(z_patch: torch.Tensor, t_patch: torch.Tensor, p_pred: torch.Tensor):
    """Structure-preserving adaptation of predicted representations.

    (1/N) sum mean-squared(z_i - t_i) - (1/N) sum log p_i, with targets
    detached. p_pred must come from a classifier forward whose parameters
    were frozen, so this loss moves z only.
    """
    p_pred = clamp_probability(p_pred, PROB_EPS)
    mse = ((z_patch - t_patch.detach()) ** 2).mean(dim=(-2, -1)).mean()
    return mse - torch.log(p_pred).mean()


def overall_loss(
    l_align: torch.Tensor,
    l_infonce: torch.Tensor,
    l_affinity: torch.Tensor,
    l_mim: torch.Tensor,
    l_cls: torch.Tensor,
    l_domain: torch.Tensor,
    weights: LossWeights,
):
    """Weighted combination; returns (total tensor, LossReport)."""
    total = (
        l_align
        + weights.lambda_mim * l_mim
        + weights.lambda_domain * l_domain
        + weights.lambda_cls * l_cls
    )
    report = LossReport(
        infonce=float(l_infonce.detach()),
        affinity=float(l_affinity.detach()),
        align=float(l_align.detach()),
        mim=float(l_mim.detach()),
        cls=float(l_cls.detach()),
        domain=float(l_domain.detach()),
        overall=float(total.detach()),
    )
    return total, report
