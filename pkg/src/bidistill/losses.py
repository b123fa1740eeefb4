"""Training objectives: smoothed cross-entropy, the two distillation
terms that tie the decoders together, and the annealed combination.

Position t of the forward decoder predicts y_t from the left context and
position t of the backward decoder predicts the same y_t from the right
context, so both distillation terms compare co-located outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bpe import PAD
from .errors import ConfigError, ContractError, InputError, ShapeError
from .tensor import Tensor, log_softmax_lastdim, softmax_lastdim

VARIANTS = ("l2r", "r2l", "multitask", "sbd")


@dataclass
class LossParts:
    """Scalar values for logging; `total` mirrors the returned Tensor."""
    ce_fwd: float
    ce_bwd: float
    kd_logit: float
    kd_hidden: float
    lam: float
    total: float


def cross_entropy_label_smoothed(logits: Tensor, targets: np.ndarray,
                                 real_mask: np.ndarray, eps: float) -> Tensor:
    """Mean smoothed cross-entropy over real positions.

    The smoothed target puts 1 - eps on the gold token and spreads eps
    uniformly over every id except PAD, which gets exact zero.
    """
    b, t, v = logits.shape
    n_real = int(real_mask.sum())
    if n_real == 0:
        raise ContractError("cross entropy over a batch with no real positions")
    if np.any(targets[real_mask] == PAD):
        raise ContractError("gold target is PAD at a real position")
    if not 0.0 <= eps < 1.0:
        raise InputError(f"label smoothing eps must be in [0, 1), got {eps}")

    q = np.full((b, t, v), eps / (v - 1), dtype=np.float32)
    q[:, :, PAD] = 0.0
    rows = np.arange(b)[:, None], np.arange(t)[None, :]
    q[rows[0], rows[1], targets] += np.float32(1.0 - eps)
    q[~real_mask] = 0.0

    logp = log_softmax_lastdim(logits)
    return -(logp * Tensor(q)).sum() * (1.0 / n_real)


def logit_kd_loss(logits_fwd: Tensor, logits_bwd: Tensor, real_mask: np.ndarray,
                  stop_teacher_grad: bool = False) -> Tensor:
    """KL from the backward distribution to the forward one, averaged over
    real positions.  Gradient reaches both decoders unless the teacher
    side is frozen."""
    if logits_fwd.shape != logits_bwd.shape:
        raise ShapeError(
            f"decoder logits disagree in shape: {logits_fwd.shape} vs {logits_bwd.shape}")
    n_real = int(real_mask.sum())
    if n_real == 0:
        raise ContractError("logit distillation over a batch with no real positions")
    teacher = logits_bwd.detach() if stop_teacher_grad else logits_bwd
    p_b = softmax_lastdim(teacher)
    lp_b = log_softmax_lastdim(teacher)
    lp_f = log_softmax_lastdim(logits_fwd)
    mask3 = Tensor(real_mask[:, :, None].astype(np.float32))
    return (p_b * (lp_b - lp_f) * mask3).sum() * (1.0 / n_real)


def hidden_kd_loss(proj_fwd: Tensor, hidden_bwd: Tensor, real_mask: np.ndarray,
                   stop_teacher_grad: bool = False) -> Tensor:
    """Mean squared gap between the projected forward hidden states and the
    backward hidden states, averaged over real positions and channels."""
    if proj_fwd.shape != hidden_bwd.shape:
        raise ShapeError(
            f"hidden states disagree in shape: {proj_fwd.shape} vs {hidden_bwd.shape}")
    n_real = int(real_mask.sum())
    if n_real == 0:
        raise ContractError("hidden distillation over a batch with no real positions")
    d = proj_fwd.shape[-1]
    target = hidden_bwd.detach() if stop_teacher_grad else hidden_bwd
    diff = proj_fwd - target
    mask3 = Tensor(real_mask[:, :, None].astype(np.float32))
    return (diff * diff * mask3).sum() * (1.0 / (n_real * d))


def lambda_schedule(step: int, w_step: int) -> float:
    """Teacher weight: 1 until w_step, then w_step / step."""
    if w_step < 1:
        raise ConfigError(f"w_step must be at least 1, got {w_step}")
    if step < 1:
        raise ContractError(f"step must be at least 1, got {step}")
    return 1.0 if step <= w_step else w_step / step


def joint_loss(model, batch, *, variant: str = "sbd", eps_ls: float = 0.1,
               step: int = 1, w_step: int = 1000, use_logit_kd: bool = True,
               use_hidden_kd: bool = True, use_annealing: bool = True,
               stop_teacher_grad: bool = False, srng=None) -> tuple[Tensor, LossParts]:
    """Run the needed stacks on one batch and combine the terms.

    sbd with annealing weights the parts as
        (1 - lam)^2 * ce_fwd + lam * ce_bwd + (1 - lam) * lam * kd
    so at lam = 1 the total IS ce_bwd (exact zero coefficients) and the
    balance shifts toward the forward decoder as lam decays.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {VARIANTS}")

    enc_out = model.encode(batch.src_ids, batch.src_pad_mask, srng)
    need_fwd = variant != "r2l"
    need_bwd = variant != "l2r"

    zero = Tensor(np.float32(0.0))
    ce_fwd = ce_bwd = kd_logit = kd_hidden = zero
    h_fwd = h_bwd = None
    if need_fwd:
        logits_f, h_fwd = model.decode_forward(
            batch.fwd_in, batch.tgt_pad_mask, enc_out, batch.src_pad_mask, srng)
        ce_fwd = cross_entropy_label_smoothed(
            logits_f, batch.tgt_out, batch.tgt_pad_mask, eps_ls)
    if need_bwd:
        logits_b, h_bwd = model.decode_backward(
            batch.bwd_in, batch.tgt_pad_mask, enc_out, batch.src_pad_mask, srng)
        ce_bwd = cross_entropy_label_smoothed(
            logits_b, batch.tgt_out, batch.tgt_pad_mask, eps_ls)

    if variant == "l2r":
        total, lam = ce_fwd, 0.0
    elif variant == "r2l":
        total, lam = ce_bwd, 1.0
    elif variant == "multitask":
        total, lam = ce_fwd + ce_bwd, 0.0
    else:
        if use_logit_kd:
            kd_logit = logit_kd_loss(logits_f, logits_b, batch.tgt_pad_mask, stop_teacher_grad)
        if use_hidden_kd:
            kd_hidden = hidden_kd_loss(model.project_hidden(h_fwd), h_bwd,
                                       batch.tgt_pad_mask, stop_teacher_grad)
        if use_annealing:
            lam = lambda_schedule(step, w_step)
            total = (ce_fwd * (1.0 - lam) ** 2 + ce_bwd * lam
                     + (kd_logit + kd_hidden) * ((1.0 - lam) * lam))
        else:
            lam = 0.0
            total = ce_fwd + ce_bwd + kd_logit + kd_hidden

    parts = LossParts(ce_fwd=float(ce_fwd.data), ce_bwd=float(ce_bwd.data),
                      kd_logit=float(kd_logit.data), kd_hidden=float(kd_hidden.data),
                      lam=lam, total=float(total.data))
    return total, parts
