"""The three-level distillation loss stack.

* supervised token loss (label-smoothed cross-entropy, summed over positions),
* sequence-level KD: the same functional form with the teacher's decoded
  caption as the hard target,
* encoder-level KD: either a bidirectional contrastive loss over pooled,
  projected clip embeddings, or a plain squared-L2 loss against the
  (unprojected) teacher embedding,
* and their unit-weight combination, which drops the supervised term for
  audio-only samples.

All losses are scalars differentiable through :mod:`capdistill.numerics`.
Token losses sum over positions and are batch-averaged by the batched
variants; positions after EOS (padding) contribute zero.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import Tensor
from .synthworld import PAD

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class SmoothingConfig:
    alpha: float = 0.1

    def validate(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("label smoothing alpha must lie in [0, 1)")


@dataclass
class LossBreakdown:
    """Per-component values of one training step's objective."""

    l_sup: float | None
    l_seq: float | None
    l_enc: float | None
    total: float
    mode: str            # paired | audio_only
    enc_kind: str        # contrastive | mse | none

    def components(self):
        return {k: v for k, v in
                (("l_sup", self.l_sup), ("l_seq", self.l_seq), ("l_enc", self.l_enc))
                if v is not None}


def _apply_projection(x, proj):
    if proj is None:
        return x
    if isinstance(proj, tuple):
        w, b = proj
    else:
        w, b = proj.w, proj.b
    return nm.linear(x, w, b)


def _smoothed_token_ce(probs, targets, mask, alpha):
    """Sum over positions of CE against (1-a)*onehot + a*uniform, masked."""
    if (probs.data < PROB_FLOOR).any():
        warnings.warn("probabilities at/below the log floor were clamped", stacklevel=3)
    logp = nm.log_clamped(probs, PROB_FLOOR)
    nll = nm.take_last(logp, targets)
    if alpha > 0.0:
        vocab = probs.shape[-1]
        uniform = nm.scale(nm.sum_(logp, axis=-1), 1.0 / vocab)
        per_pos = nm.add(nm.scale(nll, 1.0 - alpha), nm.scale(uniform, alpha))
    else:
        per_pos = nll
    per_pos = nm.mul(per_pos, Tensor(mask.astype(probs.data.dtype)))
    return nm.scale(nm.sum_(per_pos), -1.0)


def supervised_loss(p: Tensor, target, smoothing: SmoothingConfig) -> Tensor:
    """Label-smoothed cross-entropy of one caption, summed over positions.

    `p` holds next-token distributions, one row per prediction position;
    `target` is the full BOS...EOS(+PAD) sequence, so row n is scored against
    target[n + 1]. PAD positions are masked out.
    """
    smoothing.validate()
    target = np.asarray(target)
    if target.ndim != 1 or p.ndim != 2:
        raise nm.ShapeError("supervised_loss expects (N, vocab) probs and a 1-d target")
    predicted = target[1:]
    if predicted.shape[0] != p.shape[0]:
        raise nm.ShapeError(
            f"{p.shape[0]} prediction rows vs {predicted.shape[0]} target positions")
    mask = predicted != PAD
    return _smoothed_token_ce(p, predicted, mask, smoothing.alpha)


def sequence_kd_loss(p: Tensor, teacher_caption, smoothing: SmoothingConfig) -> Tensor:
    """Hard-label sequence KD: supervised loss against the teacher's caption."""
    return supervised_loss(p, teacher_caption, smoothing)


def token_ce_batch(probs: Tensor, token_matrix, smoothing: SmoothingConfig) -> Tensor:
    """Batched token loss: per-sample position sum, averaged over the batch."""
    smoothing.validate()
    token_matrix = np.asarray(token_matrix)
    predicted = token_matrix[:, 1:]
    if probs.ndim != 3 or predicted.shape != probs.shape[:2]:
        raise nm.ShapeError(
            f"probs {probs.shape} incompatible with targets {token_matrix.shape}")
    mask = predicted != PAD
    total = _smoothed_token_ce(probs, predicted, mask, smoothing.alpha)
    return nm.scale(total, 1.0 / token_matrix.shape[0])


def _pool(batch):
    """Mean over time of (B, T, d) embedding sequences."""
    if isinstance(batch, Tensor) and batch.ndim == 3:
        return nm.mean(batch, axis=1)
    raise nm.ShapeError("expected a stacked (B, T, d) embedding batch")


def contrastive_kd_loss(tea_batch, stu_batch, proj_tea, proj_stu, tau: float) -> Tensor:
    """Bidirectional InfoNCE between pooled, projected clip embeddings.

    Matched teacher/student pairs sit on the similarity-matrix diagonal;
    both softmax directions (over students for each teacher, and vice versa)
    are averaged over the batch. Zero-norm embeddings are floored, and a
    single-clip batch gives exactly zero.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    tea = _apply_projection(_pool(tea_batch), proj_tea)
    stu = _apply_projection(_pool(stu_batch), proj_stu)
    if tea.shape != stu.shape:
        raise nm.ShapeError(f"projected shapes differ: {tea.shape} vs {stu.shape}")
    b = tea.shape[0]
    sim = nm.matmul(nm.l2_normalize(tea), nm.transpose(nm.l2_normalize(stu), (1, 0)))
    logits = nm.scale(sim, 1.0 / tau)
    diag = np.arange(b)
    loss_t = nm.take_last(nm.log_softmax(logits, axis=1), diag)
    loss_s = nm.take_last(nm.log_softmax(nm.transpose(logits, (1, 0)), axis=1), diag)
    return nm.scale(nm.add(nm.sum_(loss_t), nm.sum_(loss_s)), -1.0 / b)


def mse_kd_loss(tea_batch, stu_batch, proj_stu) -> Tensor:
    """Squared L2 distance between pooled teacher and projected student
    embeddings, summed over dimensions and averaged over the batch.

    The teacher side is used as-is (no projection); only the student is
    mapped into the teacher dimension.
    """
    tea = _pool(tea_batch)
    stu = _apply_projection(_pool(stu_batch), proj_stu)
    if tea.shape != stu.shape:
        raise nm.ShapeError(
            f"projected student {stu.shape} does not match teacher {tea.shape}")
    diff = nm.sub(tea, stu)
    return nm.scale(nm.sum_(nm.square(diff)), 1.0 / tea.shape[0])


def total_loss(l_sup, l_seq, l_enc, mode: str, enc_kind: str,
               weights=(1.0, 1.0, 1.0)):
    """Combine per-level losses into the training objective.

    Paired samples use all three levels; audio-only samples have no ground
    truth, so the supervised term is absent. Components with weight zero (or
    enc_kind "none") are omitted entirely rather than multiplied by zero.
    Returns (scalar Tensor, LossBreakdown); the breakdown stores effective
    (weighted) component values so that total == sum(components).
    """
    if mode not in ("paired", "audio_only"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "audio_only" and l_sup is not None:
        raise ValueError("audio-only batches cannot carry a supervised loss")
    if enc_kind == "none" and l_enc is not None:
        raise ValueError("enc_kind 'none' cannot carry an encoder loss")
    w_sup, w_seq, w_enc = weights
    terms = []
    values = {"l_sup": None, "l_seq": None, "l_enc": None}
    for key, comp, w in (("l_sup", l_sup, w_sup), ("l_seq", l_seq, w_seq),
                         ("l_enc", l_enc, w_enc)):
        if comp is None or w == 0.0:
            continue
        weighted = comp if w == 1.0 else nm.scale(comp, w)
        terms.append(weighted)
        values[key] = weighted.item()
    if not terms:
        raise ValueError("no loss components present")
    total = terms[0]
    for t in terms[1:]:
        total = nm.add(total, t)
    breakdown = LossBreakdown(l_sup=values["l_sup"], l_seq=values["l_seq"],
                              l_enc=values["l_enc"], total=total.item(),
                              mode=mode, enc_kind=enc_kind)
    return total, breakdown
