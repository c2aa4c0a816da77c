"""Loss kernels with closed-form gradients.

Every kernel takes tensors, does its arithmetic in float64 and returns the
value together with the analytic gradient with respect to its inputs. The
``*_loss`` autograd wrappers at the bottom reuse those gradients so training
runs through exactly the code that the finite-difference checks verify.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

STD_EPS = 1e-8
UNIT_NORM_TOL = 1e-5


@dataclass(frozen=True)
class LossValue:
    value: float
    components: dict = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class CorrelationMatrix:
    C: torch.Tensor
    n_pairs: int
    n_floored: int = 0  # feature columns whose std hit the epsilon floor


def _f64(x) -> torch.Tensor:
    return torch.as_tensor(x).detach().to(torch.float64)


def _labels(y) -> torch.Tensor:
    return torch.as_tensor(y).detach().to(torch.long).reshape(-1)


# -- cross-entropy ----------------------------------------------------------


def cross_entropy(logits, labels) -> tuple[LossValue, torch.Tensor]:
    """Mean negative log-likelihood of ``labels`` under softmax(logits); grad = (softmax - onehot)/B."""
    z = _f64(logits)
    y = _labels(labels)
    if z.ndim != 2 or z.shape[0] != y.shape[0]:
        raise ValueError(f"logits {tuple(z.shape)} do not match {y.shape[0]} labels")
    if not torch.isfinite(z).all():
        raise ValueError("cross_entropy: non-finite logits")
    B, K = z.shape
    if ((y < 0) | (y >= K)).any():
        raise ValueError(f"cross_entropy: labels must lie in [0,{K})")
    shifted = z - z.max(dim=1, keepdim=True).values
    log_norm = torch.log(torch.exp(shifted).sum(dim=1))
    log_prob = shifted[torch.arange(B), y] - log_norm
    value = float(-log_prob.mean())
    grad = torch.softmax(shifted, dim=1)
    grad[torch.arange(B), y] -= 1.0
    grad /= B
    return LossValue(value, {"ce": value}), grad


# -- supervised contrastive -------------------------------------------------


def supcon_loss(projections, labels, tau: float, require_unit_norm: bool = True) -> tuple[LossValue, torch.Tensor]:
    """Supervised contrastive loss over a 2B batch of unit-norm projections.

    Each anchor i averages -log softmax over its same-label partners P(i) (k != i in the
    denominator); the outer mean runs over anchors with non-empty P(i) only. The gradient is
    taken with the similarities as plain dot products, so finite-difference checks may pass
    ``require_unit_norm=False`` and perturb rows off the sphere.
    """
    if not tau > 0:
        raise ValueError("supcon_loss: tau must be > 0")
    p = _f64(projections)
    y = _labels(labels)
    n = p.shape[0]
    if y.shape[0] != n:
        raise ValueError("supcon_loss: one label per projection row is required")
    norms = p.norm(dim=1)
    if require_unit_norm and (norms - 1.0).abs().max() > UNIT_NORM_TOL:
        raise ValueError("supcon_loss: projection rows must be unit-norm")

    eye = torch.eye(n, dtype=torch.bool)
    positives = (y[:, None] == y[None, :]) & ~eye
    n_pos = positives.sum(dim=1)
    valid = n_pos > 0
    n_anchors = int(valid.sum())
    if n_anchors == 0:
        raise ValueError("supcon_loss: no positive pairs")

    logits = (p @ p.T) / tau
    logits = logits.masked_fill(eye, float("-inf"))
    log_prob = logits - torch.logsumexp(logits, dim=1, keepdim=True)
    pos_weight = positives.to(torch.float64) / n_pos.clamp(min=1)[:, None].to(torch.float64)
    per_anchor = -(pos_weight * log_prob.masked_fill(eye, 0.0)).sum(dim=1)
    value = float(per_anchor[valid].sum() / n_anchors)

    # dL/dlogits_ik = (softmax_ik - 1[k in P(i)]/|P(i)|) / A for valid anchors
    g = (torch.exp(log_prob) - pos_weight) * valid[:, None].to(torch.float64) / n_anchors
    g = g.masked_fill(eye, 0.0)
    grad = (g + g.T) @ p / tau
    return LossValue(value, {"cl": value, "n_anchors": n_anchors}), grad


# -- information-bottleneck cross-correlation ------------------------------


def _standardize(x: torch.Tensor):
    mu = x.mean(dim=0, keepdim=True)
    centred = x - mu
    std = torch.sqrt((centred**2).mean(dim=0, keepdim=True))
    floored = std < STD_EPS
    scale = torch.where(floored, torch.full_like(std, STD_EPS), std)
    return centred / scale, scale, floored


def _standardize_backward(g: torch.Tensor, xhat: torch.Tensor, scale: torch.Tensor, floored: torch.Tensor):
    mean_g = g.mean(dim=0, keepdim=True)
    mean_gx = (g * xhat).mean(dim=0, keepdim=True)
    through_std = torch.where(floored, torch.zeros_like(mean_gx), mean_gx)
    return (g - mean_g - xhat * through_std) / scale


def ib_loss(source_feats, target_feats, lambda_offdiag: float):
    """Cross-correlation alignment of paired source/target features.

    Columns are standardized over the N pairs (population std, floored at 1e-8),
    C = S^T T / N, loss = sum_i (1 - C_ii)^2 + lambda * sum_{i != j} C_ij^2.
    Returns (LossValue, CorrelationMatrix, grad_source, grad_target).
    """
    s = _f64(source_feats)
    t = _f64(target_feats)
    if s.shape != t.shape or s.ndim != 2:
        raise ValueError(f"ib_loss: paired feature shapes differ: {tuple(s.shape)} vs {tuple(t.shape)}")
    N, d = s.shape
    if N < 2:
        raise ValueError("ib_loss: at least 2 pairs are required")
    s_hat, s_scale, s_floor = _standardize(s)
    t_hat, t_scale, t_floor = _standardize(t)
    C = s_hat.T @ t_hat / N
    diag = torch.diagonal(C)
    off = C - torch.diag(diag)
    on_term = float(((1.0 - diag) ** 2).sum())
    off_term = float((off**2).sum())
    value = on_term + lambda_offdiag * off_term

    gC = 2.0 * lambda_offdiag * off - torch.diag(2.0 * (1.0 - diag))
    g_s_hat = t_hat @ gC.T / N
    g_t_hat = s_hat @ gC / N
    grad_s = _standardize_backward(g_s_hat, s_hat, s_scale, s_floor)
    grad_t = _standardize_backward(g_t_hat, t_hat, t_scale, t_floor)
    n_floored = int(s_floor.sum() + t_floor.sum())
    loss = LossValue(value, {"ib": value, "on_diag": on_term, "off_diag": off_term, "n_floored": n_floored})
    return loss, CorrelationMatrix(C, N, n_floored), grad_s, grad_t


# -- totals -----------------------------------------------------------------


def phase1_total(ce: LossValue, cl: LossValue, lambda1: float) -> LossValue:
    total = ce.value + lambda1 * cl.value
    return LossValue(total, {"ce": ce.value, "cl": cl.value, "weighted_cl": lambda1 * cl.value, "total": total})


def phase2_total(ce: LossValue, ib: LossValue, alpha: float) -> LossValue:
    total = ce.value + alpha * ib.value
    return LossValue(total, {"ce": ce.value, "ib": ib.value, "weighted_ib": alpha * ib.value, "total": total})


# -- autograd wrappers ------------------------------------------------------


class _CrossEntropy(torch.autograd.Function):
    @staticmethod
    def forward(ctx, logits, labels):
        loss, grad = cross_entropy(logits, labels)
        ctx.save_for_backward(grad.to(logits.dtype))
        return logits.new_tensor(loss.value)

    @staticmethod
    def backward(ctx, grad_out):
        (grad,) = ctx.saved_tensors
        return grad_out * grad, None


class _SupCon(torch.autograd.Function):
    @staticmethod
    def forward(ctx, projections, labels, tau):
        loss, grad = supcon_loss(projections, labels, tau)
        ctx.save_for_backward(grad.to(projections.dtype))
        return projections.new_tensor(loss.value)

    @staticmethod
    def backward(ctx, grad_out):
        (grad,) = ctx.saved_tensors
        return grad_out * grad, None, None


class _IB(torch.autograd.Function):
    @staticmethod
    def forward(ctx, source, target, lambda_offdiag):
        loss, _, gs, gt = ib_loss(source, target, lambda_offdiag)
        ctx.save_for_backward(gs.to(source.dtype), gt.to(target.dtype))
        return source.new_tensor(loss.value)

    @staticmethod
    def backward(ctx, grad_out):
        gs, gt = ctx.saved_tensors
        return grad_out * gs, grad_out * gt, None


def ce_loss(logits: torch.Tensor, labels) -> torch.Tensor:
    return _CrossEntropy.apply(logits, _labels(labels))


def contrastive_loss(projections: torch.Tensor, labels, tau: float) -> torch.Tensor:
    return _SupCon.apply(projections, _labels(labels), float(tau))


def information_bottleneck_loss(source: torch.Tensor, target: torch.Tensor, lambda_offdiag: float) -> torch.Tensor:
    return _IB.apply(source, target, float(lambda_offdiag))
