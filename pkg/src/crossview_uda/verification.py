"""Self-checks: loss kernels against loop oracles, analytic gradients against finite differences.

Both entry points return a plain dict report (JSON-serializable) with one entry per
check: instance count, worst error, tolerance, pass flag and elapsed seconds.
"""

from __future__ import annotations

import time
from typing import Callable

import numpy as np
import torch

from crossview_uda.config import TrainConfig
from crossview_uda.encoder import build_encoder
from crossview_uda.evaluation import topk_accuracy
from crossview_uda.objectives import ce_loss, cross_entropy, ib_loss, supcon_loss
from crossview_uda.reference import ref_cross_entropy, ref_ib, ref_supcon, ref_topk

ORACLE_TOL = 1e-9
FD_STEP = 1e-4
LOSS_GRAD_TOL = 1e-4
COMPOSITION_GRAD_TOL = 1e-3

# dimensions of the encoder used for the end-to-end gradient check
TINY_ENCODER = dict(K=3, T=2, H=4, W=4, C=1, d_model=4, n_blocks=1, n_heads=2,
                    patch_t=1, patch_hw=2, d_proj=4)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| over entries, divided by the largest magnitude in either gradient (floored at 1e-8)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-8)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, g = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        up = f(x)
        flat[i] = keep - step
        down = f(x)
        flat[i] = keep
        g[i] = (up - down) / (2 * step)
    return grad


def _entry(errors: list, tol: float, started: float, exact: bool = False) -> dict:
    worst = float(max(errors)) if errors else 0.0
    passed = worst == 0.0 if exact else worst < tol
    return {"instances": len(errors), "max_error": worst, "tolerance": 0.0 if exact else tol,
            "passed": bool(passed), "seconds": round(time.perf_counter() - started, 3)}


def _unit_rows(rng, n, d):
    p = rng.normal(size=(n, d))
    return p / np.linalg.norm(p, axis=1, keepdims=True)


def _supcon_labels(rng, B, K):
    """2B labels (anchor labels duplicated for their positive-view copies)."""
    y = rng.integers(0, K, size=B)
    return np.concatenate([y, y])


# -- oracle equivalence -----------------------------------------------------


def oracle_check(seed: int = 0, instances: int = 100) -> dict:
    rng = np.random.default_rng(seed)
    report = {}

    t0, errs = time.perf_counter(), []
    for _ in range(instances):
        B, K = int(rng.integers(1, 9)), int(rng.integers(2, 7))
        z = rng.normal(scale=3.0, size=(B, K))
        y = rng.integers(0, K, size=B)
        errs.append(abs(cross_entropy(torch.from_numpy(z), y)[0].value - ref_cross_entropy(z, y)))
    report["cross_entropy"] = _entry(errs, ORACLE_TOL, t0)

    t0, errs = time.perf_counter(), []
    for _ in range(instances):
        B, d, K = int(rng.integers(1, 9)), int(rng.integers(2, 9)), int(rng.integers(2, 7))
        p = _unit_rows(rng, 2 * B, d)
        y = _supcon_labels(rng, B, K)
        tau = float(rng.uniform(0.05, 1.0))
        errs.append(abs(supcon_loss(torch.from_numpy(p), y, tau)[0].value - ref_supcon(p, y, tau)))
    report["supcon_loss"] = _entry(errs, ORACLE_TOL, t0)

    t0, errs = time.perf_counter(), []
    for _ in range(instances):
        N, d = int(rng.integers(2, 9)), int(rng.integers(1, 9))
        s, t = rng.normal(size=(N, d)), rng.normal(size=(N, d))
        lam = float(rng.uniform(0.0, 1.0))
        errs.append(abs(ib_loss(torch.from_numpy(s), torch.from_numpy(t), lam)[0].value - ref_ib(s, t, lam)))
    report["ib_loss"] = _entry(errs, ORACLE_TOL, t0)

    t0, errs = time.perf_counter(), []
    for _ in range(instances):
        N, K = int(rng.integers(1, 21)), int(rng.integers(2, 7))
        # coarse integer logits so ties actually occur
        z = rng.integers(-2, 3, size=(N, K)).astype(np.float64)
        y = rng.integers(0, K, size=N)
        k = int(rng.integers(1, K + 1))
        errs.append(abs(topk_accuracy(z, y, k) - ref_topk(z, y, k)))
    report["topk_accuracy"] = _entry(errs, 0.0, t0, exact=True)

    report["passed"] = all(v["passed"] for v in report.values())
    return report


# -- finite-difference gradient checks --------------------------------------


def tiny_encoder_config() -> TrainConfig:
    return TrainConfig(**TINY_ENCODER)


def gradcheck(seed: int = 0, instances: int = 20) -> dict:
    rng = np.random.default_rng(seed)
    report = {}

    t0, errs = time.perf_counter(), []
    for _ in range(instances):
        B, K = int(rng.integers(1, 9)), int(rng.integers(2, 7))
        z = rng.normal(scale=2.0, size=(B, K))
        y = rng.integers(0, K, size=B)
        analytic = cross_entropy(torch.from_numpy(z), y)[1].numpy()
        numeric = central_difference(lambda x: cross_entropy(torch.from_numpy(x), y)[0].value, z)
        errs.append(relative_error(analytic, numeric))
    report["cross_entropy"] = _entry(errs, LOSS_GRAD_TOL, t0)

    t0, errs = time.perf_counter(), []
    for _ in range(instances):
        B, d, K = int(rng.integers(1, 9)), int(rng.integers(2, 9)), int(rng.integers(2, 7))
        p = _unit_rows(rng, 2 * B, d)
        y = _supcon_labels(rng, B, K)
        tau = float(rng.uniform(0.1, 1.0))
        analytic = supcon_loss(torch.from_numpy(p), y, tau)[1].numpy()
        numeric = central_difference(
            lambda x: supcon_loss(torch.from_numpy(x), y, tau, require_unit_norm=False)[0].value, p)
        errs.append(relative_error(analytic, numeric))
    report["supcon_loss"] = _entry(errs, LOSS_GRAD_TOL, t0)

    t0, errs = time.perf_counter(), []
    for _ in range(instances):
        N, d = int(rng.integers(3, 9)), int(rng.integers(1, 9))
        s, t = rng.normal(size=(N, d)), rng.normal(size=(N, d))
        lam = float(rng.uniform(0.0, 1.0))
        _, _, gs, gt = ib_loss(torch.from_numpy(s), torch.from_numpy(t), lam)
        ns = central_difference(lambda x: ib_loss(torch.from_numpy(x), torch.from_numpy(t), lam)[0].value, s)
        nt = central_difference(lambda x: ib_loss(torch.from_numpy(s), torch.from_numpy(x), lam)[0].value, t)
        errs.append(max(relative_error(gs.numpy(), ns), relative_error(gt.numpy(), nt)))
    report["ib_loss"] = _entry(errs, LOSS_GRAD_TOL, t0)

    t0, errs = time.perf_counter(), []
    cfg = tiny_encoder_config()
    for i in range(instances):
        model = build_encoder(cfg, seed=int(rng.integers(2**31))).double()
        with torch.no_grad():
            # nonzero biases and class token so every parameter receives a generic gradient
            for p in model.parameters():
                p.add_(torch.from_numpy(rng.normal(scale=0.1, size=tuple(p.shape))))
        x = torch.from_numpy(rng.uniform(size=(3, cfg.T, cfg.H, cfg.W, cfg.C)))
        y = rng.integers(0, cfg.K, size=3)
        params = [p for n, p in model.named_parameters() if not n.startswith("projector")]
        model.zero_grad()
        ce_loss(model.classify(model(x)), y).backward()
        analytic = np.concatenate([p.grad.numpy().reshape(-1) for p in params])
        flat0 = np.concatenate([p.detach().numpy().reshape(-1) for p in params])

        def loss_at(flat):
            with torch.no_grad():
                offset = 0
                for p in params:
                    n = p.numel()
                    p.copy_(torch.from_numpy(flat[offset:offset + n].reshape(p.shape)))
                    offset += n
                return cross_entropy(model.classify(model(x)), y)[0].value

        numeric = central_difference(loss_at, flat0)
        loss_at(flat0)
        errs.append(relative_error(analytic, numeric))
    report["encoder_classify_ce"] = _entry(errs, COMPOSITION_GRAD_TOL, t0)

    report["passed"] = all(v["passed"] for v in report.values())
    return report
