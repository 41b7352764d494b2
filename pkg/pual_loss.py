"""
Aleatoric uncertainty-aware loss (pUAL) and the plain L2 baseline.

    total = sum_{t,j} [ exp(-u_t^j) * ||y_t^j - y_hat_t^j||_2 + u_t^j ]

Summed over (t, j); a leading batch dimension is averaged.
"""
from dataclasses import dataclass

import numpy as np
import torch

from errors import NonFiniteInputError, ShapeMismatchError

_FD_STEP          = 1e-5
_REL_FLOOR        = 1e-3
_BISECT_LO        = -50.0
_BISECT_HI        = 50.0
_BISECT_ITERS     = 200


@dataclass(frozen=True)
class LossBreakdown:
    total: torch.Tensor
    weighted_error_term: torch.Tensor
    regularizer_term: torch.Tensor
    per_cell_error: torch.Tensor        # (T, J), or (B, T, J) for batches

    def as_dict(self) -> dict:
        return {
            "total":               float(self.total.detach()),
            "weighted_error_term": float(self.weighted_error_term.detach()),
            "regularizer_term":    float(self.regularizer_term.detach()),
        }


def _check_pair(y: torch.Tensor, y_hat: torch.Tensor) -> None:
    if y.shape != y_hat.shape:
        raise ShapeMismatchError(f"y {tuple(y.shape)} vs y_hat {tuple(y_hat.shape)}")
    if y.dim() not in (3, 4) or y.shape[-1] != 3:
        raise ShapeMismatchError(f"expected (T, J, 3) or (B, T, J, 3), got {tuple(y.shape)}")
    if torch.isnan(y).any() or torch.isnan(y_hat).any():
        raise NonFiniteInputError("NaN in y or y_hat")


def joint_errors(y: torch.Tensor, y_hat: torch.Tensor) -> torch.Tensor:
    """
    Per-joint Euclidean norm over the xyz axis. The gradient at a zero
    difference is the zero vector.
    """
    sq = ((y - y_hat) ** 2).sum(dim=-1)
    tiny = torch.finfo(sq.dtype).tiny
    return torch.where(sq > 0, torch.sqrt(sq.clamp_min(tiny)), torch.zeros_like(sq))


def pual_loss(y, y_hat, u) -> LossBreakdown:
    y, y_hat, u = (torch.as_tensor(v) for v in (y, y_hat, u))
    _check_pair(y, y_hat)
    if u.shape != y.shape[-3:-1]:
        raise ShapeMismatchError(f"u {tuple(u.shape)} must be (T, J) = {tuple(y.shape[-3:-1])}")
    if not torch.isfinite(u).all():
        raise NonFiniteInputError("u must be finite")

    err = joint_errors(y, y_hat)
    weighted = (torch.exp(-u) * err).sum(dim=(-2, -1))
    regular  = u.sum().expand_as(weighted)
    if err.dim() == 3:
        weighted, regular = weighted.mean(), regular.mean()
    return LossBreakdown(
        total=weighted + regular,
        weighted_error_term=weighted,
        regularizer_term=regular,
        per_cell_error=err,
    )


def plain_l2_loss(y, y_hat) -> torch.Tensor:
    """Sum of per-joint Euclidean norms (batch-averaged)."""
    y, y_hat = torch.as_tensor(y), torch.as_tensor(y_hat)
    _check_pair(y, y_hat)
    total = joint_errors(y, y_hat).sum(dim=(-2, -1))
    return total.mean() if total.dim() == 1 else total


# ---------------------------------------------------------------------------
# Single-cell analytics
# ---------------------------------------------------------------------------

def optimal_uncertainty(error):
    """argmin_u exp(-u)*E + u = ln E, with minimum 1 + ln E (E > 0)."""
    error = np.asarray(error, dtype=np.float64)
    return np.log(error), 1.0 + np.log(error)


def minimize_cell_objective(error, lo: float = _BISECT_LO, hi: float = _BISECT_HI,
                            iters: int = _BISECT_ITERS):
    """
    Numerically minimises exp(-u)*E + u by bisection on the (increasing)
    derivative 1 - E*exp(-u). Vectorised over E. Returns (u_star, minimum).
    """
    error = np.asarray(error, dtype=np.float64)
    lo_arr = np.full_like(error, lo)
    hi_arr = np.full_like(error, hi)
    for _ in range(iters):
        mid = 0.5 * (lo_arr + hi_arr)
        rising = 1.0 - error * np.exp(-mid) > 0
        hi_arr = np.where(rising, mid, hi_arr)
        lo_arr = np.where(rising, lo_arr, mid)
    u_star = 0.5 * (lo_arr + hi_arr)
    return u_star, error * np.exp(-u_star) + u_star


# ---------------------------------------------------------------------------
# Gradient oracle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GradientCheckReport:
    max_rel_dev_y_hat: float
    max_rel_dev_u: float
    num_entries: int

    @property
    def max_rel_dev(self) -> float:
        return max(self.max_rel_dev_y_hat, self.max_rel_dev_u)


def central_difference(fn, x: torch.Tensor, step: float = _FD_STEP) -> torch.Tensor:
    """Central finite-difference gradient of scalar fn at x (float64)."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        f_plus = float(fn(x))
        flat[i] = orig - step
        f_minus = float(fn(x))
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def relative_deviation(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = _REL_FLOOR) -> float:
    denom = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()), torch.full_like(numeric, floor))
    return float(((analytic - numeric).abs() / denom).max())


def loss_gradient_check(seed: int = 0, T: int = 2, J: int = 2, u: torch.Tensor | None = None,
                        step: float = _FD_STEP) -> GradientCheckReport:
    """Analytic vs central-difference gradients of pual_loss w.r.t. y_hat and u."""
    gen = torch.Generator().manual_seed(seed)
    y     = torch.randn(T, J, 3, generator=gen, dtype=torch.float64)
    y_hat = torch.randn(T, J, 3, generator=gen, dtype=torch.float64)
    u = torch.rand(T, J, generator=gen, dtype=torch.float64) if u is None else u.double().clone()

    y_hat_var = y_hat.clone().requires_grad_(True)
    u_var     = u.clone().requires_grad_(True)
    pual_loss(y, y_hat_var, u_var).total.backward()

    num_y_hat = central_difference(lambda v: pual_loss(y, v, u).total, y_hat, step)
    num_u     = central_difference(lambda v: pual_loss(y, y_hat, v).total, u, step)
    return GradientCheckReport(
        max_rel_dev_y_hat=relative_deviation(y_hat_var.grad, num_y_hat),
        max_rel_dev_u=relative_deviation(u_var.grad, num_u),
        num_entries=y_hat.numel() + u.numel(),
    )
