"""
Uncertainty prior families F(theta): (joint j, future frame t) -> u_t^j.

    Id      u = theta[j, t]
    Poly_d  u = sum_k theta[j, k] * t**k
    Sig3    u = theta2 / (1 + exp(-theta0 * (t - theta1)))
    Sig5    u = theta0 + theta1 / (1 + a*b + (1 - a)*c)
            a = sigmoid(2*theta2*theta4 / |theta2 + theta4| * (theta3 - t))
            b = exp(theta2 * (theta3 - t)),  c = exp(theta4 * (theta3 - t))

t is the 1-based future frame index. Everything is written with torch ops so
the grid is differentiable with respect to theta.
"""
from dataclasses import dataclass
from enum import Enum

import torch
from torch import nn

from errors import PriorError, PriorSingularityError


class PriorFamily(str, Enum):
    ID   = "id"
    POLY = "poly"
    SIG3 = "sig3"
    SIG5 = "sig5"


class PriorScope(str, Enum):
    TIME_JOINT = "time_joint"   # one theta row per joint, shape (J, P)
    TIME       = "time"         # one shared row, shape (P,)


_SIG3_INIT = (0.2, None, 1.0)          # None -> T/2
_SIG5_INIT = (0.0, 1.0, 0.2, None, 0.2)


def parameter_width(family: PriorFamily, T: int, degree: int = 0) -> int:
    """P: parameters per joint (or per shared row)."""
    family = PriorFamily(family)
    if family is PriorFamily.ID:
        return T
    if family is PriorFamily.POLY:
        return degree + 1
    if family is PriorFamily.SIG3:
        return 3
    return 5


def num_parameters(family: PriorFamily, scope: PriorScope, T: int, J: int, degree: int = 0) -> int:
    width = parameter_width(family, T, degree)
    return width * J if PriorScope(scope) is PriorScope.TIME_JOINT else width


@dataclass(frozen=True)
class PriorParams:
    family: PriorFamily
    scope: PriorScope
    theta: torch.Tensor
    T: int
    J: int
    degree: int = 0

    def __post_init__(self):
        object.__setattr__(self, "family", PriorFamily(self.family))
        object.__setattr__(self, "scope", PriorScope(self.scope))
        if self.family is PriorFamily.POLY and self.degree < 0:
            raise PriorError(f"polynomial degree must be >= 0, got {self.degree}")
        width = parameter_width(self.family, self.T, self.degree)
        expected = (self.J, width) if self.scope is PriorScope.TIME_JOINT else (width,)
        if tuple(self.theta.shape) != expected:
            raise PriorError(
                f"{self.family.value}/{self.scope.value}: theta shape {tuple(self.theta.shape)}, expected {expected}"
            )
        if not torch.all(torch.isfinite(self.theta)):
            raise PriorError("theta contains non-finite values")

    @property
    def label(self) -> str:
        name = f"poly{self.degree}" if self.family is PriorFamily.POLY else self.family.value
        return f"{name}_{self.scope.value}"

    def to_manifest(self) -> dict:
        return {
            "family": self.family.value,
            "scope":  self.scope.value,
            "d":      self.degree,
            "T":      self.T,
            "J":      self.J,
            "theta":  self.theta.detach().cpu().double().reshape(-1).tolist(),
        }

    @classmethod
    def from_manifest(cls, block: dict) -> "PriorParams":
        family = PriorFamily(block["family"])
        scope  = PriorScope(block["scope"])
        T, J, d = int(block["T"]), int(block["J"]), int(block.get("d", 0))
        width = parameter_width(family, T, d)
        shape = (J, width) if scope is PriorScope.TIME_JOINT else (width,)
        theta = torch.tensor(block["theta"], dtype=torch.float64).reshape(shape)
        return cls(family=family, scope=scope, theta=theta, T=T, J=J, degree=d)


# ---------------------------------------------------------------------------
# Family formulas, vectorised over t (rows of theta broadcast against t)
# ---------------------------------------------------------------------------

def _sig3(theta: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    return theta[..., 2:3] * torch.sigmoid(theta[..., 0:1] * (t - theta[..., 1:2]))


def _sig5(theta: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    th0, th1, th2, th3, th4 = (theta[..., k:k + 1] for k in range(5))
    rate_sum = th2 + th4
    if torch.any(rate_sum == 0):
        raise PriorSingularityError("Sig5 requires theta2 + theta4 != 0 (|theta2 + theta4| divides the rate)")
    lead = th3 - t
    a = torch.sigmoid(2.0 * th2 * th4 / torch.abs(rate_sum) * lead)
    b = torch.exp(th2 * lead)
    c = torch.exp(th4 * lead)
    return th0 + th1 / (1.0 + a * b + (1.0 - a) * c)


def _poly(theta: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    # Horner on raw t
    out = torch.zeros_like(theta[..., :1] * t)
    for k in range(theta.shape[-1] - 1, -1, -1):
        out = out * t + theta[..., k:k + 1]
    return out


def prior_curves(family: PriorFamily, theta: torch.Tensor, T: int) -> torch.Tensor:
    """Evaluates each theta row over t = 1..T. theta (..., P) -> (..., T)."""
    family = PriorFamily(family)
    t = torch.arange(1, T + 1, dtype=theta.dtype, device=theta.device)
    if family is PriorFamily.ID:
        return theta
    if family is PriorFamily.POLY:
        return _poly(theta, t)
    if family is PriorFamily.SIG3:
        return _sig3(theta, t)
    return _sig5(theta, t)


def prior_grid(p: PriorParams) -> torch.Tensor:
    """(T, J) grid of u values. Differentiable in p.theta."""
    curves = prior_curves(p.family, p.theta, p.T)
    if p.scope is PriorScope.TIME:
        return curves.unsqueeze(1).expand(p.T, p.J)
    return curves.transpose(0, 1)


def eval_prior_grid(p: PriorParams) -> torch.Tensor:
    """grid[t-1, j] == eval_prior(p, j, t)."""
    return prior_grid(p)


def eval_prior(p: PriorParams, j: int, t: int) -> torch.Tensor:
    """Single u_t^j as a 0-d tensor (keeps the autograd graph)."""
    if not 1 <= t <= p.T:
        raise PriorError(f"t must be in [1, {p.T}], got {t}")
    if not 0 <= j < p.J:
        raise PriorError(f"j must be in [0, {p.J}), got {j}")
    row = p.theta if p.scope is PriorScope.TIME else p.theta[j]
    if p.family is PriorFamily.ID:
        return row[t - 1]
    t_vec = torch.tensor([float(t)], dtype=row.dtype, device=row.device)
    return _eval_row(p.family, row, t_vec)


def _eval_row(family: PriorFamily, row: torch.Tensor, t_vec: torch.Tensor) -> torch.Tensor:
    if family is PriorFamily.POLY:
        return _poly(row, t_vec)[0]
    if family is PriorFamily.SIG3:
        return _sig3(row, t_vec)[0]
    return _sig5(row, t_vec)[0]


# ---------------------------------------------------------------------------
# Initialisation
# ---------------------------------------------------------------------------

def init_prior(
    family: PriorFamily,
    scope: PriorScope,
    T: int,
    J: int,
    seed: int = 0,
    degree: int = 0,
    jitter: float = 0.0,
    dtype: torch.dtype = torch.float32,
) -> PriorParams:
    """
    Id/Poly start at zero; Sig3 at (0.2, T/2, 1.0); Sig5 at (0, 1, 0.2, T/2, 0.2).
    `jitter` > 0 adds seeded Gaussian noise (off by default).
    """
    family = PriorFamily(family)
    scope  = PriorScope(scope)
    width  = parameter_width(family, T, degree)

    if family is PriorFamily.SIG3:
        row = torch.tensor([T / 2.0 if v is None else v for v in _SIG3_INIT], dtype=dtype)
    elif family is PriorFamily.SIG5:
        row = torch.tensor([T / 2.0 if v is None else v for v in _SIG5_INIT], dtype=dtype)
    else:
        row = torch.zeros(width, dtype=dtype)

    theta = row.clone() if scope is PriorScope.TIME else row.unsqueeze(0).repeat(J, 1)
    if jitter > 0:
        gen = torch.Generator().manual_seed(seed)
        theta = theta + jitter * torch.randn(theta.shape, generator=gen, dtype=dtype)
    return PriorParams(family=family, scope=scope, theta=theta, T=T, J=J, degree=degree)


# ---------------------------------------------------------------------------
# Trainable wrapper
# ---------------------------------------------------------------------------

class UncertaintyPrior(nn.Module):
    """Holds theta as an nn.Parameter; forward() returns the (T, J) u grid."""

    def __init__(self, params: PriorParams):
        super().__init__()
        self.family = params.family
        self.scope  = params.scope
        self.T, self.J, self.degree = params.T, params.J, params.degree
        self.theta = nn.Parameter(params.theta.detach().clone())

    def params(self) -> PriorParams:
        return PriorParams(self.family, self.scope, self.theta.detach().clone(), self.T, self.J, self.degree)

    def forward(self) -> torch.Tensor:
        return prior_grid(PriorParams(self.family, self.scope, self.theta, self.T, self.J, self.degree))


def parse_prior_spec(spec: dict | None, T: int, J: int, seed: int = 0) -> PriorParams | None:
    """
    Builds initial PriorParams from a config block such as
    {"family": "sig5", "scope": "time_joint"} or {"family": "poly", "degree": 9}.
    None means training without a prior.
    """
    if spec is None:
        return None
    try:
        family = PriorFamily(str(spec["family"]).lower())
        scope  = PriorScope(str(spec.get("scope", PriorScope.TIME_JOINT.value)).lower())
    except (KeyError, ValueError) as exc:
        raise PriorError(f"invalid prior spec {spec!r}: {exc}") from exc
    return init_prior(
        family, scope, T, J,
        seed=seed,
        degree=int(spec.get("degree", 0)),
        jitter=float(spec.get("jitter", 0.0)),
    )
