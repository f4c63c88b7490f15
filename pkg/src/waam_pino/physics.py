"""Heat-conduction residual on predicted temperature sequences, and the composite loss."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch
from torch import Tensor

from .fields import GridGeometry, NormStats
from .synthgen import MaterialProps


class EmptyResidualWarning(UserWarning):
    pass


@dataclass
class ResidualField:
    values: Tensor      # [..., m-1, H, W], W/m^3
    valid_mask: Tensor  # bool, same shape

    @property
    def n_valid(self) -> int:
        return int(self.valid_mask.sum())

    def valid_values(self) -> Tensor:
        return self.values[self.valid_mask]


def five_point_laplacian(T: Tensor, dx: float) -> Tensor:
    """Plain 5-point Laplacian; border cells use zero-flux mirrors (they are never valid)."""
    lap = torch.zeros_like(T)
    lap[..., 1:, :] += T[..., :-1, :] - T[..., 1:, :]
    lap[..., :-1, :] += T[..., 1:, :] - T[..., :-1, :]
    lap[..., :, 1:] += T[..., :, :-1] - T[..., :, 1:]
    lap[..., :, :-1] += T[..., :, 1:] - T[..., :, :-1]
    return lap / dx**2


def stencil_valid(active: Tensor) -> Tensor:
    """Cells whose own value and four neighbours are all active (domain edges excluded)."""
    a = active.bool()
    ok = a.clone()
    ok[..., 0, :] = False
    ok[..., -1, :] = False
    ok[..., :, 0] = False
    ok[..., :, -1] = False
    ok[..., 1:-1, 1:-1] &= (a[..., :-2, 1:-1] & a[..., 2:, 1:-1]
                            & a[..., 1:-1, :-2] & a[..., 1:-1, 2:])
    return ok


def heat_residual(t_hat_phys, q_dot, mat: MaterialProps, geom: GridGeometry, active,
                  sign_q: float = -1.0, laplacian_at: str = "start") -> ResidualField:
    """R = rho cp dT/dt - k lap(T) + sign_q q on [..., m, H, W] temperature stacks (K).

    dT/dt is a forward difference over one frame. ``laplacian_at`` picks
    the frame the stencil is evaluated on: "start" (explicit, consistent
    with the generator) or "end" (implicit).
    """
    T = torch.as_tensor(t_hat_phys)
    q = torch.as_tensor(q_dot, dtype=T.dtype)
    act = torch.as_tensor(active).bool()
    if T.shape[-3] < 2:
        raise ValueError("need at least two future steps for a temporal difference")
    if q.shape != T.shape or act.shape[-3:] != T.shape[-3:]:
        raise ValueError(f"shape mismatch: T {tuple(T.shape)}, q {tuple(q.shape)}, "
                         f"active {tuple(act.shape)}")
    dTdt = (T[..., 1:, :, :] - T[..., :-1, :, :]) / geom.dt
    if laplacian_at == "start":
        lap = five_point_laplacian(T[..., :-1, :, :], geom.dx)
    elif laplacian_at == "end":
        lap = five_point_laplacian(T[..., 1:, :, :], geom.dx)
    else:
        raise ValueError(f"laplacian_at must be 'start' or 'end', got {laplacian_at!r}")
    R = mat.heat_capacity * dTdt - mat.k_cond * lap + sign_q * q[..., :-1, :, :]
    valid = stencil_valid(act[..., :-1, :, :]) & stencil_valid(act[..., 1:, :, :])
    valid = valid.expand_as(R)
    return ResidualField(torch.where(valid, R, torch.zeros_like(R)), valid)


def residual_scale(mat: MaterialProps, stats: NormStats, geom: GridGeometry) -> float:
    """rho cp (T_max - T_min) / dt: the residual of a full-range jump in one frame."""
    return mat.heat_capacity * max(stats.span("T"), 1e-12) / geom.dt


def pde_loss(res: ResidualField, scale: float) -> Tensor:
    if not scale > 0:
        raise ValueError("scale must be positive")
    n = res.n_valid
    if n == 0:
        warnings.warn("no valid stencil cells; PDE loss is 0", EmptyResidualWarning)
        return res.values.sum() * 0.0
    return ((res.values / scale) ** 2 * res.valid_mask).sum() / n


def mse(a: Tensor, b: Tensor) -> Tensor:
    return torch.mean((a - b) ** 2)


def total_loss(l_data, l_trunk, l_pde, alpha: float = 1.0, beta: float = 1.0,
               lam: float = 0.1):
    if min(alpha, beta, lam) < 0:
        raise ValueError("loss weights must be non-negative")
    return alpha * l_data + beta * l_trunk + lam * l_pde
