"""Approximate bidirectional spectral normalization (ABSN) of weight tensors.

A conv weight (C_out, C_in, kH, kW) admits two matrix views: the forward
reshape (C_out, C_in*kH*kW) governing activation flow and the backward
reshape (C_in, C_out*kH*kW) governing gradient flow. Each view's spectral
norm is estimated with a cheap differentiable lower bound, the two estimates
are combined by their root mean square, and the weight is divided by the
result. Everything here is a pure function of its inputs, so normalization
can be recomputed on every forward pass and gradients flow through it.
"""

import warnings
import zlib

import torch

EPS = 1e-12


class DegenerateRowSumWarning(RuntimeWarning):
    """Raised-as-warning when the row-sum bound degenerates and the
    power-iteration fallback is used instead."""


def _check_rank4(w: torch.Tensor) -> None:
    if w.ndim != 4:
        raise ValueError(f"expected a rank-4 weight tensor, got shape {tuple(w.shape)}")
    if min(w.shape) < 1:
        raise ValueError(f"weight tensor has a zero dimension: {tuple(w.shape)}")


def reshape_forward(w: torch.Tensor) -> torch.Tensor:
    """Flatten input-channel and spatial axes: (C_out, C_in, kH, kW) -> (C_out, C_in*kH*kW)."""
    _check_rank4(w)
    return w.reshape(w.shape[0], -1)


def reshape_backward(w: torch.Tensor) -> torch.Tensor:
    """Flatten output-channel and spatial axes: (C_out, C_in, kH, kW) -> (C_in, C_out*kH*kW)."""
    _check_rank4(w)
    return w.transpose(0, 1).reshape(w.shape[1], -1)


def _fallback_seed_vector(matrix: torch.Tensor, tag: str) -> torch.Tensor:
    # Deterministic pseudo-random unit vector keyed on the layer tag and shape.
    key = f"{tag}:{matrix.shape[0]}x{matrix.shape[1]}"
    gen = torch.Generator().manual_seed(zlib.crc32(key.encode()))
    u = torch.randn(matrix.shape[0], generator=gen, dtype=matrix.dtype)
    return (u / u.norm()).to(matrix.device)


def spectral_lower_bound(matrix: torch.Tensor, tag: str = "") -> torch.Tensor:
    """Differentiable lower bound on the spectral norm of a matrix.

    With r the row-sum vector of W, returns ||W W^T r|| / ||W^T r||, which
    never exceeds the true spectral norm and is exact on rank-1 matrices.
    If r (or the denominator) degenerates below ``EPS``, falls back to a
    single power-method step from a fixed pseudo-random unit vector keyed
    on ``tag`` and emits a :class:`DegenerateRowSumWarning`.
    """
    if matrix.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {tuple(matrix.shape)}")
    r = matrix.sum(dim=1)
    wt_r = matrix.t().mv(r)
    denom = wt_r.norm()
    if r.norm() < EPS or denom < EPS:
        warnings.warn(
            f"row-sum bound degenerate for shape {tuple(matrix.shape)} (tag={tag!r}); "
            "using one power-method iteration",
            DegenerateRowSumWarning,
            stacklevel=2,
        )
        u = _fallback_seed_vector(matrix, tag)
        wt_u = matrix.t().mv(u)
        return matrix.mv(wt_u).norm() / wt_u.norm().clamp_min(EPS)
    return matrix.mv(wt_r).norm() / denom


def sigma_rms(w: torch.Tensor, tag: str = "") -> torch.Tensor:
    """RMS of the forward- and backward-reshape spectral-norm bounds."""
    _check_rank4(w)
    if not torch.any(w != 0):
        raise ValueError("cannot normalize an all-zero weight tensor")
    s_fw = spectral_lower_bound(reshape_forward(w), tag=tag + "/fw")
    s_bw = spectral_lower_bound(reshape_backward(w), tag=tag + "/bw")
    return torch.sqrt((s_fw * s_fw + s_bw * s_bw) / 2)


def absn_apply(w: torch.Tensor, tag: str = "") -> torch.Tensor:
    """Divide a weight tensor by its bidirectional spectral-norm RMS.

    Recomputed on every call; the result stays differentiable in ``w``.
    """
    return w / sigma_rms(w, tag=tag)


def spectral_norm_oracle(matrix: torch.Tensor) -> float:
    """Exact largest singular value via full SVD. Tests and diagnostics only."""
    return torch.linalg.svdvals(matrix.detach().double()).max().item()
