"""Relative pose uncertainty between two graph poses and the fusion gate."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .se3 import PoseSE3, adjoint, between, inverse

log = logging.getLogger(__name__)

PSD_TOL = 1e-10
DEFAULT_LAMBDA_UNCERTAINTY = 0.05  # m^2


def relative_pose(t_i: PoseSE3, t_j: PoseSE3) -> PoseSE3:
    return between(t_i, t_j)


def _check_cov(name: str, m) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.shape != (6, 6):
        raise ValueError(f"{name} must be 6x6, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} has non-finite entries")
    return m


def relative_covariance(t_i: PoseSE3, cov_i, t_j: PoseSE3, cov_j, cross_ij=None) -> np.ndarray:
    """First-order covariance of ``inverse(t_i) @ t_j`` under right perturbations.

    ``cross_ij`` is ``E[xi_i xi_j^T]``; ``None`` means uncorrelated.  The
    result is symmetrised and negative eigenvalues are clipped to zero.
    """
    cov_i = _check_cov("cov_i", cov_i)
    cov_j = _check_cov("cov_j", cov_j)
    cross_ij = np.zeros((6, 6)) if cross_ij is None else _check_cov("cross_ij", cross_ij)

    A = adjoint(inverse(t_j)) @ adjoint(t_i)
    A_cross = A @ cross_ij
    out = A @ cov_i @ A.T + cov_j - A_cross - A_cross.T
    out = 0.5 * (out + out.T)

    w, V = np.linalg.eigh(out)
    if w[0] < -PSD_TOL:
        log.debug("clipping negative eigenvalues %s", w[w < 0])
        w = np.where(w < -PSD_TOL, 0.0, w)
        out = (V * w) @ V.T
        out = 0.5 * (out + out.T)
    return out


@dataclass(frozen=True)
class GateVerdict:
    accepted: bool
    translation_eigenvalues: tuple  # m^2, descending
    threshold: float
    rotation_eigenvalues: tuple = ()

    @property
    def max_translation_eigenvalue(self) -> float:
        return self.translation_eigenvalues[0]


def gate_fusion(cov_rel, lambda_uncertainty: float = DEFAULT_LAMBDA_UNCERTAINTY) -> GateVerdict:
    """Accept iff every eigenvalue of the translation block is <= the threshold.

    Rotation eigenvalues are reported but never gate.
    """
    if lambda_uncertainty <= 0:
        raise ValueError("lambda_uncertainty must be positive")
    cov_rel = _check_cov("cov_rel", cov_rel)
    trans = cov_rel[3:, 3:]
    rot = cov_rel[:3, :3]
    ev_t = np.linalg.eigvalsh(0.5 * (trans + trans.T))[::-1]
    ev_r = np.linalg.eigvalsh(0.5 * (rot + rot.T))[::-1]
    accepted = bool(ev_t[0] <= lambda_uncertainty)
    return GateVerdict(
        accepted=accepted,
        translation_eigenvalues=tuple(float(v) for v in ev_t),
        threshold=float(lambda_uncertainty),
        rotation_eigenvalues=tuple(float(v) for v in ev_r),
    )
