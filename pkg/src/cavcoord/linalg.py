"""Small shared matrix helpers."""

from __future__ import annotations

import numpy as np


def sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


def psd_sqrt(M: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Symmetric PSD square root; clips eigenvalues slightly below zero."""
    S = sym(np.asarray(M, dtype=float))
    w, V = np.linalg.eigh(S)
    if w.size and w[0] < -1e-8 * max(1.0, abs(w[-1])):
        raise ValueError("matrix is not positive semidefinite")
    w = np.clip(w, 0.0, None)
    return (V * np.sqrt(w)) @ V.T


def is_psd(M: np.ndarray, tol: float = 1e-10) -> bool:
    S = sym(np.asarray(M, dtype=float))
    return bool(np.min(np.linalg.eigvalsh(S)) >= -tol)
