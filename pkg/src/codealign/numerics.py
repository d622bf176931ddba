"""Dense matrix kernel: Jacobi SVD, orthogonal Procrustes, cosine similarities.

Matrices are plain 2-D float64 numpy arrays.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100


@dataclass(frozen=True)
class SvdResult:
    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    # Tournament schedule: n-1 rounds of disjoint column pairs covering all pairs.
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p >= 0 and q >= 0]
        if pairs:
            p, q = zip(*pairs)
            rounds.append((np.array(p), np.array(q)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _complete_basis(u: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Replace columns of ``u`` not flagged in ``keep`` by an orthonormal completion."""
    m = u.shape[0]
    basis = [u[:, j] for j in range(u.shape[1]) if keep[j]]
    out = u.copy()
    for j in range(u.shape[1]):
        if keep[j]:
            continue
        best, best_norm = None, -1.0
        for e in range(m):
            x = np.zeros(m)
            x[e] = 1.0
            for _ in range(2):
                for b in basis:
                    x -= (b @ x) * b
            nrm = np.linalg.norm(x)
            if nrm > best_norm + 1e-12:
                best, best_norm = x, nrm
        col = best / best_norm
        basis.append(col)
        out[:, j] = col
    return out


def svd(a) -> SvdResult:
    """Thin SVD by one-sided (Hestenes) Jacobi rotations.

    Returns U (m x r), sigma (r, descending) and V (n x r) with r = min(m, n).
    """
    a = as_matrix(a)
    m, n = a.shape
    if min(m, n) < 1:
        raise ValueError("svd needs at least one row and one column")
    if m < n:
        r = svd(a.T)
        return SvdResult(U=r.V, sigma=r.sigma, V=r.U)

    u = a.copy()
    v = np.eye(n)
    scale = float(np.sum(u * u))
    rounds = _round_robin(n) if n > 1 else []
    for _ in range(JACOBI_MAX_SWEEPS):
        worst = 0.0
        for p, q in rounds:
            up, uq = u[:, p], u[:, q]
            alpha = np.sum(up * up, axis=0)
            beta = np.sum(uq * uq, axis=0)
            gamma = np.sum(up * uq, axis=0)
            denom = np.sqrt(alpha * beta)
            live = (denom > 1e-300 + 1e-30 * scale) & (np.abs(gamma) > 0)
            if not np.any(live):
                continue
            rel = np.zeros_like(gamma)
            rel[live] = np.abs(gamma[live]) / denom[live]
            worst = max(worst, float(rel.max()))
            rot = live & (rel > JACOBI_TOL)
            if not np.any(rot):
                continue
            zeta = np.ones_like(gamma)
            zeta[rot] = (beta[rot] - alpha[rot]) / (2.0 * gamma[rot])
            t = np.where(rot, np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta)), 0.0)
            t[rot & (zeta == 0)] = 1.0
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            vp, vq = v[:, p], v[:, q]
            u[:, p] = c * up - s * uq
            u[:, q] = s * up + c * uq
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        if worst <= JACOBI_TOL:
            break

    sigma = np.sqrt(np.sum(u * u, axis=0))
    order = np.argsort(-sigma, kind="stable")
    sigma, u, v = sigma[order], u[:, order], v[:, order]
    cutoff = max(m, n) * np.finfo(float).eps * (sigma[0] if sigma[0] > 0 else 1.0)
    keep = sigma > cutoff
    U = np.zeros_like(u)
    U[:, keep] = u[:, keep] / sigma[keep]
    if not np.all(keep):
        U = _complete_basis(U, keep)
    return SvdResult(U=U, sigma=sigma, V=v)


def procrustes_from_pairs(x, y) -> np.ndarray:
    """Orthogonal W maximizing sum_i <x_i W, y_i> for matched rows of x and y."""
    x, y = as_matrix(x, "x"), as_matrix(y, "y")
    if x.shape != y.shape:
        raise ValueError(f"anchor shapes differ: {x.shape} vs {y.shape}")
    r = svd(x.T @ y)
    return r.U @ r.V.T


def procrustes_solve(g_t, d, g_s) -> np.ndarray:
    """Closed-form W = U V^T from the SVD of G_T^T D G_S.

    Solves the maximization form: W maximizes sum_ij D[i,j] (G_T W G_S^T)[i,j]
    over orthogonal matrices.
    """
    g_t, g_s, d = as_matrix(g_t, "G_T"), as_matrix(g_s, "G_S"), as_matrix(d, "D")
    if g_t.shape[1] != g_s.shape[1]:
        raise ValueError(f"embedding dimensions differ: {g_t.shape[1]} vs {g_s.shape[1]}")
    if d.shape != (g_t.shape[0], g_s.shape[0]):
        raise ValueError(f"D has shape {d.shape}, expected {(g_t.shape[0], g_s.shape[0])}")
    if not np.all((d == 0) | (d == 1)) or np.any(d.sum(axis=1) > 1):
        raise ValueError("D must be binary with at most one 1 per row")
    r = svd(g_t.T @ d @ g_s)
    return r.U @ r.V.T


def row_normalize(a) -> np.ndarray:
    a = as_matrix(a)
    norms = np.linalg.norm(a, axis=1)
    if np.any(norms == 0):
        bad = int(np.flatnonzero(norms == 0)[0])
        raise ValueError(f"zero-norm row {bad}: cosine similarity undefined")
    return a / norms[:, None]


def cosine_similarity_matrix(a, b) -> np.ndarray:
    a, b = as_matrix(a, "A"), as_matrix(b, "B")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"column counts differ: {a.shape[1]} vs {b.shape[1]}")
    return np.clip(row_normalize(a) @ row_normalize(b).T, -1.0, 1.0)


def save_matrix(a, path) -> None:
    a = as_matrix(a)
    lines = [f"{a.shape[0]} {a.shape[1]}"]
    lines += [" ".join(f"{x:.17g}" for x in row) for row in a]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_matrix(path) -> np.ndarray:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text:
        raise ValueError(f"{path}: empty matrix file")
    try:
        rows, cols = (int(x) for x in text[0].split())
    except ValueError:
        raise ValueError(f"{path}:1: expected 'rows cols' header") from None
    body = [ln for ln in text[1:] if ln.strip()]
    if len(body) != rows:
        raise ValueError(f"{path}: expected {rows} rows, found {len(body)}")
    out = np.empty((rows, cols))
    for i, ln in enumerate(body):
        vals = ln.split()
        if len(vals) != cols:
            raise ValueError(f"{path}:{i + 2}: expected {cols} values, found {len(vals)}")
        out[i] = [float(v) for v in vals]
    return as_matrix(out)
