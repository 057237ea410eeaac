"""Orthogonal feature world: a global direction, client directions and noise directions.

All theory-side metrics (common feature content, SNR, heterogeneity) are
measured against a :class:`FeatureBasis`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ORTHO_TOL = 1e-10


class DimensionError(ValueError):
    """Raised when the ambient dimension cannot host the requested subspaces."""


class DegenerateError(ValueError):
    """Raised when a quantity is undefined because an input vector is (near) zero."""


def gram_schmidt(vectors: np.ndarray, against: np.ndarray | None = None, tol: float = ORTHO_TOL) -> np.ndarray:
    """Orthonormalize the rows of ``vectors`` (optionally against the rows of ``against``).

    Classical Gram-Schmidt applied twice per vector ("twice is enough"), which
    keeps the loss of orthogonality at machine precision.
    """
    basis = [] if against is None else [np.asarray(a, dtype=float) for a in against]
    n_fixed = len(basis)
    for v in np.atleast_2d(vectors):
        w = np.array(v, dtype=float)
        for _ in range(2):
            for q in basis:
                w -= (q @ w) * q
        norm = np.linalg.norm(w)
        if norm < tol:
            raise DegenerateError("vector is linearly dependent on the current basis")
        basis.append(w / norm)
    return np.array(basis[n_fixed:])


@dataclass(frozen=True)
class FeatureBasis:
    dim: int
    global_dir: np.ndarray
    client_dirs: np.ndarray  # (N, d)
    noise_dirs: np.ndarray  # (L, d)
    mixing_rho: float
    # orthonormal frame spanning the client subspace (shared w and private v_c)
    client_frame: np.ndarray = field(repr=False)
    # orthonormal directions reserved for per-class structure, orthogonal to all of the above
    free_dirs: np.ndarray = field(repr=False)

    @property
    def n_clients(self) -> int:
        return len(self.client_dirs)

    @property
    def n_noise(self) -> int:
        return len(self.noise_dirs)

    def check(self, tol: float = ORTHO_TOL) -> None:
        """Assert every orthonormality invariant; raises AssertionError on violation."""
        u = self.global_dir
        dirs = np.vstack([u[None, :], self.client_dirs, self.noise_dirs])
        assert np.allclose(np.linalg.norm(dirs, axis=1), 1.0, atol=tol, rtol=0)
        assert np.all(np.abs(self.client_dirs @ u) <= tol)
        assert np.all(np.abs(self.noise_dirs @ u) <= tol)
        assert np.all(np.abs(self.client_dirs @ self.noise_dirs.T) <= tol)
        gram = self.noise_dirs @ self.noise_dirs.T
        assert np.allclose(gram, np.eye(self.n_noise), atol=tol, rtol=0)

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "mixing_rho": self.mixing_rho,
            "global_dir": self.global_dir.tolist(),
            "client_dirs": self.client_dirs.tolist(),
            "noise_dirs": self.noise_dirs.tolist(),
        }


@dataclass(frozen=True)
class Decomposition:
    beta: float
    gamma: float
    phi: np.ndarray
    residual: np.ndarray = field(repr=False)
    residual_norm: float
    specific_strength: float


def _required_dim(n_clients: int, n_noise: int, rho: float) -> int:
    client_span = (n_clients if rho < 1.0 else 0) + (1 if rho > 0.0 else 0)
    return max(1 + n_clients + n_noise, 1 + client_span + n_noise)


def build_basis(
    d: int,
    n_clients: int,
    n_noise: int,
    mixing_rho: float,
    rng: np.random.Generator,
    n_free: int = 0,
) -> FeatureBasis:
    """Draw a random orthogonal world.

    Client directions are ``sqrt(rho) * w + sqrt(1 - rho) * v_c`` so that any two
    distinct clients have inner product exactly ``rho``. ``n_free`` extra
    orthonormal directions, orthogonal to everything else, are reserved for
    class structure.
    """
    if not 0.0 <= mixing_rho <= 1.0:
        raise ValueError(f"mixing_rho must lie in [0, 1], got {mixing_rho}")
    if n_clients < 1 or n_noise < 1:
        raise ValueError("n_clients and n_noise must be positive")
    need = _required_dim(n_clients, n_noise, mixing_rho) + n_free
    if d < need:
        raise DimensionError(f"dimension {d} too small; need at least {need}")

    n_private = n_clients if mixing_rho < 1.0 else 0
    n_shared = 1 if mixing_rho > 0.0 else 0
    total = 1 + n_shared + n_private + n_noise + n_free
    frame = gram_schmidt(rng.standard_normal((total, d)))

    u = frame[0]
    pos = 1
    shared = frame[pos:pos + n_shared]
    pos += n_shared
    private = frame[pos:pos + n_private]
    pos += n_private
    noise = frame[pos:pos + n_noise]
    pos += n_noise
    free = frame[pos:pos + n_free]

    if mixing_rho == 1.0:
        client_dirs = np.repeat(shared, n_clients, axis=0)
    elif mixing_rho == 0.0:
        client_dirs = private.copy()
    else:
        client_dirs = np.sqrt(mixing_rho) * shared[0][None, :] + np.sqrt(1.0 - mixing_rho) * private

    basis = FeatureBasis(
        dim=d,
        global_dir=u,
        client_dirs=client_dirs,
        noise_dirs=noise,
        mixing_rho=float(mixing_rho),
        client_frame=np.vstack([shared, private]) if n_shared + n_private else np.zeros((0, d)),
        free_dirs=free,
    )
    return basis


def decompose(v: np.ndarray, basis: FeatureBasis, client_id: int) -> Decomposition:
    """Split ``v`` into global, client, noise and residual parts.

    ``beta`` is the coefficient on the global direction, ``gamma`` on the
    client's direction (after removing the global part), ``phi`` on each noise
    direction. Whatever is left is the residual.
    """
    v = np.asarray(v, dtype=float)
    if v.shape != (basis.dim,):
        raise ValueError(f"expected vector of length {basis.dim}, got shape {v.shape}")
    if not 0 <= client_id < basis.n_clients:
        raise IndexError(f"client_id {client_id} out of range")
    beta = float(v @ basis.global_dir)
    mu = basis.client_dirs[client_id]
    gamma = float((v - beta * basis.global_dir) @ mu)
    phi = basis.noise_dirs @ v
    residual = v - beta * basis.global_dir - gamma * mu - phi @ basis.noise_dirs
    residual_norm = float(np.linalg.norm(residual))
    specific = float(np.sqrt(gamma**2 + phi @ phi + residual_norm**2))
    return Decomposition(beta, gamma, phi, residual, residual_norm, specific)


def compose(dec: Decomposition, basis: FeatureBasis, client_id: int) -> np.ndarray:
    return (
        dec.beta * basis.global_dir
        + dec.gamma * basis.client_dirs[client_id]
        + dec.phi @ basis.noise_dirs
        + dec.residual
    )


def heterogeneity(basis: FeatureBasis, client_id: int) -> float:
    """Sum of inner products between this client's direction and every client's direction."""
    if not 0 <= client_id < basis.n_clients:
        raise IndexError(f"client_id {client_id} out of range")
    return float(np.sum(basis.client_dirs @ basis.client_dirs[client_id]))


def theory_similarity(c_coef: float, s_coef: float) -> float:
    """Cosine between ``c*u + s*w`` and ``u`` for orthonormal ``u, w``."""
    if c_coef == 0 and s_coef == 0:
        raise DegenerateError("similarity undefined for a zero prompt")
    return float(c_coef / np.hypot(c_coef, s_coef))
