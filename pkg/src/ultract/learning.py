"""Learning a union of square sparsifying transforms from image patches.

The training problem is

    min  sum_k sum_{i in C_k} ||W_k x_i - z_i||^2 + eta^2 ||z_i||_0
         + sum_k lambda_k Q(W_k),       Q(W) = ||W||_F^2 - log|det W|

with ``lambda_k = lambda0 * ||X_{C_k}||_F^2``.  It is solved by alternating an
exact closed-form transform update with exact sparse coding and clustering,
so the objective never increases.  ``K = 1`` is single-transform learning.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.fft
from scipy.cluster.vq import kmeans2

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"ULTRAMDL"
MODEL_VERSION = 1
DEFAULT_LAMBDA0 = 31.0


@dataclass(eq=False)
class TransformUnion:
    """``K`` square ``l x l`` transforms, stored at float32 (file) precision."""

    transforms: np.ndarray
    eta: float = 0.0
    lambda0: float = DEFAULT_LAMBDA0
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        T = np.asarray(self.transforms)
        if T.ndim == 2:
            T = T[None]
        if T.ndim != 3 or T.shape[1] != T.shape[2]:
            raise ValueError(f"transforms must be (K, l, l), got {T.shape}")
        T = np.ascontiguousarray(T, dtype=np.float32)
        if not np.all(np.isfinite(T)):
            raise ValueError("transforms must be finite")
        self.transforms = T

    @property
    def K(self) -> int:
        return self.transforms.shape[0]

    @property
    def l(self) -> int:
        return self.transforms.shape[1]

    def as_float64(self) -> np.ndarray:
        return self.transforms.astype(np.float64)


@dataclass
class LearningResult:
    model: TransformUnion
    labels: np.ndarray
    codes: np.ndarray
    objective: list  # (P2) objective after each full alternation
    half_steps: list  # objective after every transform / coding half-step


def regularizer_Q(omega) -> float:
    """``||W||_F^2 - log|det W|``; ``inf`` for singular ``W``."""
    omega = np.asarray(omega, dtype=np.float64)
    if omega.ndim != 2 or omega.shape[0] != omega.shape[1]:
        raise ValueError("Q needs a square matrix")
    sign, logdet = np.linalg.slogdet(omega)
    if sign == 0:
        return np.inf
    return float(np.sum(omega * omega) - logdet)


def hard_threshold(v, theta):
    """Zero entries with ``|v| < theta``; entries equal to ``theta`` are kept.

    ``theta`` may be a scalar or broadcast against ``v`` (e.g. one
    threshold per column).
    """
    v = np.asarray(v, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if np.any(theta < 0):
        raise ValueError("threshold must be nonnegative")
    return np.where(np.abs(v) >= theta, v, 0.0)


def _sym_sqrt(S):
    evals, evecs = np.linalg.eigh(S)
    evals = np.maximum(evals, 0.0)
    return (evecs * np.sqrt(evals)) @ evecs.T, (evecs / np.sqrt(evals)) @ evecs.T


def transform_update(X, Z, lam: float) -> np.ndarray:
    """Closed-form minimizer of ``||W X - Z||_F^2 + lam * Q(W)``.

    With ``L L^T = X X^T + lam I`` (symmetric square root) and the full SVD
    ``L^-1 X Z^T = U S V^T``, the minimizer is
    ``0.5 V (S + (S^2 + 2 lam I)^(1/2)) U^T L^-1``.
    """
    if not lam > 0:
        raise ValueError("lambda must be positive")
    X = np.asarray(X, dtype=np.float64)
    Z = np.asarray(Z, dtype=np.float64)
    l = X.shape[0]
    if X.ndim == 1 or X.size == 0:
        X = X.reshape(l, -1)
        Z = Z.reshape(l, -1)
    _, L_inv = _sym_sqrt(X @ X.T + lam * np.eye(l))
    U, s, Vt = np.linalg.svd(L_inv @ (X @ Z.T))
    if not np.all(np.isfinite(s)):
        raise np.linalg.LinAlgError("SVD produced non-finite values")
    return 0.5 * (Vt.T * (s + np.sqrt(s * s + 2.0 * lam))) @ U.T @ L_inv


def transform_objective(omega, X, Z, lam) -> float:
    return float(np.sum((omega @ X - Z) ** 2) + lam * regularizer_Q(omega))


def _coding_costs(transforms, X, eta, lambda0, Q=None):
    """Per-column cost of assigning each column to each transform, shape ``(K, N)``.

    ``||v - H(v)||^2 + eta^2 ||H(v)||_0 = sum_i min(v_i^2, eta^2)``.
    """
    if Q is None:
        Q = [regularizer_Q(w) for w in transforms]
    norms = np.sum(X * X, axis=0)
    eta2 = eta * eta
    costs = np.empty((len(transforms), X.shape[1]))
    for k, omega in enumerate(transforms):
        V = omega @ X
        costs[k] = np.minimum(V * V, eta2).sum(axis=0) + lambda0 * norms * Q[k]
    return costs


def train_sparse_code_cluster(X, transforms, eta: float, lambda0: float):
    """Optimal cluster per column (ties to the smallest index) and its sparse code."""
    X = np.asarray(X, dtype=np.float64)
    transforms = [np.asarray(w, dtype=np.float64) for w in transforms]
    if len(transforms) == 1:
        labels = np.zeros(X.shape[1], dtype=np.int64)
    else:
        labels = np.argmin(_coding_costs(transforms, X, eta, lambda0), axis=0)
    Z = np.empty_like(X)
    for k, omega in enumerate(transforms):
        sel = labels == k
        if np.any(sel):
            Z[:, sel] = hard_threshold(omega @ X[:, sel], eta)
    return Z, labels


def union_objective(X, transforms, Z, labels, eta, lambda0) -> float:
    """Full training objective (sparsification + sparsity + weighted Q terms)."""
    total = 0.0
    for k, omega in enumerate(transforms):
        sel = labels == k
        if not np.any(sel):
            continue  # lambda_k = 0 for an empty cluster
        Xk = X[:, sel]
        total += np.sum((omega @ Xk - Z[:, sel]) ** 2)
        total += eta * eta * np.count_nonzero(Z[:, sel])
        total += lambda0 * np.sum(Xk * Xk) * regularizer_Q(omega)
    return float(total)


def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix (rows are basis vectors)."""
    return scipy.fft.dct(np.eye(n), norm="ortho", axis=0)


def init_transforms(K: int, patch_shape, mode: str = "dct", seed: int = 0) -> np.ndarray:
    """Initial ``(K, l, l)`` stack: separable DCT copies or random orthonormal matrices."""
    l = int(np.prod(patch_shape))
    if mode == "dct":
        D = np.ones((1, 1))
        for n in patch_shape:
            D = np.kron(D, dct_matrix(int(n)))
        return np.repeat(D[None], K, axis=0)
    if mode == "random-orthonormal":
        rng = np.random.default_rng(seed)
        out = []
        for _ in range(K):
            q, r = np.linalg.qr(rng.standard_normal((l, l)))
            out.append(q * np.sign(np.diag(r)))
        return np.stack(out)
    raise ValueError(f"unknown init mode {mode!r}")


def init_labels(X, K: int, mode: str = "kmeans", seed: int = 0) -> np.ndarray:
    """Initial clustering of raw patch vectors (k-means++ or uniform random)."""
    N = X.shape[1]
    if K == 1:
        return np.zeros(N, dtype=np.int64)
    if mode == "kmeans":
        rng = np.random.default_rng(seed)
        _, labels = kmeans2(np.ascontiguousarray(X.T), K, minit="++", seed=rng)
        return labels.astype(np.int64)
    if mode == "random":
        return np.random.default_rng(seed).integers(0, K, N)
    raise ValueError(f"unknown cluster init {mode!r}")


def cluster_lambdas(X, labels, K, lambda0) -> tuple[np.ndarray, np.ndarray]:
    """``lambda_k = lambda0 ||X_{C_k}||_F^2`` and the value used for the update.

    Empty clusters get ``lambda0`` times the mean energy of the non-empty
    clusters so their transform update stays well posed.
    """
    energy = np.array([np.sum(X[:, labels == k] ** 2) for k in range(K)])
    lam = lambda0 * energy
    lam_update = lam.copy()
    empty = energy == 0
    if np.any(empty):
        fill = energy[~empty].mean() if np.any(~empty) else 1.0
        lam_update[empty] = lambda0 * fill
        logger.info("clusters %s are empty; using lambda=%.3g for their update",
                    np.flatnonzero(empty).tolist(), lambda0 * fill)
    return lam, lam_update


def learn_union(X, K: int, iters: int = 1000, *, eta: float | None = None,
                eta0: float | None = None, lambda0: float = DEFAULT_LAMBDA0,
                init: str = "dct", cluster_init: str = "kmeans", seed: int = 0,
                patch_shape=None, init_transforms_=None, init_labels_=None,
                callback=None, track_objective: bool = True) -> LearningResult:
    """Alternating minimization for a union of ``K`` transforms.

    Args:
        X: ``(l, N)`` training patches as columns.
        K: number of clusters / transforms.
        iters: number of (transform update, coding/clustering) alternations.
        eta: absolute sparsity threshold; alternatively ``eta0`` gives
            ``eta = eta0 * ||X||_F``.
        lambda0: scale of the ``Q`` regularizer weights.
        init: transform initialization, ``"dct"`` or ``"random-orthonormal"``.
        cluster_init: ``"kmeans"`` or ``"random"``.
        patch_shape: needed for DCT initialization when ``l`` is not a square.
        track_objective: evaluate the objective after every half-step; turning
            it off roughly halves the cost of an alternation.
    """
    X = np.asarray(X, dtype=np.float64)
    l, N = X.shape
    if K < 1 or iters < 1:
        raise ValueError("need K >= 1 and iters >= 1")
    if K > N:
        raise ValueError(f"K={K} exceeds the number of training patches {N}")
    if N < l:
        logger.warning("only %d training patches for l=%d", N, l)
    if (eta is None) == (eta0 is None):
        raise ValueError("give exactly one of eta or eta0")
    if eta is None:
        eta = eta0 * np.linalg.norm(X)
    if patch_shape is None:
        side = int(round(np.sqrt(l)))
        patch_shape = (side, side) if side * side == l else (l,)

    if init_transforms_ is not None:
        transforms = [np.asarray(w, dtype=np.float64).copy() for w in init_transforms_]
    else:
        transforms = list(init_transforms(K, patch_shape, init, seed))
    labels = (np.asarray(init_labels_, dtype=np.int64).copy() if init_labels_ is not None
              else init_labels(X, K, cluster_init, seed))
    Z = np.empty_like(X)
    for k in range(K):
        sel = labels == k
        Z[:, sel] = hard_threshold(transforms[k] @ X[:, sel], eta)

    objective_of = lambda: union_objective(X, transforms, Z, labels, eta, lambda0)
    objective, half_steps = [], [objective_of()] if track_objective else []
    for it in range(iters):
        _, lam_update = cluster_lambdas(X, labels, K, lambda0)
        for k in range(K):
            sel = labels == k
            transforms[k] = transform_update(X[:, sel], Z[:, sel], lam_update[k])
        if track_objective:
            half_steps.append(objective_of())
        Z, labels = train_sparse_code_cluster(X, transforms, eta, lambda0)
        obj = objective_of() if track_objective else np.nan
        if track_objective:
            half_steps.append(obj)
        objective.append(obj)
        if callback is not None:
            callback(it, obj, labels)

    model = TransformUnion(np.stack(transforms), float(eta), float(lambda0),
                           {"patch_shape": list(patch_shape), "iterations": iters, "seed": seed,
                            "init": init, "cluster_init": cluster_init, "n_train": N})
    return LearningResult(model, labels, Z, objective, half_steps)


# --------------------------------------------------------------------------
# Model files
# --------------------------------------------------------------------------
# layout (little endian):
#   8s magic | u32 version | u32 K | u32 l | f64 eta | f64 lambda0
#   K * l * l float32, row-major
#   u32 n | n bytes UTF-8 JSON provenance

_HEADER = struct.Struct("<8sIIIdd")


def save_model(model: TransformUnion, path) -> None:
    meta = json.dumps(model.provenance, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, model.K, model.l, model.eta, model.lambda0))
        fh.write(model.transforms.astype("<f4").tobytes(order="C"))
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)


def load_model(path) -> TransformUnion:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise ValueError(f"{path}: truncated model header")
    magic, version, K, l, eta, lambda0 = _HEADER.unpack_from(blob)
    if magic != MODEL_MAGIC:
        raise ValueError(f"{path}: not a transform model file")
    if version != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported model version {version}")
    off = _HEADER.size
    nbytes = K * l * l * 4
    if len(blob) < off + nbytes + 4:
        raise ValueError(f"{path}: truncated transform data")
    T = np.frombuffer(blob, dtype="<f4", count=K * l * l, offset=off).reshape(K, l, l)
    off += nbytes
    (n,) = struct.unpack_from("<I", blob, off)
    off += 4
    if len(blob) != off + n:
        raise ValueError(f"{path}: corrupt provenance block")
    try:
        prov = json.loads(blob[off:off + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: corrupt provenance block") from exc
    return TransformUnion(T.copy(), eta, lambda0, prov)
