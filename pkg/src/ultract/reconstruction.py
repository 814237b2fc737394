"""PWLS reconstruction: FBP, PWLS-EP and PWLS-ST / PWLS-ULTRA.

The PWLS image updates use the relaxed ordered-subsets linearized augmented
Lagrangian method (OS-LALM) with diagonal majorizers ``D_A`` for the data
term and ``D_R`` for the regularizer.  PWLS-ULTRA alternates that image
update with exact sparse coding and clustering of image patches; ``K = 1``
gives PWLS-ST.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .geometry import ImageGrid, Projector, ScanGeometry, Sinogram, SubsetPartition, build_DA
from .learning import TransformUnion, hard_threshold
from .patches import PatchConfig, PatchIndex, accumulate_patches, build_DR, extract_patches

logger = logging.getLogger(__name__)


class ReconstructionError(RuntimeError):
    """Numerical failure (NaN, divergence) during an iterative reconstruction."""


# --------------------------------------------------------------------------
# FBP
# --------------------------------------------------------------------------

def _ramp_filter(n_det: int, spacing: float, window: str = "hann") -> np.ndarray:
    """Frequency response of the band-limited ramp filter on a padded grid."""
    n = max(64, 1 << int(np.ceil(np.log2(2 * n_det))))
    k = np.arange(-(n // 2), n // 2)
    h = np.zeros(n)
    h[k == 0] = 1.0 / (4 * spacing**2)
    odd = k % 2 == 1
    h[odd] = -1.0 / (np.pi * k[odd] * spacing) ** 2
    H = np.real(np.fft.fft(np.fft.ifftshift(h))) * spacing
    if window == "hann":
        H *= 0.5 * (1 + np.cos(2 * np.pi * np.fft.fftfreq(n)))
    elif window not in ("ramp", None):
        raise ValueError(f"unknown window {window!r}")
    return H


def _filter_rows(p, H):
    n = H.size
    padded = np.zeros((p.shape[0], n))
    padded[:, :p.shape[1]] = p
    return np.real(np.fft.ifft(np.fft.fft(padded, axis=1) * H, axis=1))[:, :p.shape[1]]


def fbp(sino: Sinogram, grid: ImageGrid, window: str = "hann") -> ImageGrid:
    """Filtered back-projection with a Hann-apodized ramp filter.

    Parallel beam expects views spanning ``pi`` or ``2 pi``; fan beam (flat
    detector) expects a full ``2 pi`` scan.
    """
    geom = sino.geometry
    p = sino.values
    X, Y = grid.pixel_centers()
    out = np.zeros(grid.shape)
    u0 = geom.det_positions[0]
    if geom.kind == "parallel":
        q = _filter_rows(p, _ramp_filter(geom.n_det, geom.det_spacing, window))
        for theta, row in zip(geom.angles, q):
            u = X * np.cos(theta) + Y * np.sin(theta)
            out += np.interp((u - u0) / geom.det_spacing, np.arange(geom.n_det), row,
                             left=0.0, right=0.0)
        out *= np.pi / geom.n_views
    elif geom.kind == "fan":
        D, Dsd = geom.source_to_iso, geom.source_to_det
        a = geom.det_spacing * D / Dsd  # bin spacing on the virtual detector through the origin
        s = geom.det_positions * D / Dsd
        pw = p * (D / np.sqrt(D * D + s * s))[None, :]
        q = 0.5 * _filter_rows(pw, _ramp_filter(geom.n_det, a, window))
        for beta, row in zip(geom.angles, q):
            c, sn = np.cos(beta), np.sin(beta)
            along = D - (X * c + Y * sn)
            sp = D * (-X * sn + Y * c) / along
            U = along / D
            out += np.interp((sp - s[0]) / a, np.arange(geom.n_det), row,
                             left=0.0, right=0.0) / (U * U)
        out *= 2 * np.pi / geom.n_views
    else:
        raise ValueError(f"unsupported geometry {geom.kind!r}")
    return grid.with_values(out)


# --------------------------------------------------------------------------
# Relaxed OS-LALM machinery
# --------------------------------------------------------------------------

def rho_schedule(r: int, alpha: float = 1.999) -> float:
    """Decreasing penalty parameter of relaxed OS-LALM."""
    if r < 0:
        raise ValueError("r must be nonnegative")
    if not 1 <= alpha < 2:
        raise ValueError("alpha must be in [1, 2)")
    if r == 0:
        return 1.0
    t = np.pi / (alpha * (r + 1))
    return float(t * np.sqrt(1 - (t / 2) ** 2))


class PwlsData:
    """Weighted least-squares data term ``0.5 ||y - A x||_W^2`` split into subsets."""

    def __init__(self, projector: Projector, sino: Sinogram, n_subsets: int = 1):
        self.projector = projector
        self.partition = SubsetPartition.bit_reversal(sino.geometry.n_views, n_subsets)
        self.ops = projector.subsets(self.partition)
        self.y = sino.values
        self.w = sino.weights
        self.y_sub = self.ops.split(self.y)
        self.w_sub = self.ops.split(self.w)
        self.DA = build_DA(projector, self.w)

    @property
    def M(self) -> int:
        return self.partition.M

    def grad_subset(self, x, m: int) -> np.ndarray:
        """``M A_m^T W_m (A_m x - y_m)``."""
        res = self.ops.forward(x, m) - self.y_sub[m]
        return self.M * self.ops.back(self.w_sub[m] * res, m)

    def gradient(self, x) -> np.ndarray:
        return self.projector.back(self.w * (self.projector.forward(x) - self.y))

    def cost(self, x) -> float:
        res = self.projector.forward(x) - self.y
        return 0.5 * float(np.sum(self.w * res * res))


@dataclass
class SolverState:
    x: np.ndarray
    g: np.ndarray | None = None
    h: np.ndarray | None = None
    zeta: np.ndarray | None = None
    s: np.ndarray | None = None
    rho: float = 1.0
    r: int = 0
    z_codes: np.ndarray | None = None
    labels: np.ndarray | None = None
    cost_trace: list = field(default_factory=list)


def image_update(state: SolverState, data: PwlsData, penalty, n_iter: int,
                 alpha: float = 1.999, callback=None) -> SolverState:
    """Run ``n_iter`` passes of relaxed OS-LALM over all subsets.

    ``penalty`` supplies ``grad(x)`` and the diagonal ``majorizer``.
    Auxiliary variables are re-initialized from ``state.x``; pixels whose
    combined majorizer is zero are left unchanged.
    """
    if not 1 <= alpha < 2:
        raise ValueError("alpha must be in [1, 2)")
    M = data.M
    DA = data.DA
    DR = penalty.majorizer
    x = np.maximum(state.x, 0.0)
    zeta = data.grad_subset(x, M - 1)
    g = zeta.copy()
    h = DA * x - zeta
    s = None
    rho = 1.0
    for n in range(n_iter):
        for m in range(M):
            r = n * M + m
            rho = rho_schedule(r, alpha)
            s = rho * (DA * x - h) + (1 - rho) * g
            denom = rho * DA + DR
            step = s + penalty.grad(x)
            active = denom > 0
            x_new = x.copy()
            x_new[active] = np.maximum(x[active] - step[active] / denom[active], 0.0)
            if not np.all(np.isfinite(x_new)):
                raise ReconstructionError(f"non-finite image at inner iteration r={r}")
            zeta = data.grad_subset(x_new, m)
            g = rho / (rho + 1) * (alpha * zeta + (1 - alpha) * g) + g / (rho + 1)
            h = alpha * (DA * x_new - zeta) + (1 - alpha) * h
            x = x_new
            if callback is not None:
                callback(r, x)
    state.x, state.g, state.h, state.zeta, state.s = x, g, h, zeta, s
    state.rho, state.r = rho, n_iter * M
    return state


# --------------------------------------------------------------------------
# Edge-preserving baseline
# --------------------------------------------------------------------------

def ep_potential(t, delta: float, kind: str = "hyperbola-2d"):
    """Edge-preserving potential and its derivative.

    ``hyperbola-2d``: ``delta^2 (sqrt(1 + (t/delta)^2) - 1)``;
    ``fair-3d``: ``delta^2 (|t/delta| - log(1 + |t/delta|))``.
    Both have unit curvature at 0 and less elsewhere.
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    t = np.asarray(t, dtype=np.float64)
    a = np.abs(t / delta)
    if kind == "hyperbola-2d":
        root = np.sqrt(1 + a * a)
        return delta**2 * (root - 1), t / root
    if kind == "fair-3d":
        return delta**2 * (a - np.log1p(a)), t / (1 + a)
    raise ValueError(f"unknown potential {kind!r}")


_NEIGHBORS = ((0, 1), (1, 0), (1, 1), (1, -1))  # each unordered 8-neighbour pair once


def _pair_slices(shape, off):
    """Slices selecting pixels j and their neighbour k = j + off (``off[0] >= 0``)."""
    dy, dx = off
    ny, nx = shape
    rows_j, rows_k = slice(0, ny - dy), slice(dy, ny)
    if dx >= 0:
        cols_j, cols_k = slice(0, nx - dx), slice(dx, nx)
    else:
        cols_j, cols_k = slice(-dx, nx), slice(0, nx + dx)
    return (rows_j, cols_j), (rows_k, cols_k)


@dataclass
class EdgePreservingPenalty:
    """``beta * sum_j sum_{k in N_j} kappa_j kappa_k phi(x_j - x_k)`` over 8 neighbours.

    ``delta`` is in image units (attenuation), not HU.
    """

    kappa: np.ndarray
    beta: float
    delta: float
    kind: str = "hyperbola-2d"

    def __post_init__(self):
        self.kappa = np.asarray(self.kappa, dtype=np.float64)
        D = np.zeros(self.kappa.shape)
        for off in _NEIGHBORS:
            sj, sk = _pair_slices(self.kappa.shape, off)
            c = self.kappa[sj] * self.kappa[sk]
            D[sj] += 4 * c
            D[sk] += 4 * c
        self.majorizer = self.beta * D

    def cost(self, x) -> float:
        x = np.asarray(x).reshape(self.kappa.shape)
        total = 0.0
        for off in _NEIGHBORS:
            sj, sk = _pair_slices(x.shape, off)
            phi, _ = ep_potential(x[sj] - x[sk], self.delta, self.kind)
            total += 2 * np.sum(self.kappa[sj] * self.kappa[sk] * phi)
        return self.beta * float(total)

    def grad(self, x) -> np.ndarray:
        x = np.asarray(x).reshape(self.kappa.shape)
        G = np.zeros(x.shape)
        for off in _NEIGHBORS:
            sj, sk = _pair_slices(x.shape, off)
            _, dphi = ep_potential(x[sj] - x[sk], self.delta, self.kind)
            t = 2 * self.kappa[sj] * self.kappa[sk] * dphi
            G[sj] += t
            G[sk] -= t
        return self.beta * G


@dataclass
class EpParams:
    beta: float
    delta: float = 10.0  # HU
    kind: str = "hyperbola-2d"
    n_iter: int = 50
    n_subsets: int = 1
    alpha: float = 1.999

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")


@dataclass
class ReconResult:
    image: ImageGrid
    cost_trace: list
    labels: np.ndarray | None = None
    codes: np.ndarray | None = None
    history: list = field(default_factory=list)
    runtime: float = 0.0
    iterations: int = 0


def pwls_ep(projector: Projector, sino: Sinogram, kappa, params: EpParams, init,
            track_cost: bool = True, callback=None) -> ReconResult:
    """PWLS with the edge-preserving regularizer, solved by relaxed OS-LALM."""
    t0 = time.perf_counter()
    grid = projector.grid
    x0 = np.asarray(init.values if isinstance(init, ImageGrid) else init, dtype=np.float64)
    if x0.shape != grid.shape:
        raise ValueError(f"init shape {x0.shape} does not match grid {grid.shape}")
    data = PwlsData(projector, sino, params.n_subsets)
    penalty = EdgePreservingPenalty(kappa, params.beta, params.delta / grid.hu_slope, params.kind)
    state = SolverState(np.maximum(x0, 0.0))
    cost = lambda x: data.cost(x) + penalty.cost(x)
    trace = [cost(state.x)] if track_cost else []

    def guard(r, x):
        if callback is not None:
            callback(r, x)
        if track_cost and (r + 1) % data.M == 0:
            c = cost(x)
            trace.append(c)
            if c > 10 * trace[0] and c > trace[0] + 1e-12:
                raise ReconstructionError(
                    f"PWLS-EP diverging: cost {c:.6g} > 10x initial {trace[0]:.6g} at r={r}")

    state = image_update(state, data, penalty, params.n_iter, params.alpha, guard)
    return ReconResult(grid.with_values(state.x), trace, runtime=time.perf_counter() - t0,
                       iterations=params.n_iter)


# --------------------------------------------------------------------------
# PWLS-ST / PWLS-ULTRA
# --------------------------------------------------------------------------

def recon_sparse_code_cluster(x, transforms, gamma: float, tau, index: PatchIndex,
                              labels=None):
    """Exact per-patch sparse coding and (optionally) clustering.

    Each patch goes to the transform minimizing
    ``||v - H(v)||^2 + (gamma^2 / tau_j) ||H(v)||_0`` with ``v = W_k P_j x``
    and threshold ``gamma / sqrt(tau_j)``; ties go to the smallest ``k``.
    Passing ``labels`` keeps the clustering fixed and only codes.
    """
    transforms = np.asarray(transforms, dtype=np.float64)
    tau = np.ones(index.count) if tau is None else np.asarray(tau, dtype=np.float64)
    if np.any(tau <= 0):
        raise ValueError("tau must be positive")
    thr = gamma / np.sqrt(tau)
    P = extract_patches(x, index)
    K = transforms.shape[0]
    if labels is None:
        if K == 1:
            labels = np.zeros(index.count, dtype=np.int64)
        else:
            thr2 = thr * thr
            best = np.full(index.count, np.inf)
            labels = np.zeros(index.count, dtype=np.int64)
            for k in range(K):
                V = transforms[k] @ P
                c = np.minimum(V * V, thr2[None, :]).sum(axis=0)
                better = c < best
                labels[better] = k
                best[better] = c[better]
    labels = np.asarray(labels, dtype=np.int64)
    Z = np.empty_like(P)
    for k in range(K):
        sel = labels == k
        if np.any(sel):
            Z[:, sel] = hard_threshold(transforms[k] @ P[:, sel], thr[None, sel])
    return Z, labels


class UltraPenalty:
    """``R2(x) = beta sum_k sum_{j in C_k} tau_j ||W_k P_j x - z_j||^2`` at fixed codes and labels."""

    def __init__(self, transforms, index: PatchIndex, tau, beta: float, gamma: float,
                 majorizer=None):
        self.transforms = np.asarray(transforms, dtype=np.float64)
        self.index = index
        self.tau = np.ones(index.count) if tau is None else np.asarray(tau, dtype=np.float64)
        self.beta = beta
        self.gamma = gamma
        self.majorizer = (build_DR(index, self.tau, self.transforms, beta)
                          if majorizer is None else majorizer)
        self.codes = None
        self.labels = None

    def set_codes(self, codes, labels):
        self.codes = codes
        self.labels = np.asarray(labels, dtype=np.int64)
        # group patches by cluster so each transform acts on a contiguous block
        self._order = np.argsort(self.labels, kind="stable")
        self._table = self.index.table[:, self._order]
        self._codes = codes[:, self._order]
        self._tau = self.tau[self._order]
        bounds = np.searchsorted(self.labels[self._order], np.arange(self.transforms.shape[0] + 1))
        self._blocks = [(k, bounds[k], bounds[k + 1]) for k in range(self.transforms.shape[0])
                        if bounds[k + 1] > bounds[k]]

    def residual(self, x) -> np.ndarray:
        """``W_k P_j x - z_j`` in cluster-grouped column order."""
        P = np.asarray(x, dtype=np.float64).ravel()[self._table]
        E = np.empty_like(P)
        for k, a, b in self._blocks:
            E[:, a:b] = self.transforms[k] @ P[:, a:b]
        E -= self._codes
        return E

    def grad(self, x) -> np.ndarray:
        E = self.residual(x)
        G = np.empty_like(E)
        for k, a, b in self._blocks:
            G[:, a:b] = self.transforms[k].T @ E[:, a:b]
        G *= (2 * self.beta) * self._tau[None, :]
        n = int(np.prod(self.index.image_shape))
        return np.bincount(self._table.ravel(), weights=G.ravel(), minlength=n
                           ).reshape(self.index.image_shape)

    def quadratic(self, x) -> float:
        E = self.residual(x)
        return self.beta * float(np.sum(self._tau * np.sum(E * E, axis=0)))

    def cost(self, x) -> float:
        """Full regularizer value including the ``gamma^2 ||z||_0`` terms."""
        return self.quadratic(x) + self.beta * self.gamma**2 * float(np.count_nonzero(self.codes))


def grad_R2(x, z_codes, labels, transforms, tau, beta, index: PatchIndex) -> np.ndarray:
    """Gradient ``2 beta sum_j tau_j P_j^T W_k^T (W_k P_j x - z_j)``."""
    pen = UltraPenalty(transforms, index, tau, beta, 0.0, majorizer=0.0)
    pen.set_codes(z_codes, labels)
    return pen.grad(x)


@dataclass
class UltraParams:
    beta: float
    gamma: float
    use_tau: bool = False
    T: int = 50
    N: int = 2
    M: int = 1
    alpha: float = 1.999
    cluster_every: int = 1
    oracle_labels: np.ndarray | None = None
    epsilon: float = 0.0
    track_cost: bool = True

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if not 1 <= self.alpha < 2:
            raise ValueError("alpha must be in [1, 2)")
        if self.M < 1 or self.N < 1 or self.T < 1 or self.cluster_every < 1:
            raise ValueError("T, N, M and cluster_every must be >= 1")


def ultra_cost(data: PwlsData, penalty: UltraPenalty, x) -> float:
    return data.cost(x) + penalty.cost(x)


def pwls_ultra(projector: Projector, sino: Sinogram, model: TransformUnion, params: UltraParams,
               init, patch_cfg: PatchConfig, tau=None, truth=None, callback=None) -> ReconResult:
    """PWLS with the union-of-learned-transforms regularizer.

    Args:
        projector: system operator for the reconstruction grid.
        sino: post-log data and weights.
        model: pre-learned transforms (``K = 1`` gives PWLS-ST).
        params: solver settings.
        init: initial image (typically a PWLS-EP reconstruction).
        patch_cfg: patch geometry; its size must match ``model.l``.
        tau: per-patch weights; ignored unless ``params.use_tau``.
        truth: optional reference image (attenuation) for an RMSE trace in HU.

    Returns:
        ReconResult with the final image, labels, codes, per-outer-iteration
        cost trace and a history of dicts (cost before/after coding, RMSE).
    """
    t0 = time.perf_counter()
    grid = projector.grid
    if patch_cfg.l != model.l:
        raise ValueError(f"model has l={model.l} but patches have l={patch_cfg.l}")
    x = np.maximum(np.asarray(init.values if isinstance(init, ImageGrid) else init,
                              dtype=np.float64), 0.0)
    if x.shape != grid.shape:
        raise ValueError(f"init shape {x.shape} does not match grid {grid.shape}")
    index = patch_cfg.index(grid.shape)
    tau = np.asarray(tau, dtype=np.float64) if (params.use_tau and tau is not None) else np.ones(index.count)
    transforms = model.as_float64()
    data = PwlsData(projector, sino, params.M)
    penalty = UltraPenalty(transforms, index, tau, params.beta, params.gamma)

    fixed = None if params.oracle_labels is None else np.asarray(params.oracle_labels, dtype=np.int64)
    if fixed is not None and fixed.shape != (index.count,):
        raise ValueError("oracle labels do not match the patch count")
    codes, labels = recon_sparse_code_cluster(x, transforms, params.gamma, tau, index, fixed)
    penalty.set_codes(codes, labels)
    state = SolverState(x, z_codes=codes, labels=labels)
    history = []
    trace = [ultra_cost(data, penalty, x)] if params.track_cost else []

    for t in range(params.T):
        x_prev = state.x
        state = image_update(state, data, penalty, params.N, params.alpha)
        x = state.x
        recluster = fixed is None and transforms.shape[0] > 1 and (t + 1) % params.cluster_every == 0
        entry = {"t": t, "reclustered": recluster}
        if params.track_cost:
            entry["cost_after_image"] = ultra_cost(data, penalty, x)
        codes, labels = recon_sparse_code_cluster(
            x, transforms, params.gamma, tau, index, None if recluster else penalty.labels)
        penalty.set_codes(codes, labels)
        state.z_codes, state.labels = codes, labels
        if params.track_cost:
            entry["cost_after_coding"] = ultra_cost(data, penalty, x)
            trace.append(entry["cost_after_coding"])
            if entry["cost_after_coding"] > entry["cost_after_image"] * (1 + 1e-12):
                logger.warning("sparse coding increased the cost at t=%d", t)
        if truth is not None:
            entry["rmse_hu"] = float(np.sqrt(np.mean((grid.hu_slope * (x - truth)) ** 2)))
        entry["change"] = float(np.linalg.norm(x - x_prev))
        history.append(entry)
        if callback is not None:
            callback(t, x, entry)
        if params.epsilon > 0 and entry["change"] < params.epsilon:
            break
    state.cost_trace = trace
    return ReconResult(grid.with_values(state.x), trace, state.labels, state.z_codes, history,
                       runtime=time.perf_counter() - t0, iterations=len(history))


def oracle_labels(truth, model: TransformUnion, gamma: float, patch_cfg: PatchConfig, tau=None):
    """Cluster labels obtained by sparse coding and clustering the reference image."""
    truth = np.asarray(truth.values if isinstance(truth, ImageGrid) else truth, dtype=np.float64)
    index = patch_cfg.index(truth.shape)
    _, labels = recon_sparse_code_cluster(truth, model.as_float64(), gamma, tau, index)
    return labels


def pixel_cluster_map(labels, index: PatchIndex, K: int) -> np.ndarray:
    """Majority vote over the patches covering each pixel (ties to the smallest label)."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (index.count,):
        raise ValueError("one label per patch required")
    votes = np.stack([accumulate_patches(np.ones(index.table.shape), index, (labels == k).astype(float))
                      for k in range(K)])
    return np.argmax(votes, axis=0)
