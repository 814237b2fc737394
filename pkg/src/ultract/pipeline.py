"""End-to-end desk experiment: phantom, simulated scan, training and reconstruction.

The helpers here turn an :class:`~ultract.config.ExperimentConfig` into
module calls; the CLI, the scripts and the acceptance tests all share them.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentConfig
from .geometry import ImageGrid, Projector, ScanGeometry, Sinogram, siddon_apply
from .learning import TransformUnion, learn_union
from .metrics import circle_mask, rmse_hu, ssim
from .patches import PatchConfig, extract_patches, tau_weights
from .reconstruction import (EpParams, ReconResult, UltraParams, fbp, oracle_labels, pwls_ep,
                             pwls_ultra)
from .simulation import (Ellipse, NoiseModel, Phantom, counts_to_sinogram, desk_phantom,
                         kappa_map, parse_primitives, rasterize_phantom, simulate_counts,
                         training_phantoms)

METHODS = ("fbp", "ep", "st", "ultra")


def make_phantom(cfg: ExperimentConfig) -> Phantom:
    p = cfg.phantom
    if p.kind == "disk":
        return Phantom((Ellipse(0.0, 0.0, p.disk_radius, p.disk_radius, p.disk_hu),))
    if p.kind == "custom":
        return Phantom(parse_primitives(p.primitives), p.background_hu)
    return desk_phantom(p.fov)


def make_geometry(cfg: ExperimentConfig) -> ScanGeometry:
    g = cfg.geometry
    span = np.deg2rad(g.span_deg)
    if g.kind == "fan":
        return ScanGeometry.fan(g.n_views, g.n_det, g.det_spacing, g.source_to_iso,
                                g.source_to_det, span)
    return ScanGeometry.parallel(g.n_views, g.n_det, g.det_spacing, span)


def noise_model(cfg: ExperimentConfig, seed: int | None = None, I0: float | None = None) -> NoiseModel:
    n = cfg.noise
    return NoiseModel(I0=n.I0 if I0 is None else I0, k_gain=n.k_gain, sigma2=n.sigma2,
                      rng_seed=cfg.run.seed if seed is None else seed, c_min=n.c_min,
                      deterministic=n.deterministic)


def patch_config(cfg: ExperimentConfig, training: bool = False) -> PatchConfig:
    p = cfg.patches
    return PatchConfig(p.patch_shape, p.train_stride if training else p.stride, p.boundary)


@dataclass
class DeskProblem:
    """Reference image, scan geometry and the noiseless line integrals.

    Line integrals come from a grid ``truth_upsample`` times finer than the
    reconstruction grid, so the reconstruction model is not the data model.
    """

    cfg: ExperimentConfig
    phantom: Phantom
    truth: ImageGrid
    geometry: ScanGeometry
    line_integrals: np.ndarray
    _projector: Projector | None = field(default=None, repr=False)

    @property
    def projector(self) -> Projector:
        if self._projector is None:
            self._projector = Projector(self.truth, self.geometry)
        return self._projector

    def simulate(self, seed: int | None = None, I0: float | None = None) -> Sinogram:
        noise = noise_model(self.cfg, seed, I0)
        counts = simulate_counts(None, self.geometry, noise, self.line_integrals)
        return counts_to_sinogram(counts, noise, self.geometry)

    @property
    def truth_hu(self) -> np.ndarray:
        return self.truth.hu()

    def mask(self) -> np.ndarray:
        if self.cfg.evaluation.mask == "none":
            return np.ones(self.truth.shape, dtype=bool)
        return circle_mask(self.truth.shape, self.cfg.evaluation.radius_fraction)

    def rmse(self, image: ImageGrid | np.ndarray, mask=None) -> float:
        x = image.values if isinstance(image, ImageGrid) else image
        return rmse_hu(self.truth.hu(x), self.truth_hu, self.mask() if mask is None else mask)

    def ssim(self, image: ImageGrid | np.ndarray) -> float:
        x = image.values if isinstance(image, ImageGrid) else image
        return ssim(self.truth.hu(x), self.truth_hu, self.mask())


def build_problem(cfg: ExperimentConfig) -> DeskProblem:
    p = cfg.phantom
    phantom = make_phantom(cfg)
    dx = p.fov / p.nx
    truth = rasterize_phantom(phantom, (p.nx, p.nx), (dx, dx), oversample=p.oversample)
    geom = make_geometry(cfg)
    s = p.truth_upsample
    fine = rasterize_phantom(phantom, (s * p.nx, s * p.nx), (dx / s, dx / s))
    ell = siddon_apply(fine, geom, fine.values)
    return DeskProblem(cfg, phantom, truth, geom, ell)


def training_patches(cfg: ExperimentConfig) -> np.ndarray:
    """``(l, N)`` patches from phantoms distinct from the test phantom."""
    p = cfg.phantom
    dx = p.fov / p.nx
    pcfg = patch_config(cfg, training=True)
    out = []
    for ph in training_phantoms(cfg.training.n_phantoms, seed=cfg.run.seed + 1, fov=p.fov):
        im = rasterize_phantom(ph, (p.nx, p.nx), (dx, dx), oversample=p.oversample)
        out.append(extract_patches(im.values, pcfg.index(im.shape)))
    return np.concatenate(out, axis=1)


def train_model(cfg: ExperimentConfig, K: int | None = None, X=None) -> TransformUnion:
    t = cfg.training
    X = training_patches(cfg) if X is None else X
    hu_slope = ImageGrid(1, 1).hu_slope
    res = learn_union(X, t.K if K is None else K, t.iterations, eta=t.eta_hu / hu_slope,
                      lambda0=t.lambda0, init=t.init, cluster_init=t.cluster_init,
                      seed=cfg.run.seed, patch_shape=cfg.patches.patch_shape,
                      track_objective=False)
    return res.model


def ep_params(cfg: ExperimentConfig) -> EpParams:
    s = cfg.solver
    return EpParams(beta=s.ep_beta, delta=s.ep_delta_hu, kind=s.ep_kind, n_iter=s.ep_iters,
                    n_subsets=s.ep_subsets, alpha=s.alpha)


def ultra_params(cfg: ExperimentConfig, hu_slope: float, **overrides) -> UltraParams:
    s = cfg.solver
    kw = dict(beta=s.beta, gamma=s.gamma_hu / hu_slope, use_tau=s.use_tau, T=s.T, N=s.N, M=s.M,
              alpha=s.alpha, cluster_every=s.cluster_every, epsilon=s.epsilon)
    kw.update(overrides)
    return UltraParams(**kw)


def run_fbp(problem: DeskProblem, sino: Sinogram) -> ReconResult:
    t0 = time.perf_counter()
    image = fbp(sino, problem.truth.like(), problem.cfg.solver.fbp_window)
    return ReconResult(image, [], runtime=time.perf_counter() - t0, iterations=1)


def run_ep(problem: DeskProblem, sino: Sinogram, init: ImageGrid | None = None) -> ReconResult:
    if init is None:
        init = run_fbp(problem, sino).image
    kappa = kappa_map(problem.projector, sino.weights)
    return pwls_ep(problem.projector, sino, kappa, ep_params(problem.cfg), init, track_cost=False)


def patch_tau(problem: DeskProblem, sino: Sinogram) -> np.ndarray:
    index = patch_config(problem.cfg).index(problem.truth.shape)
    return tau_weights(kappa_map(problem.projector, sino.weights), index)


def run_ultra(problem: DeskProblem, sino: Sinogram, model: TransformUnion, init: ImageGrid,
              oracle: bool = False, track_cost: bool = False, **overrides) -> ReconResult:
    """PWLS-ST (``model.K == 1``) or PWLS-ULTRA from ``init``.

    ``overrides`` replace fields of the configured :class:`UltraParams`.
    With ``use_tau`` the configured ``beta``/``gamma`` are read as
    uniform-weight equivalents: they are rescaled by the mean weight
    ``tau_bar`` (``beta / tau_bar``, ``gamma * sqrt(tau_bar)``) and then by
    ``tau_beta_scale``/``tau_gamma_scale``.
    """
    params = ultra_params(problem.cfg, problem.truth.hu_slope, track_cost=track_cost, **overrides)
    pcfg = patch_config(problem.cfg)
    tau = None
    if params.use_tau:
        tau = patch_tau(problem, sino)
        s, tau_bar = problem.cfg.solver, float(tau.mean())
        params.beta = s.tau_beta_scale * params.beta / tau_bar
        params.gamma = s.tau_gamma_scale * params.gamma * np.sqrt(tau_bar)
    if oracle:
        params.oracle_labels = oracle_labels(problem.truth, model, params.gamma, pcfg, tau)
    return pwls_ultra(problem.projector, sino, model, params, init, pcfg, tau=tau,
                      truth=problem.truth.values)


def reconstruct(method: str, problem: DeskProblem, sino: Sinogram, model=None,
                init: ImageGrid | None = None, track_cost: bool = False) -> ReconResult:
    """Dispatch one of :data:`METHODS`; ``st``/``ultra`` start from a PWLS-EP image unless given ``init``.

    ``track_cost`` records the objective per outer iteration for the ULTRA family.
    """
    if method == "fbp":
        return run_fbp(problem, sino)
    if method == "ep":
        return run_ep(problem, sino, init)
    if method in ("st", "ultra"):
        if model is None:
            raise ValueError(f"method {method!r} needs a transform model")
        if method == "st" and model.K != 1:
            raise ValueError("PWLS-ST needs a model with K = 1")
        if init is None:
            init = run_ep(problem, sino).image
        return run_ultra(problem, sino, model, init, track_cost=track_cost)
    raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
