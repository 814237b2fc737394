"""Typed experiment configuration read from ``[section]`` / ``key = value`` files.

Every section maps to a dataclass.  Values are parsed according to the
field's default type; unknown sections or keys raise :class:`ConfigError`
naming the offending key.  HU-valued knobs carry a ``_hu`` suffix and are
converted to attenuation units where they are consumed.
"""
from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    """Invalid configuration content."""


def _tuple(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace("x", ",").split(",") if t.strip())


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass
class RunSection:
    seed: int = 0  # single source of randomness: noise, training data, cluster init
    threads: int = 1


@dataclass
class PhantomSection:
    kind: str = "desk"  # desk | disk | custom
    nx: int = 256
    fov: float = 256.0  # mm
    oversample: int = 2
    truth_upsample: int = 2  # data are simulated on a grid this many times finer
    disk_radius: float = 80.0
    disk_hu: float = 1000.0
    primitives: str = ""  # kind = custom: "ellipse cx cy a b hu [deg]; rect cx cy w h hu [deg]"
    background_hu: float = 0.0


@dataclass
class GeometrySection:
    kind: str = "parallel"  # parallel | fan
    n_views: int = 360
    n_det: int = 256
    det_spacing: float = 1.0
    span_deg: float = 180.0
    source_to_iso: float = 541.0
    source_to_det: float = 949.0


@dataclass
class NoiseSection:
    I0: float = 1e4
    k_gain: float = 1000.0
    sigma2: float = 330.0**2
    c_min: float = 1.0
    deterministic: bool = False


@dataclass
class PatchesSection:
    patch_shape: tuple = (8, 8)
    stride: tuple = (1, 1)
    train_stride: tuple = (2, 2)
    boundary: str = "clamp"


@dataclass
class TrainingSection:
    K: int = 5
    iterations: int = 100
    eta_hu: float = 100.0
    lambda0: float = 31.0
    init: str = "dct"
    cluster_init: str = "kmeans"
    n_phantoms: int = 5


@dataclass
class SolverSection:
    beta: float = 2.0**18
    gamma_hu: float = 20.0
    use_tau: bool = False
    tau_beta_scale: float = 2.0
    tau_gamma_scale: float = 0.8
    T: int = 30
    N: int = 2
    M: int = 4
    alpha: float = 1.999
    cluster_every: int = 1
    epsilon: float = 0.0
    ep_beta: float = 2.0**10
    ep_delta_hu: float = 10.0
    ep_kind: str = "hyperbola-2d"
    ep_iters: int = 50
    ep_subsets: int = 12
    fbp_window: str = "hann"


@dataclass
class EvaluationSection:
    mask: str = "circle"
    radius_fraction: float = 0.6
    window_lo: float = 800.0
    window_hi: float = 1200.0


@dataclass
class ExperimentConfig:
    run: RunSection = field(default_factory=RunSection)
    phantom: PhantomSection = field(default_factory=PhantomSection)
    geometry: GeometrySection = field(default_factory=GeometrySection)
    noise: NoiseSection = field(default_factory=NoiseSection)
    patches: PatchesSection = field(default_factory=PatchesSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    solver: SolverSection = field(default_factory=SolverSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)

    def to_text(self) -> str:
        """Fully resolved config in the same format it is read from."""
        lines = []
        for sec in fields(self):
            lines.append(f"[{sec.name}]")
            for key, value in asdict(getattr(self, sec.name)).items():
                if isinstance(value, tuple):
                    value = ",".join(str(v) for v in value)
                lines.append(f"{key} = {value}")
            lines.append("")
        return "\n".join(lines)


def _convert(raw: str, default):
    if isinstance(default, bool):
        return _bool(raw)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return _tuple(raw)
    return raw.strip()


def parse_config(text: str) -> ExperimentConfig:
    # "#" starts a comment anywhere; ";" only at line start, since primitive lists use it
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__",
                                       inline_comment_prefixes=("#",))
    parser.optionxform = str  # keys are case sensitive (I0, K, T, ...)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    cfg = ExperimentConfig()
    known = {f.name for f in fields(cfg)}
    for name in parser.sections():
        if name not in known:
            raise ConfigError(f"unknown section [{name}]")
        section = getattr(cfg, name)
        defaults = {f.name: getattr(section, f.name) for f in fields(section)}
        for key, raw in parser.items(name):
            if key not in defaults:
                raise ConfigError(f"unknown key '{key}' in section [{name}]")
            try:
                setattr(section, key, _convert(raw, defaults[key]))
            except ValueError as exc:
                raise ConfigError(f"bad value for '{key}' in [{name}]: {exc}") from exc
    validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def validate(cfg: ExperimentConfig) -> None:
    checks = [
        (cfg.phantom.kind in ("desk", "disk", "custom"), "phantom.kind must be desk, disk or custom"),
        (cfg.phantom.kind != "custom" or bool(cfg.phantom.primitives.strip()),
         "phantom.kind = custom needs phantom.primitives"),
        (cfg.phantom.nx >= 8, "phantom.nx must be >= 8"),
        (cfg.phantom.oversample >= 1 and cfg.phantom.truth_upsample >= 1,
         "phantom oversampling factors must be >= 1"),
        (cfg.geometry.kind in ("parallel", "fan"), "geometry.kind must be parallel or fan"),
        (cfg.geometry.n_views >= 1 and cfg.geometry.n_det >= 1, "geometry sizes must be >= 1"),
        (0 < cfg.geometry.span_deg < 360, "geometry.span_deg must be in (0, 360)"),
        (cfg.noise.I0 > 0 and cfg.noise.k_gain > 0 and cfg.noise.sigma2 >= 0,
         "noise parameters out of range"),
        (cfg.training.K >= 1 and cfg.training.iterations >= 0, "training.K/iterations out of range"),
        (cfg.training.eta_hu > 0 and cfg.training.lambda0 > 0, "training.eta_hu/lambda0 must be > 0"),
        (cfg.solver.beta > 0 and cfg.solver.gamma_hu > 0, "solver.beta/gamma_hu must be > 0"),
        (cfg.solver.tau_beta_scale > 0 and cfg.solver.tau_gamma_scale > 0,
         "solver.tau_beta_scale/tau_gamma_scale must be > 0"),
        (all(0 < s <= p for st in (cfg.patches.stride, cfg.patches.train_stride)
             for s, p in zip(st, cfg.patches.patch_shape))
         and len(cfg.patches.stride) == len(cfg.patches.train_stride) == len(cfg.patches.patch_shape),
         "patch strides must be between 1 and the patch size"),
        (cfg.patches.boundary in ("clamp", "wrap"), "patches.boundary must be clamp or wrap"),
        (1 <= cfg.solver.alpha < 2, "solver.alpha must be in [1, 2)"),
        (min(cfg.solver.T, cfg.solver.N, cfg.solver.M, cfg.solver.cluster_every) >= 1,
         "solver.T/N/M/cluster_every must be >= 1"),
        (cfg.evaluation.mask in ("circle", "file", "none"), "evaluation.mask must be circle, file or none"),
        (cfg.evaluation.window_hi > cfg.evaluation.window_lo, "evaluation window must have hi > lo"),
        (cfg.run.threads >= 1, "run.threads must be >= 1"),
    ]
    for ok, message in checks:
        if not ok:
            raise ConfigError(message)
    if cfg.phantom.kind == "custom":
        from .simulation import parse_primitives
        try:
            parse_primitives(cfg.phantom.primitives)
        except ValueError as exc:
            raise ConfigError(f"phantom.primitives: {exc}") from exc
