"""Command-line front end: ``ultract <command> [options]``.

Exit codes: 0 success, 1 usage/config error, 2 I/O error, 3 numerical failure.
Failures print one machine-readable line ``error code=<n> kind=<kind> msg=<text>``
on stderr.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("ultract")

EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 1, 2, 3


class CliError(Exception):
    def __init__(self, code: int, kind: str, msg: str):
        super().__init__(msg)
        self.code, self.kind, self.msg = code, kind, msg


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_USAGE, "usage", message)


def _cap_threads(n: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ[var] = str(n)


def _load_cfg(path):
    from .config import ExperimentConfig, load_config
    cfg = ExperimentConfig() if path is None else load_config(path)
    log.info("resolved config:\n%s", cfg.to_text())
    return cfg


def _write_log(out: Path, cfg, extra: dict | None = None) -> None:
    """Store the resolved config (and run details) next to an output file."""
    text = cfg.to_text()
    if extra:
        text += "\n# " + json.dumps(extra, sort_keys=True) + "\n"
    Path(str(out) + ".cfg").write_text(text)


def cmd_phantom(args) -> None:
    from .io import save_image
    from .pipeline import build_problem
    cfg = _load_cfg(args.config)
    problem = build_problem(cfg)
    save_image(args.out, problem.truth, kind="image", extra={"role": "truth"})
    _write_log(args.out, cfg)


def cmd_simulate(args) -> None:
    from .io import save_sinogram
    from .pipeline import build_problem
    cfg = _load_cfg(args.config)
    if args.seed is not None:
        cfg.run.seed = args.seed
    if args.I0 is not None:
        cfg.noise.I0 = args.I0
    if args.sigma2 is not None:
        cfg.noise.sigma2 = args.sigma2
    if args.deterministic:
        cfg.noise.deterministic = True
    problem = build_problem(cfg)
    sino = problem.simulate()
    save_sinogram(args.out, sino, extra={"seed": cfg.run.seed, "I0": cfg.noise.I0})
    _write_log(args.out, cfg)


def cmd_train(args) -> None:
    from .learning import save_model
    from .pipeline import train_model
    cfg = _load_cfg(args.config)
    if args.K is not None:
        cfg.training.K = args.K
    model = train_model(cfg)
    save_model(model, args.out)
    _write_log(args.out, cfg)


def cmd_reconstruct(args) -> None:
    from .io import FormatError, load_sinogram, save_image
    from .learning import load_model
    from .patches import PatchConfig
    from .pipeline import build_problem, reconstruct
    from .reconstruction import pixel_cluster_map
    cfg = _load_cfg(args.config)
    sino = load_sinogram(args.sino)
    model = None
    if args.model:
        try:
            model = load_model(args.model)
        except ValueError as exc:
            raise FormatError(str(exc)) from exc
    problem = build_problem(cfg)
    if sino.geometry.n_views != problem.geometry.n_views or sino.geometry.n_det != problem.geometry.n_det:
        raise CliError(EXIT_USAGE, "usage", "sinogram geometry does not match the config")
    problem.geometry = sino.geometry
    problem._projector = None
    init = None
    if args.init:
        from .io import load_image
        init = load_image(args.init)
    result = reconstruct(args.method, problem, sino, model, init, track_cost=True)
    prefix = Path(args.out)
    save_image(f"{prefix}.bin", result.image, extra={"method": args.method})
    _write_log(f"{prefix}.bin", cfg, {"method": args.method, "runtime_s": result.runtime})
    if result.labels is not None:
        pcfg = PatchConfig(cfg.patches.patch_shape, cfg.patches.stride, cfg.patches.boundary)
        lab = pixel_cluster_map(result.labels, pcfg.index(problem.truth.shape), model.K)
        save_image(f"{prefix}_labels.bin", result.image.with_values(lab), kind="labels")
    with open(f"{prefix}_trace.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "cost", "rmse_hu"])
        hist = result.history or []
        for i, h in enumerate(hist):
            w.writerow([i + 1, h.get("cost_after_coding", ""), h.get("rmse_hu", "")])


def cmd_evaluate(args) -> None:
    from .io import load_image
    from .metrics import circle_mask, rmse_hu, ssim
    recon, truth = load_image(args.recon), load_image(args.truth)
    if recon.shape != truth.shape:
        raise CliError(EXIT_USAGE, "usage", f"shape mismatch {recon.shape} vs {truth.shape}")
    if args.mask == "circle":
        from .config import EvaluationSection
        frac = EvaluationSection().radius_fraction if args.radius_fraction is None else args.radius_fraction
        mask = circle_mask(truth.shape, frac)
    else:
        if not args.mask_file:
            raise CliError(EXIT_USAGE, "usage", "--mask file needs --mask-file")
        mask = load_image(args.mask_file).values > 0.5
    a, b = recon.hu(), truth.hu()
    row = {"rmse_hu": rmse_hu(a, b, mask), "ssim": ssim(a, b, mask), "n_roi": int(mask.sum())}
    text = json.dumps(row)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")


def _line_plot(values, path, size=(320, 200)) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(size[0] / 80, size[1] / 80), dpi=80)
    ax.plot(np.arange(1, len(values) + 1), values, "-")
    ax.set_xlabel("outer iteration")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def cmd_export(args) -> None:
    from .io import display_rows, load_image, to_gray, write_image
    if args.trace:
        with open(args.trace) as fh:
            rows = list(csv.DictReader(fh))
        col = args.column
        vals = [float(r[col]) for r in rows if r.get(col, "") not in ("", None)]
        if not vals:
            raise CliError(EXIT_USAGE, "usage", f"no values in column {col!r}")
        _line_plot(vals, args.out)
        return
    if not args.image:
        raise CliError(EXIT_USAGE, "usage", "export needs --image or --trace")
    grid = load_image(args.image)
    if args.labels:
        k = max(int(grid.values.max()), 1)
        gray = np.rint(grid.values / k * 255).astype(np.uint8)
    else:
        gray = to_gray(grid.hu(), (args.window_lo, args.window_hi))
    write_image(args.out, display_rows(gray))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ultract", description="Low-dose CT reconstruction with learned transforms.")
    p.add_argument("--threads", type=int, default=None, help="cap on worker threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("phantom", help="rasterize the reference phantom")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("simulate", help="simulate a noisy post-log sinogram")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--I0", type=float)
    s.add_argument("--sigma2", type=float)
    s.add_argument("--deterministic", action="store_true")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train", help="learn a union of sparsifying transforms")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--K", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("reconstruct", help="reconstruct an image from a sinogram")
    s.add_argument("--method", choices=["fbp", "ep", "st", "ultra"], required=True)
    s.add_argument("--sino", required=True)
    s.add_argument("--model")
    s.add_argument("--init", help="initial image (default: PWLS-EP for st/ultra)")
    s.add_argument("--config")
    s.add_argument("--out", required=True, help="output prefix")
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("evaluate", help="RMSE (HU) and SSIM against a reference")
    s.add_argument("--recon", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--mask", choices=["circle", "file"], default="circle")
    s.add_argument("--mask-file")
    s.add_argument("--radius-fraction", type=float, help="circle radius over the inscribed radius")
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("export", help="write an image as PGM/PNG or a trace as a line plot")
    s.add_argument("--image")
    s.add_argument("--labels", action="store_true", help="image holds cluster labels")
    s.add_argument("--trace", help="CSV trace from reconstruct")
    s.add_argument("--column", default="rmse_hu")
    s.add_argument("--window-lo", type=float, default=800.0)
    s.add_argument("--window-hi", type=float, default=1200.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_export)
    return p


def _fail(code: int, kind: str, msg: str) -> int:
    msg = " ".join(str(msg).split())
    print(f"error code={code} kind={kind} msg={msg}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    from .config import ConfigError
    from .io import FormatError
    from .reconstruction import ReconstructionError
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise CliError(EXIT_USAGE, "usage", "no command given")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.threads is not None:
            if args.threads < 1:
                raise CliError(EXIT_USAGE, "usage", "--threads must be >= 1")
            _cap_threads(args.threads)
        args.func(args)
    except CliError as exc:
        return _fail(exc.code, exc.kind, exc.msg)
    except ConfigError as exc:
        return _fail(EXIT_USAGE, "config", exc)
    except (OSError, FormatError) as exc:
        return _fail(EXIT_IO, "io", exc)
    except (ReconstructionError, FloatingPointError, np.linalg.LinAlgError) as exc:
        return _fail(EXIT_NUMERIC, "numerical", exc)
    except ValueError as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
