"""``scatterflow`` command line.

    scatterflow <simulate|make-dataset|train|invert|posterior|eval> --config FILE
                [--out DIR] [--seed-override name=value ...]

Commands exchange SCPR containers inside the output directory:

    dataset.scpr      make-dataset  -> train
    model.scpr        train         -> invert, posterior
    measurement.scpr  simulate      -> invert, posterior, eval
    map.scpr          invert        -> posterior, eval
    posterior.scpr    posterior

invert, posterior and eval also write ``<command>_metrics.json`` with
psnr, ssim, misfit and wall_time.

Every container carries a ``config`` entry echoing the effective config as
canonical JSON. Exit status: 0 success, 1 invalid config or input, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import formats, inversion, physics, posterior, training
from .config import ConfigError, Experiment, load
from .flow import FlowInverseError, FlowModel

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2
NUMERIC_ERRORS = (
    physics.SolverError, inversion.InversionError, training.TrainingError, FlowInverseError,
    posterior.PosteriorError, np.linalg.LinAlgError, FloatingPointError,
)
INVALID_ERRORS = (ConfigError, formats.ContainerError, training.FormatError, FileNotFoundError, ValueError)


def _write(out: Path, name, entries, exp: Experiment):
    entries = {**entries, "config": formats.json_entry(exp.doc)}
    return formats.write_container(out / name, entries)


def _require(path: Path, what):
    if not path.exists():
        raise FileNotFoundError(f"{what} not found at {path}; run the producing command first")
    return path


def _read(path: Path, what):
    return formats.read_container(_require(path, what))


def _metrics(out: Path, command, **values):
    # JSON has no infinity; an exact match (infinite PSNR) is written as null
    clean = {k: (None if isinstance(v, float) and not np.isfinite(v) else v) for k, v in values.items()}
    (out / f"{command}_metrics.json").write_text(json.dumps(clean, indent=2, sort_keys=True) + "\n")
    return clean


def _preview(grid, path, vmax=None):
    vmax = vmax if vmax is not None else max(float(np.max(grid)), 1e-12)
    formats.export_pgm(grid, path, 0.0, vmax)


# -- commands ---------------------------------------------------------------------

def cmd_make_dataset(exp: Experiment, out: Path):
    spec = exp.dataset()
    images = training.make_dataset(spec)
    _write(out, "dataset.scpr", training.dataset_entries(images, spec), exp)
    for i in range(min(4, len(images))):
        _preview(images[i], out / f"dataset_{i}.pgm", 1.0)
    print(f"dataset: {len(images)} x {spec.n}x{spec.n} ({spec.kind}) -> {out / 'dataset.scpr'}")


def cmd_train(exp: Experiment, out: Path):
    data_path = exp.path("train", "dataset_path", out / "dataset.scpr")
    images = _read(data_path, "dataset")["images"]
    model = FlowModel.build(exp.flow())

    def log(phase, epoch, value):
        unit = "mse" if phase == "phase1" else "bits/dim"
        print(f"{phase} epoch {epoch}: {unit} {value:.5g}", flush=True)

    training.train(model, images, exp.train(), log=log)
    entries = training.checkpoint_entries(model)
    _write(out, "model.scpr", entries, exp)
    print(f"model -> {out / 'model.scpr'}")


def _phantom(exp: Experiment, cfg: physics.SensingConfig) -> np.ndarray:
    ph = exp.phantom()
    chi_max = ph["eps_r"] - 1.0
    src = ph["source"]
    if src == "cylinder":
        return physics.cylinder(cfg, ph["eps_r"], ph["diameter"], tuple(ph["center"]))
    if src == "file":
        path = exp.base_dir / ph["path"] if not Path(ph["path"]).is_absolute() else Path(ph["path"])
        if path.suffix.lower() in (".pgm", ".pnm"):
            px, maxval = formats.read_pgm(path)
            return training.resize_stack(px[None] / maxval, cfg.n)[0] * chi_max
        entries = formats.read_container(path)
        key = "chi" if "chi" in entries else "images"
        grid = entries[key] if entries[key].ndim == 2 else entries[key][ph["index"]]
        return physics.as_contrast(grid, cfg.n)
    # an image the prior was not trained on: a held-out digit, or a fresh ellipse draw
    spec = exp.dataset()
    if spec.kind == "mnist-subset":
        _, test, _ = training.mnist_subset_split(cfg.n, seed=spec.seed)
        if ph["index"] >= len(test):
            raise ConfigError(f"index must be < {len(test)}", "/sensing/phantom/index")
        return test[ph["index"]] * chi_max
    if spec.kind != "ellipses":
        raise ConfigError("phantom source 'dataset' needs an ellipses or mnist-subset dataset",
                          "/sensing/phantom/source")
    fresh = training.DatasetSpec("ellipses", ph["index"] + 1, cfg.n, spec.chi_max, spec.seed + 1)
    return training.gen_ellipses(fresh)[ph["index"]] * chi_max


def cmd_simulate(exp: Experiment, out: Path):
    cfg = exp.sensing()
    chi = _phantom(exp, cfg)
    clean = physics.forward(chi, cfg)
    y = physics.add_noise(clean, cfg.snr_db, exp.seed("noise"))
    _write(out, "measurement.scpr", {"chi": chi, "e_scat": y}, exp)
    _preview(chi, out / "phantom.pgm")
    print(f"measurement: {cfg.n_rec} receivers x {cfg.n_inc} incidences, "
          f"|E_s| = {np.linalg.norm(y):.4g}, max contrast {chi.max():.3g} -> {out / 'measurement.scpr'}")


def _load_inputs(exp: Experiment, out: Path):
    model = training.load_checkpoint(_require(exp.path("inversion", "model_path", out / "model.scpr"), "model"))
    if "chi_max" in exp.section("flow"):
        # the prior is trained on [0, 1]; the current config decides the contrast scale
        model.chi_max = float(exp.section("flow")["chi_max"])
    meas = _read(exp.path("inversion", "measurement_path", out / "measurement.scpr"), "measurement")
    return model, meas


def _quality(x, ref):
    if not np.any(ref):
        return float("nan"), float("nan")
    return inversion.psnr(x, ref), inversion.ssim(x, ref)


def cmd_invert(exp: Experiment, out: Path):
    cfg = exp.sensing()
    inv = exp.inversion()
    model, meas = _load_inputs(exp, out)
    result = inversion.invert(meas["e_scat"], model, cfg, inv)
    entries = {"x_map": result.x_map, "loss_trace": np.asarray(result.loss_trace)}
    if result.z_map is not None:
        entries["z_map"] = result.z_map
    _write(out, "map.scpr", entries, exp)
    _preview(result.x_map, out / "map.pgm", max(float(meas["chi"].max()), 1e-12))
    formats.export_csv(result.x_map, out / "map.csv")
    p, s = _quality(result.x_map, meas["chi"])
    m = _metrics(out, "invert", psnr=p, ssim=s, misfit=result.misfit, wall_time=result.wall_time)
    print(f"{inv.method}/{inv.init}: misfit {result.misfit:.4g}, psnr {m['psnr']}, ssim {m['ssim']}")


def cmd_posterior(exp: Experiment, out: Path):
    start = time.perf_counter()
    cfg = exp.sensing()
    opts = exp.posterior()
    model, meas = _load_inputs(exp, out)
    map_entries = _read(exp.path("posterior", "map_path", out / "map.scpr"), "MAP result")
    if "z_map" not in map_entries:
        raise ConfigError("posterior needs a latent MAP estimate; run invert with method 'lso'", "/inversion/method")
    seed = exp.seed("posterior")
    params = posterior.fit_sigma(meas["e_scat"], model, cfg, map_entries["z_map"], beta=opts["beta"],
                                 k_samples=opts["k_samples"], lr=opts["lr"], iters=opts["iters"], seed=seed)
    uq = posterior.sample_posterior(model, params, count=opts["count"], seed=seed + 1)
    _write(out, "posterior.scpr", {
        "samples": uq.samples, "mmse": uq.mmse, "uq": uq.uq,
        "mu_q": params.mu_q, "sigma_q": params.sigma_q, "loss_trace": np.asarray(params.loss_trace),
    }, exp)
    vmax = max(float(meas["chi"].max()), 1e-12)
    for k, s in enumerate(uq.samples):
        _preview(s, out / f"sample_{k:02d}.pgm", vmax)
    _preview(uq.mmse, out / "mmse.pgm", vmax)
    _preview(uq.uq, out / "uq.pgm")
    formats.export_csv(uq.mmse, out / "mmse.csv")
    formats.export_csv(uq.uq, out / "uq.csv")
    misfit = physics.misfit_gradient(uq.mmse, meas["e_scat"], cfg, allow_negative=True)[0]
    p, s = _quality(uq.mmse, meas["chi"])
    m = _metrics(out, "posterior", psnr=p, ssim=s, misfit=misfit, wall_time=time.perf_counter() - start)
    print(f"posterior: mean log sigma {np.mean(np.log(params.sigma_q)):.4f}, "
          f"mmse psnr {m['psnr']}, mean uq {uq.uq.mean():.4g}")


def _entry(path: Path, name):
    if path.suffix.lower() in (".pgm", ".pnm"):
        px, maxval = formats.read_pgm(path)
        return px / maxval
    if path.suffix.lower() == ".csv":
        return np.loadtxt(path, delimiter=",")
    entries = _read(path, "input")
    if name not in entries:
        raise ConfigError(f"{path.name} has no entry {name!r} (found {sorted(entries)})", "/eval")
    return entries[name]


def cmd_eval(exp: Experiment, out: Path):
    start = time.perf_counter()
    ev = exp.section("eval")
    est = _entry(exp.path("eval", "estimate", out / "map.scpr"), ev.get("estimate_entry", "x_map"))
    ref = _entry(exp.path("eval", "reference", out / "measurement.scpr"), ev.get("reference_entry", "chi"))
    if est.shape != ref.shape:
        raise ConfigError(f"estimate shape {est.shape} differs from reference {ref.shape}", "/eval")
    misfit = float("nan")
    meas_path = out / "measurement.scpr"
    if meas_path.exists() and est.shape == (exp.sensing().n,) * 2:
        y = formats.read_container(meas_path)["e_scat"]
        misfit = physics.misfit_gradient(est, y, exp.sensing(), allow_negative=True)[0]
    p = inversion.psnr(est, ref) if ref.max() > 0 or np.array_equal(est, ref) else float("nan")
    m = _metrics(out, "eval", psnr=p, ssim=inversion.ssim(est, ref), misfit=misfit,
                 wall_time=time.perf_counter() - start)
    print(json.dumps(m, sort_keys=True))


COMMANDS = {
    "simulate": cmd_simulate,
    "make-dataset": cmd_make_dataset,
    "train": cmd_train,
    "invert": cmd_invert,
    "posterior": cmd_posterior,
    "eval": cmd_eval,
}


def _thread_limit():
    value = os.environ.get("SCATTERFLOW_THREADS")
    if not value:
        return contextlib.nullcontext()
    try:
        limit = int(value)
        if limit < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"SCATTERFLOW_THREADS must be a positive integer, got {value!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=limit)


def build_parser():
    parser = argparse.ArgumentParser(prog="scatterflow", description=__doc__.split("\n\n")[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="experiment JSON file")
    parser.add_argument("--out", help="output directory (default: output_dir from the config)")
    parser.add_argument("--seed-override", action="append", default=[], metavar="NAME=INT",
                        help="replace one of the named seeds; may repeat")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        exp = load(args.config, args.seed_override)
        out = Path(args.out) if args.out else exp.output_dir()
        out.mkdir(parents=True, exist_ok=True)
        with _thread_limit():
            COMMANDS[args.command](exp, out)
    except NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except INVALID_ERRORS as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
