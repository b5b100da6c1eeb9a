"""Command-line front end: ``casimir-films <command> [options]``.

Exit codes: 0 success, 2 validation error, 3 convergence error, 4 I/O error.
Every output embeds the library version, the seed and a hash of the
resolved configuration; identical inputs give byte-identical outputs.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import analysis as an
from . import dielectric as de
from . import instrument as ins
from . import lifshitz as li
from . import surfaces as su

log = logging.getLogger("casimir_films")

EXIT_OK, EXIT_VALIDATION, EXIT_CONVERGENCE, EXIT_IO = 0, 2, 3, 4

_UNITS = {"nm": 1e-9, "um": 1e-6, "µm": 1e-6, "mm": 1e-3, "m": 1.0}


class InputFileError(Exception):
    """Unreadable or malformed input file."""


class ConvergenceFailure(Exception):
    pass


def parse_length(text: str) -> float:
    """``'80nm'``, ``'2.5um'`` or a bare SI value in metres."""
    s = str(text).strip()
    for suffix in ("nm", "um", "µm", "mm", "m"):
        if s.endswith(suffix):
            return float(s[: -len(suffix)]) * _UNITS[suffix]
    return float(s)


def parse_window(text: str) -> tuple[float, float]:
    parts = str(text).split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("window must be 'a_min,a_max'")
    lo, hi = (parse_length(p) for p in parts)
    if not 0 < lo < hi:
        raise argparse.ArgumentTypeError("window needs 0 < a_min < a_max")
    return lo, hi


# ---------------------------------------------------------------------------
# output helpers


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, Path):
        return str(x)
    return x


def resolved_config(args: argparse.Namespace) -> dict:
    skip = {"func", "config", "out", "verbose"}
    return {k: _jsonable(v) for k, v in sorted(vars(args).items()) if k not in skip}


def meta(args) -> dict:
    cfg = resolved_config(args)
    h = hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()
    return {"version": __version__, "seed": args.seed, "config_sha256": h, "config": cfg}


def write_json(path: Path, payload: dict, args) -> None:
    payload = dict(payload)
    payload["meta"] = meta(args)
    path.write_text(json.dumps(_jsonable(payload), sort_keys=True, indent=1) + "\n")


def write_csv(path: Path, header: list[str], rows, args) -> None:
    m = meta(args)
    with open(path, "w", newline="") as fh:
        fh.write(f"# casimir-films {m['version']} seed={m['seed']} config_sha256={m['config_sha256']}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read(loader, path):
    try:
        return loader(path)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        raise InputFileError(str(exc)) from None


def resolve_model(spec: str) -> de.DrudeLorentzModel:
    """Bundled model name (``au``, ``psi``) or a model JSON file, validated on the imaginary axis."""
    if spec.lower() in ("au", "psi"):
        return de.bundled_model(spec.lower())
    model = _read(de.load_model, spec)
    de.validate_imag_axis(model)
    return model


def _lifshitz_config(args) -> li.LifshitzConfig:
    return li.LifshitzConfig(temperature=args.temperature, sphere_radius=args.radius,
                             zero_temperature=args.temperature == 0)


def _a_grid(args) -> np.ndarray:
    lo, hi = parse_length(args.a_min), parse_length(args.a_max)
    if not lo < hi:
        raise ValueError("a-min must be below a-max")
    return np.linspace(lo, hi, args.n_points)


def _materials(plate: de.DrudeLorentzModel, sphere_spec: str, own: de.DrudeLorentzModel) -> li.MaterialAssignment:
    sphere = own if sphere_spec == "same" else resolve_model(sphere_spec)
    return li.MaterialAssignment(plate=plate, sphere=sphere)


# ---------------------------------------------------------------------------
# commands


def cmd_fit_dielectric(args) -> int:
    spectrum = _read(de.read_spectrum_csv, args.spectrum)
    initial = resolve_model(args.initial) if args.initial else None
    out = _out(args)
    try:
        model, report = de.fit_model(spectrum, args.oscillators, initial=initial, n_starts=args.starts, seed=args.seed,
                                      max_iterations=args.max_iterations)
        code = EXIT_OK
    except de.FitError as exc:
        if exc.model is None or not exc.report.parameters:
            raise ConvergenceFailure(str(exc)) from None
        model, report, code = exc.model, exc.report, EXIT_CONVERGENCE
        log.warning("fit did not converge; writing best-effort model")
    de.save_model(model, out / args.model_out)
    write_json(out / "fit_report.json", {"report": report.to_dict(), "model_file": args.model_out}, args)
    print(f"converged={report.converged} residual_norm={report.residual_norm:.6g} "
          f"oscillators={len(model.oscillators)} model={out / args.model_out}")
    return code


def cmd_kk(args) -> int:
    spectrum = _read(de.read_spectrum_csv, args.spectrum)
    tail = resolve_model(args.tail_model) if args.tail_model else None
    xi = np.geomspace(args.xi_min, args.xi_max, args.n_points)
    eps = de.kk_transform(spectrum, xi, tail_model=tail)
    write_csv(_out(args) / "kk.csv", ["xi_rad_per_s", "eps_imag_axis"], zip(xi, eps), args)
    print(f"wrote {args.n_points} points to {Path(args.out) / 'kk.csv'}")
    return EXIT_OK


def cmd_gradient(args) -> int:
    a = _a_grid(args)
    config = _lifshitz_config(args)
    model_a = resolve_model(args.model_a)
    mat_a = _materials(model_a, "same" if args.sphere == "same" else args.sphere, model_a)
    out = _out(args)
    res_a = li.gradient_curve(a, mat_a, config)
    rows = [(r.a, r.value, r.rel_err) for r in res_a]
    write_csv(out / "gradient_A.csv", ["a_m", "dFda_N_per_m", "rel_err"], rows, args)
    summary = {"model_A": args.model_a, "sphere": args.sphere, "window": list(args.window)}
    if args.model_b:
        model_b = resolve_model(args.model_b)
        mat_b = _materials(model_b, args.sphere, model_b)
        res_b = li.gradient_curve(a, mat_b, config)
        write_csv(out / "gradient_B.csv", ["a_m", "dFda_N_per_m", "rel_err"],
                  [(r.a, r.value, r.rel_err) for r in res_b], args)
        gA = np.array([r.value for r in res_a])
        gB = np.array([r.value for r in res_b])
        delta = gB / gA - 1.0
        write_csv(out / "reduction.csv", ["a_m", "dFda_A", "dFda_B", "delta"], zip(a, gA, gB, delta), args)
        wm = li.window_mean(a, delta, args.window)
        summary.update(model_B=args.model_b, window_mean_delta=wm, a_m=a, delta=delta)
        print(f"window mean Delta over {args.window[0] * 1e9:g}-{args.window[1] * 1e9:g} nm: {100 * wm:+.3f}%")
    else:
        print(f"dF/da({a[0] * 1e9:g} nm) = {res_a[0].value:.6e} N/m")
    write_json(out / "gradient_summary.json", summary, args)
    return EXIT_OK


def cmd_corrections(args) -> int:
    a = _a_grid(args)
    R = args.radius
    out = _out(args)
    model = resolve_model(args.model)
    law = li.GradientLaw(li.MaterialAssignment(model, model), _lifshitz_config(args), a_min=10e-9, a_max=3e-6)
    payload = {"model": args.model}
    if args.sphere_map or args.plate_map:
        if not (args.sphere_map and args.plate_map):
            raise ValueError("both --sphere-map and --plate-map are required for roughness")
        smap = _read(su.read_map, args.sphere_map)
        pmap = _read(su.read_map, args.plate_map)
        if not isinstance(smap, su.HeightMap) or not isinstance(pmap, su.HeightMap):
            raise su.GeometryError("roughness needs height maps")
        if args.fit_sphere:
            smap = su.fit_sphere(smap).residual
        if args.peak_cutoff > 0:
            pmap = su.preprocess_peaks(pmap, args.peak_cutoff)
        rough = su.roughness_eta(a, smap, pmap, R, law, n_mc=args.n_mc, seed=args.seed)
        write_csv(out / "eta_rough.csv", ["a_m", "eta", "band_lo", "band_hi"],
                  zip(a, rough.eta, rough.band_lo, rough.band_hi), args)
        payload["rough"] = rough.to_dict()
    if args.sphere_pot or args.plate_pot:
        if not (args.sphere_pot and args.plate_pot):
            raise ValueError("both --sphere-pot and --plate-pot are required for patches")
        sp = _read(su.read_map, args.sphere_pot)
        pp = _read(su.read_map, args.plate_pot)
        if not isinstance(sp, su.PotentialMap) or not isinstance(pp, su.PotentialMap):
            raise su.GeometryError("patch correction needs potential maps")
        patch = su.patch_gradient(a, sp, pp, R, n_mc=args.n_mc, seed=args.seed, smooth_gradient=law)
        write_csv(out / "eta_patch.csv", ["a_m", "eta", "band_lo", "band_hi", "dFda_patch", "dFda_lo", "dFda_hi"],
                  zip(a, patch.eta, patch.band_lo, patch.band_hi, patch.gradient, patch.gradient_lo,
                      patch.gradient_hi), args)
        payload["patch"] = patch.to_dict()
    if len(payload) == 1:
        raise ValueError("no maps given")
    write_json(out / "corrections.json", payload, args)
    print(f"corrections written to {out / 'corrections.json'}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    model = resolve_model(args.model)
    law = li.GradientLaw(li.MaterialAssignment(model, model), a_min=10e-9, a_max=3e-6, scale=args.scale)
    params = ins.CantileverParams()
    plan = ins.SweepPlan(n_sweeps=args.sweeps)
    noise = ins.NoiseModel() if args.noise == "default" else ins.NoiseModel.noiseless()
    if args.a0_jump:
        idx, jump = args.a0_jump.split(":")
        noise = ins.NoiseModel(**{**noise.__dict__, "a0_jumps": ((int(idx), parse_length(jump)),)})
    records = ins.simulate_run(law, params, plan, noise, seed=args.seed)
    out = _out(args)
    ins.write_records(records, out / args.records_out)
    write_json(out / (Path(args.records_out).stem + "_meta.json"), {"n_sweeps": len(records)}, args)
    print(f"wrote {len(records)} sweeps to {out / args.records_out}")
    return EXIT_OK


def _load_runs(paths) -> list[list[ins.SweepRecord]]:
    runs = [_read(ins.read_records, p) for p in paths]
    versions = {r.version for run in runs for r in run}
    if len(versions) > 1:
        raise ins.RecordVersionError(f"mixed record versions {sorted(versions)}")
    return runs


def _pooled_curve(runs, params):
    analyses = [an.analyze_run(run, params) for run in runs]
    if len(analyses) == 1:
        return analyses[0].curve, analyses
    pts = [ra.points for ra in analyses]
    n_sweeps = sum(len(ra.runset.accepted) for ra in analyses)
    curve = an.weighted_running_mean(np.concatenate([p.a for p in pts]), np.concatenate([p.value for p in pts]),
                                     np.concatenate([p.sigma for p in pts]), np.concatenate([p.sigma_a for p in pts]),
                                     max(1, n_sweeps // len(analyses)))
    return curve, analyses


def cmd_analyze(args) -> int:
    params = ins.CantileverParams()
    out = _out(args)
    sample_runs = _load_runs(args.records)
    curve, analyses = _pooled_curve(sample_runs, params)
    ra = analyses[0]
    write_csv(out / "points.csv", ["a_m", "sigma_a_m", "dFda_N_per_m", "sigma", "sweep"],
              zip(ra.points.a, ra.points.sigma_a, ra.points.value, ra.points.sigma, ra.points.sweep), args)
    write_csv(out / "averaged.csv", ["a_m", "value", "sigma"], zip(curve.a, curve.value, curve.sigma), args)
    if args.reference:
        ref_curve, _ = _pooled_curve(_load_runs(args.reference), params)
        mode = "sample_vs_reference"
    else:
        ref_curve, mode = curve, "reference_self_check"
    red = an.relative_reduction(curve, ref_curve, args.window)
    write_csv(out / "reduction.csv", ["a_m", "delta", "sigma"], zip(red.a, red.delta, red.sigma), args)
    rejection = [{"run": i, **entry} for i, a_ in enumerate(analyses) for entry in a_.runset.rejection_log()]
    write_json(out / "reduction_report.json", {"mode": mode, "reduction": red.to_dict(),
                                               "error_budget_100nm": an.error_budget(ra.points),
                                               "rejections": rejection}, args)
    print(f"{mode}: window {args.window[0] * 1e9:g}-{args.window[1] * 1e9:g} nm, "
          f"Delta = {100 * red.window_mean:+.2f} +/- {100 * red.window_sigma:.2f}%")
    return EXIT_OK


def cmd_report(args) -> int:
    summary = _read(lambda p: json.loads(Path(p).read_text()), args.gradient_summary)
    if "delta" not in summary:
        raise ValueError("gradient summary has no reduction (run `gradient` with --model-b)")
    a = np.asarray(summary["a_m"], dtype=float)
    delta = np.asarray(summary["delta"], dtype=float)

    def eta(path, key):
        if not path:
            return None
        d = _read(lambda p: json.loads(Path(p).read_text()), path).get(key)
        if d is None:
            return None
        return su.CorrectionResult(np.asarray(d["a_m"]), np.asarray(d["eta"]), np.asarray(d["band_lo"]),
                                   np.asarray(d["band_hi"]), d["n_accepted"])

    comb = su.combine_corrections(np.ones_like(a), 1.0 + delta,
                                  eta(args.corrections_a, "rough"), eta(args.corrections_b, "rough"),
                                  eta(args.corrections_a, "patch"), eta(args.corrections_b, "patch"),
                                  a_grid=a, window=args.window)
    write_json(_out(args) / "report.json", {"bare_window_mean": li.window_mean(a, delta, args.window),
                                            "combined": comb.to_dict()}, args)
    print(f"{'a [nm]':>8} {'Delta [%]':>10} {'lo':>8} {'hi':>8}")
    for x, d, lo, hi in zip(comb.a_grid, comb.delta, comb.delta_lo, comb.delta_hi):
        print(f"{x * 1e9:8.1f} {100 * d:10.3f} {100 * lo:8.3f} {100 * hi:8.3f}")
    print(f"window mean {100 * comb.window_mean:+.2f}% (+{100 * (comb.window_hi - comb.window_mean):.2f}"
          f"/-{100 * (comb.window_mean - comb.window_lo):.2f})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with option defaults")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--window", type=parse_window, default=li.DEFAULT_WINDOW, help="a_min,a_max, e.g. 80nm,120nm")
    common.add_argument("-v", "--verbose", action="store_true")

    phys = argparse.ArgumentParser(add_help=False)
    phys.add_argument("--temperature", type=float, default=296.0, help="K; 0 selects the zero-temperature integral")
    phys.add_argument("--radius", type=parse_length, default=77.9e-6)
    phys.add_argument("--a-min", default="80nm")
    phys.add_argument("--a-max", default="120nm")
    phys.add_argument("--n-points", type=int, default=9)

    p = argparse.ArgumentParser(prog="casimir-films", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("fit-dielectric", parents=[common], help="fit a Drude-Lorentz model to a spectrum")
    s.add_argument("spectrum")
    s.add_argument("--oscillators", type=int, required=True)
    s.add_argument("--model-out", default="model.json")
    s.add_argument("--initial", help="initial model (au, psi or JSON file)")
    s.add_argument("--starts", type=int, default=8)
    s.add_argument("--max-iterations", type=int, default=2000, help="function evaluations per start")
    s.set_defaults(func=cmd_fit_dielectric)

    s = sub.add_parser("kk", parents=[common], help="Kramers-Kronig transform to the imaginary axis")
    s.add_argument("spectrum")
    s.add_argument("--tail-model")
    s.add_argument("--xi-min", type=float, default=1e13)
    s.add_argument("--xi-max", type=float, default=1e17)
    s.add_argument("--n-points", type=int, default=41)
    s.set_defaults(func=cmd_kk)

    s = sub.add_parser("gradient", parents=[common, phys], help="Casimir gradient curve(s) and reduction")
    s.add_argument("--model-a", default="au")
    s.add_argument("--model-b")
    s.add_argument("--sphere", default="same", help="'same' (sphere = plate material) or a model")
    s.set_defaults(func=cmd_gradient)

    s = sub.add_parser("corrections", parents=[common, phys], help="roughness and patch corrections")
    s.add_argument("--model", default="au")
    s.add_argument("--sphere-map")
    s.add_argument("--plate-map")
    s.add_argument("--sphere-pot")
    s.add_argument("--plate-pot")
    s.add_argument("--n-mc", type=int, default=100)
    s.add_argument("--fit-sphere", action="store_true", help="remove a spherical fit from the sphere map")
    s.add_argument("--peak-cutoff", type=parse_length, default=0.0, help="mask plate peaks above this height")
    s.set_defaults(func=cmd_corrections)

    s = sub.add_parser("simulate", parents=[common], help="simulate distance sweeps")
    s.add_argument("--model", default="au")
    s.add_argument("--scale", type=float, default=1.0, help="factor on the gradient law (0.96 plants -4%%)")
    s.add_argument("--sweeps", type=int, default=35)
    s.add_argument("--noise", choices=("default", "none"), default="default")
    s.add_argument("--a0-jump", help="'sweep:size', e.g. 10:8nm")
    s.add_argument("--records-out", default="records.jsonl")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("analyze", parents=[common], help="analyze sweep records")
    s.add_argument("records", nargs="+")
    s.add_argument("--reference", nargs="*", default=[])
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("report", parents=[common], help="combine a reduction with corrections")
    s.add_argument("gradient_summary")
    s.add_argument("--corrections-a")
    s.add_argument("--corrections-b")
    s.set_defaults(func=cmd_report)
    return p


def _apply_config(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not getattr(args, "config", None):
        return args
    cfg = _read(lambda p: json.loads(Path(p).read_text()), args.config)
    if not isinstance(cfg, dict):
        raise InputFileError(f"{args.config}: config must be a JSON object")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions}
    unknown = set(cfg) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    sub.set_defaults(**{k.replace("-", "_"): v for k, v in cfg.items()})
    args = parser.parse_args(argv)
    if isinstance(args.window, list):
        args.window = tuple(args.window)
    return args


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except InputFileError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (InputFileError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConvergenceFailure, li.LifshitzConvergenceError, su.SamplingExhaustedError, ins.RootError) as exc:
        print(f"convergence error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (ValueError, de.DielectricError, li.LifshitzError, su.SurfaceError, an.AnalysisError,
            ins.InstrumentError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
