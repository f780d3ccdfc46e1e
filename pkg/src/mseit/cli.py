"""Command-line entry points: mesh, phantom, pca-build, simulate, invert, kappa, report.

Every option can also come from ``--config`` (JSON or ``key = value`` lines);
explicit flags win over the file, the file wins over built-in defaults.
Relative output paths are resolved against ``$MSEIT_OUTPUT_ROOT`` when set.
Each command writes ``<output>.manifest.json`` next to its main output.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

OUTPUT_ROOT_ENV = "MSEIT_OUTPUT_ROOT"
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")

# config-file spellings accepted in addition to the option names
ALIASES = {
    "N_max": "n_max",
    "nmax": "n_max",
    "seeds": "seed",
    "output_directory": "out_dir",
    "output_dir": "out_dir",
    "mesh_path": "mesh",
    "basis_path": "basis",
    "data_path": "data",
}


class UsageError(Exception):
    """Bad flags or configuration (exit code 2)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


class _Command:
    """Collects the options of one subcommand with their defaults.

    argparse sees ``None`` as every default so that explicitly given flags
    can be told apart from values that should come from the config file.
    """

    def __init__(self, sub, name, help_):
        self.parser = sub.add_parser(name, help=help_)
        self.parser.set_defaults(command=name)
        self.parser.add_argument("--config", help="JSON or key = value file with option values")
        self.defaults = {}
        self.required = set()

    def add(self, flag, default=None, required=False, **kw):
        dest = flag.lstrip("-").replace("-", "_")
        self.defaults[dest] = default
        if required:
            self.required.add(dest)
        if kw.get("action") == "store_true":
            kw = dict(kw, action="store_const", const=True)
        self.parser.add_argument(flag, dest=dest, default=None, **kw)


def _layout_options(cmd):
    cmd.add("--electrodes", 16, type=int, help="number of electrodes m")
    cmd.add("--half-width", 0.12, type=float, help="electrode half-width w (radians)")
    cmd.add("--impedance", 0.1, type=float, help="contact impedance Z")


def build_parser():
    parser = _Parser(prog="mseit", description=__doc__.split("\n")[0])
    parser.add_argument("--threads", type=int, default=None, help="cap BLAS/OpenMP threads")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    cmds = {}

    c = cmds["mesh"] = _Command(sub, "mesh", "build a disc mesh")
    c.add("--radius", required=True, type=float)
    c.add("--target-elements", required=True, type=int)
    _layout_options(c)
    c.add("--out", "mesh.txt")

    c = cmds["phantom"] = _Command(sub, "phantom", "rasterize a ground-truth conductivity")
    c.add("--mesh", required=True)
    c.add("--preset", "three-spots", choices=["three-spots", "mixed-spots"])
    c.add("--spec", help="JSON circles spec (overrides --preset)")
    c.add("--raster", help="binary PGM mask with .json extent sidecar (overrides --spec)")
    c.add("--low", 0.2, type=float)
    c.add("--high", 0.4, type=float)
    c.add("--scale", 1.0, type=float, help="scale preset coordinates (disc radius / 0.1)")
    c.add("--out", "phantom.csv")

    c = cmds["pca-build"] = _Command(sub, "pca-build", "sample realizations and build the PCA basis")
    c.add("--mesh", required=True)
    c.add("--realizations", 1000, type=int)
    c.add("--energy", 0.99, type=float)
    c.add("--seed", 0, type=int)
    c.add("--max-spots", 7, type=int)
    c.add("--out", "basis.npz")

    c = cmds["simulate"] = _Command(sub, "simulate", "synthesize boundary currents")
    c.add("--mesh", required=True)
    c.add("--phantom", required=True, help="field CSV written by the phantom command")
    _layout_options(c)
    c.add("--rotations", None, type=int)
    c.add("--noise-pct", 0.0, type=float, help="noise level in percent")
    c.add("--noise-mode", "multiplicative", choices=["multiplicative", "additive_max"])
    c.add("--seed", 0, type=int)
    c.add("--out", "data.csv")

    c = cmds["invert"] = _Command(sub, "invert", "run the multiscale reconstruction")
    c.add("--mesh", required=True)
    c.add("--basis", required=True)
    c.add("--data", required=True)
    c.add("--truth", help="true field CSV for the L2 error column")
    _layout_options(c)
    c.add("--fine-only", False, action="store_true")
    c.add("--no-tuned-pca", False, action="store_true")
    c.add("--n-max", 5, type=int)
    c.add("--n-s", 5, type=int)
    c.add("--max-iterations", 2000, type=int)
    c.add("--max-evaluations", 100_000, type=int)
    c.add("--alpha-max", 1.0, type=float)
    c.add("--eps-f", 1e-9, type=float)
    c.add("--eps-c", 0.0, type=float)
    c.add("--delta-zeta", 1e-3, type=float)
    c.add("--beta-c", 0.0, type=float)
    c.add("--sigma-l-bar", 0.2, type=float)
    c.add("--sigma-h-bar", 0.4, type=float)
    c.add("--sigma0", 0.3, type=float)
    c.add("--adjoint", "consistent", choices=["consistent", "literal"])
    c.add("--seed", 0, type=int, help="recorded in the manifest; the run itself is deterministic")
    c.add("--out-dir", "run")

    c = cmds["kappa"] = _Command(sub, "kappa", "gradient verification test")
    c.add("--mesh", required=True)
    c.add("--data", required=True)
    _layout_options(c)
    c.add("--mode", "cheap", choices=["cheap", "expensive"])
    c.add("--space", "sigma", choices=["sigma", "xi"])
    c.add("--basis", help="PCA basis (needed for --space xi)")
    c.add("--components", None, type=int, help="active PCA components (xi) or leading coordinates tested (expensive)")
    c.add("--epsilon", 1e-8, type=float)
    c.add("--sigma0", 0.3, type=float)
    c.add("--adjoint", "consistent", choices=["consistent", "literal"])
    c.add("--seed", 0, type=int)
    c.add("--out", "kappa.csv")

    c = cmds["report"] = _Command(sub, "report", "summarize history CSVs")
    c.add("--history", required=True, nargs="+")
    c.add("--out", "report.csv")
    return parser, cmds


def read_config(path) -> dict:
    """JSON object or ``key = value`` lines (``#`` comments); keys normalized."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if text.lstrip().startswith("{"):
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from exc
    else:
        raw = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{n}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            try:
                raw[key] = json.loads(value)
            except json.JSONDecodeError:
                raw[key] = value
    out = {}
    for key, value in raw.items():
        key = ALIASES.get(key, key)
        out[ALIASES.get(key.replace("-", "_").lower(), key.replace("-", "_").lower())] = value
    return out


def resolve(args, cmd: _Command) -> dict:
    """Merge flags, config file and defaults into one options dict."""
    config = read_config(args.config) if args.config else {}
    unknown = sorted(set(config) - set(cmd.defaults))
    if unknown:
        raise UsageError(f"unknown config key: {unknown[0]}")
    opts = {}
    for dest, default in cmd.defaults.items():
        value = getattr(args, dest)
        if value is None:
            value = config.get(dest, default)
        opts[dest] = value
    missing = [d for d in cmd.required if opts[d] is None]
    if missing:
        raise UsageError(f"missing required option --{missing[0].replace('_', '-')}")
    opts["config"] = args.config
    return opts


def output_path(p) -> Path:
    p = Path(p)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def write_manifest(main_output: Path, command: str, opts: dict, outputs, started: float) -> Path:
    """Atomic JSON record of a run; paths relative to the output's directory."""
    from . import __version__

    base = main_output.parent if main_output.suffix else main_output
    path = (main_output.with_name(main_output.name + ".manifest.json") if main_output.suffix
            else main_output / "manifest.json")

    def rel(p):
        try:
            return os.path.relpath(Path(p).resolve(), base.resolve())
        except ValueError:
            return str(p)

    manifest = {
        "command": command,
        "config": None if opts.get("config") is None else rel(opts["config"]),
        "seeds": {k: v for k, v in opts.items() if k == "seed"},
        "options": {k: v for k, v in opts.items() if k != "config"},
        "outputs": [rel(p) for p in outputs],
        "version": __version__,
        "wall_clock_seconds": round(time.time() - started, 3),
    }
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    os.replace(tmp, path)
    return path


# ---------------------------------------------------------------- field files


def write_field_csv(field, path) -> None:
    import numpy as np

    with Path(path).open("w") as fh:
        fh.write("element,value\n")
        for i, v in enumerate(np.asarray(field, dtype=float)):
            fh.write(f"{i},{float(v)!r}\n")


def read_field_csv(path, n_elements=None):
    import numpy as np

    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if rows.shape[1] != 2:
        raise ValueError(f"{path}: expected columns element,value")
    order = rows[:, 0].astype(int)
    field = np.empty(len(order))
    field[order] = rows[:, 1]
    if n_elements is not None and len(field) != n_elements:
        raise ValueError(f"{path}: {len(field)} values for a mesh of {n_elements} elements")
    return field


def _layout(opts):
    from .geometry import ElectrodeLayout

    return ElectrodeLayout(opts["electrodes"], opts["half_width"], opts["impedance"])


def _input(path, what):
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} file not found: {p}")
    return p


# ---------------------------------------------------------------- commands


def cmd_mesh(opts):
    from .geometry import build_disc_mesh, coverage_fraction, save_mesh

    layout = _layout(opts)
    mesh = build_disc_mesh(opts["radius"], opts["target_elements"], layout)
    out = output_path(opts["out"])
    save_mesh(mesh, out)
    print(f"elements {mesh.n_elements} vertices {mesh.n_vertices} coverage {coverage_fraction(layout):.4f} -> {out}")
    return out, [out]


def cmd_phantom(opts):
    from .geometry import load_mesh
    from .phantoms import MIXED_SPOTS, THREE_SPOTS, import_raster, make_circles_phantom, scaled_spec, spec_from_dict

    mesh = load_mesh(_input(opts["mesh"], "mesh"))
    if opts["raster"]:
        field = import_raster(_input(opts["raster"], "raster"), mesh, opts["low"], opts["high"])
    else:
        if opts["spec"]:
            spec = spec_from_dict(json.loads(_input(opts["spec"], "spec").read_text()))
        else:
            spec = scaled_spec(THREE_SPOTS if opts["preset"] == "three-spots" else MIXED_SPOTS, opts["scale"])
        field = make_circles_phantom(spec, mesh)
    out = output_path(opts["out"])
    write_field_csv(field, out)
    print(f"phantom values {sorted(set(field.round(12).tolist()))} -> {out}")
    return out, [out]


def cmd_pca_build(opts):
    from .geometry import load_mesh
    from .pca import RealizationParams, build_basis, generate_realizations, save_basis

    mesh = load_mesh(_input(opts["mesh"], "mesh"))
    params = RealizationParams(n_realizations=opts["realizations"], max_spots=opts["max_spots"])
    ens = generate_realizations(params, mesh, opts["seed"])
    basis = build_basis(ens, opts["energy"], areas=mesh.element_areas)
    out = output_path(opts["out"])
    save_basis(basis, out)
    print(f"components {basis.max_components} of {len(basis.singular_values)} at energy {opts['energy']} -> {out}")
    return out, [out]


def cmd_simulate(opts):
    from .geometry import load_mesh
    from .objective import REFERENCE_DRIVE, save_measurements
    from .phantoms import NoiseSpec, add_noise, simulate_data

    mesh = load_mesh(_input(opts["mesh"], "mesh"))
    layout = _layout(opts)
    truth = read_field_csv(_input(opts["phantom"], "phantom"), mesh.n_elements)
    data = simulate_data(truth, mesh, layout, REFERENCE_DRIVE, opts["rotations"])
    data = add_noise(data, NoiseSpec(opts["noise_pct"] / 100.0, opts["seed"], opts["noise_mode"]))
    out = output_path(opts["out"])
    save_measurements(data, out)
    print(f"{data.targets.size} measurements (noise {opts['noise_pct']}%) -> {out}")
    return out, [out]


def cmd_invert(opts):
    from .driver import DriverConfig, Problem, SwitchSchedule, run
    from .geometry import load_mesh
    from .objective import RegularizationConfig, load_measurements
    from .pca import load_basis
    from .phantoms import write_field_pgm

    mesh = load_mesh(_input(opts["mesh"], "mesh"))
    basis = load_basis(_input(opts["basis"], "basis"))
    if len(basis.mean) != mesh.n_elements:
        raise UsageError("basis and mesh have different element counts")
    data = load_measurements(_input(opts["data"], "data"))
    truth = read_field_csv(_input(opts["truth"], "truth"), mesh.n_elements) if opts["truth"] else None
    schedule = SwitchSchedule(opts["n_s"], opts["eps_f"], opts["eps_c"], opts["max_iterations"],
                              opts["max_evaluations"], opts["alpha_max"])
    reg = None
    if opts["beta_c"] > 0:
        reg = RegularizationConfig(opts["beta_c"], opts["sigma_l_bar"], opts["sigma_h_bar"])
    config = DriverConfig(
        n_max=opts["n_max"], tuned_pca=not opts["no_tuned_pca"], fine_only=bool(opts["fine_only"]),
        sigma0=opts["sigma0"], delta_zeta=opts["delta_zeta"], adjoint_variant=opts["adjoint"], regularization=reg,
    )
    out_dir = output_path(Path(opts["out_dir"]) / "history.csv").parent
    history = out_dir / "history.csv"
    state = run(Problem(mesh, _layout(opts), basis, data, truth), schedule, config, history)
    outputs = [history]
    fields = {"fine": state.sigma_fine}
    if state.sigma_coarse is not None:
        fields["coarse"] = state.sigma_coarse
    for name, f in fields.items():
        write_field_csv(f, out_dir / f"sigma_{name}.csv")
        write_field_pgm(f, mesh, out_dir / f"sigma_{name}.pgm")
        outputs += [out_dir / f"sigma_{name}.csv", out_dir / f"sigma_{name}.pgm"]
    if state.pmap is not None:
        with (out_dir / "partition.csv").open("w") as fh:
            fh.write("element,subset\n")
            fh.writelines(f"{i},{s}\n" for i, s in enumerate(state.pmap.assignment))
        outputs.append(out_dir / "partition.csv")
    summary = {
        "status": state.status,
        "iterations": state.k,
        "objective_evaluations": state.n_evals,
        "regions": state.n_regions,
        "zeta": None if state.zeta is None else state.zeta.vector.tolist(),
        "switches": [list(s) for s in state.switches],
    }
    if truth is not None:
        from .diagnostics import l2_error

        summary["fine_l2_error"] = l2_error(state.sigma_fine, truth, mesh)
        if state.sigma_coarse is not None:
            summary["coarse_l2_error"] = l2_error(state.sigma_coarse, truth, mesh)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    outputs.append(out_dir / "summary.json")
    print(f"{state.status} after {state.k} iterations, {state.n_evals} objective evaluations -> {out_dir}")
    if state.status.startswith("failed"):
        raise RuntimeError(state.status)
    return out_dir, outputs


def cmd_kappa(opts):
    import numpy as np

    from .adjoint import sigma_gradient
    from .diagnostics import kappa_cheap, kappa_expensive, write_kappa_csv
    from .geometry import load_mesh
    from .objective import evaluate, load_measurements
    from .pca import load_basis, project_gradient, to_sigma, to_xi, XiVector

    mesh = load_mesh(_input(opts["mesh"], "mesh"))
    layout = _layout(opts)
    data = load_measurements(_input(opts["data"], "data"))
    areas = mesh.element_areas

    def J_sigma(s):
        return evaluate(s, data, mesh, layout).J

    def g_sigma(s):
        return sigma_gradient(evaluate(s, data, mesh, layout), data, mesh, layout, opts["adjoint"])

    sigma0 = np.full(mesh.n_elements, opts["sigma0"])
    if opts["space"] == "sigma":
        J, grad, x0 = J_sigma, g_sigma, sigma0
        inner = lambda g, d: float(np.sum(g * d * areas))  # noqa: E731
        weights = areas
    else:
        if not opts["basis"]:
            raise UsageError("--space xi needs --basis")
        basis = load_basis(_input(opts["basis"], "basis"))
        n = basis.max_components if opts["components"] is None else opts["components"]
        if not 1 <= n <= basis.max_components:
            raise UsageError(f"--components must lie in 1..{basis.max_components}")

        def lift(v):
            c = np.zeros(basis.max_components)
            c[:n] = v
            return XiVector(c, n)

        J = lambda v: J_sigma(to_sigma(lift(v), basis))  # noqa: E731
        grad = lambda v: project_gradient(g_sigma(to_sigma(lift(v), basis)), basis, n, lift(v))[:n]  # noqa: E731
        x0 = to_xi(sigma0, basis, n).coefficients[:n]
        inner, weights = None, None
    if opts["mode"] == "cheap":
        report = kappa_cheap(J, grad, x0, inner=inner, seed=opts["seed"])
        comps = None
    else:
        comps = None
        if opts["space"] == "sigma" and opts["components"] is not None:
            comps = np.arange(min(opts["components"], len(x0)))
        report = kappa_expensive(J, grad, x0, opts["epsilon"], comps, weights)
    out = output_path(opts["out"])
    write_kappa_csv(report, out, comps)
    if report.mode == "cheap":
        print(f"plateau {report.plateau_decades(1e-3):.2f} decades at |kappa-1| <= 1e-3, min |kappa-1| {report.plateau_min():.2e} -> {out}")
    else:
        print(f"{len(report.kappa_values)} components, median |kappa-1| {np.nanmedian(np.abs(report.kappa_values - 1)):.2e} -> {out}")
    return out, [out]


def cmd_report(opts):
    import math

    from .driver import read_history

    out = output_path(opts["out"])
    rows = []
    for path in opts["history"]:
        hist = read_history(_input(path, "history"))
        if not hist:
            raise ValueError(f"{path}: empty history")
        last = hist[-1]
        fine = [h for h in hist if h.scale == "fine"]
        coarse = [h for h in hist if h.scale == "coarse"]
        rows.append({
            "history": path,
            "iterations": last.k,
            "final_scale": last.scale,
            "final_l2_error": last.l2_error,
            "final_fine_error": fine[-1].l2_error if fine else math.nan,
            "final_coarse_error": coarse[-1].l2_error if coarse else math.nan,
            "min_l2_error": min(h.l2_error for h in hist),
            "final_J_fine": last.J_fine,
        })
    keys = list(rows[0])
    with out.open("w") as fh:
        fh.write(",".join(keys) + "\n")
        for r in rows:
            fh.write(",".join(str(r[k]) for k in keys) + "\n")
    for r in rows:
        print(f"{r['history']}: k={r['iterations']} final error {r['final_l2_error']:.5g} "
              f"(fine {r['final_fine_error']:.5g}, coarse {r['final_coarse_error']:.5g}) min {r['min_l2_error']:.5g}")
    return out, [out]


COMMANDS = {
    "mesh": cmd_mesh,
    "phantom": cmd_phantom,
    "pca-build": cmd_pca_build,
    "simulate": cmd_simulate,
    "invert": cmd_invert,
    "kappa": cmd_kappa,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser, cmds = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.threads is not None:
            if args.threads < 1:
                raise UsageError("--threads must be positive")
            for var in THREAD_VARS:
                os.environ[var] = str(args.threads)
        opts = resolve(args, cmds[args.command])
        started = time.time()
        main_out, outputs = COMMANDS[args.command](opts)
        write_manifest(Path(main_out), args.command, opts, outputs, started)
    except UsageError as exc:
        print(f"mseit: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report and exit 1
        print(f"mseit: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
