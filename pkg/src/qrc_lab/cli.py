"""Command-line front end: ``qrc-lab {catalog,analyze,benchmark,crosscheck}``.

Exit codes: 0 ok, 1 error, 2 indeterminate verdicts, 3 oracle refused.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import math
import os
import sys
import tempfile
from pathlib import Path

import jsonschema
import numpy as np

from .dynamics import (
    BosonicDrive,
    DefectiveLiouvillianError,
    DriveGenerator,
    InputSignal,
    evolve,
    linear_coupling,
    spectral_evolve,
)
from .encodings import (
    GaussianChannel,
    affine_weights,
    channel_mixture,
    coherent_reinit,
    displacement_encode,
    parameterized_unitary,
    reinit_mixed,
    reinit_pure_sqrt,
    squeezed_reinit,
    unitary_channel,
)
from .linearity import PriorEnsemble, Tolerances, default_grid, probe_continuous, probe_discrete
from .operators import (
    SIGMA_MINUS,
    DensityMatrix,
    embed,
    expectation_vector,
    make_basis,
    pauli_string,
    random_ginibre_state,
)
from .reservoir import ReservoirConfig, ising_unitary, sine_estimation, stm_capacity

EXIT_OK, EXIT_ERROR, EXIT_INDETERMINATE, EXIT_REFUSED = 0, 1, 2, 3
SCHEMA_VERSION = 1

CATALOG = (
    {"kind": "reinit-pure-sqrt", "family": "discrete", "system": "qubits",
     "expected": "nonlinear(X)", "note": "<Z> = 1 - 2u is linear, <X> = 2 sqrt(u(1-u)) is not"},
    {"kind": "reinit-mixed", "family": "discrete", "system": "qubits",
     "expected": "linear", "note": "incoherent populations (1-u, u)"},
    {"kind": "channel-mixture", "family": "discrete", "system": "qubits",
     "expected": "linear", "note": "fixed channels mixed with weights affine in u"},
    {"kind": "parameterized-unitary", "family": "discrete", "system": "qubits",
     "expected": "nonlinear", "note": "rotation angle linear in u gives cosine-law nodes"},
    {"kind": "displacement", "family": "discrete", "system": "bosonic",
     "expected": "linear(X,P)", "note": "means shift by sqrt2 (Re beta, Im beta)"},
    {"kind": "coherent-reinit", "family": "discrete", "system": "bosonic",
     "expected": "linear(X,P)", "note": "coherent state with amplitude linear in u"},
    {"kind": "squeezed-reinit", "family": "discrete", "system": "bosonic",
     "expected": "nonlinear(X^2,P^2)", "note": "covariance depends on cosh/sinh of 2r(u)"},
    {"kind": "hamiltonian-drive", "family": "continuous", "system": "qubits",
     "expected": "nonlinear", "note": "finite-dimensional drives cannot be linear encodings"},
    {"kind": "bosonic-drive", "family": "continuous", "system": "bosonic",
     "expected": "linear(X,P) for piecewise-constant input",
     "note": "smooth inputs add a derivative-driven nonlinear term"},
)
_KINDS = [c["kind"] for c in CATALOG]
_BOSONIC = {c["kind"] for c in CATALOG if c["system"] == "bosonic"}

_num = {"type": "number"}
_obj = lambda props, **kw: {"type": "object", "properties": props, "additionalProperties": False, **kw}

CONFIG_SCHEMA = _obj({
    "schema_version": {"const": SCHEMA_VERSION},
    "seed": {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1},
    "encoding": _obj({
        "kind": {"enum": _KINDS},
        "params": {"type": "object"},
    }, required=["kind"]),
    "system": _obj({
        "qubits": {"type": "integer", "minimum": 1, "maximum": 5},
        "target": {"type": "integer", "minimum": 0},
        "generator": {"enum": ["encoding", "random-damped", "zero", "cascade"]},
        "u": _num,
        "t": {"type": "number", "minimum": 0},
    }),
    "probe": _obj({
        "grid": {"oneOf": [
            {"type": "array", "items": {"anyOf": [_num, {"type": "array", "items": _num}]}, "minItems": 3},
            _obj({"points": {"type": "integer", "minimum": 3}, "margin": _num}),
        ]},
        "priors": _obj({
            "count": {"type": "integer", "minimum": 1},
            "kind": {"enum": ["ginibre-mixed", "haar-pure", "product-basis", "gaussian"]},
        }),
        "tolerances": _obj({"linear": {"type": "number", "exclusiveMinimum": 0},
                            "nonlinear": {"type": "number", "exclusiveMinimum": 0}}),
        "fit_mode": {"enum": ["auto", "joint", "per-prior"]},
        "read_times": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
        "dt": {"type": "number", "exclusiveMinimum": 0},
        "indeterminate_exit": {"type": "boolean"},
    }),
    "reservoir": _obj({
        "mode": {"enum": ["discrete", "continuous"]},
        "qubits": {"type": "integer", "minimum": 1, "maximum": 5},
        "tau": _num, "J": _num, "h": _num,
        "gamma": {"type": "number", "minimum": 0},
        "force": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2},
    }),
    "task": _obj({
        "kind": {"enum": ["stm", "sine-estimation"]},
        "delays": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
        "length": {"type": "integer", "minimum": 1},
        "encodings": {"type": "array", "items": {"enum": ["amplitude", "phase"]}, "minItems": 1},
        "grid": {"type": "array", "items": _num, "minItems": 3},
        "amplitude": _num, "phase": _num, "omega": {"type": "number", "exclusiveMinimum": 0},
        "lambda": {"type": "number", "exclusiveMinimum": 0},
    }, required=["kind"]),
    "output": _obj({
        "directory": {"type": "string"},
        "formats": {"type": "array", "items": {"enum": ["json", "csv"]}, "minItems": 1},
    }),
}, required=["schema_version", "seed", "encoding"])


class ConfigError(ValueError):
    pass


def load_config(path) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(map(str, exc.absolute_path)) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from exc
    return cfg


# --------------------------------------------------------------------------
# builders
# --------------------------------------------------------------------------


def _complex(pair, default=(1.0, 0.0)) -> complex:
    re, im = pair if pair is not None else default
    return complex(re, im)


def _qubit_dims(cfg) -> tuple[int, ...]:
    return (2,) * cfg.get("system", {}).get("qubits", 1)


def build_channel(cfg):
    """Discrete encodings: ParamChannel or GaussianChannel."""
    enc = cfg["encoding"]
    kind, p = enc["kind"], enc.get("params", {})
    dims = _qubit_dims(cfg)
    target = cfg.get("system", {}).get("target", 0)
    if kind == "reinit-pure-sqrt":
        return reinit_pure_sqrt(target, dims)
    if kind == "reinit-mixed":
        return reinit_mixed(target, dims)
    if kind == "channel-mixture":
        labels = p.get("channels", ["I" * len(dims), "X" * len(dims)])
        if len(labels) != 2:
            raise ConfigError("channel-mixture takes exactly two Pauli-string channels")
        chans = [unitary_channel(pauli_string(lbl)) for lbl in labels]
        return channel_mixture(chans, affine_weights([1.0, 0.0], [-1.0, 1.0]), dims)
    if kind == "parameterized-unitary":
        label = p.get("generator", "X" + "I" * (len(dims) - 1))
        scale = float(p.get("scale", 1.0))
        return parameterized_unitary(pauli_string(label) / 2, lambda u: scale * u[0], dims)
    if kind == "displacement":
        beta = _complex(p.get("beta"))
        return displacement_encode(lambda u: beta * u[0])
    if kind == "coherent-reinit":
        beta = _complex(p.get("beta"))
        return coherent_reinit(lambda u: beta * u[0])
    if kind == "squeezed-reinit":
        scale = float(p.get("r_scale", 0.5))
        return squeezed_reinit(lambda u: scale * u[0], float(p.get("phi", 0.0)))
    raise ConfigError(f"{kind} is a continuous encoding")


def _protocol(name: str):
    if name == "constant":
        return lambda u: InputSignal.constant(u)
    if name == "ramp":
        return lambda u: InputSignal.analytic(lambda t, c=float(u[0]): c * t,
                                              derivative=lambda t, c=float(u[0]): c)
    raise ConfigError(f"unknown protocol {name!r}")


def build_drive(cfg):
    """Continuous encodings: (system, protocol)."""
    enc = cfg["encoding"]
    kind, p = enc["kind"], enc.get("params", {})
    protocol = _protocol(p.get("protocol", "constant"))
    if kind == "bosonic-drive":
        c = _complex(p.get("force"))
        return BosonicDrive(lambda u: c * u[0], float(p.get("gamma", 1.0))), protocol
    if kind == "hamiltonian-drive":
        dims = _qubit_dims(cfg)
        n = len(dims)
        h0 = sum((float(v) * pauli_string(k) for k, v in p.get("h0", {}).items()),
                 np.zeros((2 ** n, 2 ** n), dtype=complex))
        label = p.get("drive", "X" + "I" * (n - 1))
        drive = ((pauli_string(label) / 2, linear_coupling([float(p.get("coupling", 1.0))])),)
        rate = float(p.get("gamma", 0.0))
        jumps = tuple((embed(SIGMA_MINUS, q, dims), rate) for q in range(n)) if rate > 0 else ()
        return DriveGenerator(h0, drive, jumps), protocol
    raise ConfigError(f"{kind} is a discrete encoding")


def _basis_for(kind: str, cfg):
    if kind in _BOSONIC:
        return make_basis("fock-moment", 2)
    return make_basis("pauli", len(_qubit_dims(cfg)))


def _grid(cfg, domain):
    g = cfg.get("probe", {}).get("grid")
    if isinstance(g, list):
        return np.array(g, dtype=float)
    g = g or {}
    return default_grid(domain, g.get("points", 21), g.get("margin", 0.05))


def _tolerances(cfg) -> Tolerances:
    t = cfg.get("probe", {}).get("tolerances", {})
    return Tolerances(t.get("linear", 1e-8), t.get("nonlinear", 1e-4))


# --------------------------------------------------------------------------
# output
# --------------------------------------------------------------------------


def _json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])
    return buf.getvalue()


def write_outputs(out_dir: Path, files: dict[str, str]) -> None:
    """Write every file via temp file + rename so readers never see partial output."""
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        fd, tmp = tempfile.mkstemp(dir=out_dir, prefix=f".{name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "w", newline="") as fh:
                fh.write(text)
            os.replace(tmp, out_dir / name)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise


def _select(files: dict[str, str], fmt: str) -> dict[str, str]:
    if fmt == "both":
        return files
    return {k: v for k, v in files.items() if k.endswith("." + fmt)}


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_catalog(args) -> int:
    if getattr(args, "format", "both") == "json":
        print(_json_text(list(CATALOG)), end="")
        return EXIT_OK
    width = max(len(k) for k in _KINDS)
    for c in CATALOG:
        print(f"{c['kind']:<{width}}  {c['family']:<10}  {c['system']:<7}  "
              f"expected-{c['expected']}  {c['note']}")
    return EXIT_OK


def run_analysis(cfg, threads: int = 1):
    """Returns (report, files, indeterminate)."""
    kind = cfg["encoding"]["kind"]
    seed = cfg["seed"]
    probe = cfg.get("probe", {})
    basis = _basis_for(kind, cfg)
    tol = _tolerances(cfg)
    family = next(c["family"] for c in CATALOG if c["kind"] == kind)
    if family == "discrete":
        channel = build_channel(cfg)
        pri = probe.get("priors", {})
        gaussian = isinstance(channel, GaussianChannel)
        priors = PriorEnsemble(pri.get("count", 20),
                               pri.get("kind", "gaussian" if gaussian else "ginibre-mixed"),
                               seed, () if gaussian else channel.dims)
        report = probe_discrete(channel, basis, priors, _grid(cfg, channel.domain), tol,
                                probe.get("fit_mode", "auto"), threads)
    else:
        system, protocol = build_drive(cfg)
        read_times = probe.get("read_times", [1.0])
        report = probe_continuous(system, protocol, basis, read_times, _grid(cfg, ((0.0, 1.0),)),
                                  dt=probe.get("dt"), tolerances=tol, encoding=kind)
    report = dataclasses.replace(report, metadata={**report.metadata, "seed": seed})
    n_in = len(report.u_grid[0])
    rows = []
    for node in report.nodes:
        for u, v, r in zip(report.u_grid, node.values, node.residuals):
            rows.append([*map(float, u), node.index, float(np.real(v)), float(np.real(r))])
    header = [f"u_{i}" for i in range(n_in)] + ["node_index", "value", "residual"]
    files = {"report.json": report.to_json() + "\n", "nodes.csv": _csv_text(header, rows)}
    return report, files, report.any_indeterminate


def cmd_analyze(args) -> int:
    cfg = _prepare(args)
    report, files, indeterminate = run_analysis(cfg, args.threads)
    write_outputs(_out_dir(args, cfg), _select(files, args.format))
    for node in report.nodes:
        print(f"{node.label:<10} {node.verdict:<13} scaled residual {node.scaled_residual:.3e}")
    if indeterminate and cfg.get("probe", {}).get("indeterminate_exit", True):
        return EXIT_INDETERMINATE
    return EXIT_OK


def run_benchmark(cfg):
    task = cfg.get("task")
    if task is None:
        raise ConfigError("benchmark needs a 'task' section")
    seed = cfg["seed"]
    res = cfg.get("reservoir", {})
    lam = task.get("lambda", 1e-8)
    if task["kind"] == "stm":
        channel = build_channel(cfg)
        if isinstance(channel, GaussianChannel):
            raise ConfigError("stm benchmark needs a qubit encoding")
        n = res.get("qubits", len(channel.dims))
        if n != len(channel.dims):
            raise ConfigError("reservoir.qubits must match system.qubits")
        U = ising_unitary(n, res.get("tau", 1.0), res.get("J", 1.0), res.get("h", 0.5), seed)
        config = ReservoirConfig("discrete", make_basis("pauli", n), channel.dims, channel,
                                 unitary_channel(U), seed=seed)
        delays = task.get("delays", list(range(6)))
        result = stm_capacity(config, delays=delays, length=task.get("length"), lam=lam)
        rows = [[int(d), float(r)] for d, r in zip(result.delays, result.r2)]
        summary = {"task": "stm", "capacity": result.capacity, "washout": result.washout,
                   "r2": dict(zip(map(str, result.delays.tolist()), result.r2.tolist()))}
        return {"benchmark.csv": _csv_text(["delay", "r2"], rows)}, summary
    force = _complex(res.get("force"))
    config = ReservoirConfig("continuous", make_basis("fock-moment", 2),
                             drive=BosonicDrive(lambda u: force * u[0], res.get("gamma", 1.0)),
                             seed=seed)
    rows, summary = [], {"task": "sine-estimation", "results": {}}
    for enc in task.get("encodings", ["amplitude", "phase"]):
        grid = task.get("grid") or (np.linspace(0.1, 1.0, 21) if enc == "amplitude"
                                    else np.linspace(0.1, 3.0, 21)).tolist()
        rep = sine_estimation(config, enc, grid, task.get("amplitude", 1.0), task.get("phase", 0.0),
                              task.get("omega", 2 * math.pi), lam=lam)
        rows.append([enc, rep.nmse])
        summary["results"][enc] = {"nmse": rep.nmse, "node_linearity": rep.first_moment_verdict,
                                   "verdicts": rep.linearity.verdicts}
    return {"benchmark.csv": _csv_text(["param", "nmse"], rows)}, summary


def cmd_benchmark(args) -> int:
    cfg = _prepare(args)
    files, summary = run_benchmark(cfg)
    summary = {"schema_version": SCHEMA_VERSION, "seed": cfg["seed"], **summary}
    files["benchmark.json"] = _json_text(summary)
    write_outputs(_out_dir(args, cfg), _select(files, args.format))
    print(files.get("benchmark.csv", ""), end="")
    return EXIT_OK


def build_crosscheck(cfg):
    """(generator, u, t, initial state) for the spectral-vs-RK4 comparison."""
    sysc = cfg.get("system", {})
    which = sysc.get("generator", "encoding")
    t = float(sysc.get("t", 1.0))
    u = float(sysc.get("u", 0.5))
    rng = np.random.default_rng(cfg["seed"])
    if which == "encoding":
        gen, _ = build_drive(cfg)
        if isinstance(gen, BosonicDrive):
            raise ConfigError("crosscheck needs a finite-dimensional generator")
        d = gen.dim
    elif which == "random-damped":
        n = sysc.get("qubits", 1)
        dims = (2,) * n
        d = 2 ** n
        h0 = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
        h0 = (h0 + h0.conj().T) / 2
        gen = DriveGenerator(h0, jumps=tuple((embed(SIGMA_MINUS, q, dims), rng.uniform(0.2, 1.0))
                                             for q in range(n)))
    elif which == "zero":
        d = 2 ** sysc.get("qubits", 1)
        gen = DriveGenerator(np.zeros((d, d)))
    else:  # cascade 2 -> 1 -> 0 at equal rates: a Jordan block in the Liouvillian
        d = 3
        e = np.eye(3)
        gen = DriveGenerator(np.zeros((3, 3)), jumps=((np.outer(e[1], e[2]), 1.0),
                                                      (np.outer(e[0], e[1]), 1.0)))
    rho0 = DensityMatrix(random_ginibre_state(d, rng))
    return gen, u, t, rho0


def cmd_crosscheck(args) -> int:
    cfg = _prepare(args)
    gen, u, t, rho0 = build_crosscheck(cfg)
    d = gen.dim
    n = int(round(math.log2(d)))
    basis = make_basis("pauli", n) if 2 ** n == d else make_basis("gell-mann", d)
    try:
        rho_spec = spectral_evolve(rho0, gen, u, t)
    except DefectiveLiouvillianError as exc:
        print(f"oracle refused: {exc}", file=sys.stderr)
        return EXIT_REFUSED
    traj = evolve(rho0, gen, InputSignal.constant(u), (0.0, t), basis=basis, estimate_error=False)
    a = expectation_vector(rho_spec, basis)
    b = traj.node_values[-1]
    dev = float(np.max(np.abs(a - b)))
    ok = dev <= 1e-8
    doc = {"schema_version": SCHEMA_VERSION, "seed": cfg["seed"], "t": t, "u": u,
           "max_node_deviation": dev, "passed": ok}
    write_outputs(_out_dir(args, cfg), _select({"crosscheck.json": _json_text(doc)}, args.format))
    print(f"max node deviation {dev:.3e} ({'pass' if ok else 'fail'})")
    return EXIT_OK if ok else EXIT_ERROR


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def _prepare(args) -> dict:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    return cfg


def _out_dir(args, cfg) -> Path:
    if args.out:
        return Path(args.out)
    return Path(cfg.get("output", {}).get("directory", "qrc_out"))


def _threads(value) -> int:
    if value is None:
        value = os.environ.get("QRC_LAB_THREADS", "1")
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError("threads must be >= 1")
    return n


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qrc-lab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--format", choices=["json", "csv", "both"], default="both")
    run = argparse.ArgumentParser(add_help=False, parents=[common])
    run.add_argument("--config", required=True)
    run.add_argument("--out")
    run.add_argument("--seed", type=int)
    run.add_argument("--threads", type=int)
    sub.add_parser("catalog", parents=[common], help="list built-in encodings")
    sub.add_parser("analyze", parents=[run], help="classify encoding nodes as linear/nonlinear")
    sub.add_parser("benchmark", parents=[run], help="run a reservoir task")
    sub.add_parser("crosscheck", parents=[run], help="spectral vs RK4 oracle comparison")
    return parser


COMMANDS = {"catalog": cmd_catalog, "analyze": cmd_analyze,
            "benchmark": cmd_benchmark, "crosscheck": cmd_crosscheck}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if hasattr(args, "threads"):
            args.threads = _threads(args.threads)
        return COMMANDS[args.command](args)
    except (ConfigError, argparse.ArgumentTypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except Exception as exc:  # runtime failures still map onto the exit-code contract
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
