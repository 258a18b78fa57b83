"""Command-line front end: ``fdqn run | tune | report``.

Experiments are described by a TOML file::

    output = "runs/abs-1e-3"      # optional; --out and $FDQN_OUT take precedence
    budget = 10000000             # evaluations per (method, seed) cell
    seeds = [1, 2, 3, 4, 5]

    [problem]
    name = "chebyquad"
    d = 30
    p = 45
    noise_model = "abs"           # abs | rel
    sigma = 1e-3
    x0_scale = 1.0                # x0 = x0_scale * standard start
    # f_star = 0.0173615...       # optional; otherwise solved for

    [solver]                      # shared by every method unless overridden
    s0 = 64

    [[methods]]
    method = "fd_norm"

    [[methods]]
    method = "fd_sg"
    sg_alpha = "tuned"            # or a number

    [tune]                        # optional
    budget = 10000000
    seed = 1

Solver keys (in ``[solver]`` or a ``[[methods]]`` entry): nu, theta, s0,
s_max, growth_rule, variance_fraction, c1, tau, max_backtracks, lbfgs_m,
beta, gamma_init, alpha_max, max_iters, ls_failure_policy.

The ``f_true``/``err`` columns come from the noise-free objective. The
solver never sees them.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import re
import statistics
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .linesearch import LineSearchConfig
from .problems import PROBLEMS, make_problem, solve_reference
from .sampling import SampleSizePolicy
from .solver import SG_ALPHA_GRID, ConfigError, SolverConfig, TuningError, run, tune_fd_sg
from .telemetry import format_float, read_rows, write_csv

OUT_ENV = "FDQN_OUT"
MANIFEST = "manifest.json"
TUNE_MANIFEST = "tune_manifest.json"
TUNE_GRID = "tune_grid.csv"
TUNE_COLUMNS = ("j", "alpha", "stop_reason", "final_f_true", "final_err", "iterations", "evals")
LONG_COLUMNS = ("method", "seed", "cum_evals", "err")
SUMMARY_COLUMNS = ("method", "seeds", "budget", "median_final_err")

_TOP_KEYS = {"output", "budget", "seeds", "problem", "solver", "methods", "tune"}
_PROBLEM_KEYS = {"name", "d", "p", "noise_model", "sigma", "x0_scale", "f_star"}
_POLICY_KEYS = {"theta", "s0", "s_max", "growth_rule", "variance_fraction"}
_LS_KEYS = {"c1", "tau", "max_backtracks"}
_CFG_KEYS = {"nu", "lbfgs_m", "beta", "gamma_init", "alpha_max", "max_iters", "ls_failure_policy"}
_SOLVER_KEYS = _POLICY_KEYS | _LS_KEYS | _CFG_KEYS
_METHOD_KEYS = _SOLVER_KEYS | {"method", "label", "sg_alpha"}
_TUNE_KEYS = {"budget", "seed"}


class SpecError(ValueError):
    pass


# ---------------------------------------------------------------------------
# spec parsing


def _key_line(text: str, table: str, key: str, occurrence: int = 0):
    """1-based line of ``key`` inside ``[table]`` (or the occurrence-th ``[[table]]``)."""
    current, seen = "", -1
    pat = re.compile(r"^\s*(?:\"?)" + re.escape(key) + r"(?:\"?)\s*=")
    for no, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s.startswith("[["):
            current = s.strip("[] ")
            if current == table:
                seen += 1
            continue
        if s.startswith("["):
            current = s.strip("[] ")
            continue
        if current == table and (not table or seen == occurrence or not _is_array_table(text, table)):
            if pat.match(line):
                return no
    return None


def _is_array_table(text: str, table: str) -> bool:
    return re.search(r"^\s*\[\[\s*" + re.escape(table) + r"\s*\]\]", text, re.M) is not None


def _fail(text, path, msg, table="", key=None, occurrence=0):
    line = _key_line(text, table, key, occurrence) if key else None
    where = f"{path}:{line}" if line else str(path)
    raise SpecError(f"{where}: {msg}")


def _check_keys(text, path, table, got: dict, allowed: set, occurrence=0):
    for key in got:
        if key not in allowed:
            label = f"[{table}]" if table else "top level"
            _fail(text, path, f"unknown key {key!r} in {label}", table, key, occurrence)


@dataclass
class MethodSpec:
    label: str
    method: str
    settings: dict  # merged solver settings
    sg_alpha: object = None  # float, "tuned" or None


@dataclass
class ExperimentSpec:
    path: str
    text: str
    problem: dict
    x0_scale: float
    f_star: object
    methods: list
    seeds: list
    budget: int
    output: object = None
    tune_budget: int = 0
    tune_seed: int = 0
    raw: dict = field(default_factory=dict)

    def problem_echo(self) -> dict:
        return {**self.problem, "x0_scale": self.x0_scale}

    def make_problem(self):
        params = dict(self.problem)
        return make_problem(params.pop("name"), **params)

    def x0(self, problem) -> np.ndarray:
        return self.x0_scale * problem.x_standard

    def config(self, method: MethodSpec, seed: int, sg_alpha=None) -> SolverConfig:
        return build_config(method.method, method.settings, self.budget, seed, sg_alpha)


def build_config(method: str, settings: dict, budget: int, seed: int, sg_alpha=None) -> SolverConfig:
    policy = {k: v for k, v in settings.items() if k in _POLICY_KEYS}
    ls = {k: v for k, v in settings.items() if k in _LS_KEYS}
    rest = {k: v for k, v in settings.items() if k in _CFG_KEYS}
    if method == "fd_sg":
        policy.setdefault("test_kind", "fixed")
    else:
        policy["test_kind"] = "norm" if method == "fd_norm" else "ipqn"
    return SolverConfig(
        method=method,
        policy=SampleSizePolicy(**policy),
        ls=LineSearchConfig(**ls),
        max_evals=int(budget),
        master_seed=int(seed),
        sg_alpha=sg_alpha,
        **rest,
    )


def parse_seeds(text: str) -> list:
    """``"1,2,5-7"`` -> ``[1, 2, 5, 6, 7]``."""
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        m = re.fullmatch(r"(-?\d+)-(-?\d+)", part)
        if m:
            lo, hi = int(m.group(1)), int(m.group(2))
            if hi < lo:
                raise ValueError(f"empty seed range {part!r}")
            seeds.extend(range(lo, hi + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise ValueError("no seeds given")
    return seeds


def load_spec(path, seeds=None, budget=None) -> ExperimentSpec:
    path = str(path)
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise SpecError(f"{path}: cannot read spec ({exc.strerror})") from None
    return parse_spec(text, path, seeds=seeds, budget=budget)


def parse_spec(text: str, path: str = "<spec>", seeds=None, budget=None) -> ExperimentSpec:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise SpecError(f"{path}: {exc}") from None
    _check_keys(text, path, "", raw, _TOP_KEYS)

    prob = raw.get("problem")
    if not isinstance(prob, dict):
        _fail(text, path, "missing [problem] table")
    _check_keys(text, path, "problem", prob, _PROBLEM_KEYS)
    if "name" not in prob:
        _fail(text, path, "[problem] needs a name")
    if prob["name"] not in PROBLEMS:
        _fail(
            text, path, f"unknown problem {prob['name']!r}; known: {sorted(PROBLEMS)}", "problem", "name"
        )
    problem = {k: v for k, v in prob.items() if k not in ("x0_scale", "f_star")}
    x0_scale = float(prob.get("x0_scale", 1.0))
    f_star = prob.get("f_star")

    shared = raw.get("solver", {})
    _check_keys(text, path, "solver", shared, _SOLVER_KEYS)

    entries = raw.get("methods")
    if not isinstance(entries, list) or not entries:
        _fail(text, path, "need at least one [[methods]] entry")
    methods, labels = [], set()
    for i, entry in enumerate(entries):
        _check_keys(text, path, "methods", entry, _METHOD_KEYS, occurrence=i)
        if "method" not in entry:
            _fail(text, path, f"[[methods]] entry {i + 1} has no 'method'")
        label = entry.get("label", entry["method"])
        if label in labels:
            _fail(text, path, f"duplicate method label {label!r}; set 'label' to tell them apart", "methods", "method", i)
        labels.add(label)
        settings = {**shared, **{k: v for k, v in entry.items() if k in _SOLVER_KEYS}}
        alpha = entry.get("sg_alpha")
        if entry["method"] == "fd_sg":
            if alpha is None:
                _fail(text, path, f"fd_sg method {label!r} needs sg_alpha (a number or \"tuned\")", "methods", "method", i)
            if isinstance(alpha, str) and alpha != "tuned":
                _fail(text, path, f"sg_alpha must be a number or \"tuned\", got {alpha!r}", "methods", "sg_alpha", i)
        methods.append(MethodSpec(label=label, method=entry["method"], settings=settings, sg_alpha=alpha))

    if seeds is None:
        seeds = raw.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        _fail(text, path, "seeds must be a non-empty list of integers", "", "seeds")
    if budget is None:
        budget = raw.get("budget", 10_000_000)
    if not isinstance(budget, int) or budget < 1:
        _fail(text, path, f"budget must be a positive integer, got {budget!r}", "", "budget")

    tune = raw.get("tune", {})
    _check_keys(text, path, "tune", tune, _TUNE_KEYS)

    spec = ExperimentSpec(
        path=path,
        text=text,
        problem=problem,
        x0_scale=x0_scale,
        f_star=f_star,
        methods=methods,
        seeds=list(seeds),
        budget=int(budget),
        output=raw.get("output"),
        tune_budget=int(tune.get("budget", budget)),
        tune_seed=int(tune.get("seed", seeds[0])),
        raw=raw,
    )
    # validate everything up front, before any evaluation
    try:
        problem_obj = spec.make_problem()
    except (TypeError, ValueError, KeyError) as exc:
        _fail(text, path, f"bad [problem]: {exc}", "problem", "name")
    for i, m in enumerate(methods):
        alpha = m.sg_alpha if isinstance(m.sg_alpha, (int, float)) else 1.0
        try:
            spec.config(m, seeds[0], alpha if m.method == "fd_sg" else None)
        except (ConfigError, ValueError, TypeError) as exc:
            _fail(text, path, f"method {m.label!r}: {exc}", "methods", "method", i)
    if spec.tune_budget < (problem_obj.d + 1) * _sg_s0(spec):
        _fail(text, path, "tune budget is smaller than one gradient estimate", "tune", "budget")
    return spec


def _sg_s0(spec: ExperimentSpec) -> int:
    for m in spec.methods:
        if m.method == "fd_sg":
            return int(m.settings.get("s0", SampleSizePolicy().s0))
    return int(spec.raw.get("solver", {}).get("s0", SampleSizePolicy().s0))


def output_dir(spec: ExperimentSpec, flag=None) -> Path:
    out = flag or os.environ.get(OUT_ENV) or spec.output
    if not out:
        raise SpecError(f"{spec.path}: no output directory (use --out, ${OUT_ENV} or 'output =')")
    return Path(out)


# ---------------------------------------------------------------------------
# commands


def _reference_f_star(spec: ExperimentSpec, problem):
    if spec.f_star is not None:
        return float(spec.f_star), "spec"
    ref = solve_reference(problem)
    return ref.f_star, "reference"


def _cell_name(label: str, seed: int) -> str:
    return f"{label}_seed{seed}.csv"


def _run_cell(job):
    problem_params, x0_scale, method, settings, budget, seed, alpha, f_star, csv_path = job
    t0 = time.perf_counter()
    out = {"seed": seed, "csv": Path(csv_path).name}
    try:
        params = dict(problem_params)
        problem = make_problem(params.pop("name"), **params)
        cfg = build_config(method, settings, budget, seed, alpha)
        res = run(problem, x0_scale * problem.x_standard, cfg, f_star=f_star)
        write_csv(csv_path, res.records)
        out.update(
            status="ok",
            stop_reason=res.stop_reason,
            iterations=len(res.records),
            evals=res.evals,
            final_err=res.final_err,
        )
    except Exception as exc:  # a failed cell must not take the others down
        out.update(status="error", error=f"{type(exc).__name__}: {exc}")
    out["wall_time"] = time.perf_counter() - t0
    return out


def _map(fn, jobs: list, n_jobs: int) -> list:
    if n_jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _write_json(path: Path, obj):
    text = json.dumps(obj, indent=2, sort_keys=True, default=_json_default, allow_nan=True)
    path.write_bytes((text + "\n").encode("utf-8"))


def _manifest_base(spec: ExperimentSpec, command: str, f_star, f_star_source) -> dict:
    return {
        "command": command,
        "version": __version__,
        "spec_path": spec.path,
        "spec_text": spec.text,
        "spec": spec.raw,
        "problem": spec.problem_echo(),
        "budget": spec.budget,
        "seeds": spec.seeds,
        "f_star": f_star,
        "f_star_source": f_star_source,
    }


def _tune_matches(manifest: dict, spec: ExperimentSpec, settings: dict) -> bool:
    return (
        manifest.get("problem") == spec.problem_echo()
        and manifest.get("tune_budget") == spec.tune_budget
        and manifest.get("tune_seed") == spec.tune_seed
        and manifest.get("settings") == settings
    )


def do_tune(spec: ExperimentSpec, out: Path, method: MethodSpec, f_star, f_star_source) -> dict:
    """Tune one fd_sg method; writes the grid CSV and the tune manifest."""
    problem = spec.make_problem()
    base = build_config("fd_sg", method.settings, spec.tune_budget, spec.tune_seed, sg_alpha=1.0)
    t0 = time.perf_counter()
    tuning = tune_fd_sg(problem, spec.x0(problem), base, spec.tune_budget, f_star=f_star)
    wall = time.perf_counter() - t0

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TUNE_COLUMNS)
    for alpha, res, f in zip(tuning.alphas, tuning.results, tuning.final_f_true()):
        w.writerow(
            [
                str(int(round(math.log2(alpha)))),
                format_float(alpha),
                res.stop_reason,
                format_float(f),
                format_float(f - f_star if math.isfinite(f) else math.inf),
                str(len(res.records) and res.records[-1].k + 1),
                str(res.evals),
            ]
        )
    suffix = "" if method.label == "fd_sg" else f"_{method.label}"
    grid = out / TUNE_GRID.replace(".csv", f"{suffix}.csv")
    grid.write_bytes(buf.getvalue().encode("utf-8"))
    manifest = _manifest_base(spec, "tune", f_star, f_star_source)
    manifest.update(
        method=method.label,
        settings=method.settings,
        tune_budget=spec.tune_budget,
        tune_seed=spec.tune_seed,
        grid_csv=grid.name,
        best_alpha=tuning.best_alpha,
        best_j=int(round(math.log2(tuning.best_alpha))),
        wall_time=wall,
    )
    _write_json(out / TUNE_MANIFEST.replace(".json", f"{suffix}.json"), manifest)
    return manifest


def _tuned_alpha(spec, out, method, f_star, f_star_source, log) -> float:
    suffix = "" if method.label == "fd_sg" else f"_{method.label}"
    path = out / TUNE_MANIFEST.replace(".json", f"{suffix}.json")
    if path.exists():
        manifest = json.loads(path.read_text(encoding="utf-8"))
        if _tune_matches(manifest, spec, method.settings):
            log(f"reusing tuned alpha {manifest['best_alpha']:g} from {path}")
            return float(manifest["best_alpha"])
        log(f"{path} was made for a different setup; re-tuning")
    log(f"tuning {method.label} over {len(SG_ALPHA_GRID)} steplengths")
    return float(do_tune(spec, out, method, f_star, f_star_source)["best_alpha"])


def cmd_run(spec: ExperimentSpec, out: Path, jobs: int = 1, log=print) -> int:
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    problem = spec.make_problem()
    f_star, source = _reference_f_star(spec, problem)
    manifest = _manifest_base(spec, "run", f_star, source)
    alphas, cells, work = {}, [], []
    for m in spec.methods:
        alpha = None
        if m.method == "fd_sg":
            if m.sg_alpha == "tuned":
                try:
                    alpha = _tuned_alpha(spec, out, m, f_star, source, log)
                except TuningError as exc:
                    log(f"{m.label}: {exc}")
                    for seed in spec.seeds:
                        cells.append({"method": m.label, "seed": seed, "status": "error", "error": str(exc)})
                    continue
            else:
                alpha = float(m.sg_alpha)
            alphas[m.label] = alpha
        for seed in spec.seeds:
            path = out / _cell_name(m.label, seed)
            work.append(
                (m.label, (spec.problem, spec.x0_scale, m.method, m.settings, spec.budget, seed, alpha, f_star, str(path)))
            )
    results = _map(_run_cell, [job for _, job in work], jobs)
    for (label, job), res in zip(work, results):
        cell = {"method": label, "solver": job[2], "sg_alpha": job[6], **res}
        cells.append(cell)
        if res["status"] == "ok":
            log(f"{label} seed {res['seed']}: {res['stop_reason']}, {res['iterations']} iterations, err {res['final_err']:.3e}")
        else:
            log(f"{label} seed {res['seed']}: FAILED {res['error']}")
    manifest.update(sg_alphas=alphas, cells=cells, wall_time=time.perf_counter() - t0)
    _write_json(out / MANIFEST, manifest)
    return 0 if all(c["status"] == "ok" for c in cells) else 1


def cmd_tune(spec: ExperimentSpec, out: Path, log=print) -> int:
    sg = [m for m in spec.methods if m.method == "fd_sg"]
    if not sg:
        raise SpecError(f"{spec.path}: tune needs an fd_sg method")
    out.mkdir(parents=True, exist_ok=True)
    problem = spec.make_problem()
    f_star, source = _reference_f_star(spec, problem)
    status = 0
    for m in sg:
        try:
            man = do_tune(spec, out, m, f_star, source)
            log(f"{m.label}: best alpha 2^{man['best_j']} = {man['best_alpha']:g}")
        except TuningError as exc:
            log(f"{m.label}: {exc}")
            status = 1
    return status


def _final_err(rows: list, budget=None) -> str:
    """Last logged err, or the last one within ``budget`` evaluations."""
    last = "nan"
    for row in rows:
        if budget is not None and int(row["cum_evals"]) > budget:
            break
        last = row["err"]
    return last


def cmd_report(manifests: list, out: Path, log=print) -> int:
    if not manifests:
        raise SpecError("report needs at least one manifest")
    loaded = []
    for path in manifests:
        path = Path(path)
        try:
            man = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise SpecError(f"{path}: cannot read manifest ({exc})") from None
        if man.get("command") != "run":
            raise SpecError(f"{path}: not a run manifest")
        loaded.append((path, man))
    ref_path, ref = loaded[0]
    for path, man in loaded[1:]:
        if man["problem"] != ref["problem"] or man["f_star"] != ref["f_star"]:
            raise SpecError(
                f"{path} is for problem {man['problem']} (F*={man['f_star']}), "
                f"but {ref_path} is for {ref['problem']} (F*={ref['f_star']}); "
                "errors from different problems cannot be compared"
            )
    budget = min(int(man["budget"]) for _, man in loaded)

    long_rows, finals, seen = [], {}, set()
    for path, man in loaded:
        for cell in man["cells"]:
            if cell.get("status") != "ok":
                log(f"skipping failed cell {cell['method']} seed {cell['seed']}")
                continue
            key = (cell["method"], cell["seed"])
            if key in seen:
                raise SpecError(f"{path}: cell {key} appears in more than one manifest")
            seen.add(key)
            rows = read_rows(path.parent / cell["csv"])
            for row in rows:
                long_rows.append((cell["method"], str(cell["seed"]), row["cum_evals"], row["err"]))
            # a run's last iteration may overshoot its own budget; cut only longer runs
            cut = budget if int(man["budget"]) > budget else None
            finals.setdefault(cell["method"], []).append(float(_final_err(rows, cut)))

    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LONG_COLUMNS)
    w.writerows(long_rows)
    (out / "report_long.csv").write_bytes(buf.getvalue().encode("utf-8"))

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    log(f"{'method':<12} {'seeds':>5} {'median final err':>18}  (budget {budget})")
    for method, errs in finals.items():
        med = statistics.median(errs)
        w.writerow([method, str(len(errs)), str(budget), format_float(med)])
        log(f"{method:<12} {len(errs):>5} {med:>18.6e}")
    (out / "report_summary.csv").write_bytes(buf.getvalue().encode("utf-8"))
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fdqn", description="Adaptive-sampling FD quasi-Newton experiments")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_ in (("run", "run every (method, seed) cell"), ("tune", "tune the FD-SG steplength")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--spec", required=True, help="experiment TOML file")
        p.add_argument("--out", help=f"output directory (overrides ${OUT_ENV} and the spec file)")
        p.add_argument("--seeds", help="seed list, e.g. 1,2,3 or 1-5")
        p.add_argument("--budget", type=int, help="evaluation budget per cell")
        if name == "run":
            p.add_argument("--jobs", type=int, default=1, help="worker processes")

    p = sub.add_parser("report", help="collect run manifests into plot-ready CSVs")
    p.add_argument("manifests", nargs="+", help="manifest.json files from 'run'")
    p.add_argument("--out", help="output directory (default: next to the first manifest)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    log = lambda msg: print(msg, file=sys.stderr)
    try:
        if args.command == "report":
            out = Path(args.out or os.environ.get(OUT_ENV) or Path(args.manifests[0]).parent)
            return cmd_report(args.manifests, out, log=log)
        seeds = parse_seeds(args.seeds) if args.seeds else None
        if args.budget is not None and args.budget < 1:
            raise SpecError(f"--budget must be positive, got {args.budget}")
        spec = load_spec(args.spec, seeds=seeds, budget=args.budget)
        out = output_dir(spec, args.out)
        if args.command == "run":
            if args.jobs < 1:
                raise SpecError(f"--jobs must be positive, got {args.jobs}")
            return cmd_run(spec, out, jobs=args.jobs, log=log)
        return cmd_tune(spec, out, log=log)
    except (SpecError, ValueError) as exc:
        print(f"fdqn: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
