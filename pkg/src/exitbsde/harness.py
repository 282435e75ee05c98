"""Config-driven experiment runner and rate fitting.

An experiment is one text config file: a problem, a decreasing list of
stepsizes, path counts, and toggles.  ``run_experiment`` walks the
stages (simulate, solve, errors, rates, moments, checks) writing every
artifact under ``out/<name>/<timestamp>/`` together with a manifest of
content hashes, so a rerun with the same config can be verified
byte-for-byte.  File contents never embed timestamps; wall-clock state
lives only in the directory name.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import json
import math
import os
import sys
import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__ as _pkg_version
from ._accel import HAS_NUMBA
from .backward import backward_induction, error_functionals, solve_picard
from .checks import (
    discrete_gronwall_verify,
    kolmogorov_ratio_fit,
    random_hypothesis_chain,
)
from .exceptions import (
    ConfigurationError,
    FitError,
    InvalidInput,
    StageFailure,
)
from .forward import coupled_fine_reference, exit_gap_moments, export_exit_times
from .moments import exp_moment_scan
from .problems import (
    DomainSpec,
    GridSpec,
    catalog_benchmark,
    make_tapered_problem,
    validate_stepsize,
)
from .rng import derive_seed

_SCHEMA = 1
DEFAULT_WINDOWS = {"e1": (0.3, math.inf), "exit_gap_p1": (0.35, 0.65)}

RATE_COLUMNS = ("h", "n_paths", "e1", "e1_ci", "e1_node_time", "e2", "e2_ci",
                "terminal_sq", "terminal_ci", "exit_gap_p1", "exit_gap_p1_ci",
                "censor_fraction", "fine_censor_fraction", "v0")


# ---------------------------------------------------------------------------
# rate fitting


@dataclass(frozen=True)
class RateFit:
    """Weighted log-log slope for one error column."""

    column: str
    slope: float
    stderr: float
    n_used: int
    window: tuple | None = None
    passed: bool | None = None

    def gated(self, window) -> "RateFit":
        lo, hi = window
        ok = lo <= self.slope <= hi
        return dataclasses.replace(self, window=(float(lo), float(hi)),
                                   passed=ok)


def fit_rate(pairs) -> RateFit:
    """Weighted least-squares slope of log value against log h.

    ``pairs`` is a sequence of (h, value, ci_halfwidth) triples.  The
    weight of a point is (value / ci)^2, the inverse variance of
    log value under error propagation; points with ci = 0 get the
    largest finite weight in the set (or 1.0 when none have a CI).
    Non-positive values carry no log-scale information and are dropped
    with a warning; fewer than three surviving points cannot pin a
    slope.
    """
    rows = [(float(h), float(v), float(c)) for h, v, c in pairs]
    if any(h <= 0 for h, _, _ in rows):
        raise InvalidInput("stepsizes must be positive")
    kept = [(h, v, c) for h, v, c in rows if v > 0]
    if len(kept) < len(rows):
        warnings.warn(f"fit_rate: dropped {len(rows) - len(kept)} "
                      "non-positive values", stacklevel=2)
    if len(kept) < 3:
        raise FitError(f"need at least 3 positive points, got {len(kept)}")
    h = np.array([r[0] for r in kept])
    v = np.array([r[1] for r in kept])
    c = np.array([r[2] for r in kept])
    with np.errstate(divide="ignore", over="ignore"):
        # ci = 0 rows overflow to inf here and are replaced below
        w = np.where(c > 0, (v / np.maximum(c, 1e-300)) ** 2, np.inf)
    if np.all(np.isinf(w)):
        w = np.ones_like(w)
    else:
        w[np.isinf(w)] = w[np.isfinite(w)].max()
    x, y = np.log(h), np.log(v)
    sw = w.sum()
    xbar, ybar = (w * x).sum() / sw, (w * y).sum() / sw
    sxx = (w * (x - xbar) ** 2).sum()
    if sxx <= 0:
        raise FitError("stepsizes must be distinct")
    slope = float((w * (x - xbar) * (y - ybar)).sum() / sxx)
    resid = y - ybar - slope * (x - xbar)
    dof = len(kept) - 2
    sigma2 = float((w * resid**2).sum() / dof) if dof > 0 else 0.0
    return RateFit(column="", slope=slope,
                   stderr=float(math.sqrt(sigma2 / sxx)), n_used=len(kept))


@dataclass(frozen=True)
class RateTable:
    """Per-stepsize error rows with fitted slopes and window gates.

    ``rows`` are dicts keyed by RATE_COLUMNS.  Slopes are fitted only
    from rows whose confidence interval excludes zero (value > ci);
    other rows still appear in the table.
    """

    rows: tuple
    fits: tuple
    out_dir: str | None = None

    @property
    def passed(self) -> bool:
        return all(f.passed for f in self.fits if f.passed is not None)

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write(",".join(RATE_COLUMNS) + "\n")
        for row in self.rows:
            out.write(",".join(_csv_cell(row[c]) for c in RATE_COLUMNS) + "\n")
        return out.getvalue()

    def fits_to_csv(self) -> str:
        out = io.StringIO()
        out.write("column,slope,stderr,n_used,window_lo,window_hi,passed\n")
        for f in self.fits:
            lo, hi = f.window if f.window else (math.nan, math.nan)
            gate = "" if f.passed is None else str(bool(f.passed)).lower()
            out.write(f"{f.column},{f.slope!r},{f.stderr!r},{f.n_used},"
                      f"{lo!r},{hi!r},{gate}\n")
        return out.getvalue()


def _csv_cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def build_rate_table(reports, extras, windows) -> RateTable:
    """Assemble the table and fit slopes for the standard columns.

    ``reports`` maps h to ErrorReport; ``extras`` maps h to a dict with
    at least exit_gap_p1 / exit_gap_p1_ci / v0.
    """
    rows = []
    for h in sorted(reports, reverse=True):
        r = reports[h]
        if r.e2 < r.e1 - 1e-12:
            raise InvalidInput("internal: E2 column fell below E1")
        row = {c: getattr(r, c) for c in RATE_COLUMNS
               if hasattr(r, c)}
        row["h"] = h
        row.update(extras[h])
        rows.append(row)
    fits = []
    for col, ci_col in (("e1", "e1_ci"), ("e2", "e2_ci"),
                        ("terminal_sq", "terminal_ci"),
                        ("exit_gap_p1", "exit_gap_p1_ci")):
        triples = [(row["h"], row[col], row[ci_col]) for row in rows
                   if row[col] > row[ci_col]]
        if len(triples) < 3:
            continue
        fit = dataclasses.replace(fit_rate(triples), column=col)
        if col in windows:
            fit = fit.gated(windows[col])
        fits.append(fit)
    return RateTable(rows=tuple(rows), fits=tuple(fits))


# ---------------------------------------------------------------------------
# experiment configuration


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: problem, stepsizes, budgets, toggles.

    ``text`` is the raw config file contents; its hash identifies the
    experiment in the manifest.  ``problem_id`` is a catalog id, or
    "inline" with the coefficient fields carried in ``inline``.
    """

    name: str
    problem_id: str
    h_values: tuple
    n_paths: int
    refine_k: int
    seed: int
    t_trunc: float | None  # None = auto
    mesh: int
    quad_order: int
    picard: bool
    workers: int
    out_dir: str
    moments_enabled: bool
    moment_grid: tuple
    moment_batches: tuple
    checks_enabled: bool
    gronwall_chains: int
    kolmogorov_paths: int
    windows: dict
    inline: dict | None
    text: str

    def resolve_problem(self):
        """Return (benchmark or None, ProblemSpec)."""
        if self.problem_id != "inline":
            bench = catalog_benchmark(self.problem_id)
            return bench, bench.spec
        return None, _inline_problem(self.inline)

    def validate(self) -> list:
        """Hard-fail on structural defects; return advisory warnings."""
        if len(self.h_values) < 1:
            raise ConfigurationError("h list must not be empty")
        if list(self.h_values) != sorted(set(self.h_values), reverse=True):
            raise ConfigurationError("h list must be strictly decreasing")
        if self.n_paths < 1:
            raise ConfigurationError("n_paths must be positive")
        if self.refine_k < 2:
            raise ConfigurationError("refine_k must be at least 2")
        if self.mesh < 3:
            raise ConfigurationError("mesh must have at least 3 points")
        if self.workers < 1:
            raise ConfigurationError("workers must be positive")
        bench, spec = self.resolve_problem()
        notes = []
        if self.t_trunc is not None:
            for h in self.h_values:
                GridSpec(h, self.t_trunc)  # raises on non-divisibility
        for h in self.h_values:
            verdict = validate_stepsize(h, spec.L_f)
            if not verdict.ok:
                notes.append(f"h={h!r} outside the scheme's validated "
                             f"stepsize range ({verdict.reason}, bound "
                             f"{verdict.bound!r})")
        if self.moments_enabled and not self.moment_grid:
            raise ConfigurationError("moments enabled but no m grid given")
        if self.moments_enabled:
            b = self.moment_batches
            if len(b) < 3 or any(y <= x for x, y in zip(b, b[1:])):
                raise ConfigurationError(
                    "moment batches must be at least 3, strictly increasing")
            if b[-1] < 10_000:
                raise ConfigurationError(
                    "moment scans need at least 10^4 samples in the last "
                    f"batch, got {b[-1]}")
        if bench is None:
            notes.append("inline problem has no analytic reference; the "
                         "rates stage is unavailable")
        return notes


_GOPTIONS = {
    "zero": (lambda x: np.zeros(x.shape[:-1]), 0.0),
    "coord0": (lambda x: x[..., 0], 1.0),
}


def _inline_problem(fields):
    if not fields:
        raise ConfigurationError("problem = inline needs a [problem] section")
    try:
        kind = fields.get("domain", "interval")
        if kind == "interval":
            domain = DomainSpec.interval(float(fields["lo"]),
                                         float(fields["hi"]))
        elif kind == "box":
            lo = _floats(fields["lo"])
            hi = _floats(fields["hi"])
            domain = DomainSpec.box(lo, hi)
        elif kind == "ball":
            domain = DomainSpec.ball(_floats(fields["center"]),
                                     float(fields["radius"]))
        else:
            raise ConfigurationError(f"unknown domain kind {kind!r}")
        d = domain.dim
        x0 = _floats(fields.get("x0", ",".join(["0.0"] * d)))
        mu = _floats(fields.get("mu", ",".join(["0.0"] * d)))
        sigma = np.asarray(
            _floats(fields.get("sigma",
                               ",".join(str(float(i == j)) for i in range(d)
                                        for j in range(d))))).reshape(d, d)
        f_const = float(fields.get("f_const", "0.0"))
        f_lin = float(fields.get("f_lin", "0.0"))
        g_name = fields.get("g", "zero")
        g, l_g = _GOPTIONS[g_name]
    except KeyError as exc:
        raise ConfigurationError(f"missing inline problem field: {exc}") \
            from exc

    def f(x, y, _c=f_const, _l=f_lin):
        return _c + _l * y

    return make_tapered_problem(
        f"inline-{g_name}", domain, x0, mu, sigma, f=f, g=g,
        L_f=max(abs(f_lin), 0.01), sup_f0=abs(f_const), L_g=l_g)


def _floats(text) -> tuple:
    return tuple(float(v) for v in str(text).split(","))


def _window(text) -> tuple:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 2:
        raise ConfigurationError(f"window must be 'lo, hi', got {text!r}")
    return float(parts[0]), float(parts[1])


def load_config(path) -> ExperimentConfig:
    """Parse an experiment config file (key/value text, one experiment)."""
    text = Path(path).read_text()
    return parse_config(text, default_name=Path(path).stem)


def parse_config(text: str, default_name: str = "experiment") \
        -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
        exp = cp["experiment"]
        problem_id = exp.get("problem", "")
        if not problem_id:
            raise ConfigurationError("experiment.problem is required")
        if "seed" not in exp:
            raise ConfigurationError("experiment.seed is mandatory")
        t_trunc_raw = exp.get("t_trunc", "auto").strip()
        windows = dict(DEFAULT_WINDOWS)
        if cp.has_section("windows"):
            for key, val in cp["windows"].items():
                windows[key] = _window(val)
        moments = cp["moments"] if cp.has_section("moments") else {}
        checks = cp["checks"] if cp.has_section("checks") else {}
        out = cp["output"] if cp.has_section("output") else {}
        config = ExperimentConfig(
            name=exp.get("name", default_name),
            problem_id=problem_id,
            h_values=_floats(exp["h"]),
            n_paths=int(exp["n_paths"]),
            refine_k=int(exp.get("refine_k", "8")),
            seed=int(exp["seed"]),
            t_trunc=None if t_trunc_raw == "auto" else float(t_trunc_raw),
            mesh=int(exp.get("mesh", "201")),
            quad_order=int(exp.get("quad_order", "16")),
            picard=exp.getboolean("picard", fallback=False),
            workers=int(exp.get("workers", "1")),
            out_dir=out.get("dir", "out"),
            moments_enabled=_bool(moments.get("enabled", "false")),
            moment_grid=_floats(moments["m"]) if "m" in moments else (),
            moment_batches=tuple(
                int(v) for v in str(
                    moments.get("batches", "1000,10000,100000")).split(",")),
            checks_enabled=_bool(checks.get("enabled", "false")),
            gronwall_chains=int(checks.get("gronwall_chains", "25")),
            kolmogorov_paths=int(checks.get("kolmogorov_paths", "20000")),
            windows=windows,
            inline=dict(cp["problem"]) if cp.has_section("problem") else None,
            text=text,
        )
    except (configparser.Error, KeyError, ValueError) as exc:
        raise ConfigurationError(f"bad config: {exc}") from exc
    config.validate()
    return config


def _bool(text) -> bool:
    return str(text).strip().lower() in {"1", "true", "yes", "on"}


# ---------------------------------------------------------------------------
# experiment runner


class _Workspace:
    """Artifact directory with incremental manifest."""

    def __init__(self, config: ExperimentConfig, out_root=None):
        root = out_root or os.environ.get("EXITBSDE_OUT") or config.out_dir
        stamp = time.strftime("%Y%m%dT%H%M%S")
        base = Path(root) / config.name
        path = base / stamp
        k = 0
        while path.exists():
            k += 1
            path = base / f"{stamp}-{k}"
        path.mkdir(parents=True)
        self.path = path
        self.manifest = {
            "schema": _SCHEMA,
            "name": config.name,
            "config_text": config.text,
            "config_sha256": hashlib.sha256(
                config.text.encode()).hexdigest(),
            "versions": {
                "package": _pkg_version,
                "python": sys.version.split()[0],
                "numpy": np.__version__,
                "numba": _numba_version(),
            },
            "notes": [],
            "stages_completed": [],
            "artifacts": {},
        }

    def write(self, filename: str, content: str) -> None:
        data = content.encode()
        (self.path / filename).write_bytes(data)
        self.manifest["artifacts"][filename] = hashlib.sha256(
            data).hexdigest()
        self._flush()

    def write_file_hash(self, filename: str) -> None:
        data = (self.path / filename).read_bytes()
        self.manifest["artifacts"][filename] = hashlib.sha256(
            data).hexdigest()
        self._flush()

    def done(self, stage: str) -> None:
        self.manifest["stages_completed"].append(stage)
        self._flush()

    def note(self, text: str) -> None:
        self.manifest["notes"].append(text)
        self._flush()

    def _flush(self) -> None:
        (self.path / "manifest.json").write_text(
            json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")


def _numba_version():
    if not HAS_NUMBA:
        return None
    import numba
    return numba.__version__


def _h_tag(h: float) -> str:
    return repr(float(h)).replace(".", "p").replace("-", "m")


def auto_horizon(spec, h_max: float, seed: int, *,
                 censor_target: float = 5e-3,
                 backend: str | None = None) -> float:
    """Shortest horizon from a doubling pilot with censoring below target."""
    t = max(1.6, 16 * h_max)
    t = math.ceil(t / h_max) * h_max
    for _ in range(10):
        pilot = coupled_fine_reference(
            spec, GridSpec(h_max, t), 2, 4_000,
            derive_seed(seed, "pilot-horizon"), backend=backend)
        if pilot.censor_fraction < censor_target:
            return t
        t *= 2
    raise ConfigurationError(
        f"auto horizon did not reach censoring below {censor_target} "
        f"by t={t}; set t_trunc explicitly")


STAGES = ("simulate", "solve", "errors", "rates", "moments", "checks")


def run_experiment(config: ExperimentConfig, *, out_root=None,
                   stages=None, backend: str | None = None) -> RateTable:
    """Run the staged pipeline and persist artifacts.

    Stages in order: simulate, solve, errors, rates, moments, checks;
    ``stages`` restricts the run to a subset (errors and rates pull in
    their prerequisites automatically; moments and checks are
    self-contained).  Moments and checks additionally honor their
    config toggles.  Any failure is re-raised as StageFailure naming
    the stage; artifacts written before the failure remain on disk.
    """
    keep = set(STAGES if stages is None else stages)
    unknown = keep - set(STAGES)
    if unknown:
        raise InvalidInput(f"unknown stages: {sorted(unknown)}")
    if "rates" in keep:
        keep |= {"simulate", "solve", "errors"}
    elif "errors" in keep:
        keep |= {"simulate", "solve"}
    if "solve" in keep and config.picard:
        keep.add("simulate")
    notes = config.validate()
    bench, spec = config.resolve_problem()
    ws = _Workspace(config, out_root=out_root)
    for n in notes:
        ws.note(n)

    def _run_stage(name, fn):
        if name not in keep:
            return None
        try:
            result = fn()
        except Exception as exc:
            raise StageFailure(name, exc) from exc
        ws.done(name)
        return result

    state = {"bundles": {}, "slices": {}, "reports": {}, "extras": {}}
    if config.t_trunc is not None:
        t_trunc = config.t_trunc
    else:
        t_trunc = auto_horizon(spec, max(config.h_values), config.seed,
                               backend=backend)
        for h in config.h_values:
            GridSpec(h, t_trunc)
    ws.manifest["t_trunc"] = t_trunc
    ws._flush()

    def stage_simulate():
        for h in config.h_values:
            bundle = coupled_fine_reference(
                spec, GridSpec(h, t_trunc), config.refine_k, config.n_paths,
                derive_seed(config.seed, f"h-{h!r}"),
                obs_kind=bench.obs_kind if bench else None,
                store_states=True, backend=backend)
            state["bundles"][h] = bundle
            name = f"exits_h{_h_tag(h)}.csv"
            export_exit_times(bundle, ws.path / name)
            ws.write_file_hash(name)

    def stage_solve():
        for h in config.h_values:
            slices = backward_induction(
                spec, GridSpec(h, t_trunc), mesh=config.mesh,
                quad_order=config.quad_order, backend=backend)
            state["slices"][h] = slices
            x0 = np.asarray(spec.x0)
            axis = slices.axes[0]
            prof = io.StringIO()
            prof.write("x0,v\n")
            for x in axis:
                pt = x0.copy()
                pt[0] = x
                v = slices.evaluate(0.0, pt[None, :])[0]
                prof.write(f"{float(x)!r},{float(v)!r}\n")
            ws.write(f"value0_h{_h_tag(h)}.csv", prof.getvalue())
        if config.picard:
            h = min(config.h_values)
            seq, diag = solve_picard(state["bundles"][h], spec)
            doc = {"schema": _SCHEMA, "h": h,
                   "iterations": diag.iterations,
                   "max_ratio": diag.max_ratio,
                   "contraction_bound": diag.contraction_bound,
                   "converged": diag.converged,
                   "y0_mean": float(seq.values[:, 0].mean())}
            ws.write("picard.json", json.dumps(doc, indent=2,
                                               sort_keys=True) + "\n")

    def stage_errors():
        if bench is None:
            raise ConfigurationError(
                "error functionals need an analytic reference; "
                "inline problems have none")
        h_fine = min(config.h_values)
        for h in config.h_values:
            bundle = state["bundles"][h]
            report = error_functionals(state["slices"][h], bundle, bench)
            state["reports"][h] = report
            gap = exit_gap_moments(bundle, 1.0)
            x0 = np.asarray(spec.x0)[None, :]
            v0 = float(state["slices"][h].evaluate(0.0, x0)[0])
            state["extras"][h] = {"exit_gap_p1": gap.estimate,
                                  "exit_gap_p1_ci": gap.ci_halfwidth,
                                  "v0": v0}
            ws.write(f"errors_h{_h_tag(h)}.csv", _error_csv(report))
            # bundles are large at desk scale; only the moments stage may
            # still read the finest one
            if not (config.moments_enabled and h == h_fine):
                del state["bundles"][h]

    def stage_rates():
        table = build_rate_table(state["reports"], state["extras"],
                                 config.windows)
        ws.write("rates.csv", table.to_csv())
        ws.write("rates_fit.csv", table.fits_to_csv())
        return table

    def stage_moments():
        if not config.moments_enabled:
            return
        h = min(config.h_values)
        bundle = state["bundles"].get(h)
        if bundle is None or bundle.n_paths < config.moment_batches[-1]:
            bundle = coupled_fine_reference(
                spec, GridSpec(h, t_trunc), config.refine_k,
                config.moment_batches[-1],
                derive_seed(config.seed, "moments"), backend=backend)
        scan = exp_moment_scan(
            bundle.fine.exit_times if bundle.fine is not None
            else bundle.exit_times,
            config.moment_grid, config.moment_batches, t_max=t_trunc)
        scan.to_csv(ws.path / "moments.csv")
        ws.write_file_hash("moments.csv")

    def stage_checks():
        if not config.checks_enabled:
            return
        rng = np.random.default_rng(derive_seed(config.seed, "gronwall"))
        jobs = []
        for _ in range(config.gronwall_chains):
            c = float(rng.uniform(0.7, 1.6))
            k = float(rng.uniform(0.0, 2.0))
            steps = int(rng.integers(2, 12))
            jobs.append((c, k, steps, int(rng.integers(0, 2**31))))

        def _verify(job):
            c, k, steps, chain_seed = job
            chain = random_hypothesis_chain(3, steps, chain_seed, C=c, K=k)
            rep = discrete_gronwall_verify(chain, c, k)
            if rep.hypothesis_ok and rep.holds:
                return None
            return {"seed": chain_seed, "C": c, "K": k,
                    "chain": chain.to_text()}

        # chains are independent; map order keeps results deterministic
        # for any worker count
        if config.workers > 1:
            from concurrent.futures import ThreadPoolExecutor
            with ThreadPoolExecutor(max_workers=config.workers) as pool:
                outcomes = list(pool.map(_verify, jobs))
        else:
            outcomes = [_verify(j) for j in jobs]
        violations = [o for o in outcomes if o is not None]
        g = np.random.Generator(np.random.Philox(
            key=derive_seed(config.seed, "kolmogorov")))
        n, n_steps, dt = config.kolmogorov_paths, 64, 1.0 / 64
        incr = g.standard_normal((n, n_steps)) * math.sqrt(dt)
        W = np.concatenate([np.zeros((n, 1)), np.cumsum(incr, axis=1)],
                           axis=1)
        lags = [1, 2, 4, 8, 16, 32]
        doc = {
            "schema": _SCHEMA,
            "gronwall": {"chains": config.gronwall_chains,
                         "violations": len(violations),
                         "witnesses": violations},
            "kolmogorov": {
                "alpha_p2": kolmogorov_ratio_fit(W, 2, lags, dt),
                "alpha_p4": kolmogorov_ratio_fit(W, 4, lags, dt),
                "paths": n,
            },
        }
        ws.write("checks.json", json.dumps(doc, indent=2, sort_keys=True)
                 + "\n")

    _run_stage("simulate", stage_simulate)
    _run_stage("solve", stage_solve)
    _run_stage("errors", stage_errors)
    table = _run_stage("rates", stage_rates) or RateTable(rows=(), fits=())
    _run_stage("moments", stage_moments)
    _run_stage("checks", stage_checks)
    return dataclasses.replace(table, out_dir=str(ws.path))


def _error_csv(report) -> str:
    fields = [f.name for f in dataclasses.fields(report)]
    head = ",".join(fields)
    row = ",".join(_csv_cell(getattr(report, f)) for f in fields)
    return f"{head}\n{row}\n"


def verify_run_dir(path) -> dict:
    """Re-hash artifacts under a run directory against its manifest.

    Returns the manifest; raises ConfigurationError on any mismatch or
    missing file.
    """
    run = Path(path)
    manifest_path = run / "manifest.json"
    if not manifest_path.exists():
        raise ConfigurationError(f"no manifest.json under {run}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("schema") != _SCHEMA:
        raise ConfigurationError(
            f"unknown manifest schema {manifest.get('schema')!r}")
    for name, want in sorted(manifest.get("artifacts", {}).items()):
        target = run / name
        if not target.exists():
            raise ConfigurationError(f"artifact missing: {name}")
        got = hashlib.sha256(target.read_bytes()).hexdigest()
        if got != want:
            raise ConfigurationError(f"artifact hash mismatch: {name}")
    return manifest
