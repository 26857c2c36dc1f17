"""Convergence, epsilon-transfer and chaos experiments with their config,
reports and result files."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.stats import multinomial

from mfcontrol.hjb_solver import ValueField, extract_feedback, solve_JN, solve_VN
from mfcontrol.limit_mfcp import ReferenceValue, flow_cost, optimal_trajectory
from mfcontrol.model import CostTerm, ProblemSpec, quadratic_preset
from mfcontrol.simulator import SimConfig, estimate_sup_distance, simulate_coupled_particles, simulate_empirical

SCHEMA_VERSION = 1
TOOL_NAME = "mfcontrol"
CACHE_ENV = "MFCONTROL_CACHE_DIR"
EXACT_TOL = 1e-9
GAP_FLOOR = -1e-8
EXECUTION_KEYS = ("threads", "out_dir", "formats")

# slope thresholds, 10% inside the proven rates
CONVERGENCE_SLOPE = -0.45
TRANSFER_SLOPE = -0.4
CHAOS_SLOPE = -0.111
PARTICLE_SLOPE = -0.45


class ConfigError(ValueError):
    """Invalid experiment configuration; the message starts with the key path."""


def _tool_version() -> str:
    from mfcontrol import __version__

    return __version__


# -- configuration --------------------------------------------------------------

@dataclass
class PresetConfig:
    kind: str = "quadratic"
    flag: str = "C"
    running: list = field(default_factory=list)
    terminal: list = field(default_factory=list)
    adjacency: Optional[list] = None


@dataclass
class ExperimentConfig:
    preset: PresetConfig = field(default_factory=PresetConfig)
    d: int = 2
    T: float = 1.0
    M: float = 1.0
    N_list: list = field(default_factory=lambda: [8, 16, 32, 64])
    N_ref: int = 256
    dt: Optional[float] = None
    paths: int = 200
    seed: int = 0
    epsilon: float = 0.0
    m0: Optional[list] = None
    scheme: str = "central"
    threads: int = 1
    out_dir: str = "results"
    formats: list = field(default_factory=lambda: ["csv", "json"])

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def fail(key, msg):
            raise ConfigError(f"{key}: {msg}")

        if not isinstance(self.d, int) or self.d < 2:
            fail("d", "must be an integer >= 2")
        if not self.T > 0:
            fail("T", "must be positive")
        if not self.M >= 0:
            fail("M", "must be nonnegative")
        if self.preset.kind != "quadratic":
            fail("preset.kind", f"unknown preset {self.preset.kind!r}")
        if self.preset.flag not in ("A", "B", "C"):
            fail("preset.flag", "must be A, B or C")
        for name in ("running", "terminal"):
            for k, term in enumerate(getattr(self.preset, name)):
                key = f"preset.{name}[{k}]"
                if not isinstance(term, dict) or "kind" not in term:
                    fail(key, "cost term needs a 'kind'")
                params = {a: b for a, b in term.items() if a != "kind"}
                try:
                    CostTerm.build(term["kind"], self.d, **params)
                except KeyError as exc:
                    fail(f"{key}.{exc.args[0]}", "missing parameter")
                except (TypeError, ValueError) as exc:
                    fail(key, str(exc))
        if not self.N_list or any(not isinstance(n, int) or n < 1 for n in self.N_list):
            fail("N_list", "must be a nonempty list of positive integers")
        if not isinstance(self.N_ref, int) or self.N_ref < 1:
            fail("N_ref", "must be a positive integer")
        if self.N_ref < 4 * max(self.N_list):
            fail("N_ref", f"must be at least 4 * max(N_list) = {4 * max(self.N_list)}")
        for n in self.N_list:
            if self.N_ref % n:
                fail("N_ref", f"must be a multiple of every N (not of {n})")
        if self.dt is not None and not self.dt > 0:
            fail("dt", "must be positive or null")
        if self.paths < 1:
            fail("paths", "must be positive")
        if not 0 <= self.seed < 2**64:
            fail("seed", "must be an unsigned 64-bit integer")
        if self.threads < 1:
            fail("threads", "must be positive")
        if self.scheme not in ("forward", "central"):
            fail("scheme", "must be 'forward' or 'central'")
        if self.m0 is not None:
            m0 = np.asarray(self.m0, dtype=float)
            if m0.shape != (self.d,) or np.any(m0 <= 0) or abs(m0.sum() - 1) > 1e-9:
                fail("m0", "must be an interior point of the simplex of length d")
        bad = set(self.formats) - {"csv", "json"}
        if bad or not self.formats:
            fail("formats", "must be a nonempty subset of ['csv', 'json']")

    # construction helpers

    def initial(self) -> np.ndarray:
        return np.full(self.d, 1.0 / self.d) if self.m0 is None else np.asarray(self.m0, dtype=float)

    def build_spec(self) -> ProblemSpec:
        return quadratic_preset(
            self.d,
            T=self.T,
            M=self.M,
            running=self.preset.running,
            terminal=self.preset.terminal,
            adjacency=self.preset.adjacency,
            flag=self.preset.flag,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def content(self) -> dict:
        """The fields that determine results; execution settings are left out
        so outputs do not depend on thread count or destination."""
        return {k: v for k, v in self.to_dict().items() if k not in EXECUTION_KEYS}

    def config_hash(self) -> str:
        blob = json.dumps(self.content(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("<root>: config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        for key in raw:
            if key not in known:
                raise ConfigError(f"{key}: unknown key")
        data = dict(raw)
        preset = data.pop("preset", {})
        if not isinstance(preset, dict):
            raise ConfigError("preset: must be an object")
        pknown = {f.name for f in dataclasses.fields(PresetConfig)}
        for key in preset:
            if key not in pknown:
                raise ConfigError(f"preset.{key}: unknown key")
        return cls(preset=PresetConfig(**preset), **data)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"<root>: not valid JSON ({exc})") from exc
    return ExperimentConfig.from_dict(raw)


def dump_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- reports ------------------------------------------------------------------

def fit_slope(Ns, errors) -> tuple[float, float]:
    """Least-squares (slope, intercept) of log E_N against log N."""
    if len(Ns) < 2:
        raise ValueError("need at least two points for a slope")
    slope, intercept = np.polyfit(np.log(np.asarray(Ns, dtype=float)), np.log(np.asarray(errors, dtype=float)), 1)
    return float(slope), float(intercept)


def strictly_decreasing(values) -> bool:
    v = np.asarray(values, dtype=float)
    return bool(np.all(np.diff(v) < 0))


@dataclass
class RateReport:
    """Per-N errors with their log-log fit and the pass/fail verdict."""

    name: str
    Ns: list
    errors: list
    threshold: float
    slope: Optional[float] = None
    intercept: Optional[float] = None
    stderr: Optional[list] = None
    runtimes: list = field(default_factory=list)
    exact_match: bool = False
    passed: bool = False
    extras: dict = field(default_factory=dict)
    min_points: int = 4

    def finalize(self) -> "RateReport":
        errs = np.asarray(self.errors, dtype=float)
        if np.all(np.abs(errs) <= EXACT_TOL):
            self.exact_match, self.slope, self.intercept, self.passed = True, None, None, True
            return self
        if len(self.Ns) < self.min_points:
            raise ValueError(f"{self.name}: a rate fit needs at least {self.min_points} values of N")
        if np.any(errs <= 0):
            self.slope, self.intercept, self.passed = None, None, False
            return self
        self.slope, self.intercept = fit_slope(self.Ns, errs)
        self.passed = strictly_decreasing(errs) and self.slope <= self.threshold
        return self

    def summary(self) -> dict:
        out = {
            "name": self.name,
            "N": list(self.Ns),
            "error": [float(e) for e in self.errors],
            "slope": self.slope,
            "intercept": self.intercept,
            "threshold": self.threshold,
            "exact_match": self.exact_match,
            "passed": self.passed,
        }
        if self.stderr is not None:
            out["stderr"] = [float(s) for s in self.stderr]
        out.update(self.extras)
        return out


# -- experiments ----------------------------------------------------------------

def _cache_dir() -> Optional[Path]:
    root = os.environ.get(CACHE_ENV)
    return Path(root) if root else None


def _solve_cached(spec: ProblemSpec, cfg: ExperimentConfig, N: int) -> ValueField:
    """solve_VN, read from or written to $MFCONTROL_CACHE_DIR when set."""
    root = _cache_dir()
    key = hashlib.sha256(json.dumps(
        {"spec": spec.describe(), "N": N, "dt": cfg.dt}, sort_keys=True).encode()).hexdigest()[:20]
    if root is not None:
        path = root / f"V-{key}.mfcvf"
        if path.exists():
            return ValueField.load(path, spec)
    field_ = solve_VN(spec, N, dt=cfg.dt)
    if root is not None:
        root.mkdir(parents=True, exist_ok=True)
        tmp = root / f".V-{key}.{os.getpid()}.tmp"
        field_.save(tmp, {"key": key})
        os.replace(tmp, path)
    return field_


def _per_N(cfg: ExperimentConfig, job):
    """Run job(N) for every N, concurrently when threads > 1, in N order."""
    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            return list(pool.map(job, cfg.N_list))
    return [job(N) for N in cfg.N_list]


def reference_for(cfg: ExperimentConfig, spec: Optional[ProblemSpec] = None) -> ReferenceValue:
    spec = spec or cfg.build_spec()
    return ReferenceValue(spec, _solve_cached(spec, cfg, cfg.N_ref), cfg.scheme)


def run_convergence(cfg: ExperimentConfig) -> RateReport:
    """E_N = max over knots and S_d^N of |V^N - V^{N_ref}| with exact grid embedding."""
    spec = cfg.build_spec()
    ref = reference_for(cfg, spec).field

    def job(N):
        t0 = time.perf_counter()
        VN = _solve_cached(spec, cfg, N)
        emb = ref.grid.embed_indices(VN.grid)
        err = 0.0
        for t, row in zip(VN.times, VN.values):
            err = max(err, float(np.max(np.abs(row - ref.values_at(t, emb)))))
        return err, time.perf_counter() - t0

    res = _per_N(cfg, job)
    return RateReport(
        "converge", list(cfg.N_list), [r[0] for r in res], CONVERGENCE_SLOPE,
        runtimes=[r[1] for r in res],
    ).finalize()


def multinomial_weights(grid, N: int, m0) -> np.ndarray:
    """Law of mu^N_0 when the N initial states are i.i.d. with law m0."""
    return multinomial.pmf(grid.counts, N, np.asarray(m0, dtype=float))


def run_epsilon_transfer(cfg: ExperimentConfig) -> RateReport:
    """gap_N = E[J^N(alpha, mu^N_0) - V^N(0, mu^N_0)] for the open-loop limit control,
    with the expectation over the multinomial initial law computed exactly."""
    spec = cfg.build_spec()
    if spec.flag not in ("B", "C"):
        raise ValueError("epsilon transfer needs a flag-B preset")
    m0 = cfg.initial()
    ref = reference_for(cfg, spec)
    flow, _ = optimal_trajectory(spec, ref, m0)
    control = flow.open_loop()
    eps_hat = abs(flow_cost(spec, flow) - float(ref(0.0, m0)))

    def job(N):
        t0 = time.perf_counter()
        J = solve_JN(spec, control, N, dt=cfg.dt)
        V = _solve_cached(spec, cfg, N)
        w = multinomial_weights(J.grid, N, m0)
        return float(w @ (J.values[0] - V.values[0])), time.perf_counter() - t0

    res = _per_N(cfg, job)
    gaps = [r[0] for r in res]
    report = RateReport(
        "transfer", list(cfg.N_list), gaps, TRANSFER_SLOPE,
        runtimes=[r[1] for r in res],
        extras={"epsilon_hat": eps_hat, "epsilon": cfg.epsilon, "gap_floor": GAP_FLOOR},
    ).finalize()
    if min(gaps) < GAP_FLOOR:
        report.passed = False
    return report


def run_chaos(cfg: ExperimentConfig) -> RateReport:
    """E sup_t |mu^N_t - mu_t| under the N-agent feedback, plus the coupled
    per-particle mismatch between X and X-tilde."""
    spec = cfg.build_spec()
    if spec.flag not in ("B", "C"):
        raise ValueError("chaos experiment needs a flag-B preset")
    m0 = cfg.initial()
    ref = reference_for(cfg, spec)
    flow, limit = optimal_trajectory(spec, ref, m0)
    means, errs, mism, mism_se, psup, runtimes = [], [], [], [], [], []
    for N in cfg.N_list:
        t0 = time.perf_counter()
        policy = extract_feedback(spec, _solve_cached(spec, cfg, N))
        sim = SimConfig(N=N, paths=cfg.paths, seed=cfg.seed, threads=cfg.threads)
        ens = simulate_empirical(spec, policy, sim, m0, initial="iid")
        mean, se = estimate_sup_distance(ens, flow)
        coupled = simulate_coupled_particles(spec, policy, limit, flow, sim, m0)
        means.append(mean)
        errs.append(se)
        mism.append(float(coupled["mismatch_fraction"].mean()))
        mism_se.append(float(coupled["mismatch_fraction"].std(ddof=1) / math.sqrt(cfg.paths)) if cfg.paths > 1 else 0.0)
        psup.append(float(coupled["particle_sup"].mean()))
        runtimes.append(time.perf_counter() - t0)
    report = RateReport("chaos", list(cfg.N_list), means, CHAOS_SLOPE, stderr=errs,
                        runtimes=runtimes, min_points=3).finalize()
    p_slope = fit_slope(cfg.N_list, mism)[0] if min(mism) > 0 else None
    particle_ok = p_slope is not None and strictly_decreasing(mism) and p_slope <= PARTICLE_SLOPE
    report.extras = {
        "mismatch_fraction": mism,
        "mismatch_stderr": mism_se,
        "mismatch_slope": p_slope,
        "mismatch_threshold": PARTICLE_SLOPE,
        "particle_sup": psup,
        "particle_sup_slope": fit_slope(cfg.N_list, psup)[0] if min(psup) > 0 else None,
    }
    report.passed = report.passed and particle_ok
    return report


def derivative_error(field_ref: ValueField, N: int, knots=None) -> float:
    """max |D^{N,i}_j V_ref - D^i_j V_ref| over coarse points of S_d^N.

    D^{N,i} uses the embedded coarse step 1/N; D^i is the central difference
    of V_ref along e_j - e_i at the fine step 1/N_ref. Pairs whose fine
    stencil leaves the simplex are skipped.
    """
    from mfcontrol.simplex_grid import SimplexGrid

    fine = field_ref.grid
    coarse = SimplexGrid(fine.d, N)
    emb = fine.embed_indices(coarse)
    nb_c = coarse.neighbors
    nb_f = fine.neighbors[emb]
    back = np.swapaxes(nb_f, -1, -2)
    ok = (nb_c >= 0) & (nb_f >= 0) & (back >= 0)
    ok &= ~np.eye(fine.d, dtype=bool)[None]
    knots = range(len(field_ref.times)) if knots is None else knots
    worst = 0.0
    for k in knots:
        V = field_ref.values[k]
        here = V[emb][:, None, None]
        coarse_d = N * (V[emb[np.where(ok, nb_c, 0)]] - here)
        fine_d = 0.5 * fine.N * (V[np.where(ok, nb_f, 0)] - V[np.where(ok, back, 0)])
        worst = max(worst, float(np.max(np.abs(np.where(ok, coarse_d - fine_d, 0.0)))))
    return worst


# -- output -------------------------------------------------------------------

def provenance(cfg: ExperimentConfig) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "tool": TOOL_NAME,
        "tool_version": _tool_version(),
    }


def _header_line(meta: dict) -> str:
    return "# " + " ".join(f"{k}={v}" for k, v in meta.items())


def write_csv(path, header: list, rows, meta: dict) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(_header_line(meta) + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def write_json(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")


GNUPLOT = """# {name}: log-log error against N
set logscale xy
set xlabel "N"
set ylabel "{ylabel}"
set datafile separator ","
plot "{csv}" every ::2 using 1:2 with linespoints title "{name}"
"""


def emit_results(report: RateReport, out_dir, formats, cfg: ExperimentConfig) -> list:
    """Write <name>.csv / <name>.json (deterministic for a fixed config and seed),
    a gnuplot script and <name>_timings.csv. Returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = provenance(cfg)
    written = []
    if "csv" in formats:
        path = out / f"{report.name}.csv"
        cols = ["N", "error"]
        series = [report.Ns, report.errors]
        if report.stderr is not None:
            cols.append("stderr")
            series.append(report.stderr)
        for key, val in report.extras.items():
            if isinstance(val, list) and len(val) == len(report.Ns):
                cols.append(key)
                series.append(val)
        write_csv(path, cols, zip(*series), meta)
        gp = out / f"{report.name}.gp"
        gp.write_text(GNUPLOT.format(name=report.name, ylabel="error", csv=path.name))
        written += [path, gp]
    if "json" in formats:
        path = out / f"{report.name}.json"
        write_json(path, {"meta": meta, "config": cfg.content(), "report": report.summary()})
        written.append(path)
    timings = out / f"{report.name}_timings.csv"
    write_csv(timings, ["N", "runtime_s"], zip(report.Ns, report.runtimes), meta)
    written.append(timings)
    return written
