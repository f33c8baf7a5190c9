"""Command-line experiment runner.

Every run writes its artifacts and a ``manifest.json`` (config echo,
versions, seed, wall time and a sha256 per produced file) into one output
directory. Exit status is 0 when every verdict passes, 2 when one fails and
1 on errors.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import platform
import re
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .flow import FlowConfig, trace
from .functionals import Equilibrium, parse_functional, to_string
from .grid import Grid, density_of, dump_wavefunction, l2_norm_sq, sample_from_density, write_density_csv
from .lab import check_equivariance, continuity_residual, ergodic_time_average, l1_distance, phase_average
from .propagator import PotentialSpec, SuperpositionState, build_hamiltonian, solve_eigenbasis
from .records import (
    EvolutionRecord,
    gaussian,
    record_free,
    record_from_split_step,
    record_from_superposition,
    record_product,
    standard_suite,
)

EXIT_PASS, EXIT_ERROR, EXIT_FAIL = 0, 1, 2
U64 = 2**64


class ConfigError(ValueError):
    """Invalid configuration; ``line`` points into the config file when known."""

    def __init__(self, message, line=None, path=None):
        super().__init__(message)
        self.message = message
        self.line = line
        self.path = path

    def __str__(self):
        where = str(self.path or "config")
        if self.line is not None:
            where += f":{self.line}"
        return f"{where}: {self.message}"


# ---------------------------------------------------------------------------
# Configuration


def _default_state():
    return {"type": "superposition", "indices": [0, 1], "moduli": [0.5**0.5, 0.5**0.5], "phases": [0.0, 0.0], "modes": 8}


@dataclass
class ExperimentConfig:
    """Everything one run needs; serializes to and from plain JSON without loss."""

    dim: int = 1
    extent: float | list = 20.0
    points: int | list = 512
    hbar: float = 1.0
    mass: float = 1.0
    potential: dict | list = field(default_factory=lambda: {"kind": "harmonic", "omega": 1.0})
    state: dict | list = field(default_factory=_default_state)
    propagator: str = "eigenbasis"
    dt: float = 1e-3
    dt_frame: float = 1e-2
    T: float = 5.0
    flow: dict = field(default_factory=lambda: FlowConfig(dt_flow=1e-2).to_dict())
    functionals: list = field(default_factory=lambda: ["equilibrium"])
    N: int = 100_000
    seed: int = 42
    checkpoints: list = field(default_factory=lambda: [1.0, 2.0, 3.0, 4.0, 5.0])
    thresholds: dict = field(default_factory=lambda: {"ks": 0.01, "l1": 0.05, "ergodic_l1": 0.02})
    ergodic: dict = field(default_factory=lambda: {"T": 2000.0, "samples": 40001})
    trajectories: int = 10
    out: str = "bohmeq-out"

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict, text: str | None = None, path=None) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("top level must be a JSON object", 1, path)
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(f"unknown key {key!r}", _line_of(text, [key]), path)
        cfg = cls(**data)
        if path is not None:
            cfg._base = Path(path).parent
        cfg.validate(text, path)
        return cfg

    @classmethod
    def from_json(cls, text: str, path=None) -> "ExperimentConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed JSON: {exc.msg} (column {exc.colno})", exc.lineno, path) from None
        return cls.from_dict(data, text, path)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError("config file not found", None, path)
        return cls.from_json(path.read_text(), path)

    # validation -----------------------------------------------------------------
    def validate(self, text=None, path=None):
        def fail(msg, *keys):
            raise ConfigError(msg, _line_of(text, list(keys)), path)

        if self.dim not in (1, 2):
            fail("dim must be 1 or 2", "dim")
        try:
            Grid(self.dim, self.extent, self.points)
        except (ValueError, TypeError) as exc:
            fail(str(exc), "points")
        for key in ("hbar", "mass", "dt", "dt_frame", "T"):
            value = getattr(self, key)
            if not isinstance(value, (int, float)) or not value > 0:
                fail(f"{key} must be a positive number", key)
        if self.propagator not in ("eigenbasis", "split-step", "free-spectral"):
            fail("propagator must be eigenbasis, split-step or free-spectral", "propagator")
        if abs(round(self.T / self.dt_frame) * self.dt_frame - self.T) > 1e-9 * self.T:
            fail("T must be a whole number of frame intervals", "T")
        if not isinstance(self.N, int) or self.N < 1:
            fail("N must be a positive integer", "N")
        if not isinstance(self.seed, int) or not 0 <= self.seed < U64:
            fail("seed must be an unsigned 64-bit integer", "seed")
        if not isinstance(self.trajectories, int) or self.trajectories < 1:
            fail("trajectories must be a positive integer", "trajectories")
        if any(not isinstance(t, (int, float)) or t < 0 or t > self.T + 1e-12 for t in self.checkpoints) or not self.checkpoints:
            fail("checkpoints must be nonempty and lie in [0, T]", "checkpoints")
        try:
            FlowConfig(**self.flow)
        except (TypeError, ValueError) as exc:
            fail(f"flow: {exc}", "flow")
        for name in self.functionals:
            try:
                parse_functional(name)
            except ValueError as exc:
                fail(str(exc), "functionals")
        for key in ("ks", "l1", "ergodic_l1"):
            if key not in self.thresholds or not self.thresholds[key] > 0:
                fail(f"thresholds.{key} must be positive", "thresholds")
        if not self.ergodic.get("T", 0) > 0 or int(self.ergodic.get("samples", 0)) < 2:
            fail("ergodic needs T > 0 and samples >= 2", "ergodic")
        pots = self.potential if isinstance(self.potential, list) else [self.potential]
        states = self.state if isinstance(self.state, list) else [self.state]
        if self.dim == 2 and (len(pots) != 2 or len(states) != 2):
            fail("2D runs need one potential and one state per axis", "potential")
        if self.dim == 1 and (isinstance(self.potential, list) or isinstance(self.state, list)):
            fail("1D runs take a single potential and state", "potential")
        for pot in pots:
            try:
                self._potential(pot)
            except (ValueError, TypeError, KeyError, OSError) as exc:
                fail(f"potential: {exc}", "potential", "kind")
        for st in states:
            kind = st.get("type")
            if kind == "gaussian":
                if not st.get("sigma", 1.0) > 0:
                    fail("gaussian sigma must be positive", "state", "sigma")
            elif kind == "superposition":
                idx, mod = st.get("indices", []), st.get("moduli", [])
                if not idx or len(idx) != len(mod) or abs(sum(c * c for c in mod) - 1) > 1e-12:
                    fail("superposition needs matching indices and moduli with sum of squares 1", "state", "moduli")
            else:
                fail("state type must be gaussian or superposition", "state", "type")
        if self.propagator == "eigenbasis" and any(st.get("type") != "superposition" for st in states):
            fail("the eigenbasis propagator needs a superposition state", "propagator")
        if self.propagator == "free-spectral" and any(p.get("kind") != "free" for p in pots):
            fail("the free-spectral propagator needs a free potential", "propagator")

    def _potential(self, spec: dict) -> PotentialSpec:
        kind = spec.get("kind")
        if kind == "free":
            return PotentialSpec.free()
        if kind == "harmonic":
            return PotentialSpec.harmonic(float(spec.get("omega", 1.0)))
        if kind == "quartic":
            return PotentialSpec.quartic(float(spec["a"]), float(spec["b"]))
        if kind == "tabulated":
            base = getattr(self, "_base", Path("."))
            file = Path(spec["path"])
            file = file if file.is_absolute() else base / file
            if not file.is_file():
                raise ValueError(f"tabulated potential file {str(file)!r} does not exist")
            return PotentialSpec.from_csv(file, Grid(1, self._axis(self.extent, 0), self._axis(self.points, 0)))
        raise ValueError(f"unknown potential kind {kind!r}")

    @staticmethod
    def _axis(value, k):
        return value[k] if isinstance(value, list) else value

    def grid(self) -> Grid:
        return Grid(self.dim, self.extent, self.points)

    def flow_config(self) -> FlowConfig:
        return FlowConfig(**self.flow)

    def functional_objects(self):
        return [parse_functional(s) for s in self.functionals]

    # building records --------------------------------------------------------------
    def _axis_record(self, k: int) -> tuple[EvolutionRecord, SuperpositionState | None]:
        pot = self.potential[k] if isinstance(self.potential, list) else self.potential
        st = self.state[k] if isinstance(self.state, list) else self.state
        grid = Grid(1, self._axis(self.extent, k), self._axis(self.points, k))
        V = self._potential(pot)
        state = None
        if st["type"] == "superposition":
            modes = max(int(st.get("modes", 8)), max(st["indices"]) + 1)
            es = solve_eigenbasis(build_hamiltonian(V, grid, self.hbar, self.mass), modes)
            state = SuperpositionState(es, st["indices"], st["moduli"], st.get("phases"))
            if self.propagator == "eigenbasis":
                return record_from_superposition(state, self.T, self.dt_frame, V, "config"), state
            psi0 = es.mode(0).with_amplitudes(state.amplitudes_at(0.0))
        else:
            psi0 = gaussian(grid, st.get("center", 0.0), st.get("sigma", 1.0), st.get("phase_slope", 0.0), self.mass, self.hbar)
        if self.propagator == "free-spectral":
            return record_free(psi0, self.T, self.dt_frame, "config"), state
        return record_from_split_step(psi0, V, self.T, self.dt_frame, self.dt, "config"), state

    def build(self) -> tuple[EvolutionRecord, SuperpositionState | None]:
        if self.dim == 1:
            return self._axis_record(0)
        if self.propagator == "split-step":
            from .grid import WaveFunction

            (ra, _), (rb, _) = self._axis_record(0), self._axis_record(1)
            grid = self.grid()
            psi0 = WaveFunction(grid, np.multiply.outer(ra.frames[0], rb.frames[0]), self.mass, self.hbar)
            V = tuple(self._potential(p) for p in self.potential)
            return record_from_split_step(psi0, V, self.T, self.dt_frame, self.dt, "config"), None
        (ra, _), (rb, _) = self._axis_record(0), self._axis_record(1)
        return record_product(ra, rb, "config"), None


def _line_of(text: str | None, keys: list[str]) -> int | None:
    """Line of the first ``"key":`` after the previous key's line, following ``keys`` in order."""
    if not text:
        return None
    lines = text.splitlines()
    start, found = 0, None
    for key in keys:
        pat = re.compile(r'"' + re.escape(key) + r'"\s*:')
        for i in range(start, len(lines)):
            if pat.search(lines[i]):
                found, start = i + 1, i
                break
    return found


# ---------------------------------------------------------------------------
# Artifacts


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9.]+", "_", text).strip("_")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions() -> dict:
    import numba
    import scipy
    import sklearn

    return {
        "bohmeq": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
        "scikit-learn": sklearn.__version__,
    }


def write_manifest(out: Path, command: str, cfg: ExperimentConfig, exit_code: int, wall: float) -> Path:
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = {
        "command": command,
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "versions": _versions(),
        "wall_time_s": round(wall, 3),
        "exit_code": exit_code,
        "files": {str(p.relative_to(out)): _sha256(p) for p in files},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Subcommands; each returns an exit code


def cmd_propagate(cfg: ExperimentConfig, out: Path) -> int:
    rec, _ = cfg.build()
    (out / "frames").mkdir()
    with open(out / "norms.csv", "w") as fh:
        fh.write("t,norm\n")
        for j, t in enumerate(rec.times):
            psi = rec.frame(j)
            dump_wavefunction(psi, out / "frames" / f"frame_{j:05d}.bin")
            fh.write(f"{float(t)!r},{l2_norm_sq(psi)!r}\n")
    print(f"{rec.n_frames} frames ({rec.provenance}) written to {out}")
    return EXIT_PASS


def cmd_trajectories(cfg: ExperimentConfig, out: Path) -> int:
    rec, _ = cfg.build()
    ens = sample_from_density(density_of(rec.frame(0)).normalize(), cfg.trajectories, cfg.seed)
    traj = trace(ens, rec, rec.times, cfg.flow_config())
    for i in range(traj.n_members):
        traj.to_csv(out / f"trajectory_{i:04d}.csv", member=i)
    with open(out / "flags.csv", "w") as fh:
        fh.write("member,node_degenerate\n")
        for i, flag in enumerate(traj.flags):
            fh.write(f"{i},{int(flag)}\n")
    print(f"{traj.n_members} trajectories, {int(traj.flags.sum())} node-degenerate")
    return EXIT_PASS


def cmd_equivariance(cfg: ExperimentConfig, out: Path) -> int:
    rec, _ = cfg.build()
    code = EXIT_PASS
    for f in cfg.functional_objects():
        r = check_equivariance(
            f, rec, cfg.N, cfg.seed, cfg.checkpoints, cfg.flow_config(), cfg.thresholds["ks"], cfg.thresholds["l1"]
        )
        slug = _slug(to_string(f))
        r.to_json(out / f"report_{slug}.json")
        r.to_csv(out / f"series_{slug}.csv")
        print(f"{to_string(f):24s} max {'KS' if r.dim == 1 else 'L1'} {r.max_metric:.4f}  {r.verdict.upper()}")
        if not r.passed:
            code = EXIT_FAIL
    return code


def cmd_residual(cfg: ExperimentConfig, out: Path) -> int:
    rec, _ = cfg.build()
    base = continuity_residual(Equilibrium(), rec)
    rows = []
    for f in [Equilibrium()] + [g for g in cfg.functional_objects() if not isinstance(g, Equilibrium)]:
        res = base if isinstance(f, Equilibrium) else continuity_residual(f, rec)
        rows.append((to_string(f), res, res / base if base > 0 else float("inf")))
    with open(out / "residual.csv", "w") as fh:
        fh.write("functional,residual,ratio_to_equilibrium\n")
        for name, res, ratio in rows:
            fh.write(f"{name},{float(res)!r},{float(ratio)!r}\n")
            print(f"{name:24s} residual {res:.3e}  ratio {ratio:.3g}")
    return EXIT_PASS


def cmd_ergodic(cfg: ExperimentConfig, out: Path) -> int:
    if cfg.dim != 1:
        raise ConfigError("ergodic runs are 1D")
    _, state = cfg._axis_record(0) if cfg.propagator == "eigenbasis" else (None, None)
    if state is None:
        raise ConfigError("ergodic runs need a superposition state with the eigenbasis propagator")
    T, samples = float(cfg.ergodic["T"]), int(cfg.ergodic["samples"])
    avg = ergodic_time_average(state, T, samples)
    ref = phase_average(state)
    l1 = l1_distance(avg, ref)
    write_density_csv(avg, out / "time_average.csv")
    write_density_csv(ref, out / "phase_average.csv")
    ok = l1 <= cfg.thresholds["ergodic_l1"]
    _write_json(out / "ergodic.json", {"T": T, "samples": samples, "l1": l1, "threshold": cfg.thresholds["ergodic_l1"], "verdict": "pass" if ok else "fail"})
    print(f"L1(time average, phase average) = {l1:.3e} at T = {T:g}  {'PASS' if ok else 'FAIL'}")
    return EXIT_PASS if ok else EXIT_FAIL


FALSIFY_SET = ("equilibrium", "power:alpha=1", "power:alpha=4", "gradmix:beta=0.25")


def cmd_falsify(cfg: ExperimentConfig, out: Path) -> int:
    from .acceptance import KS_GAP, RESIDUAL_GAP

    records = standard_suite(T=cfg.T, include_2d=False)
    fcfg = cfg.flow_config()
    rows = []
    eq = {}
    for name, rec in records.items():
        for fname in FALSIFY_SET:
            f = parse_functional(fname)
            r = check_equivariance(f, rec, cfg.N, cfg.seed, cfg.checkpoints, fcfg, cfg.thresholds["ks"], cfg.thresholds["l1"])
            res = continuity_residual(f, rec)
            r.residual_norm = res
            r.to_json(out / f"report_{_slug(fname)}_{name}.json")
            if fname == "equilibrium":
                eq[name] = (r.max_ks, res)
            rows.append((fname, name, r.max_ks, res, r.verdict))
    table, gap_ok = [], True
    for fname in FALSIFY_SET:
        hits = []
        for f_, name, ks, res, verdict in rows:
            if f_ != fname:
                continue
            ks_ratio, res_ratio = ks / eq[name][0], res / eq[name][1]
            if fname != "equilibrium" and ks_ratio >= KS_GAP and res_ratio >= RESIDUAL_GAP:
                hits.append(name)
            table.append((fname, name, ks, ks_ratio, res, res_ratio, verdict))
        if fname == "equilibrium":
            status = "PASS" if all(v == "pass" for f_, *_, v in rows if f_ == fname) else "FAIL"
            gap_ok &= status == "PASS"
        else:
            status = "FAIL-equivariance" if hits else "NO-GAP"
            gap_ok &= bool(hits)
        table.append((fname, "overall", status, hits))
    with open(out / "falsify.csv", "w") as fh:
        fh.write("functional,record,max_ks,ks_ratio,residual,residual_ratio,verdict\n")
        for row in table:
            if row[1] != "overall":
                fh.write(",".join(repr(float(x)) if isinstance(x, float) else str(x) for x in row) + "\n")
    print(f"{'functional':20s} {'record':16s} {'max KS':>8s} {'xEq':>7s} {'residual':>10s} {'xEq':>10s}")
    for row in table:
        if row[1] == "overall":
            print(f"{row[0]:20s} => {row[2]}" + (f" (gap on {', '.join(row[3])})" if row[3] else ""))
        else:
            print(f"{row[0]:20s} {row[1]:16s} {row[2]:8.4f} {row[3]:7.1f} {row[4]:10.3e} {row[5]:10.3g}")
    return EXIT_PASS if gap_ok else EXIT_FAIL


def cmd_suite(cfg: ExperimentConfig, out: Path) -> int:
    from .acceptance import AcceptanceRun

    run = AcceptanceRun(N=cfg.N, seed=cfg.seed, checkpoints=cfg.checkpoints, cfg=cfg.flow_config(), T=cfg.T)
    results = []
    for crit in run.all():
        print(crit.line(), flush=True)
        results.append({"name": crit.name, "passed": crit.passed, "summary": crit.summary})
    _write_json(out / "acceptance.json", results)
    return EXIT_PASS if all(r["passed"] for r in results) else EXIT_FAIL


COMMANDS = {
    "propagate": (cmd_propagate, "evolve the configured state; frames and norms CSV"),
    "trajectories": (cmd_trajectories, "Bohmian trajectories from |psi_0|^2 samples"),
    "equivariance": (cmd_equivariance, "pushforward test for each configured functional"),
    "residual": (cmd_residual, "continuity-equation residual per functional"),
    "ergodic": (cmd_ergodic, "time average versus phase average of |psi_t|^2"),
    "falsify": (cmd_falsify, "candidate suite against equilibrium on the standard records"),
    "suite": (cmd_suite, "every acceptance run"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bohmeq", description="Bohmian equivariance experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", type=Path, help="JSON experiment config (defaults when omitted)")
        p.add_argument("--seed", type=int, help="override the config seed (unsigned 64-bit)")
        p.add_argument("--out", type=Path, help="output directory (default: <config out>/<command>)")
        p.add_argument("--threads", type=int, default=0, help="numba threads, 0 = automatic; never changes results")
    return parser


def _set_threads(n: int) -> None:
    if n < 0:
        raise ConfigError("--threads must be >= 0")
    if n:
        import warnings

        import numba

        with warnings.catch_warnings():
            # threading-layer probing warns about optional TBB versions
            warnings.simplefilter("ignore")
            numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    start = time.perf_counter()
    try:
        cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            if not 0 <= args.seed < U64:
                raise ConfigError("--seed must be an unsigned 64-bit integer")
            cfg.seed = args.seed
        _set_threads(args.threads)
        out = args.out or Path(cfg.out) / args.command
        if out.exists() and any(out.iterdir()):
            raise ConfigError(f"output directory {str(out)!r} is not empty")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    out.mkdir(parents=True, exist_ok=True)
    try:
        code = COMMANDS[args.command][0](cfg, out)
    except (ConfigError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_ERROR
    write_manifest(out, args.command, cfg, code, time.perf_counter() - start)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
