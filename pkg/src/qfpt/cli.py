"""Batch experiment runner.

Each subcommand runs one experiment kind from a YAML config, writes CSV
(and, for the figure-mapped kinds, an SVG plot) into the output directory,
plus a ``manifest.json`` echoing the config, seed, versions and wall time.
Exit codes: 0 success, 1 bound violation / strict failure, 2 config error.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import ancilla as ancilla_mod
from . import liouville, model, qfi_tur, reporting, trajectory

EXPERIMENT_KINDS = (
    "echo", "qfi", "fpt-moments", "trajectories", "sweep-kappa",
    "sweep-random", "ancilla", "classical-check", "tur-check",
)


class ConfigError(ValueError):
    """Configuration file problem, annotated with the offending key or line."""


def load_config(path: str) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as e:
        mark = e.problem_mark
        where = f" (line {mark.line + 1}, column {mark.column + 1})" if mark else ""
        raise ConfigError(f"config parse error{where}: {e.problem}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"config parse error: {e}") from e
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping of keys to values")
    return data


def _need(cfg: dict, key: str):
    if key not in cfg:
        raise ConfigError(f"missing required config key: {key!r}")
    return cfg[key]


def _complex_entry(v, key: str) -> complex:
    if isinstance(v, (int, float)):
        return complex(v)
    if isinstance(v, (list, tuple)) and len(v) == 2:
        return complex(float(v[0]), float(v[1]))
    raise ConfigError(f"key {key!r}: matrix entries must be numbers or [re, im] pairs")


def _complex_matrix(node, dim: int, key: str) -> np.ndarray:
    if not isinstance(node, list) or len(node) != dim:
        raise ConfigError(f"key {key!r}: expected {dim} rows")
    out = np.zeros((dim, dim), dtype=complex)
    for i, row in enumerate(node):
        if not isinstance(row, list) or len(row) != dim:
            raise ConfigError(f"key {key!r}: row {i} must have {dim} entries")
        for j, v in enumerate(row):
            out[i, j] = _complex_entry(v, key)
    return out


def parse_system(node, key: str = "system") -> model.LindbladSystem:
    """Factory shorthand ({atom: ...} / {classical: ...}) or explicit matrices."""
    if not isinstance(node, dict):
        raise ConfigError(f"key {key!r} must be a mapping")

    def need(field):
        if field not in node:
            raise ConfigError(f"key {key!r}: missing field {field!r}")
        return node[field]

    try:
        if "atom" in node:
            params = node["atom"]
            return model.two_level_atom(
                float(params["delta"]), float(params["omega"]), float(params["kappa"]))
        if "classical" in node:
            rates = np.asarray(node["classical"]["rates"], dtype=float)
            return model.embed_classical(model.ClassicalRateMatrix(rates))
        dim = int(need("dim"))
        h = _complex_matrix(need("hamiltonian"), dim, f"{key}.hamiltonian")
        jumps_node = need("jumps")
        if not isinstance(jumps_node, list) or not jumps_node:
            raise ConfigError(f"key {key!r}: jumps must be a nonempty list of matrices")
        jumps = tuple(_complex_matrix(jn, dim, f"{key}.jumps[{i}]")
                      for i, jn in enumerate(jumps_node))
        return model.LindbladSystem(h, jumps)
    except KeyError as e:
        raise ConfigError(f"key {key!r}: missing field {e.args[0]!r}") from e
    except model.ModelError as e:
        raise ConfigError(f"key {key!r}: {e}") from e


def system_to_config(sys: model.LindbladSystem) -> dict:
    """Explicit-matrix config mapping (row-major [re, im] pairs) for a system."""
    def pairs(m):
        return [[[float(v.real), float(v.imag)] for v in row] for row in np.asarray(m)]

    return {
        "dim": sys.dim,
        "hamiltonian": pairs(sys.hamiltonian),
        "jumps": [pairs(L) for L in sys.jumps],
    }


def parse_initial_state(node, sys: model.LindbladSystem, key: str = "initial_state"
                        ) -> model.InitialState:
    d = sys.dim
    try:
        if node is None:
            if d == 2:
                return model.InitialState.basis(1, 2)  # ground state default
            return model.InitialState.mixture(np.full(d, 1.0 / d))
        if isinstance(node, str):
            if node == "e" and d == 2:
                return model.InitialState.basis(0, 2)
            if node == "g" and d == 2:
                return model.InitialState.basis(1, 2)
            raise ConfigError(f"key {key!r}: unknown state name {node!r} for dim {d}")
        if isinstance(node, dict):
            if "basis" in node:
                i = int(node["basis"])
                if not 0 <= i < d:
                    raise ConfigError(f"key {key!r}: basis index {i} outside [0, {d - 1}]")
                return model.InitialState.basis(i, d)
            if "pure" in node:
                v = np.array([_complex_entry(x, key) for x in node["pure"]])
                return model.InitialState.pure(v / np.linalg.norm(v))
            if "mixture" in node:
                return model.InitialState.mixture(np.asarray(node["mixture"], dtype=float))
        raise ConfigError(f"key {key!r}: expected e|g|{{basis}}|{{pure}}|{{mixture}}")
    except model.ModelError as e:
        raise ConfigError(f"key {key!r}: {e}") from e


def parse_k_list(cfg: dict, default=None) -> list[int]:
    node = cfg.get("k", default)
    if node is None:
        raise ConfigError("missing required config key: 'k' (an integer or [lo, hi] range)")
    if isinstance(node, int):
        ks = [node]
    elif isinstance(node, list) and len(node) == 2 and all(isinstance(x, int) for x in node):
        ks = list(range(node[0], node[1] + 1))
    else:
        raise ConfigError("key 'k': expected an integer or a two-integer inclusive range")
    if not ks or min(ks) < 1:
        raise ConfigError("key 'k': jump counts must be >= 1")
    return ks


def parse_observable(node) -> liouville.StepObservable:
    if node is None or node == "total-time":
        return liouville.StepObservable.total_time()
    if isinstance(node, dict):
        if "channel-count" in node:
            return liouville.StepObservable.channel_count(node["channel-count"])
        if "affine" in node:
            params = node["affine"]
            return liouville.StepObservable.affine(params["a"], params["b"])
    raise ConfigError(
        "key 'observable': expected total-time, {channel-count: [...]} or "
        "{affine: {a: [...], b: [...]}}")


def _seed(cfg: dict, kind: str, required: bool) -> int | None:
    if "seed" not in cfg:
        if required:
            raise ConfigError(
                f"missing required config key: 'seed' ({kind} is a stochastic experiment)")
        return None
    seed = cfg["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2 ** 64:
        raise ConfigError("key 'seed': must be a nonnegative 64-bit integer")
    return seed


def _eps_fd(cfg: dict) -> float:
    e = float(cfg.get("eps_fd", 1e-4))
    if not 1e-6 <= e <= 1e-2:
        raise ConfigError("key 'eps_fd': must lie in [1e-6, 1e-2]")
    return e


def _sampler_cfg(cfg: dict, kind: str) -> trajectory.SamplerConfig:
    seed = _seed(cfg, kind, required=True)
    n_traj = int(cfg.get("n_traj", 10000))
    return trajectory.SamplerConfig(seed=seed, n_traj=n_traj)


# -- experiment runners: each returns (written paths, violation messages)

def run_echo(cfg: dict, out: Path, strict: bool):
    orig = parse_system(_need(cfg, "system"))
    pert = parse_system(cfg["perturbed"], "perturbed") if "perturbed" in cfg else orig
    rho0 = parse_initial_state(cfg.get("initial_state"), orig)
    ks = parse_k_list(cfg)
    reports = {r.k: r for r in liouville.echo_curve(orig, pert, rho0, max(ks))}
    rows = [(k, reports[k].amplitude.real, reports[k].amplitude.imag, reports[k].eta)
            for k in ks]
    path = reporting.write_csv(out / "echo.csv",
                               ["k", "amplitude_re", "amplitude_im", "eta"], rows)
    return [path], []


def run_qfi(cfg: dict, out: Path, strict: bool):
    sys_ = parse_system(_need(cfg, "system"))
    rho0 = parse_initial_state(cfg.get("initial_state"), sys_)
    ks = parse_k_list(cfg)
    eps = _eps_fd(cfg)
    rows, violations = [], []
    for k in ks:
        est = qfi_tur.qfi_estimate(sys_, rho0, k, eps)
        if not est.converged:
            violations.append(f"qfi at k={k} did not stabilize under step halving")
        rows.append((k, eps, est.value, est.converged))
    path = reporting.write_csv(out / "qfi.csv", ["k", "eps_fd", "qfi", "converged"], rows)
    return [path], violations


def run_fpt_moments(cfg: dict, out: Path, strict: bool):
    sys_ = parse_system(_need(cfg, "system"))
    rho0 = parse_initial_state(cfg.get("initial_state"), sys_)
    ks = parse_k_list(cfg)
    obs = parse_observable(cfg.get("observable"))
    method = cfg.get("method", "analytic")
    if method not in ("analytic", "mc"):
        raise ConfigError("key 'method': expected analytic or mc")
    scfg = _sampler_cfg(cfg, "fpt-moments") if method == "mc" else None
    rows = []
    for k in ks:
        if method == "analytic":
            mr = liouville.fpt_moments(sys_, rho0, k, obs)
        else:
            mr = trajectory.estimate_observable(sys_, rho0, k, obs, scfg)
        prec = mr.variance / mr.mean ** 2 if mr.mean != 0 else float("nan")
        rows.append((k, obs.name, mr.method, mr.mean, mr.variance, prec,
                     mr.stderr_mean, mr.stderr_variance))
    path = reporting.write_csv(
        out / "fpt_moments.csv",
        ["k", "observable", "method", "mean", "variance", "precision",
         "stderr_mean", "stderr_variance"], rows)
    return [path], []


def run_trajectories(cfg: dict, out: Path, strict: bool):
    sys_ = parse_system(_need(cfg, "system"))
    rho0 = parse_initial_state(cfg.get("initial_state"), sys_)
    ks = parse_k_list(cfg)
    if len(ks) != 1:
        raise ConfigError("key 'k': the trajectory dump takes a single jump count")
    scfg = _sampler_cfg(cfg, "trajectories")
    waits, channels = trajectory.sample_batch(sys_, rho0, ks[0], scfg)
    rows = []
    for i in range(scfg.n_traj):
        t = 0.0
        for step in range(ks[0]):
            t += waits[i, step]
            rows.append((i, step + 1, waits[i, step], int(channels[i, step]), t))
    path = reporting.write_csv(out / "trajectories.csv",
                               ["traj_id", "step", "w", "m", "t_cumulative"], rows)
    return [path], []


def run_sweep_kappa(cfg: dict, out: Path, strict: bool):
    delta = float(cfg.get("delta", 1.0))
    omega = float(cfg.get("omega", 1.0))
    k = int(cfg.get("k", 1))
    if "kappas" in cfg:
        kappas = [float(x) for x in cfg["kappas"]]
    else:
        grid = cfg.get("kappa_grid", {"start": 1.0, "stop": 10.0, "num": 19})
        try:
            kappas = np.linspace(float(grid["start"]), float(grid["stop"]),
                                 int(grid["num"])).tolist()
        except (TypeError, KeyError) as e:
            raise ConfigError("key 'kappa_grid': expected {start, stop, num}") from e
    pairs = qfi_tur.sweep_kappa(delta, omega, kappas, k, _eps_fd(cfg))
    path = reporting.write_csv(out / "sweep_kappa.csv", ["kappa", "qfi"], pairs)
    fig = reporting.figure_sweep_kappa(pairs, k, out / "sweep_kappa.svg")
    return [path, fig], []


def run_sweep_random(cfg: dict, out: Path, strict: bool):
    seed = _seed(cfg, "sweep-random", required=True)
    n = int(cfg.get("n", 200))
    kwargs = {}
    for key, name in [("delta_range", "delta_range"), ("omega_range", "omega_range"),
                      ("kappa_range", "kappa_range")]:
        if key in cfg:
            kwargs[name] = tuple(float(x) for x in cfg[key])
    if "k_choices" in cfg:
        kwargs["k_choices"] = tuple(int(x) for x in cfg["k_choices"])
    rows = qfi_tur.sweep_random(n, seed, eps_fd=_eps_fd(cfg), **kwargs)
    violations = [
        f"draw {i}: precision {r.precision!r} below Fisher bound {r.bound_qfi!r}"
        for i, r in enumerate(rows)
        if r.precision < r.bound_qfi - qfi_tur.BOUND_RTOL
    ]
    csv = reporting.write_csv(
        out / "sweep_random.csv",
        ["delta", "omega", "kappa", "K", "mean_fpt", "var_fpt", "precision",
         "qfi", "bound_qfi", "bound_classical"],
        [(r.delta, r.omega, r.kappa, r.k, r.mean_fpt, r.var_fpt, r.precision,
          r.qfi, r.bound_qfi, r.bound_classical) for r in rows])
    fig = reporting.figure_sweep_random(rows, out / "sweep_random.svg")
    return [csv, fig], violations


def run_ancilla(cfg: dict, out: Path, strict: bool):
    orig = parse_system(_need(cfg, "system"))
    pert = parse_system(_need(cfg, "perturbed"), "perturbed")
    rho0 = parse_initial_state(cfg.get("initial_state"), orig)
    ks = parse_k_list(cfg, default=[1, 10])
    scfg = _sampler_cfg(cfg, "ancilla")
    analytic = {r.k: r.eta for r in liouville.echo_curve(orig, pert, rho0, max(ks))}
    rows = []
    for k in ks:
        est = ancilla_mod.ancilla_estimate_echo(orig, pert, rho0, k, scfg)
        rows.append((k, analytic[k], est.eta, est.se_eta, est.n_trials))
    csv = reporting.write_csv(
        out / "ancilla.csv",
        ["K", "eta_analytic", "eta_ancilla", "stderr", "n_trials"], rows)
    fig = reporting.figure_ancilla(rows, out / "ancilla.svg")
    return [csv, fig], []


def run_classical_check(cfg: dict, out: Path, strict: bool):
    eps = cfg.get("epsilon")
    if eps is None:
        raise ConfigError("missing required config key: 'epsilon'")
    eps = float(eps)
    if "system" in cfg:
        sys_ = parse_system(cfg["system"])
        if not np.allclose(sys_.hamiltonian, 0):
            raise ConfigError("key 'system': classical-check needs a classical embedding")
    else:
        sys_ = model.embed_classical(model.ClassicalRateMatrix(np.array([[0., 1.], [1., 0.]])))
    rho0 = parse_initial_state(cfg.get("initial_state"), sys_)
    ks = parse_k_list(cfg)
    pert = model.apply_scaled_perturbation(sys_, model.ScaledPerturbation(eps))
    amps = liouville.echo_amplitudes(sys_, pert, rho0, max(ks))
    rows, violations = [], []
    for k in ks:
        amp = complex(amps[k - 1])
        closed = liouville.classical_echo_closed_form(eps, k)
        diff = abs(amp - closed)
        if diff > 1e-10:
            violations.append(f"k={k}: pipeline amplitude deviates from closed form by {diff:.3e}")
        rows.append((k, eps, amp.real, amp.imag, closed.real, closed.imag, diff))
    path = reporting.write_csv(
        out / "classical_check.csv",
        ["k", "epsilon", "amplitude_re", "amplitude_im", "closed_re", "closed_im",
         "abs_diff"], rows)
    return [path], violations


def run_tur_check(cfg: dict, out: Path, strict: bool):
    sys_ = parse_system(_need(cfg, "system"))
    rho0 = parse_initial_state(cfg.get("initial_state"), sys_)
    ks = parse_k_list(cfg)
    obs = parse_observable(cfg.get("observable"))
    method = cfg.get("method", "analytic")
    if method not in ("analytic", "mc"):
        raise ConfigError("key 'method': expected analytic or mc")
    epsilon = float(cfg["epsilon"]) if "epsilon" in cfg else None
    if "perturbed" in cfg or epsilon is not None:
        mode = "general"
        if "perturbed" in cfg:
            pert = parse_system(cfg["perturbed"], "perturbed")
        else:
            pert = model.apply_scaled_perturbation(sys_, model.ScaledPerturbation(epsilon))
    else:
        mode = "fpt"
        pert = None
    scfg = _sampler_cfg(cfg, "tur-check") if method == "mc" else None
    rows, violations = [], []
    for k in ks:
        if mode == "general":
            if method == "analytic":
                stats = liouville.fpt_moments(sys_, rho0, k, obs)
                stats_star = liouville.fpt_moments(pert, rho0, k, obs)
            else:
                stats = trajectory.estimate_observable(sys_, rho0, k, obs, scfg)
                star_cfg = trajectory.SamplerConfig(
                    seed=(scfg.seed + 1) % 2 ** 64, n_traj=scfg.n_traj)
                stats_star = trajectory.estimate_observable(pert, rho0, k, obs, star_cfg)
            rep = qfi_tur.tur_check_general(sys_, pert, rho0, k, stats, stats_star,
                                            epsilon=epsilon)
        else:
            rep = qfi_tur.tur_check_fpt(sys_, rho0, k, method=method, observable=obs,
                                        cfg=scfg, eps_fd=_eps_fd(cfg))
        if rep.satisfied is False:
            violations.append(f"k={k}: lhs {rep.lhs!r} violates bound {rep.rhs!r}")
        rows.append((k, mode, rep.lhs, rep.rhs, rep.satisfied, rep.slack,
                     rep.eta, rep.status))
    path = reporting.write_csv(
        out / "tur_check.csv",
        ["k", "mode", "lhs", "rhs", "satisfied", "slack", "eta", "status"], rows)
    return [path], violations


RUNNERS = {
    "echo": run_echo,
    "qfi": run_qfi,
    "fpt-moments": run_fpt_moments,
    "trajectories": run_trajectories,
    "sweep-kappa": run_sweep_kappa,
    "sweep-random": run_sweep_random,
    "ancilla": run_ancilla,
    "classical-check": run_classical_check,
    "tur-check": run_tur_check,
}


def selftest() -> bool:
    """Fast invariant suite; prints one pass/fail line per check."""
    checks = []

    def check_trace_preservation():
        rng = np.random.default_rng(20240901)
        d = 3
        h = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
        h = (h + h.conj().T) / 2
        jumps = tuple(rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
                      for _ in range(2))
        sys_ = model.LindbladSystem(h, jumps)
        a, b, c = (rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
                   for _ in range(3))
        pairing = np.max(np.abs(
            liouville.vec(a @ b @ c) - liouville.kron_lift(c.T, a) @ liouville.vec(b)))
        z = liouville.two_sided_map(sys_).matrix
        ell = liouville.vec(np.eye(d))
        fixpoint = np.max(np.abs(ell @ z - ell))
        return pairing < 1e-10 and fixpoint < 1e-10

    def check_erlang():
        chain = model.embed_classical(model.ClassicalRateMatrix(
            np.array([[0.0, 2.0], [2.0, 0.0]])))
        mr = liouville.fpt_moments(chain, model.InitialState.basis(0, 2), 4)
        return abs(mr.variance / mr.mean ** 2 - 0.25) < 1e-10

    def check_classical_qfi():
        chain = model.embed_classical(model.ClassicalRateMatrix(
            np.array([[0.0, 0.7, 1.3], [0.4, 0.0, 0.6], [1.1, 0.9, 0.0]])))
        j = qfi_tur.qfi(chain, model.InitialState.mixture([0.2, 0.3, 0.5]), 3)
        return abs(j - 3.0) < 1e-6

    def check_echo_identity():
        atom = model.two_level_atom(1.0, 1.0, 2.0)
        rep = liouville.loschmidt_echo(atom, atom, model.InitialState.basis(1, 2), 5)
        return abs(rep.eta - 1.0) < 1e-12

    checks = [
        ("trace-preservation", check_trace_preservation),
        ("erlang-equality", check_erlang),
        ("classical-qfi", check_classical_qfi),
        ("echo-identity", check_echo_identity),
    ]
    all_ok = True
    for name, fn in checks:
        try:
            ok = bool(fn())
        except Exception as e:  # a crashed check is a failed check
            ok = False
            print(f"FAIL {name} ({type(e).__name__}: {e})")
        else:
            print(f"{'PASS' if ok else 'FAIL'} {name}")
        all_ok &= ok
    return all_ok


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qfpt",
        description="Jump-counted quantum Markov chain experiments: echo, "
                    "Fisher information and uncertainty-relation checks.")
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in EXPERIMENT_KINDS:
        p = sub.add_parser(kind, help=f"run the {kind} experiment")
        p.add_argument("--config", required=True, help="YAML experiment config")
        p.add_argument("--out", default=None, help="output directory (default: config 'out' or '.')")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--n-traj", type=int, default=None, help="override the trajectory count")
        p.add_argument("--strict", action="store_true",
                       help="bound violations and unstable Fisher estimates exit nonzero")
    sub.add_parser("selftest", help="run the fast invariant suite")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "selftest":
        return 0 if selftest() else 1

    started = time.time()
    try:
        cfg = load_config(args.config)
        declared = cfg.get("kind")
        if declared is not None and declared != args.command:
            raise ConfigError(
                f"config declares kind {declared!r} but subcommand is {args.command!r}")
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.n_traj is not None:
            cfg["n_traj"] = args.n_traj
        strict = bool(args.strict or cfg.get("strict", False))
        out = Path(args.out if args.out is not None else cfg.get("out", "."))
        out.mkdir(parents=True, exist_ok=True)
        paths, violations = RUNNERS[args.command](cfg, out, strict)
        manifest = reporting.write_manifest(
            out / "manifest.json", args.command, cfg, cfg.get("seed"),
            [p.name for p in paths], started)
        paths.append(manifest)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (model.ModelError, liouville.LiouvilleError, trajectory.SamplingError,
            qfi_tur.QfiError) as e:
        print(f"{args.command} failed: {e}", file=sys.stderr)
        return 1
    for p in paths:
        print(f"wrote {p}")
    if violations:
        for v in violations:
            print(f"violation: {v}", file=sys.stderr)
        if strict:
            return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
