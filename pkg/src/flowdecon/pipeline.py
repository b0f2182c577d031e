"""Stage runners shared by the CLI: simulate, eigen, deconstruct, diagnose, report.

Every stage writes JSON/CSV artifacts plus a run-manifest entry (config hash,
status, residual summaries, file checksums). Reports echo each threshold next
to the measured value so verdicts are auditable.
"""

from __future__ import annotations

import datetime
import hashlib
import json
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from . import conjugacy as conj
from . import deconstruction as dec
from . import diagnostics as diag
from . import dynamics as dyn
from . import eigenfunctions as eig
from . import geometry as geo
from .config import PipelineConfig, build_system
from .errors import (
    DependentFrequenciesError,
    FlowDeconError,
    IntegrationBlowupError,
    MissingInputError,
)

TWO_PI = dyn.TWO_PI


# ---------------------------------------------------------------------------
# registry observables (chart functions usable on any system of matching shape)


def registry_observables(d: int, n: int) -> dict:
    """Five named bounded chart observables used in reports and checks."""
    obs = {
        "cos_theta1": lambda rows: np.cos(rows[:, 0]),
        "sin_theta_sum": lambda rows: np.sin(rows[:, 0] + rows[:, min(1, d - 1)]),
    }
    if n > d:
        obs["fiber_first"] = lambda rows: rows[:, d]
        obs["fiber_sq"] = lambda rows: rows[:, d] ** 2
        obs["fiber_cos1"] = lambda rows: rows[:, d] * np.cos(rows[:, 0])
    else:
        obs["cos_2theta1"] = lambda rows: np.cos(2 * rows[:, 0])
        obs["sin_2theta1"] = lambda rows: np.sin(2 * rows[:, 0])
        obs["cos_theta_diff"] = lambda rows: np.cos(rows[:, 0] - rows[:, min(1, d - 1)])
    return obs


# ---------------------------------------------------------------------------
# manifest and file helpers


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2, default=str)
        fh.write("\n")
    return path


def _manifest_path(cfg: PipelineConfig) -> Path:
    return Path(cfg.out_dir) / "run_manifest.json"


def update_manifest(cfg: PipelineConfig, stage: str, status: str, summary: dict, files):
    mp = _manifest_path(cfg)
    if mp.exists():
        with open(mp) as fh:
            manifest = json.load(fh)
    else:
        manifest = {
            "version": __version__,
            "config_hash": cfg.hash(),
            "seed": cfg.seed,
            "stages": {},
            "files": {},
        }
    manifest["stages"][stage] = {
        "status": status,
        "timestamp": _now(),
        "summary": summary,
    }
    for f in files:
        f = Path(f)
        manifest["files"][str(f.relative_to(cfg.out_dir))] = _sha256(f)
    write_json(mp, manifest)
    return manifest


def _write_csv(path: Path, header, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join("%.17g" % v if isinstance(v, float) else str(v) for v in row))
            fh.write("\n")
    return path


def _random_state(system, rng) -> np.ndarray:
    x0 = np.zeros(system.dimension)
    for j, is_angle in enumerate(system.angle_mask):
        x0[j] = rng.uniform(0.0, TWO_PI) if is_angle else rng.uniform(-0.5, 0.5)
    return x0


def _initial_state(cfg: PipelineConfig, system, rng) -> np.ndarray:
    init = cfg.simulate.get("initial")
    if init is not None:
        return np.asarray([float(v) for v in init])
    return _random_state(system, rng)


# ---------------------------------------------------------------------------
# simulate


def run_simulate(cfg: PipelineConfig) -> dict:
    kind, proto, system = build_system(cfg.system)
    out = Path(cfg.out_dir)
    rng = np.random.default_rng(cfg.seed)
    n_rows = int(cfg.simulate.get("n_rows", 1000))
    dt_sample = float(cfg.simulate.get("dt_sample", 0.05))
    path = out / "trajectory.csv"
    status, blow = "ok", None
    if kind == "suspension":
        rows = proto.orbit_samples(n_rows, dt_sample, rng)
    else:
        x0 = _initial_state(cfg, system, rng)
        try:
            rows = system.sample(x0, n_rows, dt_sample)
        except IntegrationBlowupError as exc:
            rows = np.zeros((0, system.dimension))
            status, blow = "blowup", {"time": exc.time, "bound": exc.bound}
    n_dim = rows.shape[1] if rows.size else (proto.dimension if kind == "suspension" else system.dimension)
    header = ["t"] + [f"x{j+1}" for j in range(n_dim)]
    csv_rows = (
        [float(i * dt_sample)] + [float(v) for v in row] for i, row in enumerate(rows)
    )
    _write_csv(path, header, csv_rows)
    summary = {"n_rows": int(rows.shape[0]), "dt_sample": dt_sample}
    if blow:
        summary["blowup"] = blow
    update_manifest(cfg, "simulate", status, summary, [path])
    return {"status": status, "path": str(path), **summary}


# ---------------------------------------------------------------------------
# eigen


def _claimed_eigenfunctions(cfg: PipelineConfig, proto):
    zs = eig.analytic_eigenfunctions(proto)
    claimed = cfg.eigen.get("claimed_omega")
    if claimed is not None:
        zs = [
            eig.CircleEigenfunction(
                eval=z.eval, omega=float(w), label=z.label,
                grad_phase=z.grad_phase, phase_batch=z.phase_batch,
            )
            for z, w in zip(zs, claimed)
        ]
    d = cfg.system.declared_d or len(zs)
    return zs[:d]


def run_eigen(cfg: PipelineConfig) -> dict:
    kind, proto, system = build_system(cfg.system)
    out = Path(cfg.out_dir)
    rng = np.random.default_rng(cfg.seed + 1)
    bound = int(cfg.eigen.get("independence_bound", 20))
    margin = float(cfg.eigen.get("independence_margin", 1.0e-6))
    report = {"source": cfg.eigen_source, "frequencies": [], "independence": None}
    status = "ok"

    if kind == "suspension":
        omega = proto.omega
        pts = [proto.orbit_samples(2, 0.3, rng)[0] for _ in range(20)]
        ts = rng.uniform(0, 10, 20)
        worst = max(
            abs(
                np.exp(1j * proto.flow(x, t)[0])
                - np.exp(1j * omega * t) * np.exp(1j * x[0])
            )
            for x, t in zip(pts, ts)
        )
        report["frequencies"].append(
            {"label": "z1", "omega": omega, "residual_max": float(worst), "T_used": 10.0}
        )
        omegas = (omega,)
    else:
        zs = _claimed_eigenfunctions(cfg, proto)
        n_check = int(cfg.eigen.get("n_residual_checks", 100))
        pts = [_random_state(system, rng) for _ in range(n_check)]
        ts = rng.uniform(0, 10, n_check)
        t_horizon = float(np.max(ts)) if n_check else 0.0
        for z in zs:
            worst = eig.eigen_residual_max(system, z, pts, ts)
            report["frequencies"].append(
                {"label": z.label, "omega": z.omega, "residual_max": float(worst),
                 "T_used": t_horizon}
            )
        omegas = tuple(z.omega for z in zs)
        if cfg.eigen_source == "estimated":
            T = float(cfg.eigen.get("T", 1500.0))
            dt_s = float(cfg.eigen.get("dt_sample", 0.05))
            d = len(zs)

            def f(rows):
                return sum(np.exp(1j * rows[:, j]) for j in range(d))

            x0 = _initial_state(cfg, system, rng)
            est = eig.detect_frequencies(system, f, x0, T, dt_s, d)
            report["estimated_frequencies"] = [float(w) for w in est]
            if len(est) == len(zs):
                omegas = tuple(est)

    try:
        fm = eig.check_independence(omegas, bound, margin)
        report["independence"] = {
            "independent": True,
            "bound": fm.independence_bound,
            "margin": fm.independence_margin,
            "omegas": list(fm.omegas),
        }
    except DependentFrequenciesError as exc:
        status = "dependent-frequencies"
        report["independence"] = {
            "independent": False,
            "bound": bound,
            "margin": margin,
            "violation": {"coeffs": list(exc.coeffs), "harmonic": exc.harmonic,
                          "residual": exc.residual},
        }
    path = write_json(out / "eigen_report.json", report)
    update_manifest(cfg, "eigen", status, {"n_frequencies": len(report["frequencies"])}, [path])
    report["status"] = status
    return report


# ---------------------------------------------------------------------------
# deconstruct


def _grid_points(system, rng, n: int) -> list:
    pts = []
    for _ in range(n):
        x = np.zeros(system.dimension)
        for j, is_angle in enumerate(system.angle_mask):
            x[j] = rng.uniform(0.0, TWO_PI) if is_angle else rng.uniform(-1.0, 1.0)
        pts.append(x)
    return pts


def run_deconstruct(cfg: PipelineConfig) -> dict:
    out = Path(cfg.out_dir)
    if not (out / "eigen_report.json").exists():
        raise MissingInputError(f"eigen report not found in {out}; run eigen first")
    with open(out / "eigen_report.json") as fh:
        eigen_report = json.load(fh)
    kind, proto, system = build_system(cfg.system)
    rng = np.random.default_rng(cfg.seed + 2)
    scale = cfg.tolerance_scale
    files, stages_report = [], {}
    status = "ok"

    if kind == "suspension":
        n_leaf = int(cfg.deconstruct.get("n_leaf_samples", 500))
        base = proto.base_samples(n_leaf, rng)
        path = _write_csv(
            out / "leaf_1.csv", ["level", "x1"], ([1, float(v)] for v in base[:, 0])
        )
        files.append(path)
        files.append(
            write_json(out / "leaf_1.json", {"seed": cfg.seed + 2, "n_samples": n_leaf,
                                             "kind": "suspension-base"})
        )
        # conjugacy of the suspension chart is definitional; verify on samples
        worst = 0.0
        for x in base[:20]:
            st = np.array([0.0, x[0]])
            end = proto.flow(st, proto.period)
            worst = max(worst, abs(np.exp(1j * end[1]) - np.exp(1j * proto.base(x)[0])))
        stages_report["1"] = {
            "return_map": "base map (suspension)",
            "residuals": {"base_return_consistency": {"value": float(worst),
                                                      "bound": 1.0e-12 * max(1, scale)}},
            "status": "pass" if worst <= 1.0e-12 else "fail",
        }
        if worst > 1.0e-12:
            status = "stage-failures"
        report = {"kind": kind, "stages": stages_report, "tolerance_scale": scale}
        files.append(write_json(out / "deconstruct_report.json", report))
        update_manifest(cfg, "deconstruct", status, {"stages": len(stages_report)}, files)
        report["status"] = status
        return report

    zs = _claimed_eigenfunctions(cfg, proto)
    bundle = dec.deconstruct_prototype(
        proto, step=cfg.system.dt,
        leaf_tolerance=float(cfg.deconstruct.get("leaf_tolerance", 1.0e-8)),
        zs=zs,
    )
    d = bundle.d
    warped = proto.warp is not None
    relax = 10.0 if warped else 1.0
    bounds = {
        "tangency": 1.0e-4 * scale * relax,
        "retention": 1.0e-3 * scale * relax,
        "freq_consistency": 1.0e-3 * scale * relax,
        "leaf_membership": 10.0 * bundle.leaf_tolerance,
        "round_trip": 1.0e-5 * scale * relax,
        "dof09": 1.0e-5 * scale * relax,
        "suspension_conjugacy": 1.0e-4 * scale * relax,
    }

    n_grid = int(cfg.deconstruct.get("n_grid", 100))
    grid = _grid_points(system, rng, n_grid)
    metric = geo.orthonormalizing_metric(zs, geo.euclidean_metric(system.dimension))
    grid_rows = []
    stage_levels = (
        [cfg.stage_filter] if cfg.stage_filter else list(range(1, d + 1))
    )
    for k in stage_levels:
        res = {name: 0.0 for name in ("tangency", "retention", "freq_consistency")}
        vk = geo.projected_field_chain(system.field.eval, zs, metric, k)
        vk_prev = geo.projected_field_chain(system.field.eval, zs, metric, k - 1)
        for x in grid:
            g = metric.gram(x)
            v = vk.eval(x)
            for j in range(1, k + 1):
                grad = geo.circle_gradient(zs[j - 1], metric, x)
                val = abs(float(v @ g @ grad))
                res["tangency"] = max(res["tangency"], val)
                grid_rows.append(list(x) + [f"tangency_k{k}_j{j}", val])
            for j in range(k + 1, d + 1):
                z = zs[j - 1]
                ld = geo.lie_derivative(vk.eval, z.eval, x)
                val = abs(ld - 1j * z.omega * z.eval(x))
                res["retention"] = max(res["retention"], val)
                grid_rows.append(list(x) + [f"retention_k{k}_j{j}", val])
            fc = geo.frequency_consistency(vk_prev.eval, zs[k - 1], metric, x)
            res["freq_consistency"] = max(res["freq_consistency"], fc)
            grid_rows.append(list(x) + [f"freq_consistency_k{k}", fc])

        n_leaf = int(cfg.deconstruct.get("n_leaf_samples", 200))
        lm = dec.sample_leaf(
            bundle, k, n_leaf,
            burn_in=float(cfg.deconstruct.get("burn_in", 50.0)),
            rng=rng,
            window=float(cfg.deconstruct.get("window", 0.3)),
        )
        header = ["level"] + [f"x{j+1}" for j in range(system.dimension)]
        path = _write_csv(
            out / f"leaf_{k}.csv", header,
            ([k] + [float(v) for v in row] for row in lm.samples),
        )
        files.append(path)
        files.append(write_json(out / f"leaf_{k}.json", {"seed": cfg.seed + 2, **lm.meta}))

        rm = dec.stage_return_map(bundle, k)
        worst_mem = 0.0
        for y in lm.samples[: min(10, lm.count)]:
            worst_mem = max(worst_mem, lm.leaf.membership(rm.apply(y)))
        res["leaf_membership"] = worst_mem

        checks = {}
        for name, val in res.items():
            checks[name] = {"value": float(val), "bound": bounds[name],
                            "pass": bool(val <= bounds[name])}
        stage_status = "pass" if all(c["pass"] for c in checks.values()) else "fail"
        if stage_status == "fail":
            status = "stage-failures"
        stages_report[str(k)] = {"residuals": checks, "status": stage_status,
                                 "n_leaf_samples": lm.count}

    # global tower checks on the full chain
    if not cfg.stage_filter:
        lm_d = dec.sample_leaf(
            bundle, d, int(cfg.deconstruct.get("n_round", 50)), rng=rng,
            burn_in=float(cfg.deconstruct.get("burn_in", 50.0)),
            window=float(cfg.deconstruct.get("window", 0.3)),
        )
        worst_rt, worst_dof = 0.0, 0.0
        for y in lm_d.samples:
            th = rng.uniform(0.01, 0.99, d)
            tw = conj.TowerCoordinates(y=y, thetas=th)
            x = conj.psi_k(bundle, d, tw)
            S = np.cumsum(th) % 1.0
            for j, z in enumerate(bundle.zs):
                err = abs((z.phase(x) / TWO_PI - S[j] + 0.5) % 1.0 - 0.5)
                worst_dof = max(worst_dof, err)
            back = conj.xi(bundle, x)
            worst_rt = max(worst_rt, conj.tower_dist(tw, back, system.angle_mask))
        tower = dec.build_suspension_tower(bundle)
        worst_susp = 0.0
        for y in lm_d.samples[:10]:
            s, t = rng.uniform(0, 1), rng.uniform(0, 3)
            worst_susp = max(worst_susp, dec.suspension_conjugacy_check(tower, y, s, t))
        glob = {
            "round_trip": {"value": float(worst_rt), "bound": bounds["round_trip"],
                           "pass": bool(worst_rt <= bounds["round_trip"])},
            "dof09": {"value": float(worst_dof), "bound": bounds["dof09"],
                      "pass": bool(worst_dof <= bounds["dof09"])},
            "suspension_conjugacy": {
                "value": float(worst_susp), "bound": bounds["suspension_conjugacy"],
                "pass": bool(worst_susp <= bounds["suspension_conjugacy"])},
        }
        if not all(c["pass"] for c in glob.values()):
            status = "stage-failures"
        stages_report["tower"] = {"residuals": glob, "status":
                                  "pass" if all(c["pass"] for c in glob.values()) else "fail"}

    files.append(
        _write_csv(
            out / "grid_residuals.csv",
            [f"x{j+1}" for j in range(system.dimension)] + ["residual_name", "residual_value"],
            ([float(v) for v in row[:-2]] + [row[-2], float(row[-1])] for row in grid_rows),
        )
    )
    report = {
        "kind": kind,
        "eigen_source": eigen_report.get("source"),
        "warped": warped,
        "tolerance_scale": scale,
        "stages": stages_report,
    }
    files.append(write_json(out / "deconstruct_report.json", report))
    update_manifest(cfg, "deconstruct", status, {"stages": len(stages_report)}, files)
    report["status"] = status
    return report


# ---------------------------------------------------------------------------
# diagnose


def _load_leaf(out: Path, k: int) -> np.ndarray:
    path = out / f"leaf_{k}.csv"
    if not path.exists():
        raise MissingInputError(f"{path} not found; run deconstruct first")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 1:]


def run_diagnose(cfg: PipelineConfig) -> dict:
    out = Path(cfg.out_dir)
    kind, proto, system = build_system(cfg.system)
    rng = np.random.default_rng(cfg.seed + 3)
    n_lags = int(cfg.diagnose.get("n_lags", 256))
    files = []
    report = {"kind": kind, "stages": {}}

    if kind == "suspension":
        n_orbit = int(cfg.diagnose.get("n_orbit", 1_000_000))
        rows = proto.base.orbit(n_orbit, rng=rng)
        f = lambda r: np.exp(1j * r[:, 0])
        seq = diag.correlation_sequence(rows, f, f, n_lags, "e(iphi)", "e(iphi)")
        verdict = diag.weak_mixing_test(seq)
        fit = diag.fit_mixing_rate(seq)
        orbs = [proto.base.orbit(n_lags, rng=rng) for _ in range(int(cfg.diagnose.get("probe_starts", 12)))]
        probe = diag.return_map_spectrum_probe(orbs, diag.fourier_basis(3, include_negative=True))
        stage = {
            "return_map": "base map (suspension)",
            "pairs": [{
                "f": "e(iphi)", "g": "e(iphi)",
                "W": verdict.weak_mixing_statistic,
                "verdict": verdict.verdict,
                "threshold_consistent": verdict.threshold_consistent,
                "threshold_non_mixing": verdict.threshold_non_mixing,
                "fit": {"model": fit.model, "rate": fit.rate, "r2": fit.r2},
            }],
            "probe": {"max_value": float(probe.values.max()), "threshold": probe.threshold,
                      "peaks": probe.peaks()},
        }
        report["stages"]["1"] = stage
        files.append(_write_csv(out / "corr_stage1.csv", ["lag", "abs_C"],
                                ([int(i), float(v)] for i, v in enumerate(seq.normalized()))))
        files.append(_write_csv(out / "probe_stage1.csv", ["beta", "value"],
                                ([float(b), float(v)] for b, v in zip(probe.betas, probe.values))))
        path = write_json(out / "diagnostics_report.json", report)
        files.append(path)
        update_manifest(cfg, "diagnose", "ok", {"stages": 1}, files)
        report["status"] = "ok"
        return report

    zs = _claimed_eigenfunctions(cfg, proto)
    bundle = dec.deconstruct_prototype(proto, step=cfg.system.dt, zs=zs)
    d = bundle.d
    n_dim = system.dimension
    stage_levels = [cfg.stage_filter] if cfg.stage_filter else list(range(1, d + 1))
    for k in stage_levels:
        leaf_rows = _load_leaf(out, k)
        rm = dec.stage_return_map(bundle, k)
        n_starts = min(int(cfg.diagnose.get("probe_starts", 8)), leaf_rows.shape[0])
        orbs = [rm.orbit(leaf_rows[i], n_lags) for i in range(n_starts)]

        obs = [("one", lambda rows: np.ones(np.atleast_2d(rows).shape[0], dtype=complex))]
        for j in range(k, d):
            z = bundle.zs[j]
            for p in (1, -1, 2, -2, 3, -3):
                obs.append((
                    f"{z.label}^{p}",
                    lambda rows, z=z, p=p: np.exp(
                        1j * p * (z.phase_batch(rows) if z.phase_batch else
                                  np.array([z.phase(r) for r in rows]))
                    ),
                ))
        fiber_mean = leaf_rows[:, d:].mean(axis=0) if n_dim > d else None
        for i in range(d, n_dim):
            obs.append((
                f"x{i+1}_centered",
                lambda rows, i=i, c=float(fiber_mean[i - d]): rows[:, i] - c,
            ))
        basis = diag.ObservableBasis(observables=tuple(obs), norm_bound=100.0)

        long_orbit = rm.orbit(leaf_rows[0], min(10 * n_lags, int(cfg.diagnose.get("n_orbit", 4000))))
        pairs = []
        for label, fn in basis.observables:
            if label == "one":
                continue
            seq = diag.correlation_sequence(long_orbit, fn, fn, min(n_lags, long_orbit.shape[0] // 10),
                                            label, label)
            verdict = diag.weak_mixing_test(seq)
            fit = diag.fit_mixing_rate(seq)
            pairs.append({
                "f": label, "g": label,
                "W": verdict.weak_mixing_statistic,
                "verdict": verdict.verdict,
                "threshold_consistent": verdict.threshold_consistent,
                "threshold_non_mixing": verdict.threshold_non_mixing,
                "fit": {"model": fit.model, "rate": fit.rate, "r2": fit.r2},
            })
        probe = diag.return_map_spectrum_probe(orbs, basis)
        report["stages"][str(k)] = {
            "return_map": f"stage-{k} laminar period map",
            "pairs": pairs,
            "probe": {"max_value": float(probe.values.max()), "threshold": probe.threshold,
                      "peaks": probe.peaks()},
        }
        if pairs:
            f0 = basis.observables[1][1]
            seq0 = diag.correlation_sequence(
                long_orbit, f0, f0, min(n_lags, long_orbit.shape[0] // 10))
            files.append(_write_csv(out / f"corr_stage{k}.csv", ["lag", "abs_C"],
                                    ([int(i), float(v)] for i, v in enumerate(seq0.normalized()))))
        files.append(_write_csv(out / f"probe_stage{k}.csv", ["beta", "value"],
                                ([float(b), float(v)] for b, v in zip(probe.betas, probe.values))))

    path = write_json(out / "diagnostics_report.json", report)
    files.append(path)
    update_manifest(cfg, "diagnose", "ok", {"stages": len(report["stages"])}, files)
    report["status"] = "ok"
    return report


# ---------------------------------------------------------------------------
# report


def run_report(cfg: PipelineConfig) -> dict:
    out = Path(cfg.out_dir)
    mp = _manifest_path(cfg)
    if not mp.exists():
        raise MissingInputError(f"no run manifest in {out}")
    with open(mp) as fh:
        manifest = json.load(fh)
    summary = {"config_hash": manifest.get("config_hash"), "stages": {}}
    failures = 0
    for name, entry in manifest.get("stages", {}).items():
        summary["stages"][name] = entry["status"]
        if entry["status"] not in ("ok", "pass"):
            failures += 1
    summary["failures"] = failures
    path = write_json(out / "report.json", summary)
    update_manifest(cfg, "report", "ok", {"failures": failures}, [path])
    summary["status"] = "ok" if failures == 0 else "stage-failures"
    return summary
