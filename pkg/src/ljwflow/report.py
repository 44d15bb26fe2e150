"""Check drivers producing fixed-schema reports.

run_check resolves a scenario/check pair to registered defaults, runs
the paired estimate (or the deterministic geometry comparison), applies
the documented acceptance rule, and returns one report dictionary with
a fixed key set.  Reports are deterministic for fixed inputs except the
wall_ms timing field; the worker count changes scheduling only, never
the assembled sample arrays.
"""
from __future__ import annotations

import difflib
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import scenarios as catalog
from .connection import ConnectionOracle, require_injective
from .errors import NotFoundError, PreconditionError, UsageError
from .flow import resolve_pack
from .geometry import VectorField, halton_points
from .harness import (EstimatorResult, _exact_mean, _exact_stderr,
                      _nodes_for_times, _probe_points, chunk_ranges,
                      conditional_samples_chunk, girsanov_samples_chunk,
                      ibp_samples_chunk, tau_samples_chunk)
from .noise import sample_noise
from .version import __version__

CHECKS = ("eq4", "eq5", "eq9", "girsanov", "tau-derivative", "conditional",
          "geometry-ricci", "geometry-connection", "compose")
MC_CHECKS = ("eq4", "eq5", "eq9", "girsanov", "tau-derivative",
             "conditional")

Z_LIMIT = 3.0
CLOSED_FORM_SLACK = 0.01
WEIGHT_SLACK = 0.005
COMPOSE_RATIO = 1.3
COMPOSE_EXACT = 1e-12
GEOMETRY_LIMITS = {"geometry-ricci": 5e-4, "geometry-connection": 1e-5}
DEFAULT_COMPOSE_STEPS = 64
RATIO_CAP = 1e6


@dataclass
class RunConfig:
    """Resolved inputs of one check run."""

    scenario: str
    check: str
    paths: int = 100_000
    steps: int | None = None
    horizon: float = 1.0
    seed: int = 0
    tau: float | None = None
    workers: int = 1
    dump_samples: str | None = None
    figures: str | None = None


def _payload(cfg: RunConfig) -> dict:
    """Primitive task description shared by the sequential path and the
    worker processes."""
    if cfg.check not in CHECKS:
        close = difflib.get_close_matches(cfg.check, CHECKS, n=1)
        hint = f"; did you mean {close[0]!r}?" if close else ""
        raise NotFoundError(f"unknown check {cfg.check!r}{hint}")
    sc = catalog.get_scenario(cfg.scenario)
    T = float(cfg.horizon)
    if not (T > 0.0 and math.isfinite(T)):
        raise UsageError(f"horizon must be positive, got {cfg.horizon!r}")
    steps = cfg.steps
    if steps is None:
        steps = DEFAULT_COMPOSE_STEPS if cfg.check == "compose" else 1024
    steps = int(steps)
    if steps <= 0:
        raise UsageError(f"steps must be positive, got {cfg.steps!r}")
    n = int(cfg.paths)
    if cfg.check in MC_CHECKS and n <= 1:
        raise UsageError(f"paths must exceed 1, got {cfg.paths!r}")
    tau = None
    if cfg.check in ("girsanov", "compose"):
        tau = float(sc.tau if cfg.tau is None else cfg.tau)
    elif cfg.check == "tau-derivative":
        tau = float(0.01 if cfg.tau is None else cfg.tau)
    functional = None
    if cfg.check in ("eq4", "eq9", "girsanov", "tau-derivative"):
        functional = sc.default_functional
    elif cfg.check == "eq5":
        functional = sc.eq5_functional
    variant = "eq8" if cfg.check in ("eq9", "conditional") else None
    cond_time = 0.5 * T if cfg.check == "conditional" else None
    return {"scenario": cfg.scenario, "check": cfg.check, "horizon": T,
            "steps": steps, "paths": n, "seed": int(cfg.seed), "tau": tau,
            "functional": functional, "variant": variant,
            "conditional_time": cond_time}


def _chunk_arrays(payload: dict, start: int, count: int):
    """Per-sample arrays for one chunk of a sampling check.  Top-level
    so worker processes can receive it; rebuilds registry objects from
    the payload primitives (cached per process)."""
    sid, check = payload["scenario"], payload["check"]
    T, L, seed = payload["horizon"], payload["steps"], payload["seed"]
    sys = catalog.build_system(sid)
    k = catalog.default_direction(sid)
    if check in ("eq4", "eq5", "eq9"):
        F = catalog.make_functional(sid, payload["functional"], T)
        if check == "eq5":
            pts = catalog.eq5_start_points(sid)
        else:
            pts = catalog.start_point(sid)[None]
        return ibp_samples_chunk(sys, pts, F, k, L, T, seed, start, count,
                                 filtered=(check == "eq9"),
                                 variant=payload["variant"] or "eq8")
    if check == "girsanov":
        F = catalog.make_functional(sid, payload["functional"], T)
        return girsanov_samples_chunk(sys, catalog.start_point(sid), F, k,
                                      payload["tau"], L, T, seed, start,
                                      count)
    if check == "tau-derivative":
        F = catalog.make_functional(sid, payload["functional"], T)
        return tau_samples_chunk(sys, catalog.start_point(sid), F, k,
                                 payload["tau"], L, T, seed, start, count)
    if check == "conditional":
        v0, g, u = catalog.conditional_data(sid)
        node = _nodes_for_times([payload["conditional_time"]], L, T)[0]
        return conditional_samples_chunk(sys, catalog.start_point(sid), v0,
                                         g, u, node, T / L, seed, start,
                                         count, payload["variant"] or "eq8")
    raise UsageError(f"check {check!r} has no per-sample kernel")


def _preflight(payload: dict) -> None:
    """Input validation the public harness entry points would perform,
    run once in the parent before any chunks are dispatched."""
    sid, check = payload["scenario"], payload["check"]
    sys = catalog.build_system(sid)
    if check in ("eq4", "eq5"):
        pts = catalog.eq5_start_points(sid) if check == "eq5" else \
            catalog.start_point(sid)[None]
        require_injective(sys, _probe_points(sys, pts))
    elif check == "girsanov":
        if not abs(payload["tau"]) <= 1.0:
            raise PreconditionError(
                f"|tau| must be at most 1, got {payload['tau']!r}")
    elif check == "tau-derivative":
        if not (0.0 < payload["tau"] <= 0.5):
            raise PreconditionError(
                f"tau step must lie in (0, 0.5], got {payload['tau']!r}")
    elif check == "conditional":
        node = _nodes_for_times([payload["conditional_time"]],
                                payload["steps"], payload["horizon"])[0]
        if node == 0:
            raise UsageError("conditioning time must be positive")
        v0 = catalog.conditional_data(sid)[0]
        pack = resolve_pack(sys)
        E0 = pack.frame(catalog.start_point(sid))
        res = float(np.linalg.norm(v0 - E0 @ (E0.T @ v0)))
        if res > 1e-8 * (1.0 + float(np.linalg.norm(v0))):
            raise PreconditionError("v0 is not tangent at the start point")


def _assemble(payload: dict, n: int, workers: int):
    ranges = chunk_ranges(n)
    if workers <= 1 or len(ranges) <= 1:
        parts = [_chunk_arrays(payload, s, c) for s, c in ranges]
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            futs = [ex.submit(_chunk_arrays, payload, s, c)
                    for s, c in ranges]
            parts = [f.result() for f in futs]
    cols = list(zip(*parts))
    return tuple(np.concatenate(c) for c in cols)


def _closed_form(sc, payload: dict):
    cf = sc.closed_forms.get(payload["check"])
    if not cf or payload["horizon"] != 1.0:
        return None
    if cf.get("functional") != payload["functional"]:
        return None
    if "tau" in cf and payload["tau"] != cf["tau"]:
        return None
    return float(cf["value"])


def _within(mean: float, stderr: float, target: float) -> bool:
    return abs(mean - target) <= Z_LIMIT * stderr + CLOSED_FORM_SLACK


def _mc_report(cfg: RunConfig, payload: dict) -> tuple[dict, dict]:
    _preflight(payload)
    sc = catalog.get_scenario(cfg.scenario)
    n = payload["paths"]
    arrays = _assemble(payload, n, cfg.workers)
    lhs, rhs = arrays[0], arrays[1]
    res = EstimatorResult.from_samples(lhs, rhs)
    cf = _closed_form(sc, payload)
    threshold = Z_LIMIT
    ok = res.z < Z_LIMIT
    extra_cols = {}
    if payload["check"] == "girsanov":
        w = arrays[2]
        wm = _exact_mean(w)
        wse = _exact_stderr(w, wm)
        ok = ok and abs(wm - 1.0) <= Z_LIMIT * wse + WEIGHT_SLACK
        extra_cols["weight"] = w
    elif payload["check"] == "tau-derivative":
        cd_half = arrays[2]
        chm = _exact_mean(cd_half)
        # the difference-quotient bias is quadratic in the step, so the
        # halved step retains a quarter of it
        bias_bound = abs(res.lhs_mean - chm) * (4.0 / 3.0)
        if res.paired_stderr > 0.0:
            threshold = min(Z_LIMIT + bias_bound / res.paired_stderr,
                            RATIO_CAP)
        ok = res.z < threshold
        extra_cols["cd_half"] = cd_half
    if cf is not None:
        ok = ok and _within(res.lhs_mean, res.lhs_stderr, cf) \
            and _within(res.rhs_mean, res.rhs_stderr, cf)
    report = _render(cfg, payload, cf,
                     lhs=(res.lhs_mean, res.lhs_stderr),
                     rhs=(res.rhs_mean, res.rhs_stderr),
                     paired=(res.paired_mean, res.paired_stderr, res.z),
                     threshold=threshold, ok=bool(ok))
    data = {"lhs": lhs, "rhs": rhs, **extra_cols}
    return report, data


def _geometry_report(cfg: RunConfig, payload: dict) -> tuple[dict, dict]:
    sys = catalog.build_system(cfg.scenario)
    pack = resolve_pack(sys)
    orc = ConnectionOracle(sys)
    man = sys.manifold
    limit = GEOMETRY_LIMITS[payload["check"]]
    residuals = {}
    if payload["check"] == "geometry-ricci":
        xs = halton_points(man, 4)
        rng = np.random.default_rng(11)
        V = pack.project_cols(xs, rng.normal(size=(4, man.ambient_dim, 2)))
        num = np.stack([orc.ricci_matrix(xs[i]) @ V[i]
                        for i in range(xs.shape[0])])
        dev = float(np.max(np.abs(pack.ricci_cols(xs, V) - num)))
        residuals["ricci_vs_numerical"] = dev
    else:
        xs = halton_points(man, 6)
        rng = np.random.default_rng(13)
        b1 = rng.normal(size=sys.noise_dim)
        b2 = rng.normal(size=sys.noise_dim)
        Z1 = VectorField(lambda y: sys.coeff(y) @ b1, name="Xb1")
        Z2 = VectorField(lambda y: sys.coeff(y) @ b2, name="Xb2")
        for x in xs:
            v = man.tangent_basis(x) @ rng.normal(size=man.intrinsic_dim)
            residuals["reproducing"] = max(
                residuals.get("reproducing", 0.0),
                orc.reproducing_residual(x))
            residuals["projector"] = max(
                residuals.get("projector", 0.0),
                *orc.projector_residuals(x))
            residuals["metric_compat"] = max(
                residuals.get("metric_compat", 0.0),
                orc.metric_compat_residual(x, Z1, Z2, v))
        dev = max(residuals.values())
    ok = dev <= limit
    z = dev / limit
    report = _render(cfg, payload, None, lhs=(dev, 0.0), rhs=(0.0, 0.0),
                     paired=(dev, 0.0, z), threshold=limit, ok=bool(ok))
    return report, {"residuals": residuals}


def _compose_distances(sid: str, L: int, T: float, seed: int, tau: float):
    from .flow import _reference_perturbation, shifted_flow
    sys = catalog.build_system(sid)
    pack = resolve_pack(sys)
    x0 = catalog.start_point(sid)
    k = catalog.default_direction(sid)
    noise = sample_noise(T, L, seed, 0, dim=sys.noise_dim)
    shifted = shifted_flow(sys, x0, noise, k, tau).points
    comp = _reference_perturbation(sys, x0, noise, k, tau)[1]
    return np.asarray(pack.distance(comp, shifted), dtype=float)


def _compose_report(cfg: RunConfig, payload: dict) -> tuple[dict, dict]:
    sid, T = cfg.scenario, payload["horizon"]
    L, seed, tau = payload["steps"], payload["seed"], payload["tau"]
    d_coarse = _compose_distances(sid, L, T, seed, tau)
    d_fine = _compose_distances(sid, 2 * L, T, seed, tau)
    s0, s1 = float(np.max(d_coarse)), float(np.max(d_fine))
    if s0 <= COMPOSE_EXACT and s1 <= COMPOSE_EXACT:
        ratio = RATIO_CAP      # both grids agree to machine precision
        ok = True
    else:
        ratio = min(s0 / max(s1, 1e-300), RATIO_CAP)
        ok = ratio >= COMPOSE_RATIO
    report = _render(cfg, payload, None, lhs=(s0, 0.0), rhs=(s1, 0.0),
                     paired=(ratio, 0.0, ratio), threshold=COMPOSE_RATIO,
                     ok=bool(ok))
    return report, {"coarse": d_coarse, "fine": d_fine}


def _render(cfg: RunConfig, payload: dict, cf, *, lhs, rhs, paired,
            threshold, ok) -> dict:
    sc = catalog.get_scenario(cfg.scenario)
    geo = payload["check"] in ("geometry-ricci", "geometry-connection")
    mc = payload["check"] in MC_CHECKS
    gridded = mc or payload["check"] == "compose"
    params = {
        "horizon": None if geo else payload["horizon"],
        "steps": payload["steps"] if gridded else None,
        "paths": payload["paths"] if mc else None,
        "seed": payload["seed"] if gridded else None,
        "tau": payload["tau"],
        "workers": int(cfg.workers),
        "k": {"kind": "linear", "direction": list(sc.direction)}
        if gridded else None,
        "functional": payload["functional"],
        "variant": payload["variant"],
        "conditional_time": payload["conditional_time"],
        "closed_form": cf,
    }
    return {
        "scenario": cfg.scenario,
        "check": payload["check"],
        "params": params,
        "lhs": {"mean": float(lhs[0]), "stderr": float(lhs[1])},
        "rhs": {"mean": float(rhs[0]), "stderr": float(rhs[1])},
        "paired": {"mean": float(paired[0]), "stderr": float(paired[1]),
                   "z": float(paired[2])},
        "threshold": float(threshold),
        "pass": bool(ok),
        "wall_ms": 0.0,
        "version": __version__,
    }


def _dump_csv(path: str, data: dict) -> None:
    cols = [(name, np.asarray(arr)) for name, arr in data.items()
            if isinstance(arr, np.ndarray) and arr.ndim == 1]
    if not cols:
        raise UsageError("this check has no per-sample arrays to dump")
    names = [c[0] for c in cols]
    with open(path, "w") as fh:
        fh.write("index," + ",".join(names) + "\n")
        for i in range(cols[0][1].size):
            row = ",".join(repr(float(c[1][i])) for c in cols)
            fh.write(f"{i},{row}\n")


def run_check(config) -> dict:
    """Run one scenario/check pair and return its report dictionary."""
    if isinstance(config, dict):
        config = RunConfig(**config)
    t0 = time.perf_counter()
    payload = _payload(config)
    if payload["check"] in MC_CHECKS:
        report, data = _mc_report(config, payload)
    elif payload["check"] == "compose":
        report, data = _compose_report(config, payload)
    else:
        report, data = _geometry_report(config, payload)
    if config.dump_samples:
        _dump_csv(config.dump_samples, data)
    if config.figures:
        from .figures import render_figures
        render_figures(report, data, config.figures)
    report["wall_ms"] = round((time.perf_counter() - t0) * 1e3, 3)
    return report


def render_report(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"
