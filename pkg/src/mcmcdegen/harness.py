"""Experiment harness: plans, threaded execution, and deterministic outputs.

A plan names a scenario (trace figures, the classification table, or a
diagnostic sweep) and pins every knob that affects the numbers, plus a
master seed. Cells of a plan are computed in memory (possibly in
parallel); a single reducer then writes all files in sorted cell order so
the bytes on disk never depend on thread scheduling. A manifest records
the resolved configuration, per-cell seeds and timings, and a sha256
inventory of every file written; re-running a plan over an intact output
directory skips finished cells.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import svg
from .kernels import (ChainTrace, VariantId, initial_state, run_chain,
                      trace_filename)
from .metrics import (DiagnosticsReport, classify_table1, estimate_R,
                      estimate_Rprime, one_step_statistic, table1_transform)
from .model import CovariateSpec, ModelConfig, Theta, sample_dataset
from .sampling import RngStream

__all__ = [
    "DEFAULT_THETA0", "ExperimentPlan", "RunManifest", "default_theta0",
    "emit_figure", "make_plan", "orchestrate",
]

#: Designs used when the caller does not pin true parameters: chosen to
#: keep every outcome category well populated so localized motion is not
#: dominated by a single rarely-updated cut.
DEFAULT_THETA0 = {
    2: Theta(alpha=(), beta=(2.0,)),
    3: Theta(alpha=(1.0,), beta=(-1.0,)),
    4: Theta(alpha=(0.7, 1.4), beta=(-1.0,)),
}

#: Displaced start for the ordinal trace figures: the cut ratio starts at
#: 3 while the truth is 2, so a frozen ratio is visible immediately.
ORDINAL_TRACE_START = Theta(alpha=(0.3, 0.9), beta=(-0.5,))

_SCENARIOS = ("fig1", "fig2", "fig3", "table1", "diagnose", "custom")


def default_theta0(c: int, p: int = 1) -> Theta:
    """True-parameter design for a given number of outcome categories."""
    if p == 1 and c in DEFAULT_THETA0:
        return DEFAULT_THETA0[c]
    alpha = tuple(0.7 * j for j in range(1, c - 1))
    beta = (1.0,) * p if p else ()
    return Theta(alpha=alpha, beta=(2.0,) * p if c == 2 else beta)


@dataclass(frozen=True)
class ExperimentPlan:
    """Fully resolved description of one harness run."""

    scenario: str
    master_seed: int = 20_240_817
    out_dir: str = "out"
    threads: int = 1
    n_list: tuple[int, ...] = ()
    m: int = 200
    R: int = 50
    variants: tuple[str, ...] = ()
    c_list: tuple[int, ...] = ()
    p: int = 1
    options: dict = field(default_factory=dict)

    def config_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("threads")        # execution detail, not part of the results
        d.pop("out_dir")
        return d


def make_plan(scenario: str, **kw) -> ExperimentPlan:
    """Build a plan from scenario defaults overlaid with keyword choices."""
    if scenario not in _SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}; expected one of "
                         f"{', '.join(_SCENARIOS)}")
    defaults: dict = {"scenario": scenario}
    if scenario == "fig1":
        defaults.update(n_list=(100, 1000), m=200,
                        variants=("binary-null", "binary-beta"), c_list=(2,))
    elif scenario == "fig2":
        defaults.update(n_list=(1000,), m=200,
                        variants=("beta", "beta-ma"), c_list=(4,))
    elif scenario == "fig3":
        defaults.update(n_list=(1000,), m=1000,
                        variants=("beta", "beta-ma"), c_list=(4,))
    elif scenario == "table1":
        defaults.update(n_list=(100, 400, 1600), R=50,
                        variants=("null", "beta", "null-ma", "beta-ma"),
                        c_list=(2, 3, 4))
    elif scenario == "diagnose":
        defaults.update(n_list=(100, 400), m=200, R=8,
                        variants=("binary-null",), c_list=(2,))
    else:  # custom: the caller supplies the whole grid
        defaults.update(m=200, R=8)
    opts = dict(defaults.pop("options", {}))
    opts.update(kw.pop("options", {}) or {})
    defaults.update({k: v for k, v in kw.items() if v is not None})
    defaults["options"] = opts
    plan = ExperimentPlan(**defaults)
    if scenario == "custom" and not (plan.variants and plan.c_list
                                     and plan.n_list):
        raise ValueError("scenario 'custom' carries no defaults; pass "
                         "variants, c_list and n_list explicitly")
    if scenario in ("fig2", "fig3") and any(c < 4 for c in plan.c_list):
        raise ValueError(
            f"scenario {scenario!r} plots the ratio of the second and third "
            f"cut points and needs c >= 4 outcome categories; got "
            f"c={min(plan.c_list)}")
    return plan


# --------------------------------------------------------------------------
# manifest

def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class RunManifest:
    """Record of a harness run: configuration, seeds, files, timings."""

    scenario: str
    config: dict
    cells: dict = field(default_factory=dict)
    files: dict = field(default_factory=dict)
    version: str = ""

    def save(self, path: Path) -> None:
        payload = {"scenario": self.scenario, "config": self.config,
                   "cells": self.cells, "files": self.files,
                   "version": self.version}
        tmp = path.with_suffix(".tmp")
        with open(tmp, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        tmp.replace(path)

    @classmethod
    def load(cls, path: Path) -> "RunManifest":
        with open(path) as fh:
            d = json.load(fh)
        return cls(scenario=d["scenario"], config=d["config"],
                   cells=d.get("cells", {}), files=d.get("files", {}),
                   version=d.get("version", ""))

    def cell_done(self, key: str, out_dir: Path) -> bool:
        cell = self.cells.get(key)
        if not cell or "error" in cell or not cell.get("files"):
            return False
        return all((out_dir / f).exists() for f in cell["files"])


# --------------------------------------------------------------------------
# cell builders: each returns (key, task) where task() -> payload, and the
# reducer turns payloads into files.

def _model(plan: ExperimentPlan, c: int) -> ModelConfig:
    return ModelConfig(c=c, covariates=CovariateSpec(p=plan.p))


def _trace_cells(plan: ExperimentPlan):
    """One cell per (variant, n): a single recorded chain on a shared
    dataset, started from a common displaced point."""
    cells = []
    c = plan.c_list[0]
    cfg = _model(plan, c)
    if c == 2:
        theta0 = plan.options.get("theta0") or default_theta0(2, plan.p)
        start = plan.options.get("start") or Theta(alpha=(),
                                                   beta=(1.5,) * plan.p)
    else:
        theta0 = plan.options.get("theta0") or default_theta0(c, plan.p)
        start = plan.options.get("start") or ORDINAL_TRACE_START
    for n in plan.n_list:
        for name in plan.variants:
            variant = VariantId.parse(name)
            key = f"{plan.scenario}/{name}/n{n}"

            def task(variant=variant, n=n, key=key):
                root = RngStream(plan.master_seed, plan.scenario)
                data = sample_dataset(
                    cfg, theta0, n, seed=root.child("data", n).seed_int())
                trace = run_chain(
                    cfg, data, variant, plan.m,
                    root.child("chain", variant.name, n),
                    init="fixed", theta=start, batch=1)
                return {"trace": trace, "n": n, "variant": variant.name,
                        "seed": root.child("data", n).seed_int()}

            cells.append((key, task))
    return cells, {"theta0": theta0, "start": start}


def _table1_cells(plan: ExperimentPlan):
    cells = []
    opts = plan.options
    for c in plan.c_list:
        cfg = _model(plan, c)
        theta0 = opts.get("theta0") or default_theta0(c, plan.p)
        for name in plan.variants:
            variant = VariantId.parse(name)
            transform = table1_transform(variant, c)
            for n in plan.n_list:
                key = f"table1/{name}/c{c}/n{n}"
                seed = RngStream(plan.master_seed, "table1", name, c,
                                 n).seed_int()

                def task(variant=variant, cfg=cfg, theta0=theta0, n=n,
                         transform=transform, seed=seed):
                    return one_step_statistic(
                        variant, cfg, n, plan.R, transform, seed,
                        theta0=theta0,
                        datasets=opts.get("datasets", 6),
                        inner=opts.get("inner", 16),
                        starts=opts.get("starts", 16),
                        bank_size=opts.get("bank_size", 1024),
                        pool=opts.get("pool", 16384))

                cells.append((key, task))
    return cells


def _diagnose_cells(plan: ExperimentPlan):
    cells = []
    opts = plan.options
    for c in plan.c_list:
        cfg = _model(plan, c)
        theta0 = opts.get("theta0") or default_theta0(c, plan.p)
        for name in plan.variants:
            variant = VariantId.parse(name)
            transform = opts.get("transform") or table1_transform(
                variant, c)
            for n in plan.n_list:
                key = f"{plan.scenario}/{name}/c{c}/n{n}"
                seed = RngStream(plan.master_seed, plan.scenario, name, c,
                                 n).seed_int()

                def task(variant=variant, cfg=cfg, theta0=theta0, n=n,
                         transform=transform, seed=seed):
                    out = {}
                    out["one_step"] = one_step_statistic(
                        variant, cfg, n, plan.R, transform, seed,
                        theta0=theta0, inner=opts.get("inner", 12),
                        starts=opts.get("starts", 4),
                        bank_size=opts.get("bank_size", 512),
                        pool=opts.get("pool", 8192))
                    out["risk_prime"] = estimate_Rprime(
                        variant, cfg, n, plan.m, max(2, plan.R), seed,
                        theta0=theta0, transform=transform,
                        bank_size=opts.get("bank_size", 512))
                    if opts.get("with_risk"):
                        out["risk"] = estimate_R(
                            variant, cfg, n, plan.m, max(2, plan.R),
                            opts.get("reference_size", 512), seed,
                            theta0=theta0, transform=transform)
                    return out

                cells.append((key, task))
    return cells


# --------------------------------------------------------------------------
# reducers

def _cell_files(plan: ExperimentPlan, key: str, payload,
                out_dir: Path) -> list[str]:
    """Write one finished cell's own files; cross-cell summaries (figures,
    tables) are left to the reducers, which need every cell."""
    if plan.scenario == "table1":
        fname = key.replace("/", "_") + ".json"
        payload.save(out_dir / fname)
        return [fname]
    if plan.scenario in ("fig1", "fig2", "fig3"):
        fname = trace_filename(VariantId.parse(payload["variant"]),
                               payload["n"], 0)
        payload["trace"].save(out_dir / fname, rep=0)
        return [fname]
    files = []
    for stat, rep in sorted(payload.items()):
        fname = f"{key.replace('/', '_')}_{stat}.json"
        rep.save(out_dir / fname)
        files.append(fname)
    return files


def _fmt_theta(theta: Theta) -> str:
    parts = [f"{v:.6g}" for v in theta.alpha] + [f"{v:.6g}"
                                                 for v in theta.beta]
    return "(" + ", ".join(parts) + ")"


def emit_figure(plan: ExperimentPlan, traces: dict, path: Path,
                theta0: Theta) -> list[str]:
    """Render trajectory panels from recorded chains.

    fig1: one panel per sample size; the slope trajectory of both binary
    samplers. fig2: one panel per parameter (two cuts and the slope);
    solid without the rescaling move, dashed with it (plotting its
    identified trajectory). fig3: one panel, the ratio of the third to the
    second cut.
    """
    panels = []
    if plan.scenario == "fig1":
        for n in plan.n_list:
            series = []
            for name, dash in (("binary-null", False), ("binary-beta", True)):
                trace = traces[f"fig1/{name}/n{n}"]
                series.append(svg.Series(
                    name=name, x=np.arange(trace.steps.size, dtype=float),
                    y=trace.beta[:, 0, 0], dashed=dash))
            panels.append(svg.Panel(
                title=f"slope trajectory, n={n}", series=series,
                hline=theta0.beta[0], ylabel="slope"))
    elif plan.scenario == "fig2":
        n = plan.n_list[0]
        raw = traces[f"fig2/beta/n{n}"]
        ma = traces[f"fig2/beta-ma/n{n}"]
        ident = ma.identified()
        labels = [("second cut", raw.alpha[:, 0, 0], ident[:, 0, 0],
                   theta0.alpha[0]),
                  ("third cut", raw.alpha[:, 0, 1], ident[:, 0, 1],
                   theta0.alpha[1]),
                  ("slope", raw.beta[:, 0, 0], ident[:, 0, raw.alpha.shape[2]],
                   theta0.beta[0])]
        x = np.arange(raw.steps.size, dtype=float)
        for title, solid, dashed, truth in labels:
            panels.append(svg.Panel(
                title=f"{title} trajectory, n={n}",
                series=[svg.Series("without rescale", x, solid, dashed=False),
                        svg.Series("with rescale", x, dashed, dashed=True)],
                hline=truth, ylabel=title))
    elif plan.scenario == "fig3":
        n = plan.n_list[0]
        raw = traces[f"fig3/beta/n{n}"]
        ma = traces[f"fig3/beta-ma/n{n}"]
        x = np.arange(raw.steps.size, dtype=float)
        ratio_raw = raw.alpha[:, 0, 1] / raw.alpha[:, 0, 0]
        ratio_ma = ma.alpha[:, 0, 1] / ma.alpha[:, 0, 0]
        panels.append(svg.Panel(
            title=f"cut-ratio trajectory, n={n}",
            series=[svg.Series("without rescale", x, ratio_raw, dashed=False),
                    svg.Series("with rescale", x, ratio_ma, dashed=True)],
            hline=theta0.alpha[1] / theta0.alpha[0], ylabel="third/second cut"))
    else:
        raise ValueError(f"scenario {plan.scenario!r} has no figure")
    svg.line_plot(panels, path)
    return [path.name]


def _reduce_traces(plan: ExperimentPlan, results: dict, out_dir: Path,
                   meta: dict) -> dict:
    written: dict[str, list[str]] = {}
    traces = {}
    for key in sorted(results):
        payload = results[key]
        trace: ChainTrace = payload["trace"]
        fname = trace_filename(VariantId.parse(payload["variant"]),
                               payload["n"], 0)
        trace.save(out_dir / fname, rep=0)
        written[key] = [fname]
        traces[key] = trace
    figname = f"{plan.scenario}.svg"
    emit_figure(plan, traces, out_dir / figname, meta["theta0"])
    written[f"{plan.scenario}/figure"] = [figname]
    return written


def _reduce_table1(plan: ExperimentPlan, results: dict,
                   out_dir: Path) -> dict:
    grouped: dict[tuple[str, int], dict[int, DiagnosticsReport]] = {}
    for key, rep in results.items():
        _, name, ctag, ntag = key.split("/")
        cell = (name, int(ctag[1:]))
        grouped.setdefault(cell, {})[int(ntag[1:])] = rep
    labels = classify_table1(grouped)
    order = {name: i for i, name in enumerate(plan.variants)}
    rows = ["variant,c,n,D,se,label"]
    for (name, c) in sorted(grouped, key=lambda t: (order[t[0]], t[1])):
        lab = labels[(name, c)]["label"]
        for n in sorted(grouped[(name, c)]):
            rep = grouped[(name, c)][n]
            rows.append(f"{name},{c},{n},{rep.value('D'):.17g},"
                        f"{rep.se('D'):.17g},{lab}")
    (out_dir / "table1.csv").write_text("\n".join(rows) + "\n")
    detail = {f"{name}/c{c}": info for (name, c), info in labels.items()}
    with open(out_dir / "table1.json", "w") as fh:
        json.dump(detail, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")
    written = {key: _cell_files(plan, key, results[key], out_dir)
               for key in sorted(results)}
    written["table1/summary"] = ["table1.csv", "table1.json"]
    return written


def _reduce_diagnose(plan: ExperimentPlan, results: dict,
                     out_dir: Path) -> dict:
    written: dict[str, list[str]] = {}
    rows = ["variant,c,n,statistic,value,se"]
    for key in sorted(results):
        _, name, ctag, ntag = key.split("/")
        written[key] = _cell_files(plan, key, results[key], out_dir)
        for stat, rep in sorted(results[key].items()):
            for est in sorted(rep.estimates):
                rows.append(f"{name},{ctag[1:]},{ntag[1:]},{stat}:{est},"
                            f"{rep.value(est):.17g},{rep.se(est):.17g}")
    (out_dir / "diagnostics.csv").write_text("\n".join(rows) + "\n")
    written[f"{plan.scenario}/summary"] = ["diagnostics.csv"]
    return written


# --------------------------------------------------------------------------

def orchestrate(plan: ExperimentPlan) -> RunManifest:
    """Run every cell of a plan and write its outputs.

    Cells execute on a thread pool; all file writes happen afterwards in
    sorted cell order, so outputs are byte-identical for any thread
    count. Finished cells recorded in an existing manifest with matching
    configuration are skipped.
    """
    from . import __version__

    out_dir = Path(plan.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mpath = out_dir / "manifest.json"
    manifest = RunManifest(scenario=plan.scenario,
                           config=_jsonable_config(plan),
                           version=__version__)
    if mpath.exists():
        try:
            old = RunManifest.load(mpath)
        except (OSError, json.JSONDecodeError, KeyError):
            old = None
        if old and old.config == manifest.config:
            manifest = old

    meta: dict = {}
    if plan.scenario in ("fig1", "fig2", "fig3"):
        cells, meta = _trace_cells(plan)
    elif plan.scenario == "table1":
        cells = _table1_cells(plan)
    else:
        cells = _diagnose_cells(plan)

    pending = [(k, t) for k, t in cells
               if not manifest.cell_done(k, out_dir)]
    results: dict = {}
    failures: dict = {}
    timings: dict = {}
    if pending:
        def run(item):
            key, task = item
            t0 = time.perf_counter()
            try:
                out, err = task(), None
            except Exception as exc:  # isolate the cell; recorded below
                out, err = None, exc
            return key, out, time.perf_counter() - t0, err

        if plan.threads > 1:
            with ThreadPoolExecutor(max_workers=plan.threads) as pool:
                outcomes = list(pool.map(run, pending))
        else:
            outcomes = [run(item) for item in pending]
        for key, out, dt, err in outcomes:
            timings[key] = dt
            if err is None:
                results[key] = out
            else:
                failures[key] = err

    if failures:
        _record_partial(plan, manifest, results, failures, timings, out_dir)
        names = ", ".join(sorted(failures))
        first = failures[sorted(failures)[0]]
        raise RuntimeError(
            f"{len(failures)} of {len(pending)} cells failed ({names}); "
            f"finished cells and failure records are in "
            f"{mpath}") from first

    # The reducers need every cell's payload; recompute nothing for cells
    # already on disk, but summary files depend on all cells, so a partial
    # resume reloads finished payloads from their files.
    if plan.scenario == "table1":
        _load_finished_reports(manifest, results, cells, out_dir)
        written = _reduce_table1(plan, results, out_dir)
    elif plan.scenario in ("fig1", "fig2", "fig3"):
        if results:
            full = dict(results)
            _load_finished_traces(manifest, full, cells, out_dir)
            written = _reduce_traces(plan, full, out_dir, meta)
        else:
            written = {k: v.get("files", []) for k, v in
                       manifest.cells.items()}
    else:  # diagnose, custom
        if results:
            full = dict(results)
            _load_finished_stats(manifest, full, cells, out_dir)
            written = _reduce_diagnose(plan, full, out_dir)
        elif not manifest.cells:
            written = _reduce_diagnose(plan, {}, out_dir)
        else:
            written = {k: v.get("files", []) for k, v in
                       manifest.cells.items()}

    for key, files in written.items():
        entry = manifest.cells.get(key, {})
        entry["files"] = files
        entry.pop("error", None)
        if key in timings:
            entry["seconds"] = round(timings[key], 3)
        manifest.cells[key] = entry
    manifest.files = {}
    for files in written.values():
        for f in files:
            manifest.files[f] = _sha256_file(out_dir / f)
    manifest.save(mpath)
    return manifest


def _jsonable_config(plan: ExperimentPlan) -> dict:
    def conv(v):
        if isinstance(v, Theta):
            return {"alpha": list(v.alpha), "beta": list(v.beta)}
        if isinstance(v, tuple):
            return [conv(x) for x in v]
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        return v
    return {k: conv(v) for k, v in plan.config_dict().items()}


def _load_finished_reports(manifest: RunManifest, results: dict, cells,
                           out_dir: Path) -> None:
    for key, _ in cells:
        if key in results:
            continue
        files = manifest.cells.get(key, {}).get("files", [])
        if files:
            results[key] = DiagnosticsReport.load(out_dir / files[0])


def _load_finished_stats(manifest: RunManifest, results: dict, cells,
                         out_dir: Path) -> None:
    for key, _ in cells:
        if key in results:
            continue
        files = manifest.cells.get(key, {}).get("files", [])
        if not files:
            continue
        prefix = key.replace("/", "_") + "_"
        results[key] = {
            f[len(prefix):-len(".json")]: DiagnosticsReport.load(out_dir / f)
            for f in files}


def _record_partial(plan: ExperimentPlan, manifest: RunManifest,
                    results: dict, failures: dict, timings: dict,
                    out_dir: Path) -> None:
    """After a cell failure: write the finished cells' own files and
    record each failure in the manifest, so a later run with the same
    configuration retries only the failed cells."""
    for key in sorted(results):
        entry = manifest.cells.get(key, {})
        entry["files"] = _cell_files(plan, key, results[key], out_dir)
        entry.pop("error", None)
        if key in timings:
            entry["seconds"] = round(timings[key], 3)
        manifest.cells[key] = entry
    for key in sorted(failures):
        entry = manifest.cells.get(key, {})
        entry.pop("files", None)
        entry["error"] = f"{type(failures[key]).__name__}: {failures[key]}"
        if key in timings:
            entry["seconds"] = round(timings[key], 3)
        manifest.cells[key] = entry
    manifest.files = {
        f: _sha256_file(out_dir / f)
        for cell in manifest.cells.values()
        for f in cell.get("files", [])
        if (out_dir / f).exists()}
    manifest.save(out_dir / "manifest.json")


def _load_finished_traces(manifest: RunManifest, results: dict, cells,
                          out_dir: Path) -> None:
    from .kernels import load_trace

    for key, _ in cells:
        if key in results:
            continue
        files = manifest.cells.get(key, {}).get("files", [])
        if not files:
            continue
        _, name, ntag = key.split("/")
        cols = load_trace(out_dir / files[0])
        variant = VariantId.parse(name)
        acols = sorted((k for k in cols if k.startswith("alpha")),
                       key=lambda k: int(k[5:]))
        bcols = sorted((k for k in cols if k.startswith("beta")),
                       key=lambda k: int(k[4:]))
        steps = cols["step"]
        trace = ChainTrace(
            variant=variant, c=len(acols) + 2, p=len(bcols), steps=steps,
            alpha=np.stack([cols[k] for k in acols], axis=-1)[:, None, :]
            if acols else np.zeros((steps.size, 1, 0)),
            beta=np.stack([cols[k] for k in bcols], axis=-1)[:, None, :],
            g=cols["g"][:, None])
        results[key] = {"trace": trace, "variant": name,
                        "n": int(ntag[1:]), "seed": None}
