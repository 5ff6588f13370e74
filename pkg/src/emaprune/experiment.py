"""Experiment orchestration behind the command line.

An experiment is described by one JSON document (see :data:`DEFAULTS`).
Data comes either from CSV files or from the built-in shifted Gaussian
mixture recipe; the model is optionally pretrained on the source data and
then finetuned with dynamic pruning on the target data.
"""
from __future__ import annotations

import copy
import csv
import functools
import io
import json
import logging
import os
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import model as M
from . import theory as T
from .data import (CSVSchema, Dataset, ShiftSpec, apply_shift, generate_gaussian_mixture,
                   load_csv, split_dataset, write_csv)
from .errors import PreconditionError
from .metrics import aggregate_seeds
from .pruning import ScorerKind
from .trainer import TrainConfig, evaluate, time_efficiency, train

logger = logging.getLogger(__name__)

DEFAULTS = {
    "data": {
        "source_csv": None,
        "target_csv": None,
        "label_column": "label",
        "task": "classification",
        "delimiter": ",",
        "split": [0.8, 0.1, 0.1],
        "generate": {
            "seed": 7,
            "n_features": 20,
            "n_classes": 4,
            "source_samples": 20000,
            "target_samples": 4000,
            "mean_scale": 1.0,
            "cov_scale": 4.0,
            "shift_scale": 4.0,
            "scale_shift": 1.5,
            "label_noise": 0.0,
            "class_prior_target": None,
        },
    },
    "model": {"hidden_dims": [32], "activation": "tanh"},
    "pretrain": {
        "enabled": True,
        "epochs": 5,
        "learning_rate": 0.05,
        "batch_size": 64,
        "optimizer": "sgd",
        "seed": 0,
    },
    "train": {
        "pruning_ratio": 0.0,
        "beta": 0.5,
        "learning_rate": 0.02,
        "epochs": 20,
        "batch_size": 64,
        "scorer": "molpeg",
        "optimizer": "sgd",
        "selection_mode": "batch",
        "seed": 0,
        "metric": "auto",
    },
    "sweep": {
        "pruning_ratios": [0.2, 0.4, 0.6, 0.7, 0.8, 0.9],
        "scorers": ["molpeg", "soft_random"],
        "seeds": [0, 1, 2, 3, 4],
        "betas": [0.5],
    },
    "verify": {
        "steps": 200,
        "learning_rate": 0.01,
        "pruning_ratio": 0.5,
        "drift_betas": [0.25, 0.5, 0.9],
        "scaling_alpha": 5e-5,
        "flow_matched_alpha": 0.002,
        "projection_steps": 50,
        "identity_tol": 1e-10,
        "scaling_range": [3.5, 4.5],
        "projection_min_fraction": 0.95,
        "sign_test_alpha": 0.01,
    },
    "out": "runs",
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the JSON file, then explicit overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                cfg = _merge(cfg, json.load(fh))
        except json.JSONDecodeError as exc:
            raise PreconditionError(f"{path}: invalid JSON ({exc})") from None
    if overrides:
        cfg = _merge(cfg, overrides)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict):
    train_config(cfg).validate()
    sw = cfg["sweep"]
    for key in ("pruning_ratios", "scorers", "seeds", "betas"):
        if not sw.get(key):
            raise PreconditionError(f"sweep.{key} must be a non-empty list")
    for s in sw["scorers"]:
        ScorerKind.parse(s)
    for p in sw["pruning_ratios"]:
        if not 0.0 <= p < 1.0:
            raise PreconditionError(f"pruning ratio {p} outside [0, 1)")
    for b in sw["betas"]:
        if not 0.0 <= b <= 1.0:
            raise PreconditionError(f"beta {b} outside [0, 1]")
    split = cfg["data"]["split"]
    if len(split) != 3 or abs(sum(split) - 1.0) > 1e-9 or min(split) <= 0:
        raise PreconditionError("data.split must be three positive fractions summing to 1")


def train_config(cfg: dict, **changes) -> TrainConfig:
    fields = dict(cfg["train"])
    fields.update(changes)
    return TrainConfig(**fields)


# --- data ----------------------------------------------------------------------

def generate_recipe(gen: dict):
    """Source mixture, and a target mixture pushed through an affine shift."""
    ss = np.random.SeedSequence(gen["seed"])
    s_means, s_src, s_tgt, s_shift = ss.spawn(4)
    d, k = gen["n_features"], gen["n_classes"]
    r = np.random.default_rng(s_means)
    means = r.standard_normal((k, d)) * gen["mean_scale"]
    mean_shift = r.standard_normal(d) * gen["shift_scale"]
    source = generate_gaussian_mixture(s_src, gen["source_samples"], d, k, means, gen["cov_scale"])
    target = generate_gaussian_mixture(s_tgt, gen["target_samples"], d, k, means, gen["cov_scale"])
    shift = ShiftSpec(mean_shift=mean_shift, scale_shift=gen["scale_shift"],
                      label_noise=gen["label_noise"],
                      class_prior_target=gen.get("class_prior_target"))
    target = apply_shift(target, shift, s_shift)
    return source, target


def load_data(cfg: dict):
    """``(source or None, target)`` from CSV paths or the generator recipe."""
    dc = cfg["data"]
    if dc.get("target_csv"):
        schema = CSVSchema(label_column=dc["label_column"], task=dc["task"],
                           delimiter=dc["delimiter"])
        target = load_csv(dc["target_csv"], schema)
        source = load_csv(dc["source_csv"], schema) if dc.get("source_csv") else None
        if source is not None and source.task == "classification":
            k = max(source.num_classes, target.num_classes)
            source.num_classes = target.num_classes = k
        return source, target
    return generate_recipe(dc["generate"])


def model_spec(cfg: dict, data: Dataset) -> M.ModelSpec:
    mc = cfg["model"]
    if data.task == "classification":
        return M.ModelSpec(data.n_features, tuple(mc["hidden_dims"]), data.num_classes,
                           "classification", mc["activation"])
    return M.ModelSpec(data.n_features, tuple(mc["hidden_dims"]), 1, "regression", mc["activation"])


def cmd_gen_data(cfg: dict, out) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    gen = cfg["data"]["generate"]
    source, target = generate_recipe(gen)
    files = {}
    for name, ds in (("source", source), ("target", target)):
        path = out / f"{name}.csv"
        _atomic(path, lambda p, ds=ds: write_csv(ds, p))
        files[name] = {"path": path.name, "rows": len(ds), "features": ds.n_features,
                       "classes": ds.num_classes}
    manifest = {"seed": gen["seed"], "generator": gen, "files": files}
    _atomic_text(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


# --- training ------------------------------------------------------------------

def pretrain(cfg: dict, source: Dataset | None, spec: M.ModelSpec):
    """Full-data training on the source split; returns ``(params, info)``."""
    pc = cfg["pretrain"]
    init = M.init_params(spec, pc["seed"])
    if source is None or not pc["enabled"]:
        return init, {"enabled": False}
    src = split_dataset(source, cfg["data"]["split"], seed=pc["seed"])
    tc = TrainConfig(pruning_ratio=0.0, learning_rate=pc["learning_rate"], epochs=pc["epochs"],
                     batch_size=pc["batch_size"], optimizer=pc["optimizer"], seed=pc["seed"],
                     scorer="soft_random", metric=cfg["train"].get("metric", "auto"))
    res = train(src, tc, spec, init)
    return res.pair.online, {"enabled": True, "test_metric": res.records[-1].test_metric,
                             "epochs": pc["epochs"]}


@dataclass
class Prepared:
    source: Dataset | None
    target: Dataset
    spec: M.ModelSpec
    init: np.ndarray
    pretrain_info: dict


def prepare(cfg: dict) -> Prepared:
    source, target = load_data(cfg)
    spec = model_spec(cfg, target)
    init, info = pretrain(cfg, source, spec)
    if source is not None and info["enabled"]:
        info["zero_shot_target_metric"] = evaluate(init, target.X, target.y, spec,
                                                   cfg["train"].get("metric", "auto"))
    return Prepared(source, target, spec, init, info)


def run_cell(prep: Prepared, cfg: dict, tc: TrainConfig, on_decision=None):
    ds = split_dataset(prep.target, cfg["data"]["split"], seed=tc.seed)
    start = time.perf_counter()
    res = train(ds, tc, prep.spec, prep.init, on_decision=on_decision)
    runtime = time.perf_counter() - start
    return res, runtime


def cmd_train(cfg: dict, out) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    prep = prepare(cfg)
    tc = train_config(cfg)
    res, runtime = run_cell(prep, cfg, tc)
    _atomic_text(out / "config.json", json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    lines = "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in res.records)
    _atomic_text(out / "epochs.jsonl", lines)
    last = res.records[-1]
    final = {
        "val_metric": last.val_metric,
        "test_metric": last.test_metric,
        "epochs": len(res.records),
        "steps": res.steps,
        "selected_total": sum(r.selected_count for r in res.records),
        "wall_time_seconds": runtime,
        "time_efficiency": time_efficiency(runtime),
        "pretrain": prep.pretrain_info,
    }
    _atomic_text(out / "metrics.json", json.dumps(final, indent=2, sort_keys=True) + "\n")
    return final


# --- sweep ---------------------------------------------------------------------

# wall-clock figures live in their own table so the raw one is reproducible byte for byte
RAW_COLUMNS = ["scorer", "pruning_ratio", "beta", "seed", "val_metric", "test_metric"]
TIMING_COLUMNS = ["scorer", "pruning_ratio", "beta", "seed", "wall_time_seconds", "time_efficiency"]
AGG_COLUMNS = ["scorer", "pruning_ratio", "beta", "n_seeds", "val_mean", "val_std",
               "test_mean", "test_std"]

_WORKER = {}


def grid(cfg: dict) -> list:
    sw = cfg["sweep"]
    return [(s, p, b, seed) for s in sw["scorers"] for p in sw["pruning_ratios"]
            for b in sw["betas"] for seed in sw["seeds"]]


def _cell(args):
    scorer, ratio, beta, seed = args
    prep, cfg = _WORKER["prep"], _WORKER["cfg"]
    try:
        tc = train_config(cfg, scorer=scorer, pruning_ratio=ratio, beta=beta, seed=seed)
        hook = _WORKER.get("on_decision")
        if hook is not None:
            hook = functools.partial(hook, args)
        res, runtime = run_cell(prep, cfg, tc, on_decision=hook)
        last = res.records[-1]
        return {"scorer": scorer, "pruning_ratio": ratio, "beta": beta, "seed": seed,
                "val_metric": last.val_metric, "test_metric": last.test_metric,
                "wall_time_seconds": runtime, "time_efficiency": time_efficiency(runtime)}
    except Exception as exc:  # recorded per cell, the sweep carries on
        logger.error("cell %s failed: %s", args, exc)
        return {"scorer": scorer, "pruning_ratio": ratio, "beta": beta, "seed": seed,
                "error": f"{type(exc).__name__}: {exc}"}


def _init_worker(prep, cfg, on_decision=None):
    _WORKER["prep"] = prep
    _WORKER["cfg"] = cfg
    _WORKER["on_decision"] = on_decision


def aggregate(rows: list) -> list:
    """Mean/std per (scorer, ratio, beta) cell; a pure function of the raw rows."""
    groups = {}
    for r in rows:
        groups.setdefault((r["scorer"], r["pruning_ratio"], r["beta"]), []).append(r)
    out = []
    for (scorer, ratio, beta), rs in groups.items():
        vm, vs = aggregate_seeds([r["val_metric"] for r in rs])
        tm, ts = aggregate_seeds([r["test_metric"] for r in rs])
        out.append({"scorer": scorer, "pruning_ratio": ratio, "beta": beta, "n_seeds": len(rs),
                    "val_mean": vm, "val_std": vs, "test_mean": tm, "test_std": ts})
    return out


def rows_to_csv(rows: list, columns: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])
    return buf.getvalue()


def cmd_sweep(cfg: dict, out, jobs: int = 1, prep: Prepared | None = None,
              on_decision=None) -> dict:
    """Run the grid and write raw, timing, aggregated and failure tables.

    ``on_decision(cell, decision)`` (serial runs only) sees every selection the
    trainer makes; ``cell`` is the ``(scorer, ratio, beta, seed)`` tuple.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    prep = prep or prepare(cfg)
    cells = grid(cfg)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker,
                                 initargs=(prep, cfg)) as pool:
            results = list(pool.map(_cell, cells))
    else:
        _init_worker(prep, cfg, on_decision)
        results = [_cell(c) for c in cells]
    rows = [r for r in results if "error" not in r]
    failed = [r for r in results if "error" in r]
    _atomic_text(out / "config.json", json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    _atomic_text(out / "sweep_raw.csv", rows_to_csv(rows, RAW_COLUMNS))
    _atomic_text(out / "sweep_timing.csv", rows_to_csv(rows, TIMING_COLUMNS))
    _atomic_text(out / "sweep_aggregated.csv", rows_to_csv(aggregate(rows), AGG_COLUMNS))
    _atomic_text(out / "failures.json", json.dumps(failed, indent=2, sort_keys=True) + "\n")
    return {"cells": len(cells), "completed": len(rows), "failed": len(failed),
            "pretrain": prep.pretrain_info}


# --- verify --------------------------------------------------------------------

def _check(passed, notice=None, **measured):
    out = {"passed": passed, "measured": measured}
    if notice:
        out["notice"] = notice
    return out


def _instrumented(prep, cfg, vc, ds, *, beta, lr, steps):
    tc = train_config(cfg, optimizer="sgd", scorer="molpeg", beta=beta, learning_rate=lr,
                      pruning_ratio=vc["pruning_ratio"], history_tol=0.0,
                      epochs=max(1, steps), selection_mode="batch")
    return train(ds, tc, prep.spec, prep.init, instrument=True, max_steps=steps).instrumentation


def cmd_verify(cfg: dict, out=None) -> dict:
    """Instrumented sgd runs plus every theory check; returns the report dict."""
    cfg = copy.deepcopy(cfg)
    notices = []
    if cfg["model"]["activation"] != "tanh" or cfg["train"]["optimizer"] != "sgd":
        notices.append("verify forces sgd and tanh activations")
    cfg["model"]["activation"] = "tanh"
    cfg["train"]["optimizer"] = "sgd"
    if cfg["train"]["scorer"] != "molpeg":
        notices.append("verify scores with molpeg regardless of the configured scorer")
    for n in notices:
        logger.warning(n)
    vc = cfg["verify"]
    prep = prepare(cfg)
    ds = split_dataset(prep.target, cfg["data"]["split"], seed=cfg["train"]["seed"])
    beta = cfg["train"]["beta"]
    lr = vc["learning_rate"]
    steps = vc["steps"]
    tol = vc["identity_tol"]
    checks = {}

    inst = _instrumented(prep, cfg, vc, ds, beta=beta, lr=lr, steps=steps)
    resid = T.displacement_identity_residuals(inst)
    checks["displacement_identity"] = _check(bool(resid.max() <= tol), max_norm=float(resid.max()),
                                     steps=len(resid), tol=tol)
    p1 = [T.check_first_order(inst, s) for s in range(len(inst.steps))]
    disp = max(r.displacement_error for r in p1)
    checks["displacement_equals_alpha_v_ema"] = _check(bool(disp <= tol), max_error=disp, tol=tol)

    drift = {}
    for b in list(dict.fromkeys(vc["drift_betas"] + [beta])):
        if b in (0.0, 1.0):
            drift[str(b)] = _check(None, notice=f"drift bound degenerates at beta={b}; skipped")
            continue
        run = inst if b == beta else _instrumented(prep, cfg, vc, ds, beta=b, lr=lr, steps=steps)
        m = T.drift_bound_margins(run)
        drift[str(b)] = _check(bool(m.min() >= 0.0), min_margin=float(m.min()),
                               max_drift=float(T.drift_norms(run).max()))
    ran = [v["passed"] for v in drift.values() if v["passed"] is not None]
    checks["drift_bound"] = {"passed": all(ran) if ran else None, "per_beta": drift}

    a_full = _instrumented(prep, cfg, vc, ds, beta=beta, lr=vc["scaling_alpha"], steps=steps)
    a_half = _instrumented(prep, cfg, vc, ds, beta=beta, lr=vc["scaling_alpha"] / 2, steps=steps)
    ratio = T.residual_scaling_ratio(a_full, a_half)
    lo, hi = vc["scaling_range"]
    f_full = _instrumented(prep, cfg, vc, ds, beta=beta, lr=vc["flow_matched_alpha"], steps=steps)
    f_half = _instrumented(prep, cfg, vc, ds, beta=beta, lr=vc["flow_matched_alpha"] / 2,
                           steps=2 * steps)
    flow = _flow_matched_ratio(f_full, f_half)
    if beta == 1.0:
        checks["residual_scaling"] = _check(
            None, notice="beta=1 leaves no displacement; scaling undefined", ratio=ratio)
    else:
        checks["residual_scaling"] = _check(
            bool(lo <= ratio <= hi), ratio=ratio, alpha=vc["scaling_alpha"], range=[lo, hi],
            flow_matched_ratio=flow, flow_matched_alpha=vc["flow_matched_alpha"])

    n2 = min(vc["projection_steps"], len(inst.steps) - 1)
    fo = [T.check_projection(inst, s, "first_order") for s in range(1, n2 + 1)]
    fo_present = [r for r in fo if r.a_ok is not None or r.b_ok is not None]
    fo_viol = sum((r.a_ok is False) or (r.b_ok is False) for r in fo)
    checks["projection_first_order_selection"] = _check(
        bool(fo_viol == 0 and len(fo_present) > 0) if fo_present else None,
        steps=len(fo), steps_with_coefficients=len(fo_present), violations=int(fo_viol),
        min_a=_min([r.a_coefficient for r in fo]), max_b=_max([r.b_coefficient for r in fo]))

    rec = [T.check_projection(inst, s, "recorded", p1[s]) for s in range(1, len(inst.steps))]
    rec = [r for r in rec if r.tau is not None]
    if rec:
        ok = sum((r.a_ok is not False) and (r.b_ok is not False) for r in rec)
        frac = ok / len(rec)
        checks["projection_loss_discrepancy_selection"] = _check(
            bool(frac >= vc["projection_min_fraction"]), fraction_within_budget=frac, steps=len(rec),
            raw_sign_violations=int(sum((r.a_coefficient or 0) < 0 or (r.b_coefficient or 0) > 0
                                        for r in rec)))
    else:
        checks["projection_loss_discrepancy_selection"] = _check(
            None, notice="reference never moved away from the online model; skipped")
    sign = T.perpendicular_sign_test(rec or fo)
    checks["perpendicular_sign_test"] = _check(
        None if sign["p_value"] is None else bool(sign["p_value"] >= vc["sign_test_alpha"]), **sign)

    gb_all = [T.check_grand_bound(inst, s, p1[s], samples="all") for s in range(len(inst.steps))]
    gb_sel = [T.check_grand_bound(inst, s, p1[s], samples="selected") for s in range(len(inst.steps))]
    cs = sum(g.violations for g in gb_all)
    checks["cauchy_schwarz"] = _check(cs == 0, violations=int(cs),
                                      samples=int(sum(len(g.ids) for g in gb_all)))
    bv = sum(g.bound_violations for g in gb_sel)
    checks["grand_lower_bound"] = _check(bv == 0, violations=int(bv),
                                         samples=int(sum(len(g.ids) for g in gb_sel)))

    scores = np.concatenate([s.scores for s in inst.steps])
    residuals = np.concatenate([r.residual for r in p1])
    report = {
        "passed": all(c["passed"] is not False for c in checks.values()),
        "failed": sorted(k for k, c in checks.items() if c["passed"] is False),
        "checks": checks,
        "run": {"beta": beta, "learning_rate": lr, "steps": len(inst.steps),
                "pruning_ratio": vc["pruning_ratio"], "max_score": float(scores.max()),
                "max_abs_residual": float(np.abs(residuals).max()),
                "epsilon": float(np.linalg.norm(inst.deltas(), axis=1).max())},
        "notices": notices + ["reference is updated after the online step; xi_t reads the "
                              "post-update theta_t"],
    }
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        _atomic_text(out / "verify_report.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def _flow_matched_ratio(full, half) -> float:
    """Step t at alpha against step 2t at alpha / 2 (same elapsed learning time)."""
    n = min(len(full.steps), len(half.steps) // 2)
    num = np.mean(np.concatenate([np.abs(T.check_first_order(full, s).residual) for s in range(1, n)]))
    den = np.mean(np.concatenate([np.abs(T.check_first_order(half, 2 * s).residual) for s in range(1, n)]))
    return float(num / den) if den > 0 else float("nan")


def _min(vals):
    vals = [v for v in vals if v is not None]
    return min(vals) if vals else None


def _max(vals):
    vals = [v for v in vals if v is not None]
    return max(vals) if vals else None


# --- atomic writes -------------------------------------------------------------

def _atomic(path: Path, writer):
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_text(path: Path, text: str):
    def w(p):
        with open(p, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    _atomic(Path(path), w)
