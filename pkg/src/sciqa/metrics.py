"""Evaluation: correlation metrics, logistic score mapping, and protocols.

Implements the three scalar criteria (PLCC, SRCC, RMSE), the
five-parameter logistic regression that linearizes model scores against
subjective scores before PLCC/RMSE are read off, and two experiment
protocols: repeated random train/test splits aggregated by mean, and
cross-database transfer aggregated by median. Reports serialize to JSON
and CSV without timestamps, so reruns with equal inputs are
byte-identical.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.optimize import least_squares
from scipy.special import expit
from scipy.stats import rankdata

from .dataset import DatabaseManifest, load_image, load_patch_dataset, split_by_reference
from .network import ModelConfig
from .pooling import POOLING_MODES, score_image
from .trainer import DivergenceError, TrainSchedule, train_two_stage

MIN_CORRELATION_POINTS = 3
MIN_FIT_POINTS = 6
FIT_RESTARTS = 7  # attempts beyond the documented initialization

STAGE_NAMES = ("stage1", "stage2")


def _pair(o, s, min_n: int, equal: bool = True) -> tuple[np.ndarray, np.ndarray]:
    o = np.asarray(o, dtype=np.float64).ravel()
    s = np.asarray(s, dtype=np.float64).ravel()
    if equal and o.shape != s.shape:
        raise ValueError(f"length mismatch: {o.shape[0]} vs {s.shape[0]}")
    if min(o.shape[0], s.shape[0]) < min_n:
        raise ValueError(f"need at least {min_n} points, got {o.shape[0]}")
    if not (np.all(np.isfinite(o)) and np.all(np.isfinite(s))):
        raise ValueError("non-finite values")
    return o, s


def _is_constant(x: np.ndarray) -> bool:
    return bool(np.ptp(x) == 0.0)


def plcc(o, s) -> float:
    """Pearson linear correlation coefficient."""
    o, s = _pair(o, s, MIN_CORRELATION_POINTS)
    if _is_constant(o) or _is_constant(s):
        raise ValueError("correlation is undefined for constant input")
    do = o - o.mean()
    ds = s - s.mean()
    r = float((do * ds).sum() / math.sqrt((do ** 2).sum() * (ds ** 2).sum()))
    return max(-1.0, min(1.0, r))


def srcc(o, s) -> float:
    """Spearman rank correlation: Pearson on fractional ranks.

    On tie-free data this equals 1 - 6*sum(d^2)/(N(N^2-1)).
    """
    o, s = _pair(o, s, MIN_CORRELATION_POINTS)
    if _is_constant(o) or _is_constant(s):
        raise ValueError("correlation is undefined for constant input")
    return plcc(rankdata(o), rankdata(s))


def rmse(o, s) -> float:
    """Root mean squared error between paired sequences."""
    o, s = _pair(o, s, 1)
    return float(np.sqrt(np.mean((o - s) ** 2)))


def psnr(img, ref, peak: float = 255.0) -> float:
    """Peak signal-to-noise ratio in dB; convenience baseline only."""
    img = np.asarray(img, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if img.shape != ref.shape:
        raise ValueError(f"shape mismatch: {img.shape} vs {ref.shape}")
    mse = float(np.mean((img - ref) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


@dataclass(frozen=True)
class LogisticParams:
    """Coefficients of the five-parameter monotone-plus-linear mapping."""

    beta1: float
    beta2: float
    beta3: float
    beta4: float
    beta5: float

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.beta1, self.beta2, self.beta3, self.beta4, self.beta5)


@dataclass(frozen=True)
class LogisticFit:
    params: LogisticParams
    converged: bool  # False means best-found after the restart budget
    sse: float


def logistic_eval(params: LogisticParams, x) -> np.ndarray:
    """f(x) = b1*(1/2 - 1/(1+exp(b2*(x-b3)))) + b4*x + b5."""
    x = np.asarray(x, dtype=np.float64)
    sigmoid = expit(-params.beta2 * (x - params.beta3))
    return params.beta1 * (0.5 - sigmoid) + params.beta4 * x + params.beta5


def _initial_params(o: np.ndarray, s: np.ndarray) -> np.ndarray:
    spread = float(s.max() - s.min())
    do = o - o.mean()
    ds = s - s.mean()
    sign = 1.0 if float((do * ds).sum()) >= 0.0 else -1.0
    return np.array([sign * spread, 1.0 / float(o.std()), float(o.mean()),
                     0.0, float(s.mean())])


def logistic_fit(o, s) -> LogisticFit:
    """Least-squares fit of the five-parameter mapping of o onto s.

    Starts from a documented initialization (signed score range, inverse
    spread, centered inflection, zero slope, mean offset) and retries from
    perturbed starts when the optimizer fails. The returned parameters
    never have a larger sum of squares than the initialization; if no
    optimizer run succeeds the best point found is returned with
    ``converged=False``.
    """
    o, s = _pair(o, s, MIN_FIT_POINTS)
    if _is_constant(o):
        raise ValueError("cannot fit a mapping on constant scores")

    def residual(beta: np.ndarray) -> np.ndarray:
        p = LogisticParams(*beta)
        return logistic_eval(p, o) - s

    x0 = _initial_params(o, s)
    starts = [x0]
    for scale in (4.0, 0.25, 16.0, 1.0 / 16.0):
        v = x0.copy()
        v[1] *= scale
        starts.append(v)
    flipped = x0.copy()
    flipped[0] = -flipped[0]
    starts.append(flipped)
    linear = x0.copy()
    linear[0] = 0.0
    linear[3] = float(np.ptp(s)) / float(np.ptp(o))
    starts.append(linear)
    starts = starts[: 1 + FIT_RESTARTS]

    best_x = x0
    best_sse = float((residual(x0) ** 2).sum())
    converged = False
    for start in starts:
        try:
            res = least_squares(residual, start, method="trf", max_nfev=2000)
        except (ValueError, FloatingPointError):
            continue
        if not np.all(np.isfinite(res.x)):
            continue
        sse = float((residual(res.x) ** 2).sum())
        if not math.isfinite(sse):
            continue
        if res.success and sse <= best_sse:
            best_x, best_sse, converged = res.x, sse, True
        elif sse < best_sse:
            best_x, best_sse = res.x, sse
    return LogisticFit(params=LogisticParams(*(float(v) for v in best_x)),
                       converged=converged, sse=best_sse)


def mapped_metrics(o, s) -> dict:
    """Fit the logistic mapping, then report PLCC/RMSE on mapped scores.

    SRCC is rank-based and reported on the raw scores. This is the
    evaluation contract used by both protocols.
    """
    fit = logistic_fit(o, s)
    mapped = logistic_eval(fit.params, o)
    return {
        "plcc": plcc(mapped, s),
        "srcc": srcc(o, s),
        "rmse": rmse(mapped, s),
        "logistic": [float(v) for v in fit.params.as_tuple()],
        "fit_converged": fit.converged,
        "mapped": True,
        "n": int(np.asarray(o).size),
    }


def raw_metrics(o, s) -> dict:
    """Metrics without the logistic step, for subsets too small to fit."""
    return {
        "plcc": plcc(o, s),
        "srcc": srcc(o, s),
        "rmse": rmse(o, s),
        "logistic": None,
        "fit_converged": False,
        "mapped": False,
        "n": int(np.asarray(o).size),
    }


@dataclass
class EvalConfig:
    """Everything the protocols need besides the data itself."""

    model: ModelConfig
    schedule: TrainSchedule
    select_ratio: float = 0.7
    pooling: str = "vlsd"
    train_fraction: float = 0.8
    chunk_size: int = 256

    def validate(self) -> None:
        self.model.validate()
        self.schedule.validate()
        if not 0.0 < self.select_ratio <= 1.0:
            raise ValueError(
                f"select_ratio must be in (0, 1], got {self.select_ratio}")
        if self.pooling not in POOLING_MODES:
            raise ValueError(
                f"pooling must be one of {POOLING_MODES}, got {self.pooling!r}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError(
                f"train_fraction must be in (0, 1), got {self.train_fraction}")
        if self.chunk_size < 1:
            raise ValueError(f"chunk_size must be >= 1, got {self.chunk_size}")

    def summary(self) -> dict:
        return {
            "mode": self.model.mode,
            "conv_channels": list(self.model.conv_channels),
            "fc_width": self.model.fc_width,
            "weight_decay": self.model.weight_decay,
            "base_lr": self.schedule.base_lr,
            "lr_decay": self.schedule.lr_decay,
            "decay_interval_epochs": self.schedule.decay_interval_epochs,
            "total_epochs": self.schedule.total_epochs,
            "batch_size": self.schedule.batch_size,
            "select_ratio": self.select_ratio,
            "pooling": self.pooling,
            "train_fraction": self.train_fraction,
        }


@dataclass
class EvaluationReport:
    """Aggregated protocol outcome plus everything needed to audit it."""

    protocol: str  # "repeated_split" or "cross_database"
    aggregate: str  # "mean" or "median"
    primary_variant: str  # e.g. "stage2_vlsd"
    n_repeats: int
    n_completed: int
    summary: dict  # variant -> {"plcc", "srcc", "rmse"}
    per_distortion: dict  # type -> aggregated metrics for the primary variant
    repeats: list  # per-repeat rows with per-variant metrics
    failures: list  # repeats that did not complete, with reasons
    scatter: dict | None  # raw (score, dmos) pairs from the last repeat
    config: dict


def _repeat_seed(seed: int, repeat: int) -> int:
    # wide deterministic spacing so per-repeat derived seeds never collide
    return (seed * 1_000_003 + repeat * 7_919) % (2 ** 31)


def _variant_names() -> list[str]:
    return [f"{stage}_{pool}" for stage in STAGE_NAMES for pool in POOLING_MODES]


def _score_manifest(manifest: DatabaseManifest, models: dict,
                    full_reference: bool, chunk_size: int):
    """Fused score per image, per (stage, pooling) variant.

    Returns (scores: variant -> array, dmos array, distortion types).
    """
    scores: dict[str, list[float]] = {
        f"{stage}_{pool}": []
        for stage in models for pool in POOLING_MODES}
    labels: list[float] = []
    types: list[str] = []
    ref_cache: dict[str, np.ndarray] = {}
    for e in manifest.entries:
        img = load_image(manifest.root / e.dist_path)
        ref = None
        if full_reference:
            if e.ref_path is None:
                raise ValueError(
                    f"entry {e.dist_path} has no ref_path; full-reference "
                    "scoring needs one")
            if e.ref_path not in ref_cache:
                ref_cache[e.ref_path] = load_image(manifest.root / e.ref_path)
            ref = ref_cache[e.ref_path]
        for stage, model in models.items():
            for pool in POOLING_MODES:
                fused = score_image(model, img, ref=ref, pooling=pool,
                                    chunk_size=chunk_size).fused
                scores[f"{stage}_{pool}"].append(float(fused))
        labels.append(e.dmos)
        types.append(e.distortion_type)
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in scores.items()}
    return arrays, np.asarray(labels, dtype=np.float64), types


def _distortion_rows(o: np.ndarray, s: np.ndarray, types: list[str]) -> dict:
    """Per-type metrics with a per-subset logistic refit when the subset
    is large enough; small subsets fall back to unmapped metrics."""
    rows: dict[str, dict] = {}
    for t in sorted(set(types)):
        idx = [i for i, x in enumerate(types) if x == t]
        if len(idx) < MIN_CORRELATION_POINTS:
            continue
        o_t, s_t = o[idx], s[idx]
        if _is_constant(o_t) or _is_constant(s_t):
            continue
        if len(idx) >= MIN_FIT_POINTS:
            rows[t] = mapped_metrics(o_t, s_t)
        else:
            rows[t] = raw_metrics(o_t, s_t)
    return rows


def _aggregate(values: list[float], how: str) -> float:
    if how == "mean":
        return float(np.mean(values))
    return float(np.median(values))


def _aggregate_variants(rows: list[dict], how: str) -> dict:
    out: dict[str, dict] = {}
    for variant in _variant_names():
        per_metric = {}
        for metric in ("plcc", "srcc", "rmse"):
            vals = [r["variants"][variant][metric] for r in rows]
            per_metric[metric] = _aggregate(vals, how)
        out[variant] = per_metric
    return out


def _aggregate_distortions(rows: list[dict], how: str) -> dict:
    seen: dict[str, list[dict]] = {}
    for r in rows:
        for t, m in r["per_distortion"].items():
            seen.setdefault(t, []).append(m)
    out: dict[str, dict] = {}
    for t in sorted(seen):
        entries = seen[t]
        out[t] = {
            "plcc": _aggregate([m["plcc"] for m in entries], how),
            "srcc": _aggregate([m["srcc"] for m in entries], how),
            "rmse": _aggregate([m["rmse"] for m in entries], how),
            "n": _aggregate([m["n"] for m in entries], how),
            "mapped": all(m["mapped"] for m in entries),
            "n_repeats": len(entries),
        }
    return out


def run_protocol(manifest: DatabaseManifest, config: EvalConfig,
                 n_repeats: int, seed: int) -> EvaluationReport:
    """Repeated random-split evaluation, aggregated by mean.

    Each repeat splits the manifest by reference image, trains both
    stages on the train side, scores the held-out side under every
    (stage, pooling) combination, and reads PLCC/SRCC/RMSE off a
    per-repeat logistic fit. Failed repeats are recorded and skipped in
    the aggregate; at least one repeat must complete.
    """
    config.validate()
    if n_repeats < 1:
        raise ValueError(f"n_repeats must be >= 1, got {n_repeats}")
    full_reference = config.model.mode == "FR"
    primary = f"stage2_{config.pooling}"
    rows: list[dict] = []
    failures: list[dict] = []
    scatter = None
    for r in range(n_repeats):
        base = _repeat_seed(seed, r)
        try:
            train_m, test_m = split_by_reference(
                manifest, config.train_fraction, seed=base)
            batch, refs = load_patch_dataset(train_m, with_refs=full_reference)
            schedule = replace(config.schedule, seed=base + 1)
            trained = train_two_stage(
                config.model, batch, schedule,
                select_ratio=config.select_ratio, ref_patches=refs,
                init_seed=base + 2)
            models = {"stage1": trained.stage1.model,
                      "stage2": trained.stage2.model}
            scored, dmos, types = _score_manifest(
                test_m, models, full_reference, config.chunk_size)
            variants = {name: mapped_metrics(o, dmos)
                        for name, o in scored.items()}
        except (DivergenceError, ValueError) as exc:
            failures.append({"repeat": r, "seed": base, "error": str(exc)})
            continue
        rows.append({
            "repeat": r,
            "seed": base,
            "n_train_images": len(train_m),
            "n_test_images": len(test_m),
            "variants": variants,
            "per_distortion": _distortion_rows(scored[primary], dmos, types),
        })
        scatter = {
            "variant": primary,
            "repeat": r,
            "scores": [float(v) for v in scored[primary]],
            "dmos": [float(v) for v in dmos],
            "logistic": variants[primary]["logistic"],
        }
    if not rows:
        raise RuntimeError(
            f"all {n_repeats} repeats failed; first error: "
            f"{failures[0]['error']}")
    return EvaluationReport(
        protocol="repeated_split",
        aggregate="mean",
        primary_variant=primary,
        n_repeats=n_repeats,
        n_completed=len(rows),
        summary=_aggregate_variants(rows, "mean"),
        per_distortion=_aggregate_distortions(rows, "mean"),
        repeats=rows,
        failures=failures,
        scatter=scatter,
        config=config.summary(),
    )


def shared_distortion_types(a: DatabaseManifest, b: DatabaseManifest) -> list[str]:
    types_a = {e.distortion_type for e in a.entries}
    types_b = {e.distortion_type for e in b.entries}
    return sorted(types_a & types_b)


def _filter_types(manifest: DatabaseManifest, keep: list[str]) -> DatabaseManifest:
    return manifest.subset(
        [e for e in manifest.entries if e.distortion_type in keep])


def run_cross_database(train_manifest: DatabaseManifest,
                       test_manifest: DatabaseManifest,
                       config: EvalConfig, n_repeats: int, seed: int,
                       fit_fraction: float = 0.8) -> EvaluationReport:
    """Train once, transfer to a second database, aggregate by median.

    Both manifests are filtered to their shared distortion types. The
    model trains on the whole filtered training database; every repeat
    then draws ``fit_fraction`` of the test references to fit the
    logistic mapping and evaluates on the remaining, disjoint references.
    Per-distortion rows refit per type when the fit side has enough
    points and reuse the repeat's global fit otherwise.
    """
    config.validate()
    if n_repeats < 1:
        raise ValueError(f"n_repeats must be >= 1, got {n_repeats}")
    if not 0.0 < fit_fraction < 1.0:
        raise ValueError(f"fit_fraction must be in (0, 1), got {fit_fraction}")
    shared = shared_distortion_types(train_manifest, test_manifest)
    if not shared:
        raise ValueError("the two databases share no distortion types")
    train_f = _filter_types(train_manifest, shared)
    test_f = _filter_types(test_manifest, shared)

    full_reference = config.model.mode == "FR"
    primary = f"stage2_{config.pooling}"
    base = _repeat_seed(seed, 0)
    batch, refs = load_patch_dataset(train_f, with_refs=full_reference)
    schedule = replace(config.schedule, seed=base + 1)
    trained = train_two_stage(
        config.model, batch, schedule, select_ratio=config.select_ratio,
        ref_patches=refs, init_seed=base + 2)
    models = {"stage1": trained.stage1.model, "stage2": trained.stage2.model}
    scored, dmos, types = _score_manifest(
        test_f, models, full_reference, config.chunk_size)

    rows: list[dict] = []
    failures: list[dict] = []
    scatter = None
    for r in range(n_repeats):
        rep_seed = _repeat_seed(seed, r) + 3
        try:
            fit_m, eval_m = split_by_reference(test_f, fit_fraction,
                                               seed=rep_seed)
            fit_paths = {e.dist_path for e in fit_m.entries}
            fit_idx = [i for i, e in enumerate(test_f.entries)
                       if e.dist_path in fit_paths]
            eval_idx = [i for i, e in enumerate(test_f.entries)
                        if e.dist_path not in fit_paths]
            variants = {}
            fits = {}
            for name, o in scored.items():
                fit = logistic_fit(o[fit_idx], dmos[fit_idx])
                mapped = logistic_eval(fit.params, o[eval_idx])
                variants[name] = {
                    "plcc": plcc(mapped, dmos[eval_idx]),
                    "srcc": srcc(o[eval_idx], dmos[eval_idx]),
                    "rmse": rmse(mapped, dmos[eval_idx]),
                    "logistic": [float(v) for v in fit.params.as_tuple()],
                    "fit_converged": fit.converged,
                    "mapped": True,
                    "n": len(eval_idx),
                }
                fits[name] = fit
        except ValueError as exc:
            failures.append({"repeat": r, "seed": rep_seed, "error": str(exc)})
            continue
        per_type: dict[str, dict] = {}
        o_primary = scored[primary]
        eval_types = [types[i] for i in eval_idx]
        for t in sorted(set(eval_types)):
            t_fit = [i for i in fit_idx if types[i] == t]
            t_eval = [i for i in eval_idx if types[i] == t]
            if len(t_eval) < MIN_CORRELATION_POINTS:
                continue
            o_e, s_e = o_primary[t_eval], dmos[t_eval]
            if _is_constant(o_e) or _is_constant(s_e):
                continue
            refit = (len(t_fit) >= MIN_FIT_POINTS
                     and not _is_constant(o_primary[t_fit]))
            if refit:
                fit_t = logistic_fit(o_primary[t_fit], dmos[t_fit])
            else:
                fit_t = fits[primary]
            mapped_e = logistic_eval(fit_t.params, o_e)
            if _is_constant(mapped_e):
                continue
            per_type[t] = {
                "plcc": plcc(mapped_e, s_e),
                "srcc": srcc(o_e, s_e),
                "rmse": rmse(mapped_e, s_e),
                "logistic": [float(v) for v in fit_t.params.as_tuple()],
                "fit_converged": fit_t.converged,
                "mapped": refit,
                "n": len(t_eval),
            }
        rows.append({
            "repeat": r,
            "seed": rep_seed,
            "n_fit_images": len(fit_idx),
            "n_eval_images": len(eval_idx),
            "variants": variants,
            "per_distortion": per_type,
        })
        scatter = {
            "variant": primary,
            "repeat": r,
            "scores": [float(o_primary[i]) for i in eval_idx],
            "dmos": [float(dmos[i]) for i in eval_idx],
            "logistic": variants[primary]["logistic"],
        }
    if not rows:
        raise RuntimeError(
            f"all {n_repeats} repeats failed; first error: "
            f"{failures[0]['error']}")
    return EvaluationReport(
        protocol="cross_database",
        aggregate="median",
        primary_variant=primary,
        n_repeats=n_repeats,
        n_completed=len(rows),
        summary=_aggregate_variants(rows, "median"),
        per_distortion=_aggregate_distortions(rows, "median"),
        repeats=rows,
        failures=failures,
        scatter=scatter,
        config={**config.summary(), "fit_fraction": fit_fraction,
                "shared_types": shared},
    )


def report_to_json(report: EvaluationReport) -> str:
    return json.dumps(dataclasses.asdict(report), sort_keys=True, indent=2) + "\n"


def report_to_csv(report: EvaluationReport) -> str:
    """Flat table: one row per variant, then one per distortion type."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["section", "name", "plcc", "srcc", "rmse", "n", "mapped"])
    for variant in _variant_names():
        m = report.summary[variant]
        writer.writerow(["overall", variant, repr(m["plcc"]), repr(m["srcc"]),
                         repr(m["rmse"]), report.n_completed, True])
    for t, m in report.per_distortion.items():
        writer.writerow(["distortion", t, repr(m["plcc"]), repr(m["srcc"]),
                         repr(m["rmse"]), repr(m["n"]), m["mapped"]])
    return buf.getvalue()


def write_report(report: EvaluationReport, json_path: str | Path,
                 csv_path: str | Path | None = None) -> None:
    json_path = Path(json_path)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    json_path.write_text(report_to_json(report), encoding="utf-8")
    if csv_path is not None:
        csv_path = Path(csv_path)
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        csv_path.write_text(report_to_csv(report), encoding="utf-8")


def render_scatter(report: EvaluationReport, path: str | Path) -> None:
    """Predictions vs subjective scores with the fitted mapping overlaid."""
    if report.scatter is None:
        raise ValueError("report carries no scatter data")
    import matplotlib
    matplotlib.use("Agg", force=False)
    from matplotlib import pyplot as plt

    o = np.asarray(report.scatter["scores"], dtype=np.float64)
    s = np.asarray(report.scatter["dmos"], dtype=np.float64)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter(o, s, s=18, alpha=0.8, label="images")
    if report.scatter["logistic"] is not None:
        params = LogisticParams(*report.scatter["logistic"])
        grid = np.linspace(o.min(), o.max(), 200)
        ax.plot(grid, logistic_eval(params, grid), color="tab:red",
                label="fitted mapping")
    ax.set_xlabel("model score")
    ax.set_ylabel("DMOS")
    ax.set_title(f"{report.protocol}: {report.scatter['variant']}")
    ax.legend()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
