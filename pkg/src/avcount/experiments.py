"""Experiment orchestration: grid search, ablation variants, multi-run bands.

Variants mirror the method family: the full two-stage counter, the
Stage-1-only counter, the full-frequency-features retrain (f_min = 0), the
prominence-only detectors (magnitude clause disabled via m_frac = 1), and
the deep counter. Each variant is pure data: a detector spec plus which
predicted series it consumes.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import deepcount, distreg, metrics
from .dataio import load_corpus, reference_distance, split_dataset
from .features import SpectrogramConfig, extract_features, standardize
from .metrics import MetricsReport, compute_curve, confidence_interval
from .nn_core import NumericError
from .peakdet import DetectorSpec, SmootherSpec, detect_vehicles, peak_candidates

# tuned detection parameters per variant (smoother lengths, M, P as fractions of t_d)
TUNED_DETECTORS = {
    "VCNN": DetectorSpec(SmootherSpec((5, 3)), m_frac=0.40, p_frac=0.20),
    "VCNN_S1": DetectorSpec(SmootherSpec((7, 3)), m_frac=0.45, p_frac=0.25),
    "VCNN_f0": DetectorSpec(SmootherSpec((5, 3)), m_frac=0.45, p_frac=0.20),
}

PP_PROMINENCE_FRACTIONS = (0.05, 0.10, 0.15)


def pp_detector(p_frac: float) -> DetectorSpec:
    """Prominence-only detection: m_frac = 1 disables the magnitude clause."""
    return DetectorSpec(SmootherSpec((5, 3)), m_frac=1.0, p_frac=p_frac)


@dataclass(frozen=True)
class GridSpec:
    smoothers: tuple = ((5, 3), (7, 3), (7, 5, 3))
    m_fracs: tuple = (0.35, 0.40, 0.45, 0.50)
    p_fracs: tuple = (0.10, 0.15, 0.20, 0.25)
    objective_lo: float = 0.5  # objective range as fractions of t_d
    objective_hi: float = 1.0

    def __post_init__(self):
        if not (self.smoothers and self.m_fracs and self.p_fracs):
            raise ValueError("grid axes must be nonempty")


def _mean_abs_rvce(report: MetricsReport, t_d, lo_frac, hi_frac) -> float:
    lo, hi = lo_frac * t_d - 1e-12, hi_frac * t_d + 1e-12
    vals = [abs(r) for t, r in report.rvce_by_tdet if lo <= t <= hi]
    return float(np.mean(vals))


def grid_search(predictions, annotations, grid: GridSpec, t_d: float, n_points: int = 100):
    """Exhaustive (smoother, M, P) search minimizing mean |RVCE|.

    The objective averages |RVCE| over the threshold grid points inside
    [objective_lo*t_d, objective_hi*t_d]. Ties break toward fewer filter
    taps, then smaller M, then smaller P. Returns (best DetectorSpec,
    score table).
    """
    predictions, annotations = list(predictions), list(annotations)
    if not predictions:
        raise ValueError("empty tuning set")
    intervals = [metrics.build_intervals(a, t_d) for a in annotations]
    table = []
    best = None
    for lengths in grid.smoothers:
        smoother = SmootherSpec(tuple(lengths))
        candidates = [peak_candidates(s, smoother) for s in predictions]
        for m_frac in grid.m_fracs:
            for p_frac in grid.p_fracs:
                m_th, p_th = m_frac * t_d, p_frac * t_d
                per_clip = [
                    (iv, [p for p in cands if p.magnitude > m_th or p.prominence > p_th])
                    for iv, cands in zip(intervals, candidates)
                ]
                report = compute_curve(per_clip, t_d, n_points)
                score = _mean_abs_rvce(report, t_d, grid.objective_lo, grid.objective_hi)
                table.append(
                    {
                        "smoother": tuple(lengths),
                        "m_frac": m_frac,
                        "p_frac": p_frac,
                        "mean_abs_rvce": score,
                    }
                )
                key = (score, smoother.total_taps, m_frac, p_frac)
                if best is None or key < best[0]:
                    best = (key, DetectorSpec(smoother, m_frac, p_frac))
    return best[1], table


@dataclass
class EvalContext:
    """Predicted series and ground truth for one evaluation set."""

    annotations: dict
    stage2: dict
    stage1: dict | None = None
    f0_stage2: dict | None = None
    t_d: float = distreg.DEFAULT_T_D


def _variant_inputs(variant: str, ctx: EvalContext):
    if variant == "VCNN":
        return TUNED_DETECTORS["VCNN"], ctx.stage2
    if variant == "VCNN_S1":
        if ctx.stage1 is None:
            raise ValueError("VCNN_S1 needs Stage-1 predictions in the context")
        return TUNED_DETECTORS["VCNN_S1"], ctx.stage1
    if variant == "VCNN_f0":
        if ctx.f0_stage2 is None:
            raise ValueError("VCNN_f0 needs the f_min=0 retrain in the context")
        return TUNED_DETECTORS["VCNN_f0"], ctx.f0_stage2
    if variant.startswith("VCNN_PP"):
        pct = float(variant[len("VCNN_PP") :])
        return pp_detector(pct / 100.0), ctx.stage2
    raise ValueError(f"unknown variant {variant!r}")


def run_ablation(variant: str, ctx: EvalContext, n_points: int = 100) -> MetricsReport:
    """Evaluate one variant on the context's clips."""
    det, series_by_id = _variant_inputs(variant, ctx)
    per_clip = []
    for clip_id, ann in ctx.annotations.items():
        series = series_by_id[clip_id]
        per_clip.append(
            (metrics.build_intervals(ann, ctx.t_d), detect_vehicles(series, det))
        )
    return compute_curve(per_clip, ctx.t_d, n_points)


@dataclass
class RunResult:
    run_seed: int
    stage1_mse: float
    stage2_mse: float
    reports: dict = field(default_factory=dict)  # variant -> MetricsReport
    deep_rvce: float | None = None


@dataclass
class ExperimentConfig:
    corpus_dir: str
    spectrogram: SpectrogramConfig = SpectrogramConfig()
    q: int = 5
    stride: int = 2
    k: int = 15
    t_d: float = distreg.DEFAULT_T_D
    epochs: int = 100
    base_seed: int = 0
    split_ratio: float = 0.8
    variants: tuple = ("VCNN", "VCNN_S1")
    deep_spec: deepcount.ConvCounterSpec | None = None
    n_points: int = 100


def _feature_dim(cfg: SpectrogramConfig, q: int) -> int:
    return (2 * q + 1) * cfg.n_mel


def prepare_dataset(config: ExperimentConfig):
    """Load the corpus, extract raw features, build reference targets.

    Returns (ids, features_by_id, targets_by_id, anns_by_id, f0 variants of
    the same when any f0 variant is requested).
    """
    clips, anns = load_corpus(config.corpus_dir)
    features = {
        c.id: extract_features(c, config.spectrogram, config.q, config.stride)
        for c in clips
    }
    targets = {}
    for c, a in zip(clips, anns):
        fm = features[c.id]
        targets[c.id] = reference_distance(a, fm.frames, fm.frame_period, config.t_d)
    anns_by_id = {a.clip_id: a for a in anns}
    f0_features = None
    if any(v == "VCNN_f0" for v in config.variants):
        f0_cfg = replace(config.spectrogram, f_min=0.0)
        f0_features = {
            c.id: extract_features(c, f0_cfg, config.q, config.stride) for c in clips
        }
    return [c.id for c in clips], features, targets, anns_by_id, f0_features


def _train_and_predict(config, features, targets, train_ids, eval_ids, seed, spectrogram):
    s1 = distreg.stage1_spec(
        input_dim=_feature_dim(spectrogram, config.q), epochs=config.epochs, seed=seed
    )
    s2 = distreg.stage2_spec(k=config.k, epochs=config.epochs, seed=seed + 1)
    pipeline = distreg.train_pipeline(
        [features[i] for i in train_ids],
        [targets[i] for i in train_ids],
        spectrogram,
        s1,
        s2,
        q=config.q,
        stride=config.stride,
        k=config.k,
        t_d=config.t_d,
    )
    std_eval, _ = standardize([features[i] for i in eval_ids], pipeline.feature_stats)
    stage1 = {
        i: distreg.predict_stage1(pipeline.stage1, fm, config.t_d)
        for i, fm in zip(eval_ids, std_eval)
    }
    stage2 = {
        i: distreg.predict_stage2(pipeline.stage2, stage1[i], config.k, config.t_d)
        for i in eval_ids
    }
    return pipeline, stage1, stage2


def single_run(config: ExperimentConfig, dataset, run_seed: int) -> RunResult:
    """One full train + evaluate pass; eval set is the held-out split."""
    ids, features, targets, anns_by_id, f0_features = dataset
    split = split_dataset(ids, config.split_ratio, config.base_seed)
    train_ids, eval_ids = list(split.train_ids), list(split.val_ids)

    pipeline, stage1, stage2 = _train_and_predict(
        config, features, targets, train_ids, eval_ids, run_seed, config.spectrogram
    )
    mse1 = float(
        np.mean(
            [np.mean((stage1[i].values - targets[i].values) ** 2) for i in eval_ids]
        )
    )
    mse2 = float(
        np.mean(
            [np.mean((stage2[i].values - targets[i].values) ** 2) for i in eval_ids]
        )
    )
    ctx = EvalContext(
        annotations={i: anns_by_id[i] for i in eval_ids},
        stage2=stage2,
        stage1=stage1,
        t_d=config.t_d,
    )
    if f0_features is not None:
        f0_cfg = replace(config.spectrogram, f_min=0.0)
        _, _, f0_stage2 = _train_and_predict(
            config, f0_features, targets, train_ids, eval_ids, run_seed, f0_cfg
        )
        ctx.f0_stage2 = f0_stage2

    result = RunResult(run_seed=run_seed, stage1_mse=mse1, stage2_mse=mse2)
    for variant in config.variants:
        result.reports[variant] = run_ablation(variant, ctx, config.n_points)

    if config.deep_spec is not None:
        std_train, _ = standardize(
            [features[i] for i in train_ids], pipeline.feature_stats
        )
        coarse = {
            i: distreg.predict_stage1(pipeline.stage1, fm, config.t_d)
            for i, fm in zip(train_ids, std_train)
        }
        fine = {
            i: distreg.predict_stage2(pipeline.stage2, coarse[i], config.k, config.t_d)
            for i in train_ids
        }
        counter = deepcount.train_counter(
            replace(config.deep_spec, seed=run_seed),
            [fine[i] for i in train_ids],
            [anns_by_id[i].n_vehicles for i in train_ids],
        )
        n_true = sum(anns_by_id[i].n_vehicles for i in eval_ids)
        n_est = sum(deepcount.predict_count(counter, stage2[i]) for i in eval_ids)
        result.deep_rvce = metrics.rvce(n_true, n_est)
    return result


def multi_run(config: ExperimentConfig, n_runs: int):
    """Seeded repeats base_seed..base_seed+n_runs-1 with per-threshold bands.

    Each run reshuffles initialization and batch order through its seed; the
    train/validation split stays fixed. Returns (results, failures, bands)
    where bands[variant] is a list of (t_det, mean, low, high) and failures
    holds (seed, message) for runs that diverged.
    """
    dataset = prepare_dataset(config)
    results, failures = [], []
    for r in range(n_runs):
        seed = config.base_seed + r
        try:
            results.append(single_run(config, dataset, seed))
        except NumericError as exc:
            failures.append((seed, str(exc)))
    bands = {}
    if len(results) >= 2:
        for variant in config.variants:
            rows = []
            grid = results[0].reports[variant].rvce_by_tdet
            for j, (t_det, _) in enumerate(grid):
                vals = [res.reports[variant].rvce_by_tdet[j][1] for res in results]
                mean, lo, hi = confidence_interval(vals)
                rows.append((t_det, mean, lo, hi))
            bands[variant] = rows
    return results, failures, bands
