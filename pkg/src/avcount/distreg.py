"""Two-stage distance regression: features -> coarse distance -> refined.

Stage 1 regresses the clipped distance from stacked HF-LMS features,
frame by frame. Stage 2 refines it from a window of 2k+1 consecutive
Stage-1 outputs centered on the frame. Stage 2 trains on Stage-1
predictions for the same training clips (not on reference distances), so
it learns to fix the actual Stage-1 error distribution. All emitted
distances are clamped to [0, t_d].
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from . import nn_core
from .dataio import AudioClip, DataError, DistanceSeries
from .features import (
    DEFAULT_CONTEXT_STRIDE,
    DEFAULT_Q,
    FeatureMatrix,
    FeatureStats,
    SpectrogramConfig,
    extract_features,
    standardize,
)
from .nn_core import NetworkSpec, TrainedModel

DEFAULT_K = 15
DEFAULT_T_D = 0.75
STAGE1_L2 = 1e-4
STAGE2_L2 = 5e-6


def stage1_spec(input_dim: int = 528, epochs: int = 100, seed: int = 0, **kw) -> NetworkSpec:
    return NetworkSpec(
        layer_sizes=(input_dim, 64, 64, 1),
        l2_factor=STAGE1_L2,
        loss="mse",
        epochs=epochs,
        seed=seed,
        **kw,
    )


def stage2_spec(k: int = DEFAULT_K, epochs: int = 100, seed: int = 0, **kw) -> NetworkSpec:
    return NetworkSpec(
        layer_sizes=(2 * k + 1, 31, 15, 1),
        l2_factor=STAGE2_L2,
        loss="mse",
        epochs=epochs,
        seed=seed,
        **kw,
    )


@dataclass(frozen=True)
class RegressionPipeline:
    stage1: TrainedModel
    stage2: TrainedModel
    feature_stats: FeatureStats
    spectrogram: SpectrogramConfig
    q: int = DEFAULT_Q
    stride: int = DEFAULT_CONTEXT_STRIDE
    k: int = DEFAULT_K
    t_d: float = DEFAULT_T_D

    def __post_init__(self):
        if self.stage2.spec.layer_sizes[0] != 2 * self.k + 1:
            raise ValueError("stage2 input size must equal 2k+1")


def _check_aligned(features, targets, t_d):
    if len(features) != len(targets):
        raise ValueError("feature and target clip counts differ")
    for fm, ds in zip(features, targets):
        if fm.frames != ds.n_frames:
            raise ValueError(
                f"clip {fm.clip_id!r}: {fm.frames} feature frames vs "
                f"{ds.n_frames} target frames"
            )
        if np.any(ds.values < 0) or np.any(ds.values > t_d):
            raise ValueError(f"clip {ds.clip_id!r}: targets outside [0, {t_d}]")


def train_stage1(features, targets, spec: NetworkSpec, t_d: float = DEFAULT_T_D) -> TrainedModel:
    """Train the coarse regressor on all frames of all clips pooled."""
    features, targets = list(features), list(targets)
    _check_aligned(features, targets, t_d)
    x = np.concatenate([fm.data for fm in features], axis=0)
    y = np.concatenate([ds.values for ds in targets])
    return nn_core.train(spec, x, y)


def predict_stage1(stage1: TrainedModel, features: FeatureMatrix, t_d: float = DEFAULT_T_D) -> DistanceSeries:
    """Per-frame coarse prediction, clamped to [0, t_d]."""
    raw = nn_core.forward(stage1, features.data, mode="infer")[:, 0]
    return DistanceSeries(
        clip_id=features.clip_id,
        values=np.clip(raw, 0.0, t_d),
        frame_period=features.frame_period,
        t_d=t_d,
    )


def stage2_windows(coarse, k: int) -> np.ndarray:
    """Rows of 2k+1 consecutive coarse values centered per frame, edges replicated."""
    values = coarse.values if isinstance(coarse, DistanceSeries) else np.asarray(coarse, dtype=np.float64)
    if values.size == 0:
        raise ValueError("empty series")
    if k < 0:
        raise ValueError("k must be nonnegative")
    n = values.size
    idx = np.clip(np.arange(n)[:, None] + np.arange(-k, k + 1)[None, :], 0, n - 1)
    return values[idx]


def train_stage2(coarse_list, targets, spec: NetworkSpec, k: int = DEFAULT_K, t_d: float = DEFAULT_T_D) -> TrainedModel:
    """Train the refiner on windows of Stage-1 predictions for the train clips."""
    coarse_list, targets = list(coarse_list), list(targets)
    _check_aligned_series(coarse_list, targets, t_d)
    x = np.concatenate([stage2_windows(c, k) for c in coarse_list], axis=0)
    y = np.concatenate([ds.values for ds in targets])
    return nn_core.train(spec, x, y)


def _check_aligned_series(coarse_list, targets, t_d):
    if len(coarse_list) != len(targets):
        raise ValueError("coarse and target clip counts differ")
    for c, ds in zip(coarse_list, targets):
        if c.n_frames != ds.n_frames:
            raise ValueError(f"clip {c.clip_id!r}: coarse/target frame mismatch")
        if np.any(ds.values < 0) or np.any(ds.values > t_d):
            raise ValueError(f"clip {ds.clip_id!r}: targets outside [0, {t_d}]")


def predict_stage2(stage2: TrainedModel, coarse: DistanceSeries, k: int = DEFAULT_K, t_d: float = DEFAULT_T_D) -> DistanceSeries:
    raw = nn_core.forward(stage2, stage2_windows(coarse, k), mode="infer")[:, 0]
    return DistanceSeries(
        clip_id=coarse.clip_id,
        values=np.clip(raw, 0.0, t_d),
        frame_period=coarse.frame_period,
        t_d=t_d,
    )


def train_pipeline(
    features,
    targets,
    spectrogram: SpectrogramConfig,
    s1_spec: NetworkSpec,
    s2_spec: NetworkSpec,
    q: int = DEFAULT_Q,
    stride: int = DEFAULT_CONTEXT_STRIDE,
    k: int = DEFAULT_K,
    t_d: float = DEFAULT_T_D,
) -> RegressionPipeline:
    """Fit standardization, Stage 1, then Stage 2 on the cascade outputs.

    ``features`` are raw (unstandardized) per-clip matrices; standardization
    statistics are fitted here and stored on the pipeline.
    """
    features, targets = list(features), list(targets)
    std_features, stats = standardize(features)
    stage1 = train_stage1(std_features, targets, s1_spec, t_d)
    coarse = [predict_stage1(stage1, fm, t_d) for fm in std_features]
    stage2 = train_stage2(coarse, targets, s2_spec, k, t_d)
    return RegressionPipeline(
        stage1=stage1,
        stage2=stage2,
        feature_stats=stats,
        spectrogram=spectrogram,
        q=q,
        stride=stride,
        k=k,
        t_d=t_d,
    )


def predict_coarse(pipeline: RegressionPipeline, clip: AudioClip) -> DistanceSeries:
    """Stage-1 output for a clip (the VCNN_S1 series)."""
    fm = extract_features(clip, pipeline.spectrogram, pipeline.q, pipeline.stride)
    (fm,), _ = standardize([fm], pipeline.feature_stats)
    return predict_stage1(pipeline.stage1, fm, pipeline.t_d)


def predict_distance(pipeline: RegressionPipeline, clip: AudioClip) -> DistanceSeries:
    """Full cascade: features -> standardize -> Stage 1 -> Stage 2 -> clamp."""
    coarse = predict_coarse(pipeline, clip)
    return predict_stage2(pipeline.stage2, coarse, pipeline.k, pipeline.t_d)


# --- pipeline bundle on disk -------------------------------------------------


def save_pipeline(pipeline: RegressionPipeline, directory):
    os.makedirs(directory, exist_ok=True)
    nn_core.save_model(pipeline.stage1, os.path.join(directory, "stage1.ckpt"))
    nn_core.save_model(pipeline.stage2, os.path.join(directory, "stage2.ckpt"))
    nn_core.write_checkpoint(
        os.path.join(directory, "stats.bin"),
        "feature_stats",
        {},
        [("mean", pipeline.feature_stats.mean), ("std", pipeline.feature_stats.std)],
    )
    meta = {
        "t_d": pipeline.t_d,
        "k": pipeline.k,
        "q": pipeline.q,
        "stride": pipeline.stride,
        "spectrogram": {
            "window_len": pipeline.spectrogram.window_len,
            "hop": pipeline.spectrogram.hop,
            "n_mel": pipeline.spectrogram.n_mel,
            "f_min": pipeline.spectrogram.f_min,
            "f_max": pipeline.spectrogram.f_max,
            "log_floor": pipeline.spectrogram.log_floor,
            "sample_rate": pipeline.spectrogram.sample_rate,
        },
    }
    with open(os.path.join(directory, "pipeline.json"), "w") as fh:
        json.dump(meta, fh, sort_keys=True, separators=(",", ":"))


def load_pipeline(directory) -> RegressionPipeline:
    try:
        with open(os.path.join(directory, "pipeline.json")) as fh:
            meta = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read pipeline bundle in {directory}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"corrupt pipeline.json in {directory}: {exc}") from exc
    stage1 = nn_core.load_model(os.path.join(directory, "stage1.ckpt"))
    stage2 = nn_core.load_model(os.path.join(directory, "stage2.ckpt"))
    kind, _, blocks = nn_core.read_checkpoint(os.path.join(directory, "stats.bin"))
    if kind != "feature_stats":
        raise DataError(f"stats.bin has kind {kind!r}")
    named = dict(blocks)
    stats = FeatureStats(mean=named["mean"], std=named["std"])
    return RegressionPipeline(
        stage1=stage1,
        stage2=stage2,
        feature_stats=stats,
        spectrogram=SpectrogramConfig(**meta["spectrogram"]),
        q=int(meta["q"]),
        stride=int(meta["stride"]),
        k=int(meta["k"]),
        t_d=float(meta["t_d"]),
    )
