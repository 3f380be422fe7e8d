"""Command-line surface: synth, extract, train, predict, count, eval,
gridsearch, experiment.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure. Every
failure prints a one-line diagnostic on stderr. Outputs carry no
timestamps, so any subcommand is byte-for-byte reproducible from its
config and seed (AVC_SEED overrides the configured seed).
"""

import argparse
import csv
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from . import deepcount, distreg, experiments, metrics, peakdet, synthgen
from .config import ToolConfig, load_config
from .dataio import DataError, load_clip, load_corpus, reference_distance, split_dataset
from .features import (
    extract_features,
    read_feature_cache,
    standardize,
    write_feature_cache,
)
from .nn_core import NumericError


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parallel_map(fn, items, jobs):
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _add_jobs(parser):
    parser.add_argument(
        "--jobs",
        type=int,
        default=os.cpu_count() or 1,
        help="parallel workers for per-clip work (default: available cores)",
    )


def _wav_paths(directory):
    try:
        names = sorted(f for f in os.listdir(directory) if f.lower().endswith(".wav"))
    except OSError as exc:
        raise DataError(f"cannot list {directory}: {exc}") from exc
    if not names:
        raise DataError(f"no wav files in {directory}")
    return [os.path.join(directory, f) for f in names]


def _stage_specs(cfg: ToolConfig):
    input_dim = (2 * cfg.q + 1) * cfg.spectrogram.n_mel
    s1_kw = {"epochs": cfg.epochs, "seed": cfg.seed}
    s1_kw.update(cfg.stage1_overrides)
    s2_kw = {"epochs": cfg.epochs, "seed": cfg.seed + 1}
    s2_kw.update(cfg.stage2_overrides)
    s1_l2 = s1_kw.pop("l2_factor", distreg.STAGE1_L2)
    s2_l2 = s2_kw.pop("l2_factor", distreg.STAGE2_L2)
    s1 = distreg.stage1_spec(input_dim=input_dim, **s1_kw)
    s2 = distreg.stage2_spec(k=cfg.k, **s2_kw)
    if s1_l2 != s1.l2_factor:
        s1 = replace(s1, l2_factor=s1_l2)
    if s2_l2 != s2.l2_factor:
        s2 = replace(s2, l2_factor=s2_l2)
    return s1, s2


def _prepare_corpus(cfg: ToolConfig, data_dir, jobs, cache_dir=None):
    clips, anns = load_corpus(data_dir)

    def one(clip):
        if cache_dir is not None:
            path = os.path.join(cache_dir, clip.id + ".avcf")
            if os.path.exists(path):
                return read_feature_cache(path)
        return extract_features(clip, cfg.spectrogram, cfg.q, cfg.stride)

    feats = _parallel_map(one, clips, jobs)
    features = {c.id: fm for c, fm in zip(clips, feats)}
    targets = {
        c.id: reference_distance(a, features[c.id].frames, features[c.id].frame_period, cfg.t_d)
        for c, a in zip(clips, anns)
    }
    return clips, anns, features, targets


def cmd_synth(args):
    cfg = load_config(args.spec)
    scene = replace(cfg.scene, seed=cfg.seed)
    manifest = synthgen.generate_corpus(scene, cfg.n_clips, args.out)
    total = sum(n for _, n in manifest)
    print(f"wrote {len(manifest)} clips, {total} vehicles to {args.out}")
    return 0


def cmd_extract(args):
    cfg = load_config(args.config)
    os.makedirs(args.out, exist_ok=True)
    paths = _wav_paths(args.audio)

    def one(path):
        clip = load_clip(path)
        fm = extract_features(clip, cfg.spectrogram, cfg.q, cfg.stride)
        write_feature_cache(os.path.join(args.out, clip.id + ".avcf"), fm)
        return clip.id

    ids = _parallel_map(one, paths, args.jobs)
    print(f"cached features for {len(ids)} clips in {args.out}")
    return 0


def cmd_train(args):
    cfg = load_config(args.config)
    clips, anns, features, targets = _prepare_corpus(
        cfg, args.data, args.jobs, cache_dir=args.cache
    )
    ids = [c.id for c in clips]
    split = split_dataset(ids, cfg.split_ratio, cfg.seed)
    s1_spec, s2_spec = _stage_specs(cfg)
    pipeline = distreg.train_pipeline(
        [features[i] for i in split.train_ids],
        [targets[i] for i in split.train_ids],
        cfg.spectrogram,
        s1_spec,
        s2_spec,
        q=cfg.q,
        stride=cfg.stride,
        k=cfg.k,
        t_d=cfg.t_d,
    )
    distreg.save_pipeline(pipeline, args.out)

    std_val, _ = standardize(
        [features[i] for i in split.val_ids], pipeline.feature_stats
    )
    mses = []
    for i, fm in zip(split.val_ids, std_val):
        coarse = distreg.predict_stage1(pipeline.stage1, fm, cfg.t_d)
        fine = distreg.predict_stage2(pipeline.stage2, coarse, cfg.k, cfg.t_d)
        mses.append(
            (
                np.mean((coarse.values - targets[i].values) ** 2),
                np.mean((fine.values - targets[i].values) ** 2),
            )
        )
    if mses:
        m1, m2 = np.mean([a for a, _ in mses]), np.mean([b for _, b in mses])
        print(f"saved pipeline to {args.out} (val MSE stage1 {m1:.3e}, stage2 {m2:.3e})")
    else:
        print(f"saved pipeline to {args.out}")

    if args.deep:
        deep_spec = cfg.deep or deepcount.ConvCounterSpec()
        deep_spec = replace(deep_spec, seed=cfg.seed)
        std_train, _ = standardize(
            [features[i] for i in split.train_ids], pipeline.feature_stats
        )
        series = []
        counts = []
        anns_by_id = {a.clip_id: a for a in anns}
        for i, fm in zip(split.train_ids, std_train):
            coarse = distreg.predict_stage1(pipeline.stage1, fm, cfg.t_d)
            series.append(distreg.predict_stage2(pipeline.stage2, coarse, cfg.k, cfg.t_d))
            counts.append(anns_by_id[i].n_vehicles)
        counter = deepcount.train_counter(deep_spec, series, counts)
        deepcount.save_counter(counter, os.path.join(args.out, "deep.ckpt"))
        print(f"saved deep counter to {os.path.join(args.out, 'deep.ckpt')}")
    return 0


def _predict_series(pipeline, paths, jobs):
    def one(path):
        clip = load_clip(path)
        return clip.id, distreg.predict_distance(pipeline, clip)

    return _parallel_map(one, paths, jobs)


def cmd_predict(args):
    pipeline = distreg.load_pipeline(args.model)
    results = _predict_series(pipeline, _wav_paths(args.audio), args.jobs)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["clip_id", "frame", "t_s", "d_hat_s"])
        for clip_id, series in results:
            for m, value in enumerate(series.values):
                writer.writerow(
                    [clip_id, m, f"{m * series.frame_period:.6f}", f"{value:.6f}"]
                )
    print(f"wrote predictions for {len(results)} clips to {args.out}")
    return 0


def cmd_count(args):
    pipeline = distreg.load_pipeline(args.model)
    cfg = load_config(args.config) if args.config else None
    det = cfg.detector if cfg else experiments.TUNED_DETECTORS["VCNN"]
    t_det = args.tdet if args.tdet is not None else pipeline.t_d
    if not 0 <= t_det <= pipeline.t_d:
        raise DataError(f"--tdet must lie in [0, {pipeline.t_d}]")
    results = _predict_series(pipeline, _wav_paths(args.audio), args.jobs)
    total = 0
    for clip_id, series in results:
        detections = peakdet.detect_vehicles(series, det)
        n = peakdet.count_at_threshold(detections, t_det)
        total += n
        print(f"{clip_id},{n}")
    print(f"TOTAL,{total}")
    return 0


def cmd_eval(args):
    cfg = load_config(args.config) if args.config else ToolConfig()
    variants = cfg.variants if args.config else ("VCNN",)
    for v in variants:
        if v == "VCNN_f0":
            raise DataError("VCNN_f0 requires a retrain; use the experiment command")
    pipeline = distreg.load_pipeline(args.model)
    clips, anns = load_corpus(args.data)
    anns_by_id = {a.clip_id: a for a in anns}

    def one(clip):
        coarse = distreg.predict_coarse(pipeline, clip)
        fine = distreg.predict_stage2(pipeline.stage2, coarse, pipeline.k, pipeline.t_d)
        return clip.id, coarse, fine

    rows = _parallel_map(one, clips, args.jobs)
    ctx = experiments.EvalContext(
        annotations=anns_by_id,
        stage2={cid: fine for cid, _, fine in rows},
        stage1={cid: coarse for cid, coarse, _ in rows},
        t_d=pipeline.t_d,
    )
    os.makedirs(args.out, exist_ok=True)
    for variant in variants:
        report = experiments.run_ablation(variant, ctx)
        metrics.write_curve_csv(os.path.join(args.out, f"{variant}_curve.csv"), report)
        metrics.write_summary_csv(
            os.path.join(args.out, f"{variant}_summary.csv"), report
        )
        efp = "n/a" if report.efp_value is None else f"{report.efp_value:.4f}"
        print(f"{variant}: area_ptp {report.area_ptp:.4f}, efp {efp}")
    return 0


def cmd_gridsearch(args):
    cfg = load_config(args.config)
    clips, anns, features, targets = _prepare_corpus(cfg, args.data, args.jobs)
    ids = [c.id for c in clips]
    split = split_dataset(ids, cfg.split_ratio, cfg.seed)
    s1_spec, s2_spec = _stage_specs(cfg)
    pipeline = distreg.train_pipeline(
        [features[i] for i in split.train_ids],
        [targets[i] for i in split.train_ids],
        cfg.spectrogram,
        s1_spec,
        s2_spec,
        q=cfg.q,
        stride=cfg.stride,
        k=cfg.k,
        t_d=cfg.t_d,
    )
    std_val, _ = standardize(
        [features[i] for i in split.val_ids], pipeline.feature_stats
    )
    anns_by_id = {a.clip_id: a for a in anns}
    predictions, val_anns = [], []
    for i, fm in zip(split.val_ids, std_val):
        coarse = distreg.predict_stage1(pipeline.stage1, fm, cfg.t_d)
        predictions.append(
            distreg.predict_stage2(pipeline.stage2, coarse, cfg.k, cfg.t_d)
        )
        val_anns.append(anns_by_id[i])
    best, table = experiments.grid_search(predictions, val_anns, cfg.grid, cfg.t_d)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(out)
        writer.writerow(["smoother", "m_frac", "p_frac", "mean_abs_rvce"])
        for row in table:
            writer.writerow(
                [
                    " ".join(str(l) for l in row["smoother"]),
                    f"{row['m_frac']:.2f}",
                    f"{row['p_frac']:.2f}",
                    f"{row['mean_abs_rvce']:.6f}",
                ]
            )
        writer.writerow(
            [
                "BEST " + " ".join(str(l) for l in best.smoother.lengths),
                f"{best.m_frac:.2f}",
                f"{best.p_frac:.2f}",
                "",
            ]
        )
    finally:
        if args.out:
            out.close()
    return 0


def cmd_experiment(args):
    cfg = load_config(args.config)
    data_dir = cfg.paths.get("data_dir")
    out_dir = cfg.paths.get("out_dir")
    if not data_dir or not out_dir:
        raise DataError("experiment config needs paths.data_dir and paths.out_dir")
    exp = experiments.ExperimentConfig(
        corpus_dir=data_dir,
        spectrogram=cfg.spectrogram,
        q=cfg.q,
        stride=cfg.stride,
        k=cfg.k,
        t_d=cfg.t_d,
        epochs=cfg.epochs,
        base_seed=cfg.seed,
        split_ratio=cfg.split_ratio,
        variants=cfg.variants,
        deep_spec=cfg.deep,
    )
    results, failures, bands = experiments.multi_run(exp, cfg.n_runs)
    os.makedirs(out_dir, exist_ok=True)
    for res in results:
        for variant, report in res.reports.items():
            metrics.write_curve_csv(
                os.path.join(out_dir, f"run{res.run_seed}_{variant}_curve.csv"), report
            )
    for variant, rows in bands.items():
        with open(
            os.path.join(out_dir, f"{variant}_bands.csv"), "w", newline=""
        ) as fh:
            writer = csv.writer(fh)
            writer.writerow(["t_det", "rvce_mean", "rvce_low", "rvce_high"])
            for t_det, mean, lo, hi in rows:
                writer.writerow(
                    [f"{t_det:.6f}", f"{mean:.6f}", f"{lo:.6f}", f"{hi:.6f}"]
                )
    with open(os.path.join(out_dir, "summary.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["run_seed", "stage1_mse", "stage2_mse"]
        for variant in exp.variants:
            header += [f"{variant}_area_ptp", f"{variant}_efp"]
        if cfg.deep is not None:
            header.append("deep_rvce")
        writer.writerow(header)
        for res in results:
            row = [res.run_seed, f"{res.stage1_mse:.6e}", f"{res.stage2_mse:.6e}"]
            for variant in exp.variants:
                rep = res.reports[variant]
                efp = "" if rep.efp_value is None else f"{rep.efp_value:.6f}"
                row += [f"{rep.area_ptp:.6f}", efp]
            if cfg.deep is not None:
                row.append("" if res.deep_rvce is None else f"{res.deep_rvce:.6f}")
            writer.writerow(row)
    for seed, message in failures:
        print(f"run {seed} diverged: {message}", file=sys.stderr)
    print(
        f"completed {len(results)}/{cfg.n_runs} runs, reports in {out_dir}"
        + (f" ({len(failures)} diverged)" if failures else "")
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="avcount", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled corpus")
    p.add_argument("--spec", help="config file with the scene section", default=None)
    p.add_argument("--out", required=True, help="output corpus directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", help="write per-clip feature cache files")
    p.add_argument("--config", default=None, help="config file")
    p.add_argument("--audio", required=True, help="directory of wav files")
    p.add_argument("--out", required=True, help="cache output directory")
    _add_jobs(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train the two-stage pipeline bundle")
    p.add_argument("--config", default=None, help="config file")
    p.add_argument("--data", required=True, help="corpus directory (wav + annotations.csv)")
    p.add_argument("--out", required=True, help="model bundle directory")
    p.add_argument("--deep", action="store_true", help="also train the deep counter")
    p.add_argument("--cache", default=None, help="reuse feature cache files from this directory")
    _add_jobs(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write per-clip predicted distance CSV")
    p.add_argument("--model", required=True, help="pipeline bundle directory")
    p.add_argument("--audio", required=True, help="directory of wav files")
    p.add_argument("--out", required=True, help="output CSV path")
    _add_jobs(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("count", help="count vehicles per clip and in total")
    p.add_argument("--model", required=True, help="pipeline bundle directory")
    p.add_argument("--audio", required=True, help="directory of wav files")
    p.add_argument(
        "--tdet",
        type=float,
        default=None,
        help="detection threshold in seconds (default: t_d)",
    )
    p.add_argument("--config", default=None, help="config file for the detector")
    _add_jobs(p)
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("eval", help="write metric CSVs for a labeled corpus")
    p.add_argument("--model", required=True, help="pipeline bundle directory")
    p.add_argument("--data", required=True, help="corpus directory (wav + annotations.csv)")
    p.add_argument("--out", required=True, help="report output directory")
    p.add_argument("--config", default=None, help="config file selecting variants")
    _add_jobs(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gridsearch", help="search detection parameters on the val split")
    p.add_argument("--config", default=None, help="config file with the grid section")
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--out", default=None, help="write the table here instead of stdout")
    _add_jobs(p)
    p.set_defaults(func=cmd_gridsearch)

    p = sub.add_parser("experiment", help="multi-run protocol with confidence bands")
    p.add_argument("--config", required=True, help="config file with paths + n_runs")
    p.set_defaults(func=cmd_experiment)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # argparse --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
