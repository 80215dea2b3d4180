"""End-to-end desk-scale pipeline.

Stages communicate only through files under ``cfg.out``::

    synth/      scenes.json and rendered views (tensor containers)
    train/      encoder checkpoint, loss curve, held-out retrieval
    features/   one (S, F) container per model/layer, plus index.json
    encode/     per-subject responses, atlas, noise ceiling and per-voxel fits
    stats/      ROI summaries, t-tests, difference maps
    report.csv, report.json
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from ..encoding import (
    FeatureMatrix,
    estimate_noise_ceiling,
    filter_voxels,
    fit_encoding_model,
    noise_corrected_r2,
    train_test_indices,
)
from ..errors import DegenerateTestError, EmptyRoiError, InputError, StageError
from ..featmodel import (
    ConvLayer,
    EncoderParams,
    ScenePair,
    encoder_forward,
    prepare_pair,
    retrieval_accuracy,
    train_view_prediction,
)
from ..geometry import GridSpec, RigidPose, grid_spec_from_points, lift_to_grid, unproject_depth
from ..roistats import RoiAtlas, best_layer, difference_map, paired_t_test, roi_mean
from .config import RunConfig
from .container import read_tensor, write_tensor
from .responses import synth_atlas, synth_responses
from .scenes import SyntheticScene, render_depth, synth_scene

log = logging.getLogger(__name__)

STAGES = ("synth", "train", "featurize", "encode", "stats", "report")
CSV_HEADER = ("subject", "roi", "model", "layer", "metric", "value")
METRIC_ORDER = ("r", "r2", "nc", "r2_nc", "t", "p")

# independent seed streams derived from RunConfig.seed
_TRAIN_SCENES, _HELDOUT_SCENES, _STIMULI, _ENCODER_INIT, _RANDOM_FEATURES, _RESPONSES, _ATLAS, \
    _SPLIT = range(1, 9)


def derive_seed(seed, stream, index=0):
    return int(np.random.SeedSequence([int(seed), stream, int(index)]).generate_state(1)[0])


def resolve_threads(threads=None):
    if threads is None:
        env = os.environ.get("GEOVOXEL_THREADS")
        threads = int(env) if env else 1
    return max(1, int(threads))


def _parallel_map(fn, items, threads):
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_json(path):
    return json.loads(Path(path).read_text())


def _fmt(x):
    return repr(float(x))


# -- synth --------------------------------------------------------------------

def stage_synth(cfg, out):
    d = out / "synth"
    groups = {
        "train": [derive_seed(cfg.seed, _TRAIN_SCENES, i) for i in range(cfg.n_train_pairs)],
        "heldout": [derive_seed(cfg.seed, _HELDOUT_SCENES, i) for i in range(cfg.n_heldout_pairs)],
        "stimuli": [derive_seed(cfg.seed, _STIMULI, i) for i in range(cfg.n_stimuli)],
    }
    index = {}
    for name, seeds in groups.items():
        scenes = [synth_scene(s, cfg.scene) for s in seeds]
        views = 1 if name == "stimuli" else 2
        for v in range(views):
            renders = [render_depth(sc, sc.cameras[v]) for sc in scenes]
            h, w = cfg.scene.height, cfg.scene.width
            depth = np.stack([r[0] for r in renders]) if renders else np.zeros((0, h, w))
            rgb = np.stack([r[1] for r in renders]) if renders else np.zeros((0, h, w, 3))
            write_tensor(d / f"{name}_depth{v}", depth)
            write_tensor(d / f"{name}_rgb{v}", rgb)
        index[name] = {"seeds": seeds, "scenes": [sc.to_dict() for sc in scenes]}
    _write_json(d / "scenes.json", index)
    return index


def _load_pairs(out, group):
    d = out / "synth"
    index = _read_json(d / "scenes.json")[group]
    scenes = [SyntheticScene.from_dict(s) for s in index["scenes"]]
    da, db = read_tensor(d / f"{group}_depth0"), read_tensor(d / f"{group}_depth1")
    ra, rb = read_tensor(d / f"{group}_rgb0"), read_tensor(d / f"{group}_rgb1")
    return [ScenePair(ra[i], da[i], sc.cameras[0].pose, rb[i], db[i], sc.cameras[1].pose,
                      sc.cameras[0].intrinsics) for i, sc in enumerate(scenes)]


# -- train --------------------------------------------------------------------

def save_encoder(params, d):
    layers = []
    for i, layer in enumerate(params.layers):
        write_tensor(d / f"layer{i}_kernel", layer.kernel)
        write_tensor(d / f"layer{i}_bias", layer.bias)
        layers.append({"kernel": f"layer{i}_kernel", "bias": f"layer{i}_bias",
                       "nonlinearity": layer.nonlinearity})
    return layers


def load_encoder(d):
    meta = _read_json(d / "encoder.json")
    return EncoderParams([ConvLayer(read_tensor(d / l["kernel"]), read_tensor(d / l["bias"]),
                                    l["nonlinearity"]) for l in meta["layers"]])


def stage_train(cfg, out, threads=1):
    d = out / "train"
    train_pairs = [prepare_pair(p, cfg.grid_dims) for p in _load_pairs(out, "train")]
    params0 = EncoderParams.init(derive_seed(cfg.seed, _ENCODER_INIT))
    params, curve = train_view_prediction(
        train_pairs, params0, cfg.contrastive, cfg.grid_dims,
        on_epoch=lambda e, l: log.info("epoch %d mean loss %.6f", e + 1, l))
    heldout = []
    for p in _load_pairs(out, "heldout"):
        prep = prepare_pair(p, cfg.grid_dims)
        if prep is None or prep.mask.sum() < 2:
            continue
        fa = encoder_forward(prep.grid_a_in_b, params)
        fb = encoder_forward(prep.grid_b, params)
        heldout.append({"accuracy": retrieval_accuracy(fa, fb, prep.mask),
                        "masked_voxels": int(prep.mask.sum())})
    meta = {
        "layers": save_encoder(params, d),
        "loss_curve": curve,
        "heldout_retrieval": heldout,
        "heldout_mean_accuracy": float(np.mean([h["accuracy"] for h in heldout])) if heldout else None,
        "contrastive": asdict(cfg.contrastive),
    }
    _write_json(d / "encoder.json", meta)
    return meta


# -- featurize ----------------------------------------------------------------

def _stimulus_grid(rgb, depth, k, dims, scene_spec):
    ident = RigidPose.identity()
    pts, _ = unproject_depth(depth, k, ident)
    if len(pts):
        spec = grid_spec_from_points(pts, dims)
    else:
        size = scene_spec.extent * 1.2 / max(dims)
        center = np.array([0.0, 0.0, scene_spec.distance])
        spec = GridSpec(center - size * (np.asarray(dims) - 1) / 2.0, size, dims)
    return lift_to_grid(rgb, depth, k, ident, spec)


def _pool(x, block):
    dx, dy, dz, c = x.shape
    return x.reshape(dx // block, block, dy // block, block, dz // block, block, c) \
        .mean(axis=(1, 3, 5)).ravel()


def grnn_layer_features(rgb, depth, k, params, dims, pool, scene_spec):
    """Block-pooled activations of every encoder layer for one view."""
    grid = _stimulus_grid(rgb, depth, k, dims, scene_spec)
    feat = encoder_forward(grid, params)
    acts = feat.cache["acts"][1:-1] + [feat.data]
    return [_pool(a, pool) for a in acts]


def scene_descriptors(rgb, depth, k):
    """Low-dimensional geometric/colour summary of a rendered view."""
    hit = depth > 0
    if not hit.any():
        return np.zeros(16)
    z = depth[hit]
    pts, _ = unproject_depth(depth, k, RigidPose.identity())
    col = rgb[hit]
    return np.concatenate([
        [hit.mean(), z.mean(), z.std()],
        np.percentile(z, [10, 50, 90]),
        col.mean(axis=0),
        col.std(axis=0),
        pts[:, :2].mean(axis=0),
        pts[:, :2].std(axis=0),
    ])


def _feature_path(out, model, layer):
    return out / "features" / f"{model}__{layer}"


def stage_featurize(cfg, out, threads=1):
    d = out / "features"
    synth = out / "synth"
    index = _read_json(synth / "scenes.json")["stimuli"]
    scenes = [SyntheticScene.from_dict(s) for s in index["scenes"]]
    depth = read_tensor(synth / "stimuli_depth0")
    rgb = read_tensor(synth / "stimuli_rgb0")
    n = len(scenes)
    needed = set(cfg.models) | {cfg.responses.source_model}
    entries = []

    if "grnn" in needed:
        params = load_encoder(out / "train")
        rows = _parallel_map(
            lambda i: grnn_layer_features(rgb[i], depth[i], scenes[i].cameras[0].intrinsics, params,
                                          cfg.grid_dims, cfg.pool, cfg.scene),
            range(n), threads)
        names = list(cfg.layers)
        if len(names) != len(rows[0]):
            raise InputError(f"encoder has {len(rows[0])} layers but config names {len(names)}")
        for j, layer in enumerate(names):
            entries.append(("grnn", layer, np.stack([r[j] for r in rows])))
    if "truth" in needed:
        entries.append(("truth", "descriptors", np.stack(
            [scene_descriptors(rgb[i], depth[i], scenes[i].cameras[0].intrinsics) for i in range(n)])))
    if "random" in needed:
        rng = np.random.default_rng(derive_seed(cfg.seed, _RANDOM_FEATURES))
        entries.append(("random", "gaussian", rng.normal(size=(n, cfg.random_features))))
    for ext in cfg.external_features:
        if ext.model in needed:
            x = read_tensor(ext.path).astype(np.float64)
            if x.ndim != 2 or x.shape[0] != n:
                raise InputError(f"external features {ext.path} must be ({n}, F), got {x.shape}")
            entries.append((ext.model, ext.layer, x))

    listing = []
    for model, layer, x in entries:
        FeatureMatrix(x, model, layer)
        write_tensor(_feature_path(out, model, layer), x, name=f"{model}/{layer}")
        listing.append({"model": model, "layer": layer, "shape": list(x.shape)})
    _write_json(d / "index.json", {"features": listing})
    return listing


# -- encode -------------------------------------------------------------------

def _model_layers(listing, model):
    return [e["layer"] for e in listing if e["model"] == model]


def stage_encode(cfg, out, threads=1):
    d = out / "encode"
    listing = _read_json(out / "features" / "index.json")["features"]
    rc = cfg.responses
    src_layers = _model_layers(listing, rc.source_model)
    if rc.source_layer not in src_layers:
        raise InputError(f"response source {rc.source_model}/{rc.source_layer} was not featurized")
    source = read_tensor(_feature_path(out, rc.source_model, rc.source_layer))
    n = source.shape[0]
    jobs_meta = [(m, l) for m in cfg.models for l in _model_layers(listing, m)]
    feats = {(m, l): read_tensor(_feature_path(out, m, l)) for m, l in jobs_meta}

    subjects = []
    for s in range(rc.n_subjects):
        sid = f"S{s + 1:02d}"
        sd = d / sid
        sr = synth_responses(source, rc.n_voxels, rc.noise_level, rc.repeats,
                             derive_seed(cfg.seed, _RESPONSES, s))
        atlas = synth_atlas(rc.n_voxels, derive_seed(cfg.seed, _ATLAS, s), rc.unassigned_fraction)
        write_tensor(sd / "responses", sr.responses.data)
        write_tensor(sd / "repeats", sr.responses.repeats)
        write_tensor(sd / "true_weights", sr.weights)
        write_tensor(sd / "atlas_labels", atlas.labels.astype(np.int32))
        if rc.repeats >= 2:
            nc = estimate_noise_ceiling(sr.responses.repeats).nc
        else:
            nc = np.ones(rc.n_voxels)
        write_tensor(sd / "nc", nc)
        split_cfg = replace(cfg.split, seed=derive_seed(cfg.split.seed, _SPLIT, s))
        split = train_test_indices(n, split_cfg)
        write_tensor(sd / "train_idx", split[0].astype(np.int32))
        write_tensor(sd / "test_idx", split[1].astype(np.int32))

        def fit_one(key, y=sr.responses.data, split_cfg=split_cfg, split=split):
            return fit_encoding_model(feats[key], y, split_cfg, cfg.pca_components, split)

        results = _parallel_map(fit_one, jobs_meta, threads)
        fits = []
        for (m, l), res in zip(jobs_meta, results):
            stem = sd / f"{m}__{l}"
            write_tensor(Path(str(stem) + "_r"), res.test_r)
            write_tensor(Path(str(stem) + "_r2"), res.test_r2)
            write_tensor(Path(str(stem) + "_r2_nc"), noise_corrected_r2(res.test_r2, nc))
            write_tensor(Path(str(stem) + "_cv_r2"), res.cv_r2)
            write_tensor(Path(str(stem) + "_lambda"), res.lambdas)
            fits.append({"model": m, "layer": l, "n_components": res.n_components})
        subjects.append({"subject": sid, "atlas_names": {str(k): v for k, v in atlas.names.items()},
                         "fits": fits})
    meta = {"subjects": subjects, "nc_threshold": cfg.nc_threshold}
    _write_json(d / "index.json", meta)
    return meta


# -- stats --------------------------------------------------------------------

def _load_subject(out, sid, fits):
    sd = out / "encode" / sid
    data = {"nc": read_tensor(sd / "nc"), "labels": read_tensor(sd / "atlas_labels")}
    per = {}
    for f in fits:
        stem = f"{f['model']}__{f['layer']}"
        per[(f["model"], f["layer"])] = {
            k: read_tensor(sd / f"{stem}_{k}") for k in ("r", "r2", "r2_nc", "cv_r2")}
    data["fits"] = per
    return data


def stage_stats(cfg, out, threads=1):
    d = out / "stats"
    enc = _read_json(out / "encode" / "index.json")
    rows = []
    best = {}  # (sid, roi_name, model) -> dict
    whole_best = {}  # (sid, model) -> layer
    for subj in enc["subjects"]:
        sid = subj["subject"]
        data = _load_subject(out, sid, subj["fits"])
        atlas = RoiAtlas(data["labels"], {int(k): v for k, v in subj["atlas_names"].items()})
        include = filter_voxels(data["nc"], cfg.nc_threshold)
        for model in cfg.models:
            layers = [l for (m, l) in data["fits"] if m == model]
            if include.any():
                scores = [float(data["fits"][(model, l)]["cv_r2"][include].mean()) for l in layers]
                whole_best[(sid, model)] = best_layer(scores, layers)
            for roi_id in atlas.roi_ids():
                roi = atlas.names[roi_id]
                cv_scores, test_scores = [], []
                for layer in layers:
                    f = data["fits"][(model, layer)]
                    metrics = {"r": f["r"], "r2": f["r2"], "nc": data["nc"], "r2_nc": f["r2_nc"]}
                    try:
                        vals = {k: roi_mean(v, include, atlas, roi_id) for k, v in metrics.items()}
                        cv = roi_mean(f["cv_r2"], include, atlas, roi_id)
                    except EmptyRoiError:
                        log.info("%s %s: no voxels pass the noise-ceiling filter", sid, roi)
                        break
                    for k in ("r", "r2", "nc", "r2_nc"):
                        rows.append((sid, roi, model, layer, k, vals[k]))
                    cv_scores.append(cv)
                    test_scores.append(vals["r2_nc"])
                else:
                    if layers:
                        i = best_layer(cv_scores)
                        best[(sid, roi, model)] = {"layer": layers[i], "cv_r2": cv_scores[i],
                                                   "test_r2_nc": test_scores[i]}
        for a, b in cfg.model_comparisons():
            if (sid, a) in whole_best and (sid, b) in whole_best:
                la, lb = whole_best[(sid, a)], whole_best[(sid, b)]
                diff = difference_map(data["fits"][(a, la)]["r2_nc"], data["fits"][(b, lb)]["r2_nc"],
                                      include)
                write_tensor(d / f"diff_{sid}_{a}-{b}", diff)

    tests = []
    roi_names = sorted({k[1] for k in best})
    sids = [s["subject"] for s in enc["subjects"]]
    for a, b in cfg.model_comparisons():
        for roi in roi_names:
            pairs = [(best[(s, roi, a)]["test_r2_nc"], best[(s, roi, b)]["test_r2_nc"])
                     for s in sids if (s, roi, a) in best and (s, roi, b) in best]
            entry = {"roi": roi, "model_a": a, "model_b": b, "n": len(pairs)}
            if len(pairs) < 2:
                entry["skipped"] = "fewer than two subjects"
            else:
                try:
                    res = paired_t_test([p[0] for p in pairs], [p[1] for p in pairs])
                    entry.update({"t": res.t, "p": res.p, "df": res.df})
                    rows.append(("group", roi, f"{a}-{b}", "best", "t", res.t))
                    rows.append(("group", roi, f"{a}-{b}", "best", "p", res.p))
                except DegenerateTestError as exc:
                    entry["skipped"] = str(exc)
            tests.append(entry)

    summary = {
        "rows": [list(r) for r in rows],
        "best_layers": [{"subject": s, "roi": r, "model": m, **v} for (s, r, m), v in sorted(best.items())],
        "whole_brain_best_layers": [{"subject": s, "model": m, "layer": l}
                                    for (s, m), l in sorted(whole_best.items())],
        "tests": tests,
    }
    _write_json(d / "stats.json", summary)
    return summary


# -- report -------------------------------------------------------------------

def _sort_key(row):
    return (row[0], row[1], row[2], row[3], METRIC_ORDER.index(row[4]))


def render_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in sorted(rows, key=_sort_key):
        value = r[5]
        w.writerow(list(r[:5]) + ["" if value is None or not np.isfinite(value) else _fmt(value)])
    return buf.getvalue()


def stage_report(cfg, out, threads=1):
    stats = _read_json(out / "stats" / "stats.json")
    train_meta = out / "train" / "encoder.json"
    text = render_csv([tuple(r) for r in stats["rows"]])
    report = {
        "config": cfg.to_dict(),
        "best_layers": stats["best_layers"],
        "whole_brain_best_layers": stats["whole_brain_best_layers"],
        "tests": stats["tests"],
        "training": _read_json(train_meta) if train_meta.exists() else None,
    }
    # write to temporaries first so a failure never leaves a partial report
    tmp_csv, tmp_json = out / "report.csv.tmp", out / "report.json.tmp"
    tmp_csv.write_text(text)
    tmp_json.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    tmp_csv.replace(out / "report.csv")
    tmp_json.replace(out / "report.json")
    return text


STAGE_FUNCS = {
    "synth": lambda cfg, out, threads: stage_synth(cfg, out),
    "train": stage_train,
    "featurize": stage_featurize,
    "encode": stage_encode,
    "stats": stage_stats,
    "report": stage_report,
}


def run_stage(name, cfg, threads=None):
    """Run one stage, converting any failure into a stage-tagged error."""
    out = Path(cfg.out)
    threads = resolve_threads(threads)
    try:
        out.mkdir(parents=True, exist_ok=True)
        if name == "train" and "grnn" not in set(cfg.models) | {cfg.responses.source_model}:
            log.info("no model needs the encoder; skipping training")
            return None
        with threadpool_limits(limits=1):
            return STAGE_FUNCS[name](cfg, out, threads)
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - every failure is re-raised with its stage
        raise StageError(name, f"{type(exc).__name__}: {exc}") from exc


def run_pipeline(cfg, threads=None):
    """Run every stage in order. Any stale report is removed first."""
    out = Path(cfg.out)
    for stale in ("report.csv", "report.json"):
        if (out / stale).exists():
            (out / stale).unlink()
    try:
        cfg.check_paths()
    except InputError as exc:
        raise StageError("config", str(exc)) from exc
    for name in STAGES:
        log.info("stage %s", name)
        run_stage(name, cfg, threads)
    return out / "report.csv"
