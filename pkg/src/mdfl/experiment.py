"""Pipeline orchestration shared by the CLI and the integration tests.

Each stage is a plain function from (config, paths) to output files:
dataset synthesis, trainer driving with a checkpoint schedule, feature
encoding (capsule / VLAD / SAD), cross-condition sequence matching, PR
report building, and the MI-vs-step diagnostic. Every file written is
appended to the caller's `written` list so a failed command can remove
its partial outputs.
"""

from __future__ import annotations

import csv
import dataclasses
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import baselines
from . import dataset as ds_mod
from . import evaluation, matching
from .autodiff import Tensor
from .capsule import CapsuleEncoder
from .config import RunConfig, write_resolved
from .errors import ConfigError, DataError
from .fileio import (atomic_write, load_features, load_weights,
                     save_codebook, save_features)
from .separation import Trainer, mutual_information

FEATURE_KINDS = ("caps", "vlad", "sad")


def mdfl_threads() -> int:
    """Worker cap for batch-parallel stages, from MDFL_THREADS (default 1)."""
    raw = os.environ.get("MDFL_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"MDFL_THREADS must be an integer, got {raw!r}")
    return max(1, n)


def _note(written, path: str) -> str:
    if written is not None:
        written.append(path)
    return path


def echo_config(cfg: RunConfig, out_dir: str, written=None) -> None:
    os.makedirs(out_dir, exist_ok=True)
    write_resolved(cfg, _note(written, os.path.join(out_dir, "config_resolved.txt")))


def condition_specs(cfg: RunConfig) -> list[ds_mod.ConditionSpec]:
    if cfg.condition_specs:
        return ds_mod.parse_condition_specs(cfg.condition_specs)
    return ds_mod.default_condition_specs(cfg.condition_count)


# ------------------------------------------------------------------- synth

def run_synth(cfg: RunConfig, out_dir: str, written=None) -> dict:
    echo_config(cfg, out_dir, written)
    specs = condition_specs(cfg)
    full = ds_mod.generate(cfg.seed, cfg.n_frames, specs,
                           n_objects=cfg.world_objects,
                           world_length=cfg.world_length)
    train, test = ds_mod.split(full, cfg.test_fraction)
    train_path = os.path.join(out_dir, "dataset_train.mdfld")
    test_path = os.path.join(out_dir, "dataset_test.mdfld")
    train.save(train_path)
    _note(written, train_path)
    _note(written, train_path + ".manifest.csv")
    test.save(test_path)
    _note(written, test_path)
    _note(written, test_path + ".manifest.csv")
    return {"train": train_path, "test": test_path,
            "n_train": len(train.frames), "n_test": len(test.frames)}


# ------------------------------------------------------------------- train

def _probe_subset(labels: np.ndarray, per_condition: int = 32) -> np.ndarray:
    """Deterministic label-balanced record subset for the MI probe."""
    picks = []
    for c in np.unique(labels):
        picks.append(np.flatnonzero(labels == c)[:per_condition])
    return np.concatenate(picks)


def _write_loss_csv(path: str, rows: list[tuple]) -> None:
    with atomic_write(path, binary=False) as fh:
        fh.write("step,loss_disc,loss_gan_gen,loss_feature,loss_cond,"
                 "loss_image,loss_joint,mi_probe\n")
        for row in rows:
            fh.write(",".join(str(v) for v in row) + "\n")


def run_train(cfg: RunConfig, out_dir: str, dataset_path: str,
              written=None, progress=None,
              resume_from: str | None = None) -> dict:
    echo_config(cfg, out_dir, written)
    data = ds_mod.TrajectoryDataset.load(dataset_path)
    labels = data.condition_ids.astype(np.int64)
    trainer = Trainer(cfg, data.frames, labels)
    if resume_from:
        trainer.load_checkpoint(resume_from)

    ck_dir = os.path.join(out_dir, "checkpoints")
    os.makedirs(ck_dir, exist_ok=True)
    probe = _probe_subset(labels)
    loss_rows: list[tuple] = []
    loss_path = os.path.join(out_dir, "losses.csv")

    def checkpoint(step: int, losses=None) -> float:
        path = os.path.join(ck_dir, f"ck_{step:06d}.mdflw")
        trainer.save_checkpoint(path)
        _note(written, path)
        _note(written, path + ".state.json")
        mi = trainer.geometry_mi(data.frames[probe], labels[probe])
        if losses is None:
            row = (step, "", "", "", "", "", "", f"{mi:.6f}")
        else:
            row = (step, f"{losses.disc:.6f}", f"{losses.gen_gan:.6f}",
                   f"{losses.feature:.6f}", f"{losses.cond:.6f}",
                   f"{losses.image:.6f}", f"{losses.joint:.6f}", f"{mi:.6f}")
        loss_rows.append(row)
        _write_loss_csv(loss_path, loss_rows)
        _note(written, loss_path)
        return mi

    if trainer.step == 0:
        mi_first = checkpoint(0)
    else:
        mi_first = trainer.geometry_mi(data.frames[probe], labels[probe])
    every = max(1, cfg.checkpoint_every)
    mi_last = mi_first
    while trainer.step < cfg.steps:
        losses = trainer.train_step()
        at_checkpoint = trainer.step % every == 0 or trainer.step == cfg.steps
        if at_checkpoint:
            mi_last = checkpoint(trainer.step, losses)
        else:
            loss_rows.append((trainer.step, f"{losses.disc:.6f}",
                              f"{losses.gen_gan:.6f}", f"{losses.feature:.6f}",
                              f"{losses.cond:.6f}", f"{losses.image:.6f}",
                              f"{losses.joint:.6f}", ""))
        if progress is not None:
            progress(trainer.step, losses)
    _write_loss_csv(loss_path, loss_rows)
    final_ck = os.path.join(ck_dir, f"ck_{trainer.step:06d}.mdflw")
    return {"final_checkpoint": final_ck, "losses_csv": loss_path,
            "mi_first": mi_first, "mi_last": mi_last, "steps": trainer.step}


# ------------------------------------------------------------------ encode

def load_encoder(cfg: RunConfig, checkpoint_path: str) -> CapsuleEncoder:
    arrays = load_weights(checkpoint_path)
    enc_state = {k[4:]: v for k, v in arrays.items() if k.startswith("enc.")}
    if not enc_state:
        raise DataError(f"{checkpoint_path}: no encoder arrays found")
    enc = CapsuleEncoder(np.random.default_rng(0), cfg)
    enc.load_state_dict(enc_state)
    return enc


def _standardize(feats: np.ndarray) -> np.ndarray:
    """Per-dimension zero-mean unit-std over the sequence axis.

    The raw geometry block keeps a condition-dependent affine component
    that inflates l2 distances between sequences; sequence-level
    statistics remove it. Applied after concatenating all batches so the
    result is identical at any thread count.
    """
    flat = feats.reshape(len(feats), -1)
    mu = flat.mean(axis=0, keepdims=True)
    sd = flat.std(axis=0, keepdims=True)
    out = (flat - mu) / np.maximum(sd, 1e-8)
    return out.reshape(feats.shape).astype(np.float32)


def _encode_caps(enc: CapsuleEncoder, frames: np.ndarray, d_c: int,
                 batch: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """(z_G (n, K, D-D_C) standardized, mean z_C (n, D_C)) with frozen
    statistics."""
    chunks = [frames[i:i + batch] for i in range(0, len(frames), batch)]

    def one(chunk):
        x = chunk.astype(np.float32) / 255.0
        t = Tensor(np.ascontiguousarray(x.transpose(0, 3, 1, 2)))
        return enc(t).data

    workers = mdfl_threads()
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(one, chunks))
    else:
        outs = [one(c) for c in chunks]
    v = np.concatenate(outs, axis=0)
    d = v.shape[-1]
    return _standardize(v[:, :, :d - d_c]), v[:, :, d - d_c:].mean(axis=1)


def _fit_vlad_codebook(cfg: RunConfig, frames: np.ndarray) -> np.ndarray:
    descs = [baselines.image_local_descriptors(f) for f in frames]
    points = np.concatenate(descs, axis=0)
    return baselines.kmeans_fit(points, cfg.vlad_k, seed=cfg.seed)


def _encode_vlad(cfg: RunConfig, frames: np.ndarray,
                 centers: np.ndarray) -> np.ndarray:
    k, d = centers.shape
    out = np.empty((len(frames), k, d), dtype=np.float32)
    for i, f in enumerate(frames):
        vec = baselines.vlad_encode(baselines.image_local_descriptors(f),
                                    centers, soft=cfg.vlad_soft)
        out[i] = vec.reshape(k, d)
    return out


def _encode_sad(cfg: RunConfig, frames: np.ndarray) -> np.ndarray:
    out = [baselines.sad_descriptor(f, down=cfg.sad_down, patch=cfg.sad_patch)
           for f in frames]
    arr = np.stack(out).astype(np.float32)
    return arr.reshape(len(frames), 1, -1)


def run_encode(cfg: RunConfig, out_dir: str, dataset_path: str, kind: str,
               checkpoint_path: str | None = None, written=None) -> dict:
    if kind not in FEATURE_KINDS:
        raise ConfigError(f"unknown feature kind {kind!r}; "
                          f"expected one of {FEATURE_KINDS}")
    echo_config(cfg, out_dir, written)
    data = ds_mod.TrajectoryDataset.load(dataset_path)
    paths: dict[int, str] = {}

    enc = centers = None
    if kind == "caps":
        if not checkpoint_path:
            raise ConfigError("encode --features caps requires --checkpoint")
        enc = load_encoder(cfg, checkpoint_path)
    elif kind == "vlad":
        centers = _fit_vlad_codebook(cfg, data.frames)
        cb_path = os.path.join(out_dir, "codebook_vlad.mdflc")
        save_codebook(cb_path, centers)
        _note(written, cb_path)

    for c in range(data.condition_count):
        frames, _ = data.frames_of(c)
        if len(frames) == 0:
            raise DataError(f"{dataset_path}: condition {c} has no frames")
        if kind == "caps":
            feats, cond_vec = _encode_caps(enc, frames, cfg.d_condition,
                                           batch=max(1, cfg.batch_size))
        elif kind == "vlad":
            feats, cond_vec = _encode_vlad(cfg, frames, centers), None
        else:
            feats, cond_vec = _encode_sad(cfg, frames), None
        path = os.path.join(out_dir, f"features_{kind}_c{c}.mdflf")
        save_features(path, feats, cond_vec)
        paths[c] = _note(written, path)
    return {"paths": paths, "kind": kind}


# ------------------------------------------------------------------- match

def run_match(cfg: RunConfig, out_dir: str, query_path: str, ref_path: str,
              tag: str | None = None, written=None) -> dict:
    echo_config(cfg, out_dir, written)
    q_feats, _ = load_features(query_path)
    r_feats, _ = load_features(ref_path)
    q = q_feats.reshape(len(q_feats), -1)
    r = r_feats.reshape(len(r_feats), -1)
    results = matching.match(
        q, r, d_s=cfg.d_s, v_min=cfg.v_min, v_max=cfg.v_max,
        v_step=cfg.v_step, window=cfg.enhance_window,
        exclusion=cfg.exclusion_window, mu=cfg.ratio_mu,
        metric=cfg.match_metric)
    if tag is None:
        qn = os.path.splitext(os.path.basename(query_path))[0]
        rn = os.path.splitext(os.path.basename(ref_path))[0]
        qn = qn[len("features_"):] if qn.startswith("features_") else qn
        rn = rn[len("features_"):] if rn.startswith("features_") else rn
        tag = f"{qn}_vs_{rn}"
    path = os.path.join(out_dir, f"matches_{tag}.csv")
    n_correct = 0
    with atomic_write(path, binary=False) as fh:
        fh.write(f"# tag={tag}\n")
        fh.write("query_index,ref_index,seq_score,ratio,accepted,correct\n")
        for res in results:
            ok = matching.is_correct(res.ref_index, res.query_index,
                                     cfg.frame_tolerance)
            n_correct += ok
            fh.write(f"{res.query_index},{res.ref_index},{res.seq_score:.9g},"
                     f"{res.ratio:.9g},{int(res.accepted)},{int(ok)}\n")
    _note(written, path)
    return {"path": path, "tag": tag, "n": len(results),
            "n_correct": n_correct}


def read_match_csv(path: str) -> tuple[str, np.ndarray, np.ndarray]:
    """(tag, ratio scores, correctness) from one match CSV."""
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline().strip()
        if not first.startswith("# tag="):
            raise DataError(f"{path}: missing tag line")
        tag = first[len("# tag="):]
        reader = csv.DictReader(fh)
        scores, correct = [], []
        for row in reader:
            scores.append(float(row["ratio"]))
            correct.append(bool(int(row["correct"])))
    if not scores:
        raise DataError(f"{path}: no match rows")
    return tag, np.asarray(scores), np.asarray(correct)


# -------------------------------------------------------------------- eval

def run_eval(cfg: RunConfig, out_dir: str, match_paths: list[str] | None = None,
             written=None) -> dict:
    echo_config(cfg, out_dir, written)
    if match_paths is None:
        match_paths = sorted(
            os.path.join(out_dir, f) for f in os.listdir(out_dir)
            if f.startswith("matches_") and f.endswith(".csv"))
    if not match_paths:
        raise DataError(f"{out_dir}: no match CSV files to evaluate")
    runs = []
    for path in match_paths:
        tag, scores, correct = read_match_csv(path)
        # ratio is lower-is-better, matching the curve's acceptance rule
        curve = evaluation.pr_curve(scores, correct)
        method, _, pair = tag.partition("_")
        runs.append((method, pair or "all", curve))
    report = evaluation.compare_report(runs, out_dir,
                                       config_echo=dataclasses.asdict(cfg))
    _note(written, os.path.join(out_dir, "report.csv"))
    _note(written, os.path.join(out_dir, "report.json"))
    for method, pair, _ in runs:
        _note(written, os.path.join(out_dir, f"pr_{method}_{pair}.csv"))
    return report


# -------------------------------------------------------------------- diag

def run_diag(cfg: RunConfig, out_dir: str, dataset_path: str,
             checkpoint_dir: str | None = None, written=None) -> dict:
    echo_config(cfg, out_dir, written)
    if checkpoint_dir is None:
        checkpoint_dir = os.path.join(out_dir, "checkpoints")
    if not os.path.isdir(checkpoint_dir):
        raise DataError(f"{checkpoint_dir}: not a directory")
    names = sorted(f for f in os.listdir(checkpoint_dir)
                   if f.startswith("ck_") and f.endswith(".mdflw"))
    if not names:
        raise DataError(f"{checkpoint_dir}: no checkpoints found")
    data = ds_mod.TrajectoryDataset.load(dataset_path)
    labels = data.condition_ids.astype(np.int64)
    rows = []
    for name in names:
        step = int(name[3:-6])
        enc = load_encoder(cfg, os.path.join(checkpoint_dir, name))
        z_g, _ = _encode_caps(enc, data.frames, cfg.d_condition)
        mi = mutual_information(z_g, labels, cfg.mi_bins)
        rows.append((step, mi))
    rows.sort()
    path = os.path.join(out_dir, "mi_vs_step.csv")
    with atomic_write(path, binary=False) as fh:
        fh.write("step,mi_bits\n")
        for step, mi in rows:
            fh.write(f"{step},{mi:.6f}\n")
    _note(written, path)
    return {"path": path, "rows": rows}


# ---------------------------------------------------------- full pipeline

def condition_pairs(count: int) -> list[tuple[int, int]]:
    return [(a, b) for a in range(count) for b in range(count) if a < b]


def run_pipeline(cfg: RunConfig, out_dir: str, kinds=("caps", "sad"),
                 written=None, progress=None) -> dict:
    """synth -> train -> encode -> match -> eval -> diag, one output dir."""
    synth = run_synth(cfg, out_dir, written)
    train = run_train(cfg, out_dir, synth["train"], written, progress)
    feature_paths: dict[str, dict[int, str]] = {}
    for kind in kinds:
        enc_out = run_encode(cfg, out_dir, synth["test"], kind,
                             checkpoint_path=train["final_checkpoint"],
                             written=written)
        feature_paths[kind] = enc_out["paths"]
    match_files = []
    for kind in kinds:
        for a, b in condition_pairs(cfg.condition_count):
            res = run_match(cfg, out_dir, feature_paths[kind][a],
                            feature_paths[kind][b], tag=f"{kind}_c{a}v{b}",
                            written=written)
            match_files.append(res["path"])
    report = run_eval(cfg, out_dir, match_files, written)
    diag = run_diag(cfg, out_dir, synth["test"], written=written)
    return {"synth": synth, "train": train, "features": feature_paths,
            "matches": match_files, "report": report, "diag": diag}
