"""End-to-end pipeline: synthetic data, three training stages, inference,
rendering, and metrics, with resumable per-stage outputs.

Every stage reads only the configuration and artifacts written by earlier
stages, so a run is reproducible from any point; given the same configuration
and seed two runs produce byte-identical outputs.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np

from . import corpus as cp
from . import geometry as geo
from . import metrics as mx
from . import nerf
from . import postnet as pnet
from . import reporting
from .config import PipelineConfig
from .motionvae import MotionVAE, train_motion_vae
from .syncexpert import SyncExpert, evaluate_accuracy, train_sync_expert

STAGES = ("gen-data", "train-syncexpert", "train-vae", "train-postnet",
          "train-nerf", "infer-motion", "render", "metrics")


class PipelineError(RuntimeError):
    pass


def _manifest_path(root: Path) -> Path:
    return root / "manifest.json"


def _load_manifest(root: Path) -> dict:
    path = _manifest_path(root)
    if path.exists():
        return json.loads(path.read_text())
    return {"config_hash": None, "seed": None, "stages": {}}


def _save_manifest(root: Path, manifest: dict) -> None:
    _manifest_path(root).write_text(json.dumps(manifest, indent=1, sort_keys=True))


def _require(manifest: dict, stage: str) -> None:
    info = manifest["stages"].get(stage)
    if not info or info.get("status") != "done":
        raise PipelineError(f"stage {stage!r} has not completed; run it first")


def stage_dir(root, cfg: PipelineConfig, stage: str) -> Path:
    """Isolated per-stage output directory, named by stage and config hash."""
    return Path(root) / f"{stage}-{cfg.hash()}"


# -- stage implementations ------------------------------------------------------


def stage_gen_data(cfg: PipelineConfig, root: Path) -> dict:
    corpus = cp.gen_corpus(cfg.data.num_speakers, cfg.data.utterances_per_speaker,
                           cfg.data.frames_per_utterance, cfg.data.feature_dim,
                           seed=cfg.train.seed)
    scale, offset = cp.default_domain_shift(cfg.data.domain_shift_seed)
    source = [u for u in corpus.utterances if u.speaker_id == 0]
    target = cp.gen_target_domain(source, scale, offset, seed=cfg.train.seed,
                                  pose_amplitude=cfg.data.pose_amplitude)
    train_frames = np.concatenate(
        [u.landmarks.frames for u in target.utterances if u.split == "train"], axis=0)
    stats = geo.fit_normalization(geo.LandmarkSequence(train_frames))
    cp.save_corpus(stage_dir(root, cfg, "gen-data"), corpus, target, stats)
    return {"utterances": len(corpus.utterances),
            "target_utterances": len(target.utterances)}


def stage_train_syncexpert(cfg: PipelineConfig, root: Path) -> dict:
    utts, _ = cp.load_corpus(stage_dir(root, cfg, "gen-data"))
    train = [u for u in utts if u.split == "train"]
    model, history = train_sync_expert(train, cfg.syncexpert,
                                       steps=cfg.train.sync_steps,
                                       batch=cfg.train.sync_batch,
                                       lr=cfg.train.sync_lr, seed=cfg.train.seed)
    out = stage_dir(root, cfg, "train-syncexpert")
    out.mkdir(exist_ok=True)
    model.save(out / "model.ckpt")
    reporting.save_loss_curve(out / "loss.png", history, "sync expert training")
    reporting.save_history_csv(out / "loss.csv", history)
    val = [u for u in utts if u.split == "val"]
    acc = evaluate_accuracy(model, val or train, 400,
                            np.random.default_rng([cfg.train.seed, 3]))
    return {"val_accuracy": acc}


def stage_train_vae(cfg: PipelineConfig, root: Path) -> dict:
    utts, _ = cp.load_corpus(stage_dir(root, cfg, "gen-data"))
    train = [u for u in utts if u.split == "train"]
    stats = cp.load_norm_stats(stage_dir(root, cfg, "gen-data"))
    sync = SyncExpert.load(stage_dir(root, cfg, "train-syncexpert") / "model.ckpt")
    model, opt, history = train_motion_vae(train, stats, sync, cfg.vae,
                                           steps=cfg.train.vae_steps,
                                           batch=cfg.train.vae_batch,
                                           crop=cfg.train.vae_crop,
                                           lr=cfg.train.vae_lr, seed=cfg.train.seed)
    out = stage_dir(root, cfg, "train-vae")
    out.mkdir(exist_ok=True)
    model.save(out / "model.ckpt", optimizer=opt)
    reporting.save_loss_curve(out / "loss.png", history, "motion generator training")
    reporting.save_history_csv(out / "loss.csv", history)
    return {"final_loss": history[-1]["total"]}


def stage_train_postnet(cfg: PipelineConfig, root: Path) -> dict:
    utts, _ = cp.load_corpus(stage_dir(root, cfg, "gen-data"))
    train = [u for u in utts if u.split == "train"]
    stats = cp.load_norm_stats(stage_dir(root, cfg, "gen-data"))
    sync = SyncExpert.load(stage_dir(root, cfg, "train-syncexpert") / "model.ckpt")
    vae = MotionVAE.load(stage_dir(root, cfg, "train-vae") / "model.ckpt")
    target = cp.load_target(stage_dir(root, cfg, "gen-data"))
    tgt_train = [u for u in target.utterances if u.split == "train"]
    data = pnet.prepare_adaptation_data(vae, train, tgt_train, stats,
                                        temperature=cfg.train.temperature,
                                        seed=cfg.train.seed)
    postnet, disc, history = pnet.train_adaptation(
        data, sync, cfg.postnet, steps=cfg.train.postnet_steps,
        batch=cfg.train.postnet_batch, crop=cfg.train.postnet_crop,
        lr=cfg.train.postnet_lr, seed=cfg.train.seed)
    out = stage_dir(root, cfg, "train-postnet")
    out.mkdir(exist_ok=True)
    postnet.save(out / "postnet.ckpt")
    disc.save(out / "discriminator.ckpt")
    reporting.save_loss_curve(out / "loss.png", history, "domain adaptation")
    reporting.save_history_csv(out / "loss.csv", history)
    acc = pnet.discriminator_accuracy(disc, postnet, data.target_pred,
                                      data.target_gt, seed=cfg.train.seed)
    return {"discriminator_accuracy": acc}


def _nerf_dataset(cfg: PipelineConfig, root: Path, split: str):
    target = cp.load_target(stage_dir(root, cfg, "gen-data"))
    stats = cp.load_norm_stats(stage_dir(root, cfg, "gen-data"))
    sel = [i for i, u in enumerate(target.utterances) if u.split == split]
    frames = np.concatenate([target.frames[i] for i in sel], axis=0)
    masks = np.concatenate([target.masks[i] for i in sel], axis=0)
    poses = np.concatenate([target.poses[i] for i in sel], axis=0)
    conds = np.concatenate(
        [nerf.build_conditions((target.utterances[i].landmarks.frames - stats.mean)
                               / stats.std) for i in sel], axis=0)
    ds = nerf.NeRFDataset(frames, masks, poses, conds, target.scene.camera,
                          np.asarray(target.scene.background))
    return ds, target, stats


def stage_train_nerf(cfg: PipelineConfig, root: Path) -> dict:
    ds, _, _ = _nerf_dataset(cfg, root, "train")
    out = stage_dir(root, cfg, "train-nerf")
    out.mkdir(exist_ok=True)
    indices = list(range(ds.frames.shape[0]))
    head = nerf.make_head_field(cfg.nerf, seed=cfg.train.seed)
    h_hist = nerf.train_nerf("head", head, ds, indices,
                             steps=cfg.train.nerf_head_steps,
                             rays_per_batch=cfg.train.nerf_rays,
                             lr=cfg.train.nerf_lr, seed=cfg.train.seed)
    head.save(out / "head.ckpt")
    reporting.save_loss_curve(out / "head_loss.png", h_hist, "head field training")
    reporting.save_history_csv(out / "head_loss.csv", h_hist)

    stride = max(1, len(indices) // cfg.train.nerf_torso_frames)
    torso_frames = indices[::stride][:cfg.train.nerf_torso_frames]
    torso = nerf.make_torso_field(cfg.nerf, seed=cfg.train.seed)
    t_hist = nerf.train_nerf("torso", torso, ds, torso_frames,
                             steps=cfg.train.nerf_torso_steps,
                             rays_per_batch=cfg.train.nerf_rays,
                             lr=cfg.train.nerf_lr, seed=cfg.train.seed,
                             head_field=head)
    torso.save(out / "torso.ckpt")
    reporting.save_loss_curve(out / "torso_loss.png", t_hist, "torso field training")
    reporting.save_history_csv(out / "torso_loss.csv", t_hist)
    return {"head_final_loss": h_hist[-1], "torso_final_loss": t_hist[-1]}


def stage_infer_motion(cfg: PipelineConfig, root: Path) -> dict:
    stats = cp.load_norm_stats(stage_dir(root, cfg, "gen-data"))
    vae = MotionVAE.load(stage_dir(root, cfg, "train-vae") / "model.ckpt")
    postnet = pnet.PostNet.load(stage_dir(root, cfg, "train-postnet") / "postnet.ckpt")
    target = cp.load_target(stage_dir(root, cfg, "gen-data"))
    out = stage_dir(root, cfg, "infer-motion")
    out.mkdir(exist_ok=True)
    produced = []
    for u in target.utterances:
        if u.split != "val":
            continue
        raw = vae.predict_normalized(u.audio, cfg.train.temperature,
                                     seed=cfg.train.seed)
        refined = postnet.refine(raw)
        denorm = refined * stats.std + stats.mean
        smoothed = geo.smooth_array(denorm, sigma=cfg.vae.smooth_sigma)
        seq = geo.LandmarkSequence(smoothed)
        geo.save_landmarks(out / f"{u.utt_id}.lms", seq)
        geo.export_landmarks_csv(out / f"{u.utt_id}.csv", seq)
        reporting.save_landmark_figure(out / f"{u.utt_id}.png", seq.frames,
                                       u.landmarks.frames)
        produced.append(u.utt_id)
    if not produced:
        raise PipelineError("no held-out target utterances to infer")
    return {"utterances": produced}


def stage_render(cfg: PipelineConfig, root: Path) -> dict:
    ds, target, stats = _nerf_dataset(cfg, root, "val")
    head = nerf.RadianceField.load(stage_dir(root, cfg, "train-nerf") / "head.ckpt")
    torso = nerf.RadianceField.load(stage_dir(root, cfg, "train-nerf") / "torso.ckpt")
    out = stage_dir(root, cfg, "render")
    out.mkdir(exist_ok=True)
    val_ids = [u.utt_id for u in target.utterances if u.split == "val"]
    pred_lms = geo.load_landmarks(stage_dir(root, cfg, "infer-motion") / f"{val_ids[0]}.lms")
    pred_conds = nerf.build_conditions((pred_lms.frames - stats.mean) / stats.std)
    n = min(cfg.train.render_frames, ds.frames.shape[0])
    recon, pred = [], []
    for t in range(n):
        img_r = nerf.render_frame(head, torso, ds.conditions[t], ds.poses[t],
                                  ds.camera, ds.background)
        img_p = nerf.render_frame(head, torso, pred_conds[t], ds.poses[t],
                                  ds.camera, ds.background)
        recon.append(img_r)
        pred.append(img_p)
        reporting.save_image(out / f"recon_{t:05d}.png", img_r)
        reporting.save_image(out / f"pred_{t:05d}.png", img_p)
    np.save(out / "recon.npy", np.stack(recon))
    np.save(out / "pred.npy", np.stack(pred))
    np.save(out / "reference.npy", ds.frames[:n])
    reporting.save_comparison_figure(
        out / "comparison.png",
        [("reference", ds.frames[0]), ("landmark recon", recon[0]),
         ("full pipeline", pred[0])])
    return {"frames": n}


def stage_metrics(cfg: PipelineConfig, root: Path) -> dict:
    from .syncexpert import SyncExpert
    stats = cp.load_norm_stats(stage_dir(root, cfg, "gen-data"))
    sync = SyncExpert.load(stage_dir(root, cfg, "train-syncexpert") / "model.ckpt")
    target = cp.load_target(stage_dir(root, cfg, "gen-data"))
    val = [u for u in target.utterances if u.split == "val"]
    u = val[0]
    pred = geo.load_landmarks(stage_dir(root, cfg, "infer-motion") / f"{u.utt_id}.lms")
    report = {
        "landmark_distance": mx.landmark_distance(pred.frames, u.landmarks.frames),
        "landmark_mse": mx.landmark_mse(pred.frames, u.landmarks.frames),
        "sync_confidence_pred": mx.sync_confidence(sync, pred.frames, u.audio),
        "sync_confidence_reference": mx.sync_confidence(sync, u.landmarks.frames,
                                                        u.audio),
    }
    recon = np.load(stage_dir(root, cfg, "render") / "recon.npy")
    predf = np.load(stage_dir(root, cfg, "render") / "pred.npy")
    ref = np.load(stage_dir(root, cfg, "render") / "reference.npy")
    report["psnr_recon"] = mx.serialize_metric(mx.mean_psnr(recon, ref))
    report["psnr_pipeline"] = mx.serialize_metric(mx.mean_psnr(predf, ref))
    paths = reporting.save_metrics_report(stage_dir(root, cfg, "metrics"), report)
    return {"metrics": report, "outputs": paths}


_STAGE_FNS = {
    "gen-data": stage_gen_data,
    "train-syncexpert": stage_train_syncexpert,
    "train-vae": stage_train_vae,
    "train-postnet": stage_train_postnet,
    "train-nerf": stage_train_nerf,
    "infer-motion": stage_infer_motion,
    "render": stage_render,
    "metrics": stage_metrics,
}

_DEPS = {stage: STAGES[:i] for i, stage in enumerate(STAGES)}


def run_stage(stage: str, cfg: PipelineConfig, root, log=print) -> dict:
    if stage not in _STAGE_FNS:
        raise PipelineError(f"unknown stage {stage!r}; stages: {', '.join(STAGES)}")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = _load_manifest(root)
    if manifest["config_hash"] not in (None, cfg.hash()):
        raise PipelineError(
            f"output directory {root} was produced with a different configuration "
            f"({manifest['config_hash']} vs {cfg.hash()})")
    for dep in _DEPS[stage]:
        _require(manifest, dep)
    t0 = time.time()
    if log:
        log(f"[{stage}] running")
    result = _STAGE_FNS[stage](cfg, root)
    elapsed = time.time() - t0
    manifest["config_hash"] = cfg.hash()
    manifest["seed"] = cfg.train.seed
    manifest["stages"][stage] = {"status": "done", "elapsed_s": round(elapsed, 3),
                                 "result": result}
    _save_manifest(root, manifest)
    if log:
        log(f"[{stage}] done in {elapsed:.1f}s: {result}")
    return result


def run_all(cfg: PipelineConfig, root, from_stage: str | None = None, log=print):
    """Run every stage in order; with from_stage, resume from that stage."""
    start = STAGES.index(from_stage) if from_stage else 0
    results = {}
    for stage in STAGES[start:]:
        results[stage] = run_stage(stage, cfg, root, log=log)
    return results
