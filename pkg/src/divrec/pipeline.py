"""Stage orchestration with a hash-checked manifest.

Stages run in the order ``ingest -> pretrain-mf -> pretrain-actor -> train ->
eval-offline / eval-online``. Each one reads the artifacts of its
prerequisites (verified against the sha256 recorded in ``manifest.json``),
writes its own artifacts atomically and records their hashes.

Seeds: stage ``s`` draws from ``SeedSequence([root_seed, crc32(s)])``, so a
stage's randomness depends only on the root seed and the stage name.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import pathlib
import time

import numpy as np

from . import data, mf
from .agent import DDPGAgent, DDPGConfig, GaussianNoise, NetConfig, ReplayBuffer, pretrain_actor, \
    rollout_train_log
from .config import RunConfig
from .sim_eval import (EpisodeConfig, aggregate, curves_csv, evaluate_offline, evaluate_online,
                       make_simulated_users, mean_of, offline_topk_episode, records_csv)

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
MANIFEST_FORMAT = "divrec-manifest"
MANIFEST_VERSION = 1

STAGES = ("ingest", "pretrain-mf", "pretrain-actor", "train", "eval-offline", "eval-online")
REQUIRES = {
    "ingest": (),
    "pretrain-mf": ("ingest",),
    "pretrain-actor": ("ingest", "pretrain-mf"),
    "train": ("ingest", "pretrain-mf", "pretrain-actor"),
    "eval-offline": ("ingest", "pretrain-mf", "train"),
    "eval-online": ("ingest", "pretrain-mf", "train"),
}
ARTIFACTS = {
    "ingest": ("dataset.snapshot",),
    "pretrain-mf": ("bprmf.ckpt", "lmf.ckpt"),
    "pretrain-actor": ("pretrained.ckpt", "pretrain_log.csv"),
    "train": ("agent.ckpt", "train_log.csv"),
    "eval-offline": ("eval-offline_records.csv", "eval-offline_curves.csv"),
    "eval-online": ("eval-online_records.csv", "eval-online_curves.csv"),
}
TRAIN_LOG_FIELDS = ("step", "critic_loss", "actor_objective", "mean_reward", "sigma")


class DependencyError(RuntimeError):
    def __init__(self, stage: str, problems: dict):
        self.stage = stage
        self.missing = list(problems)
        detail = "; ".join(f"{dep}: {why}" for dep, why in problems.items())
        super().__init__(f"stage '{stage}' needs the output of "
                         f"{', '.join(repr(d) for d in self.missing)} ({detail}); "
                         f"run `divrec --stage {self.missing[0]}` first")


@dataclasses.dataclass
class StageResult:
    stage: str
    artifacts: dict
    info: dict
    numerical_flags: int = 0


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def atomic_write(path: pathlib.Path, payload) -> None:
    tmp = path.with_name(path.name + ".tmp")
    if isinstance(payload, str):
        tmp.write_text(payload, encoding="utf-8", newline="")
    else:
        tmp.write_bytes(payload)
    os.replace(tmp, path)


def read_manifest(out: pathlib.Path) -> dict:
    path = pathlib.Path(out) / MANIFEST
    if not path.exists():
        return {"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION, "stages": {}}
    manifest = json.loads(path.read_text(encoding="utf-8"))
    if manifest.get("format") != MANIFEST_FORMAT or manifest.get("version") != MANIFEST_VERSION:
        raise ValueError(f"{path}: unsupported manifest")
    return manifest


def check_dependencies(stage: str, out: pathlib.Path, manifest: dict) -> dict:
    """Verify prerequisite artifacts; returns ``{file: sha256}`` of everything consumed."""
    inputs, problems = {}, {}
    for dep in REQUIRES[stage]:
        entry = manifest["stages"].get(dep)
        if entry is None:
            problems[dep] = "no manifest entry"
            continue
        for name, digest in entry["artifacts"].items():
            path = out / name
            if not path.exists():
                problems[dep] = f"{name} is missing"
            elif sha256_file(path) != digest:
                problems[dep] = f"{name} does not match its recorded hash"
            else:
                inputs[name] = digest
    if problems:
        raise DependencyError(stage, problems)
    return inputs


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def _seeds(cfg: RunConfig, stage: str, n: int) -> list[int]:
    ss = np.random.SeedSequence(cfg.stage_seed(stage))
    return [int(s) for s in ss.generate_state(n, dtype=np.uint32)]


def _mf_config(cfg: RunConfig, seed: int) -> mf.MFConfig:
    return mf.MFConfig(d=cfg.d, learning_rate=cfg.mf_learning_rate,
                       regularization=cfg.mf_regularization, epochs=cfg.mf_epochs, seed=seed,
                       batch_size=cfg.mf_batch_size, use_bias=cfg.lmf_bias)


def net_config(cfg: RunConfig) -> NetConfig:
    return NetConfig(d=cfg.d, ell=cfg.ell)


def ddpg_config(cfg: RunConfig) -> DDPGConfig:
    return DDPGConfig(gamma=cfg.gamma, tau=cfg.tau, actor_lr=cfg.actor_lr, critic_lr=cfg.critic_lr,
                      batch_size=cfg.batch_size, buffer_capacity=cfg.buffer_capacity,
                      sigma0=cfg.sigma0, sigma_decay=cfg.sigma_decay, sigma_floor=cfg.sigma_floor)


def episode_config(cfg: RunConfig, T: int, seed: int, selector: str = "dpp",
                   beta: float | None = None) -> EpisodeConfig:
    return EpisodeConfig(k=cfg.k, T=T, beta=cfg.beta if beta is None else beta, seed=seed,
                         rho=cfg.rho, selector=selector, similarity=cfg.similarity,
                         history_init=cfg.history_init)


def run_id(cfg: RunConfig) -> str:
    return f"{cfg.dataset}-seed{cfg.seed}-beta{cfg.beta!r}"


# ---------------------------------------------------------------------------
# loaders shared by later stages


def load_snapshot(out) -> data.Dataset:
    return data.read_snapshot(pathlib.Path(out) / "dataset.snapshot")


def load_models(out):
    out = pathlib.Path(out)
    bpr = mf.load_factor_model(out / "bprmf.ckpt")
    lmf = mf.load_factor_model(out / "lmf.ckpt")
    return bpr, lmf, mf.extract_features(bpr)


def load_agent(out, features: mf.NormalizedFeatures, cfg: RunConfig,
               name: str = "agent.ckpt") -> DDPGAgent:
    return DDPGAgent.load(pathlib.Path(out) / name, features.item_features, ddpg_config(cfg))


# ---------------------------------------------------------------------------
# stages


def stage_ingest(cfg: RunConfig, out: pathlib.Path) -> StageResult:
    t0 = time.perf_counter()
    ds = data.load_dataset(cfg.data_path, cfg.dataset, cfg.split_fraction,
                           cfg.min_train_positives, cfg.drop_cold_test_items)
    atomic_write(out / "dataset.snapshot", data.dumps_snapshot(ds))
    stats = ds.stats()
    stats["seconds"] = time.perf_counter() - t0
    log.info("ingest: %d users, %d items, %d interactions", stats["users"], stats["items"],
             stats["interactions"])
    return StageResult("ingest", {}, {"stats": stats, "source": str(cfg.data_path)})


def stage_pretrain_mf(cfg: RunConfig, out: pathlib.Path) -> StageResult:
    ds = load_snapshot(out)
    s_bpr, s_lmf = _seeds(cfg, "pretrain-mf", 2)
    bpr = mf.train_bprmf(ds.split, _mf_config(cfg, s_bpr))
    lmf = mf.train_lmf(ds.split, _mf_config(cfg, s_lmf))
    mf.save_factor_model(bpr, out / "bprmf.ckpt")
    mf.save_factor_model(lmf, out / "lmf.ckpt")
    return StageResult("pretrain-mf", {}, {"bprmf_seed": s_bpr, "lmf_seed": s_lmf,
                                           "bprmf_final_objective": bpr.history[-1] if bpr.history else None,
                                           "lmf_final_objective": lmf.history[-1] if lmf.history else None})


def stage_pretrain_actor(cfg: RunConfig, out: pathlib.Path) -> StageResult:
    ds = load_snapshot(out)
    _, _, feats = load_models(out)
    s_init, s_fit, s_roll = _seeds(cfg, "pretrain-actor", 3)
    agent = DDPGAgent(feats.item_features, net_config(cfg), ddpg_config(cfg), seed=s_init)
    history = pretrain_actor(agent, ds.split, feats.user_features, epochs=cfg.pretrain_epochs,
                             batch_size=cfg.batch_size, seed=s_fit)
    rows = [("actor", epoch, loss) for epoch, loss in enumerate(history)]

    rng = np.random.default_rng(s_roll)
    buffer = ReplayBuffer(cfg.buffer_capacity, cfg.d, cfg.ell, rng)
    noise = GaussianNoise(cfg.sigma0, cfg.sigma_decay, cfg.sigma_floor, rng)
    rollout_train_log(agent, ds.split, feats.user_features, buffer,
                      episodes=cfg.critic_warmup_episodes, horizon=cfg.train_horizon, k=cfg.k,
                      beta=cfg.beta, noise=noise, rng=rng, learn="critic",
                      log=lambda e: rows.append(("critic", e["step"], e["critic_loss"])))
    agent.save(out / "pretrained.ckpt", {"seed": s_init})
    atomic_write(out / "pretrain_log.csv", _csv(("phase", "step", "loss"), rows))
    return StageResult("pretrain-actor", {},
                       {"actor_loss": [history[0], history[-1]], "critic_steps":
                        sum(1 for r in rows if r[0] == "critic")}, agent.numerical_flags)


def stage_train(cfg: RunConfig, out: pathlib.Path) -> StageResult:
    ds = load_snapshot(out)
    _, _, feats = load_models(out)
    agent = load_agent(out, feats, cfg, "pretrained.ckpt")
    (s_roll,) = _seeds(cfg, "train", 1)
    rng = np.random.default_rng(s_roll)
    buffer = ReplayBuffer(cfg.buffer_capacity, cfg.d, cfg.ell, rng)
    noise = GaussianNoise(cfg.sigma0, cfg.sigma_decay, cfg.sigma_floor, rng)
    rows = []
    totals = rollout_train_log(agent, ds.split, feats.user_features, buffer,
                               episodes=cfg.train_episodes, horizon=cfg.train_horizon, k=cfg.k,
                               beta=cfg.beta, noise=noise, rng=rng, learn="both",
                               log=lambda e: rows.append([e[f] for f in TRAIN_LOG_FIELDS]))
    agent.save(out / "agent.ckpt", {"seed": s_roll})
    atomic_write(out / "train_log.csv", _csv(TRAIN_LOG_FIELDS, rows))
    return StageResult("train", {}, {"episodes": len(totals), "steps": len(rows),
                                     "mean_episode_reward": float(np.mean(totals)) if totals else None,
                                     "flags": dict(agent.flags)}, agent.numerical_flags)


def offline_runs(cfg: RunConfig, ds, bpr, lmf, feats, agent, T: int | None = None,
                 betas=()) -> dict:
    """Offline runs keyed by mode.

    ``d2rl`` uses the configured beta; each entry of ``betas`` adds a
    ``d2rl-beta<b>`` sweep run. Relevance, BPRMF and LMF top-k follow.
    """
    T = cfg.offline_epochs if T is None else T
    seed = cfg.stage_seed("eval-offline")
    users = [u for u, items in enumerate(ds.split.test.items_by_user()) if len(items)]
    runs = {"d2rl": evaluate_offline(agent, ds, feats, episode_config(cfg, T, seed), users)}
    for beta in betas:
        runs[f"d2rl-beta{beta!r}"] = evaluate_offline(agent, ds, feats,
                                                      episode_config(cfg, T, seed, beta=beta), users)
    runs["relevance"] = evaluate_offline(agent, ds, feats,
                                         episode_config(cfg, T, seed, "relevance"), users)
    ecfg = episode_config(cfg, T, seed)
    for name, model in (("bprmf", bpr), ("lmf", lmf)):
        runs[name] = {u: recs for u in users if (recs := offline_topk_episode(u, model, ds, ecfg))}
    return runs


def stage_eval_offline(cfg: RunConfig, out: pathlib.Path) -> StageResult:
    ds = load_snapshot(out)
    bpr, lmf, feats = load_models(out)
    agent = load_agent(out, feats, cfg)
    runs = offline_runs(cfg, ds, bpr, lmf, feats, agent, betas=cfg.beta_grid)
    rid = run_id(cfg)
    atomic_write(out / "eval-offline_records.csv", records_csv(rid, runs))
    atomic_write(out / "eval-offline_curves.csv", curves_csv(rid, runs))
    summary = {mode: {"users": len(r), "precision": mean_of(r, "precision"),
                      "diversity": mean_of(r, "diversity")} for mode, r in runs.items()}
    return StageResult("eval-offline", {}, {"run_id": rid, "T": cfg.offline_epochs, "k": cfg.k,
                                            "beta": cfg.beta, "summary": summary})


def online_runs(cfg: RunConfig, ds, lmf, feats, out, T: int | None = None) -> tuple[dict, dict]:
    """D2RL and the relevance baseline, each from the trained checkpoint, same simulator seed."""
    T = cfg.online_epochs if T is None else T
    seed = cfg.stage_seed("eval-online")
    users = list(range(min(cfg.online_users, ds.split.user_count)))
    runs, flags = {}, {}
    for mode, selector in (("d2rl", "dpp"), ("relevance", "relevance")):
        agent = load_agent(out, feats, cfg)
        ecfg = episode_config(cfg, T, seed, selector)
        runs[mode] = evaluate_online(agent, ds, feats, lmf, ecfg, users, schedule=cfg.schedule)
        flags[mode] = agent.numerical_flags
    return runs, flags


def stage_eval_online(cfg: RunConfig, out: pathlib.Path) -> StageResult:
    ds = load_snapshot(out)
    _, lmf, feats = load_models(out)
    runs, flags = online_runs(cfg, ds, lmf, feats, out)
    rid = run_id(cfg)
    atomic_write(out / "eval-online_records.csv", records_csv(rid, runs))
    atomic_write(out / "eval-online_curves.csv", curves_csv(rid, runs))
    seed = cfg.stage_seed("eval-online")
    sims = make_simulated_users(list(runs["d2rl"]), ds, lmf, feats,
                                episode_config(cfg, cfg.online_epochs, seed))
    summary = {}
    for mode, r in runs.items():
        curve = aggregate(r)
        q = max(1, len(curve) // 4)
        summary[mode] = {
            "diversity": mean_of(r, "diversity"), "precision": mean_of(r, "precision"),
            "reward_first_quartile": float(np.mean([c["mean_reward"] for c in curve[:q]])),
            "reward_last_quartile": float(np.mean([c["mean_reward"] for c in curve[-q:]])),
        }
    info = {"run_id": rid, "simulator_seed": seed, "rho": cfg.rho, "T": cfg.online_epochs,
            "k": cfg.k, "beta": cfg.beta, "deltas": [s.delta for s in sims],
            "summary": summary, "flags": flags}
    return StageResult("eval-online", {}, info, sum(flags.values()))


RUNNERS = {
    "ingest": stage_ingest,
    "pretrain-mf": stage_pretrain_mf,
    "pretrain-actor": stage_pretrain_actor,
    "train": stage_train,
    "eval-offline": stage_eval_offline,
    "eval-online": stage_eval_online,
}


def run_stage(stage: str, cfg: RunConfig) -> StageResult:
    """Run one stage and record it in the manifest.

    Raises :class:`DependencyError` when a prerequisite is missing or its
    artifacts changed since they were recorded.
    """
    if stage not in RUNNERS:
        raise ValueError(f"unknown stage {stage!r}; choose from {', '.join(STAGES)}")
    out = pathlib.Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = read_manifest(out)
    inputs = check_dependencies(stage, out, manifest)
    for dep in REQUIRES[stage]:
        if manifest["stages"][dep].get("config_digest") != cfg.digest():
            log.warning("stage %s was produced under a different configuration", dep)

    t0 = time.perf_counter()
    result = RUNNERS[stage](cfg, out)
    result.artifacts = {name: sha256_file(out / name) for name in ARTIFACTS[stage]}
    manifest["stages"][stage] = {
        "config": cfg.to_dict(),
        "config_digest": cfg.digest(),
        "seed": cfg.stage_seed(stage),
        "inputs": inputs,
        "artifacts": result.artifacts,
        "numerical_flags": result.numerical_flags,
        "seconds": time.perf_counter() - t0,
        "info": result.info,
    }
    atomic_write(out / MANIFEST, json.dumps(manifest, indent=2, sort_keys=True, default=_json) + "\n")
    return result


def _json(value):
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"not JSON serializable: {type(value).__name__}")
