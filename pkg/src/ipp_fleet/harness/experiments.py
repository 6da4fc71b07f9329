"""Episode runner, evaluation sweeps, the local-vs-global GP benchmark and rendering."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from ..baselines import ParticleSwarm, Planner, Proposal, make_planner
from ..env import FleetEnv, min_separation
from ..gridmap import NULL_ACTION, NavMap
from ..learner.consensus import safe_consensus
from ..learner.ddql import EVAL_STREAM, episode_seed, q_values
from ..learner.network import QNetwork, load_checkpoint
from ..localgp import LocalGaussianProcesses, single_layout
from ..metrics import UndefinedMetric, detect_peaks, nsor, peak_errors, sor
from .config import ExperimentConfig

PLANNER_STREAM = 0x9A7
BENCH_STREAM = 0xBE7C
CHECKPOINTS = (17, 33, 50)   # ~33%, 66%, 100% of the 50-step budget


def checkpoint_steps(budget: int):
    if budget == 50:
        return CHECKPOINTS
    return tuple(sorted({max(1, round(budget * f)) for f in (1 / 3, 2 / 3, 1.0)}))


def fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "NA"
    return f"{float(x):.10g}"


class QPolicy(Planner):
    """Greedy shared-network policy; the joint action comes from SafeConsensus."""

    name = "ddql"

    def __init__(self, net: QNetwork):
        self.net = net

    def propose(self, env):
        obs = env.observations()
        expected = (self.net.spec.height, self.net.spec.width)
        if obs.shape[-2:] != expected:
            raise ValueError(f"checkpoint expects a {expected} map, environment is {obs.shape[-2:]}")
        return Proposal(q_values(self.net, obs), np.zeros(env.n_agents, dtype=bool))


def build_planner(cfg: ExperimentConfig) -> Planner:
    if cfg.planner == "ddql":
        if not cfg.checkpoint:
            raise FileNotFoundError("planner ddql needs --checkpoint")
        if not Path(cfg.checkpoint).is_file():
            raise FileNotFoundError(f"checkpoint not found: {cfg.checkpoint}")
        return QPolicy(load_checkpoint(cfg.checkpoint))
    if cfg.planner == "pso":
        return ParticleSwarm(cfg.pso_inertia, cfg.pso_weights)
    return make_planner(cfg.planner)


# -- episodes ----------------------------------------------------------------

@dataclass
class StepMetrics:
    step: int
    sor: float
    nsor: float
    avg_peak: float
    max_peak: float
    mean_sigma: float


@dataclass
class EpisodeRecord:
    seed: int
    episode: int
    metrics: List[StepMetrics] = field(default_factory=list)
    min_separation: float = math.inf
    null_actions: int = 0
    paths: List[List[tuple]] = field(default_factory=list)


def step_metrics(env: FleetEnv, step: int, peaks) -> StepMetrics:
    mu, gt = env.state.model.fused_mean_, env.state.gt
    try:
        avg, mx = peak_errors(mu, gt, peaks)
    except UndefinedMetric:
        avg = mx = math.nan
    try:
        ns = nsor(mu, gt)
    except UndefinedMetric:
        ns = math.nan
    return StepMetrics(step, sor(mu, gt), ns, avg, mx, float(env.state.model.fused_std_.mean()))


def run_episode(env: FleetEnv, planner: Planner, env_seed, rng: np.random.Generator,
                record_steps=CHECKPOINTS, on_step: Optional[Callable] = None,
                seed: int = 0, episode: int = 0) -> EpisodeRecord:
    env.reset(env_seed)
    planner.reset(env, rng)
    rec = EpisodeRecord(seed, episode, paths=[[tuple(map(int, p))] for p in env.state.positions])
    rec.min_separation = min_separation(env.navmap, env.state.positions)
    peaks = detect_peaks(env.state.gt)
    done = False
    while not done:
        prop = planner.propose(env)
        res = safe_consensus(prop.scores, env.state.positions, env.navmap, env.cfg.d_safety,
                             stay=prop.stay)
        _, rewards, done, info = env.step(res.actions)
        planner.update(env, res)
        t = env.state.step_count
        rec.null_actions += int((res.actions == NULL_ACTION).sum())
        rec.min_separation = min(rec.min_separation, min_separation(env.navmap, env.state.positions))
        for j, p in enumerate(env.state.positions):
            rec.paths[j].append(tuple(map(int, p)))
        if t in record_steps:
            rec.metrics.append(step_metrics(env, t, peaks))
        if on_step is not None:
            on_step(t, res.actions, rewards, info)
    return rec


def _rng(seed: int, episode: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(episode), PLANNER_STREAM]))


def oracle_check(env: FleetEnv, m: StepMetrics) -> None:
    """Brute-force recomputation of a logged metric row; raises on any mismatch."""
    mu, gt = env.state.model.fused_mean_, env.state.gt
    s = 0.0
    for a, b in zip(mu.tolist(), gt.values.tolist()):
        s += abs(a - b)
    if not math.isclose(s, m.sor, rel_tol=1e-9, abs_tol=1e-12):
        raise AssertionError(f"oracle SoR {s} != logged {m.sor}")
    mass = sum(gt.values.tolist())
    if mass > 0 and not math.isclose(s / mass, m.nsor, rel_tol=1e-9):
        raise AssertionError(f"oracle nSoR {s / mass} != logged {m.nsor}")


# -- evaluation --------------------------------------------------------------

SUMMARY_FIELDS = ["seed", "episode", "planner", "agents", "gt", "reward"]
METRIC_FIELDS = ["seed", "episode", "step", "planner", "agents", "sor", "nsor", "avg_peak_error",
                 "max_peak_error", "mean_sigma"]
TRACE_FIELDS = ["seed", "episode", "step", "agent", "row", "col", "action", "reward", "sor"]


def run_eval(cfg: ExperimentConfig, out_dir=None) -> Dict[str, object]:
    """Run ``cfg.episodes`` episodes for every seed and write summary, metric and trace CSVs."""
    navmap = cfg.navmap()
    planner = build_planner(cfg)
    env = FleetEnv(cfg.env_config(navmap))
    steps = checkpoint_steps(cfg.budget)
    out = Path(out_dir or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    summary_cols = SUMMARY_FIELDS + [f"{k}_{s}" for s in steps for k in ("sor", "nsor")] + [
        "avg_peak_error", "max_peak_error", "mean_sigma", "min_separation_m", "null_actions"]
    records: List[EpisodeRecord] = []
    files = {"summary": out / "eval_summary.csv", "metrics": out / "eval_metrics.csv",
             "trace": out / "eval_trace.csv"}
    with open(files["summary"], "w", newline="") as fs, open(files["metrics"], "w", newline="") as fm, \
            open(files["trace"], "w", newline="") as ft:
        ws, wm, wt = (csv.writer(f, lineterminator="\n") for f in (fs, fm, ft))
        ws.writerow(summary_cols)
        wm.writerow(METRIC_FIELDS)
        wt.writerow(TRACE_FIELDS)
        for seed in cfg.seeds:
            for ep in range(cfg.episodes):
                def trace(t, actions, rewards, info, seed=seed, ep=ep):
                    if not cfg.traces:
                        return
                    for j, p in enumerate(env.state.positions):
                        wt.writerow([seed, ep, t, j, int(p[0]), int(p[1]), int(actions[j]),
                                     fmt(rewards[j]), fmt(info["sor"])])

                rec = run_episode(env, planner, episode_seed(EVAL_STREAM, seed, ep),
                                  _rng(seed, ep), steps, trace, seed, ep)
                records.append(rec)
                if cfg.oracle:
                    oracle_check(env, rec.metrics[-1])
                head = [seed, ep, planner.name, env.n_agents, cfg.gt, cfg.reward]
                for m in rec.metrics:
                    wm.writerow([seed, ep, m.step, planner.name, env.n_agents] + [
                        fmt(v) for v in (m.sor, m.nsor, m.avg_peak, m.max_peak, m.mean_sigma)])
                last = rec.metrics[-1]
                ws.writerow(head + [fmt(v) for m in rec.metrics for v in (m.sor, m.nsor)] + [
                    fmt(last.avg_peak), fmt(last.max_peak), fmt(last.mean_sigma),
                    fmt(rec.min_separation), rec.null_actions])
    (out / "eval_config.txt").write_text(_config_text(cfg, planner))
    return {"records": records, "files": files}


def _config_text(cfg, planner) -> str:
    from .config import dump_config
    extra = "".join(f"# {k} = {v}\n" for k, v in planner.describe().items())
    return dump_config(cfg) + extra


def final_sors(records: List[EpisodeRecord]) -> np.ndarray:
    return np.array([r.metrics[-1].sor for r in records])


# -- local vs global benchmark -----------------------------------------------

BENCH_FIELDS = ["mission", "step", "n_samples", "sor_local", "sor_global", "nsor_local",
                "nsor_global"]
TIMING_FIELDS = ["mission", "step", "n_samples", "fit_time_local_s", "fit_time_global_s"]


@dataclass
class BenchRow:
    mission: int
    step: int
    n_samples: int
    sor_local: float
    sor_global: float
    nsor_local: float
    nsor_global: float
    time_local: float
    time_global: float


def global_model(env_cfg) -> LocalGaussianProcesses:
    nm = env_cfg.navmap
    return LocalGaussianProcesses(nm, centroids=single_layout(nm).centroids, radius=math.inf,
                                  sigma0=env_cfg.sigma0, noise=env_cfg.noise,
                                  lengthscale_bounds=env_cfg.lengthscale_bounds)


def gp_bench(cfg: ExperimentConfig, out_dir=None, missions: Optional[int] = None) -> List[BenchRow]:
    """Feed identical RWPP sample streams to a local-GP bank and one global GP."""
    env_cfg = cfg.env_config(agents=cfg.bench_agents, model="local")
    env = FleetEnv(env_cfg)
    planner = make_planner("rwpp")
    rows: List[BenchRow] = []
    seed = cfg.seeds[0]
    for m in range(missions or cfg.bench_missions):
        glob = global_model(env_cfg)

        def feed(positions, values):
            glob.partial_fit(positions, values)

        env.reset(episode_seed(BENCH_STREAM, seed, m))
        planner.reset(env, _rng(seed, m))
        feed(env.state.positions, env.last_measurements)

        def record(t):
            gt = env.state.gt
            loc = env.state.model
            rows.append(BenchRow(m, t, loc.n_samples_, sor(loc.fused_mean_, gt),
                                 sor(glob.fused_mean_, gt), nsor(loc.fused_mean_, gt),
                                 nsor(glob.fused_mean_, gt), loc.fit_time_, glob.fit_time_))

        record(0)
        done = False
        while not done:
            prop = planner.propose(env)
            res = safe_consensus(prop.scores, env.state.positions, env.navmap, env_cfg.d_safety,
                                 stay=prop.stay)
            _, _, done, _ = env.step(res.actions)
            planner.update(env, res)
            feed(env.state.positions, env.last_measurements)
            record(env.state.step_count)
    out = Path(out_dir or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "gp_bench.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BENCH_FIELDS)
        for r in rows:
            w.writerow([r.mission, r.step, r.n_samples] + [
                fmt(v) for v in (r.sor_local, r.sor_global, r.nsor_local, r.nsor_global)])
    # wall-clock timings cannot be byte-stable, so they live in their own file
    with open(out / "gp_bench_timing.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TIMING_FIELDS)
        for r in rows:
            w.writerow([r.mission, r.step, r.n_samples, f"{r.time_local:.6f}", f"{r.time_global:.6f}"])
    return rows


def improvement_beyond(rows: List[BenchRow], min_samples: int = 40) -> float:
    """Relative SoR reduction of the local bank over the global GP past ``min_samples``."""
    loc = np.mean([r.sor_local for r in rows if r.n_samples >= min_samples])
    glo = np.mean([r.sor_global for r in rows if r.n_samples >= min_samples])
    return float(1.0 - loc / glo)


def loglog_slope(n, t, lo: int = 20, hi: int = 150) -> float:
    n, t = np.asarray(n, dtype=float), np.asarray(t, dtype=float)
    keep = (n >= lo) & (n <= hi) & (t > 0)
    return float(np.polyfit(np.log(n[keep]), np.log(t[keep]), 1)[0])


def timing_slopes(rows: List[BenchRow], lo: int = 20, hi: int = 150):
    """Slopes of the mission-averaged cumulative fit time against sample count."""
    by_n: Dict[int, List[BenchRow]] = {}
    for r in rows:
        by_n.setdefault(r.n_samples, []).append(r)
    ns = sorted(by_n)
    tl = [np.mean([r.time_local for r in by_n[n]]) for n in ns]
    tg = [np.mean([r.time_global for r in by_n[n]]) for n in ns]
    return loglog_slope(ns, tl, lo, hi), loglog_slope(ns, tg, lo, hi)


# -- rendering ---------------------------------------------------------------

def to_gray(navmap: NavMap, values, scale: float = 1.0) -> np.ndarray:
    """8-bit image of per-cell values in ``[0, scale]``; land is black."""
    v = np.clip(np.asarray(values, dtype=float) / scale, 0.0, 1.0)
    img = np.zeros(navmap.shape, dtype=np.uint8)
    img[navmap.navigable] = np.round(255.0 * v).astype(np.uint8)
    return img


WATER_SHADE = 64


def path_image(navmap: NavMap, paths) -> np.ndarray:
    img = np.where(navmap.navigable, WATER_SHADE, 0).astype(np.uint8)
    for path in paths:
        for r, c in path:
            img[r, c] = 255
    return img


def render(env: FleetEnv, paths, out_dir, prefix: str = "") -> Dict[str, Path]:
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    s = env.state
    images = {
        "gt": to_gray(env.navmap, s.gt.values),
        "mu": to_gray(env.navmap, s.model.fused_mean_),
        "sigma": to_gray(env.navmap, s.model.fused_std_, scale=env.cfg.sigma0),
        "paths": path_image(env.navmap, paths),
    }
    files = {}
    for name, img in images.items():
        files[name] = out / f"{prefix}{name}.png"
        Image.fromarray(img).save(files[name])
    return files


def render_episode(cfg: ExperimentConfig, out_dir=None) -> Dict[str, Path]:
    """Run one evaluation episode and render it at ``render_step`` (default: the end)."""
    planner = build_planner(cfg)
    env = FleetEnv(cfg.env_config())
    seed = cfg.seeds[0]
    stop = cfg.render_step or cfg.budget
    env.reset(episode_seed(EVAL_STREAM, seed, 0))
    planner.reset(env, _rng(seed, 0))
    paths = [[tuple(map(int, p))] for p in env.state.positions]
    while env.state.step_count < stop:
        prop = planner.propose(env)
        res = safe_consensus(prop.scores, env.state.positions, env.navmap, env.cfg.d_safety,
                             stay=prop.stay)
        env.step(res.actions)
        planner.update(env, res)
        for j, p in enumerate(env.state.positions):
            paths[j].append(tuple(map(int, p)))
    return render(env, paths, out_dir or cfg.out)
