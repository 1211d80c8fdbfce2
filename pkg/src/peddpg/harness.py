"""Experiment driver: flat key=value configs, training/evaluation runs, CSV output.

Config files hold one ``namespace.key = value`` per line (``#`` starts a
comment).  Namespaces: ``sim.*`` (environment), ``nn.*`` (architecture),
``agent.*`` (learning), ``run.*`` (episodes, seeds, output).  Every run
writes into ``<output root>/<run_id>/<command>/`` where ``run_id`` is a hash
of the resolved config, so CSV rows are traceable to (config, seed, episode).
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, fields
import hashlib
import json
import os
from pathlib import Path

import numpy as np

import peddpg
from peddpg.agent import AgentConfig, DDPGAgent, EpisodeRecord, random_policy, run_episode, train
from peddpg.nn import CheckpointError, count_free_params
from peddpg.oracle import evaluate_plan, plan_episode, write_plan_csv
from peddpg.sim import ConfigError, SimConfig, StreamingEnv

OUTPUT_ROOT_ENV = "PEDDPG_OUTPUT_ROOT"
TRACE_HEADER = ["run_id", "seed", "episode", "return", "energy_J", "penalty", "stalls", "noise_std"]
EVAL_HEADER = ["run_id", "policy", "seed", "episode", "return", "energy_J", "penalty", "stalls"]

NN_KEYS = ("arch", "hidden_width", "hidden_layers", "dtype")


@dataclass
class RunSettings:
    episodes: int = 2000
    seeds: tuple = (0,)
    smoothing_window: int = 400
    checkpoint_every: int = 0  # episodes; 0 keeps only the final checkpoint
    eval_episodes: int = 100


@dataclass
class ResolvedConfig:
    sim: SimConfig
    agent: AgentConfig
    run: RunSettings

    def flat(self) -> dict:
        out = {}
        for key, value in asdict(self.sim).items():
            out[f"sim.{key}"] = value
        for key, value in asdict(self.agent).items():
            out[f"{'nn' if key in NN_KEYS else 'agent'}.{key}"] = value
        for key, value in asdict(self.run).items():
            out[f"run.{key}"] = value
        return out

    def text(self) -> str:
        """Canonical config file text; loading it gives back this config."""
        lines = [f"{k} = {_format_value(v)}" for k, v in sorted(self.flat().items())]
        return "\n".join(lines) + "\n"

    @property
    def run_id(self) -> str:
        # seeds are recorded per row, so they stay out of the hash
        flat = {k: v for k, v in self.flat().items() if k != "run.seeds"}
        blob = "\n".join(f"{k}={_format_value(v)}" for k, v in sorted(flat.items()))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def agent_for_seed(self, seed) -> AgentConfig:
        return AgentConfig(**{**asdict(self.agent), "seed": int(seed)})


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _targets() -> dict:
    """Map of every accepted key to (dataclass, field name, default)."""
    table = {}
    for f in fields(SimConfig):
        table[f"sim.{f.name}"] = ("sim", f.name, getattr(SimConfig(), f.name))
    for f in fields(AgentConfig):
        ns = "nn" if f.name in NN_KEYS else "agent"
        table[f"{ns}.{f.name}"] = ("agent", f.name, getattr(AgentConfig(), f.name))
    for f in fields(RunSettings):
        table[f"run.{f.name}"] = ("run", f.name, getattr(RunSettings(), f.name))
    return table


def _parse_value(key, text, default):
    text = text.strip()
    if key in ("sim.segment_bits_per_user", "run.seeds"):
        if key == "sim.segment_bits_per_user" and text.lower() in ("", "none"):
            return None
        cast = float if key.startswith("sim.") else int
        return tuple(cast(t) for t in text.split(",") if t.strip())
    if isinstance(default, bool):
        if text.lower() not in ("true", "false", "1", "0"):
            raise ValueError(f"expected true/false, got {text!r}")
        return text.lower() in ("true", "1")
    if isinstance(default, int):
        value = float(text)
        if not value.is_integer():
            raise ValueError(f"expected an integer, got {text!r}")
        return int(value)
    if isinstance(default, float):
        return float(text)
    return text


def parse_assignments(lines, source="") -> list[tuple[str, str, str]]:
    """``key = value`` lines -> [(key, raw value, origin)], skipping comments."""
    out = []
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key = value, got {line!r}")
        key, value = line.split("=", 1)
        out.append((key.strip(), value.strip(), f"{source}:{n}" if source else "--set"))
    return out


def resolve_config(path=None, overrides=()) -> ResolvedConfig:
    """Defaults <- config file <- ``--set`` overrides; every bad key is reported at once."""
    pairs = []
    if path is not None:
        pairs += parse_assignments(Path(path).read_text().splitlines(), str(path))
    pairs += parse_assignments(overrides)
    table = _targets()
    values = {"sim": {}, "agent": {}, "run": {}}
    problems = []
    for key, raw, origin in pairs:
        if key not in table:
            problems.append(f"{origin}: unknown key {key!r}")
            continue
        group, name, default = table[key]
        try:
            values[group][name] = _parse_value(key, raw, default)
        except ValueError as exc:
            problems.append(f"{origin}: bad value for {key}: {exc}")
    if problems:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))
    cfg = ResolvedConfig(SimConfig(**values["sim"]), AgentConfig(**values["agent"]), RunSettings(**values["run"]))
    cfg.sim.validate()
    try:
        cfg.agent.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if cfg.run.episodes < 0 or cfg.run.smoothing_window < 1 or not cfg.run.seeds:
        raise ConfigError("run.episodes must be >= 0, run.smoothing_window >= 1 and run.seeds non-empty")
    return cfg


def output_root(explicit=None) -> Path:
    if explicit is not None:
        return Path(explicit)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def _run_dir(cfg: ResolvedConfig, root, command) -> Path:
    out = output_root(root) / cfg.run_id / command
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.text())
    return out


def _write_manifest(out: Path, cfg: ResolvedConfig, files: list[str]):
    manifest = {
        "run_id": cfg.run_id,
        "version": peddpg.__version__,
        "seeds": list(cfg.run.seeds),
        "config": "config.txt",
        "files": sorted(files),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def moving_average(values, window) -> np.ndarray:
    """Trailing mean over up to ``window`` values (shorter at the start)."""
    x = np.asarray(values, dtype=float)
    if window < 1:
        raise ValueError("window must be >= 1")
    if window == 1:
        return x.copy()
    c = np.concatenate([[0.0], np.cumsum(x)])
    hi = np.arange(1, len(x) + 1)
    lo = np.maximum(hi - window, 0)
    return (c[hi] - c[lo]) / (hi - lo)


def _num(x) -> str:
    return repr(float(x))


def write_trace(path, run_id, seed, records: list[EpisodeRecord], window):
    smooth = moving_average([r.ret for r in records], window)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER + ["return_smoothed"])
        for r, s in zip(records, smooth):
            w.writerow([run_id, seed, r.episode, _num(r.ret), _num(r.energy), _num(r.penalty), r.stalls,
                        _num(r.noise_std), _num(s)])


def write_aggregate(path, run_id, per_seed: dict, window):
    """Per-episode means across seeds; the seed column reads ``mean``."""
    n = min(len(v) for v in per_seed.values())
    cols = {
        name: np.mean([[getattr(r, name) for r in recs[:n]] for recs in per_seed.values()], axis=0)
        for name in ("ret", "energy", "penalty", "stalls", "noise_std")
    }
    smooth = moving_average(cols["ret"], window)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER + ["return_smoothed"])
        for i in range(n):
            w.writerow([run_id, "mean", i] + [_num(cols[c][i]) for c in ("ret", "energy", "penalty", "stalls", "noise_std")]
                       + [_num(smooth[i])])


def make_agent(cfg: ResolvedConfig, env: StreamingEnv, seed) -> DDPGAgent:
    return DDPGAgent(cfg.agent_for_seed(seed), cfg.sim.num_users, cfg.sim.state_width, env.rate_ceiling)


def cmd_train(cfg: ResolvedConfig, root=None, log=None) -> Path:
    out = _run_dir(cfg, root, "train")
    env = StreamingEnv(cfg.sim)
    files = ["config.txt", "aggregate.csv"]
    per_seed = {}
    for seed in cfg.run.seeds:
        agent = make_agent(cfg, env, seed)
        records = []
        for rec in train(env, agent, cfg.run.episodes, seed=seed):
            records.append(rec)
            done = rec.episode + 1
            if cfg.run.checkpoint_every and done % cfg.run.checkpoint_every == 0 and done < cfg.run.episodes:
                name = f"checkpoint_seed{seed}_ep{done}.ckpt"
                agent.save(out / name, {"run_id": cfg.run_id, "seed": seed, "episodes": done})
                files.append(name)
        name = f"checkpoint_seed{seed}.ckpt"
        agent.save(out / name, {"run_id": cfg.run_id, "seed": seed, "episodes": cfg.run.episodes})
        trace = f"trace_seed{seed}.csv"
        write_trace(out / trace, cfg.run_id, seed, records, cfg.run.smoothing_window)
        files += [name, trace]
        per_seed[seed] = records
        if log and records:
            tail = records[-min(100, len(records)):]
            log(f"seed {seed}: {len(records)} episodes, final mean return {np.mean([r.ret for r in tail]):.3f}")
    if cfg.run.episodes:
        write_aggregate(out / "aggregate.csv", cfg.run_id, per_seed, cfg.run.smoothing_window)
    else:
        files.remove("aggregate.csv")
    _write_manifest(out, cfg, files)
    return out


def eval_episode_seed(seed, episode) -> int:
    """Evaluation episodes draw from a stream disjoint from training's."""
    return int(np.random.SeedSequence((seed, episode, 1)).generate_state(1)[0])


def load_compatible_agent(path, cfg: ResolvedConfig) -> DDPGAgent:
    agent = DDPGAgent.load(path)
    want = {
        "arch": cfg.agent.arch,
        "n_users": cfg.sim.num_users,
        "state_width": cfg.sim.state_width,
        "hidden_width": cfg.agent.hidden_width,
        "hidden_layers": cfg.agent.hidden_layers,
    }
    have = agent.shape_signature()
    if have != want:
        raise CheckpointError(f"checkpoint signature {have} does not match the configured {want}")
    return agent


def _summary(rows) -> dict:
    return {
        "return": float(np.mean([r.ret for r in rows])),
        "energy_J": float(np.mean([r.energy for r in rows])),
        "penalty": float(np.mean([r.penalty for r in rows])),
        "stalls": float(np.mean([r.stalls for r in rows])),
    }


def evaluate(env: StreamingEnv, policy, seeds, episodes) -> list[tuple[int, EpisodeRecord]]:
    return [
        (seed, run_episode(env, policy, eval_episode_seed(seed, i), episode=i))
        for seed in seeds
        for i in range(episodes)
    ]


def cmd_eval(cfg: ResolvedConfig, checkpoint, root=None) -> tuple[Path, dict]:
    agent = load_compatible_agent(checkpoint, cfg)
    env = StreamingEnv(cfg.sim)
    out = _run_dir(cfg, root, "eval")
    results = {
        "greedy": evaluate(env, agent.act, cfg.run.seeds, cfg.run.eval_episodes),
        "random": evaluate(env, random_policy(np.random.default_rng(0), env.rate_ceiling), cfg.run.seeds,
                           cfg.run.eval_episodes),
    }
    with open(out / "eval.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EVAL_HEADER)
        for policy, rows in results.items():
            for seed, r in rows:
                w.writerow([cfg.run_id, policy, seed, r.episode, _num(r.ret), _num(r.energy), _num(r.penalty), r.stalls])
    summary = {policy: _summary([r for _, r in rows]) for policy, rows in results.items()}
    summary["checkpoint"] = Path(checkpoint).name
    summary["checkpoint_sha256"] = hashlib.sha256(Path(checkpoint).read_bytes()).hexdigest()
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _write_manifest(out, cfg, ["config.txt", "eval.csv", "summary.json"])
    return out, summary


def count_table(cfg: ResolvedConfig) -> list[dict]:
    """Free-parameter counts of FC and PE/PI DDPG for the configured K and K in {2, 5, 10}."""
    d, L, D = cfg.agent.hidden_width, cfg.agent.hidden_layers, cfg.sim.state_width
    rows = []
    for k in dict.fromkeys([cfg.sim.num_users, 2, 5, 10]):
        if d % k:
            raise ConfigError(
                f"hidden width {d} is not divisible by K={k}: PE layers split the width into K equal blocks"
            )
        row = {"K": k}
        for arch, label in (("fc", "fc"), ("pe", "pe")):
            for weights_only, kind in ((True, "w"), (False, "wb")):
                for targets, scope in ((False, "mains"), (True, "all")):
                    row[f"{label}_{kind}_{scope}"] = count_free_params(arch, k, D, d, L, weights_only, targets)
        row["ratio"] = row["pe_w_all"] / row["fc_w_all"]
        row["two_over_k2"] = 2 / k**2
        rows.append(row)
    return rows


def format_count_table(rows) -> str:
    cols = list(rows[0])
    fmt = {"ratio": "{:.6f}", "two_over_k2": "{:.6f}"}
    cells = [[fmt.get(c, "{:,}").format(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def cmd_oracle(cfg: ResolvedConfig, root=None) -> tuple[Path, dict]:
    env = StreamingEnv(cfg.sim)
    out = _run_dir(cfg, root, "oracle")
    files = ["config.txt", "oracle.csv", "summary.json"]
    rows = []
    for seed in cfg.run.seeds:
        for i in range(cfg.run.eval_episodes):
            ep_seed = eval_episode_seed(seed, i)
            plan = plan_episode(env, seed=ep_seed)
            res = evaluate_plan(plan, env, seed=ep_seed)
            rows.append((seed, i, plan, res))
            if i == 0:
                name = f"plan_seed{seed}.csv"
                write_plan_csv(out / name, plan)
                files.append(name)
    with open(out / "oracle.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EVAL_HEADER + ["expected_energy_J", "kkt_residual", "qos_feasible", "power_feasible"])
        for seed, i, plan, res in rows:
            w.writerow([cfg.run_id, "oracle", seed, i, _num(res["return"]), _num(res["energy"]), _num(res["penalty"]),
                        res["stalls"], _num(plan.total_energy), _num(plan.kkt_residual),
                        int(plan.qos_feasible.all()), int(plan.power_feasible.all())])
    summary = {
        "return": float(np.mean([r["return"] for *_, r in rows])),
        "energy_J": float(np.mean([r["energy"] for *_, r in rows])),
        "penalty": float(np.mean([r["penalty"] for *_, r in rows])),
        "stalls": float(np.mean([r["stalls"] for *_, r in rows])),
        "expected_energy_J": float(np.mean([p.total_energy for _, _, p, _ in rows])),
        "max_kkt_residual": float(max(p.kkt_residual for _, _, p, _ in rows)),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _write_manifest(out, cfg, files)
    return out, summary
