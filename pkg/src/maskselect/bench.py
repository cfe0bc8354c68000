"""Demonstration generation, closed-loop evaluation and ablation sweeps."""

from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import sim
from . import tokenizer as tk
from .engine import InferenceEngine
from .policy import ActionPolicy, ConditionMask
from .selector import Aggregation, SamplerConfig, Score, best_of_n, greedy_decode, sample_candidates

CSV_COLUMNS = [
    "config_id", "strategy", "N", "tau_sample", "tau_ref", "mask", "aggregation",
    "joint", "seed", "trials", "successes", "success_rate", "mean_len",
]

STRATEGIES = ("greedy", "temperature", "likelihood", "uniform_kl", "mg_select", "expert")
_SCORES = {"likelihood": Score.LOG_LIKELIHOOD, "uniform_kl": Score.UNIFORM_KL, "mg_select": Score.MASK_KL}


# -- demonstrations -------------------------------------------------------------


@dataclass
class Demo:
    instruction: int
    chunks: list  # (obs, state, tokens) per executed chunk
    seed: list

    def to_json(self) -> str:
        return json.dumps({
            "instruction": self.instruction,
            "chunks": [
                {"obs": [float(v) for v in o], "state": [float(v) for v in s], "tokens": [int(t) for t in toks]}
                for o, s, toks in self.chunks
            ],
            "seed": self.seed,
        }, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "Demo":
        d = json.loads(line)
        chunks = [(np.array(c["obs"]), np.array(c["state"]), list(c["tokens"])) for c in d["chunks"]]
        return cls(int(d["instruction"]), chunks, d["seed"])


def generate_demos(count: int, seed: int, noise: float = sim.EXPERT_NOISE) -> list[Demo]:
    """Successful expert episodes with instructions assigned round-robin.

    Attempt ``i`` draws its layout from ``default_rng([seed, i])``; failed
    attempts are discarded and the instruction slot is retried.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    demos, attempt = [], 0
    while len(demos) < count:
        key = [int(seed), attempt]
        rng = np.random.default_rng(key)
        attempt += 1
        state, _ = sim.reset(rng)
        instr = len(demos) % sim.N_TASKS
        chunks = []
        for _ in range(sim.MAX_CHUNKS):
            tokens = tk.encode(sim.expert_chunk(state, instr, rng, noise))
            chunks.append((state.observation(), state.proprio(), tokens))
            state = sim.execute(state, tk.decode(tokens))
            if sim.is_success(state, instr):
                break
        if sim.is_success(state, instr):
            demos.append(Demo(instr, chunks, key))
    return demos


def demos_to_jsonl(demos) -> str:
    return "".join(d.to_json() + "\n" for d in demos)


def load_demos(path) -> list[Demo]:
    with open(path, encoding="utf-8") as fh:
        return [Demo.from_json(line) for line in fh if line.strip()]


def training_examples(demos) -> list[tuple]:
    """Flatten episodes into (obs, state, instruction, tokens) examples."""
    return [(o, s, d.instruction, t) for d in demos for o, s, t in d.chunks]


# -- strategies and evaluation ------------------------------------------------------


@dataclass(frozen=True)
class Strategy:
    name: str = "mg_select"
    sampler: SamplerConfig = SamplerConfig()

    def __post_init__(self):
        if self.name not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.name!r}; expected one of {STRATEGIES}")

    @classmethod
    def build(cls, name: str, n: int = 4, tau_sample: float = 1.0, tau_ref: float = 4.0,
              mask="text", aggregation="first5") -> "Strategy":
        agg = aggregation if isinstance(aggregation, Aggregation) else Aggregation.parse(aggregation)
        if name == "temperature":
            n = 1
        cfg = SamplerConfig(
            n=n, tau_sample=tau_sample, tau_ref=tau_ref, mask=ConditionMask.parse(mask),
            aggregation=agg, score=_SCORES.get(name, Score.MASK_KL),
        )
        return cls(name, cfg)

    def row_fields(self) -> dict:
        c = self.sampler
        if self.name in ("greedy", "expert"):
            return {"strategy": self.name, "N": 1, "tau_sample": 0.0, "tau_ref": "", "mask": "", "aggregation": ""}
        scored = self.name == "mg_select"
        return {
            "strategy": self.name,
            "N": c.n,
            "tau_sample": c.tau_sample,
            "tau_ref": c.tau_ref if scored else "",
            "mask": c.mask.name.lower() if scored else "",
            "aggregation": str(c.aggregation) if self.name in ("mg_select", "uniform_kl") else "",
        }


@dataclass
class EpisodeRecord:
    instruction: int
    initial: sim.WorldState
    chunks: list = field(default_factory=list)  # (obs, state, tokens)
    success: bool = False
    failure_reason: str = "timeout"
    steps: int = 0


def choose_tokens(model, strategy: Strategy, state: sim.WorldState, instr: int, key, engine, rng) -> list:
    obs, prop = state.observation(), state.proprio()
    if strategy.name == "greedy":
        return greedy_decode(model, obs, prop, instr, engine)
    if strategy.name == "expert":
        return tk.encode(sim.expert_chunk(state, instr, rng))
    if strategy.name == "temperature":
        return sample_candidates(model, obs, prop, instr, strategy.sampler, key, engine)[0].tokens
    return best_of_n(model, obs, prop, instr, strategy.sampler, key, engine).tokens


def run_episode(model: ActionPolicy | None, strategy: Strategy, seed: int, trial: int) -> EpisodeRecord:
    rng = np.random.default_rng([int(seed), int(trial)])
    state, instr = sim.reset(rng)
    engine = InferenceEngine(model) if model is not None else None
    rec = EpisodeRecord(instr, state)
    for c in range(sim.MAX_CHUNKS):
        tokens = choose_tokens(model, strategy, state, instr, [int(seed), int(trial), c], engine, rng)
        rec.chunks.append((state.observation(), state.proprio(), tokens))
        state = sim.execute(state, tk.decode(tokens))
        if sim.is_success(state, instr):
            rec.success, rec.failure_reason = True, "none"
            break
    rec.steps = state.steps
    return rec


@dataclass
class BenchReport:
    strategy: Strategy
    seed: int
    trials: int
    successes: int
    mean_len: float
    episodes: list = field(default_factory=list, repr=False)

    @property
    def success_rate(self) -> float:
        return self.successes / self.trials

    def row(self, config_id: str = "", joint="") -> dict:
        r = {"config_id": config_id, **self.strategy.row_fields(), "joint": joint, "seed": self.seed,
             "trials": self.trials, "successes": self.successes,
             "success_rate": self.success_rate, "mean_len": self.mean_len}
        return {k: _fmt(r[k]) for k in CSV_COLUMNS}


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def worker_count() -> int:
    raw = os.environ.get("MGSL_THREADS", "")
    try:
        return max(1, int(raw)) if raw else 1
    except ValueError:
        return 1


def evaluate(model: ActionPolicy | None, strategy: Strategy, trials: int, seed: int,
             workers: int | None = None, keep_episodes: bool = False) -> BenchReport:
    """Success rate over ``trials`` seeded episodes; trial ``i`` uses seed key (seed, i)."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if model is None and strategy.name != "expert":
        raise ValueError("a policy is required unless the strategy is 'expert'")
    workers = workers or worker_count()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            episodes = list(pool.map(lambda t: run_episode(model, strategy, seed, t), range(trials)))
    else:
        episodes = [run_episode(model, strategy, seed, t) for t in range(trials)]
    successes = sum(e.success for e in episodes)
    mean_len = float(np.mean([e.steps for e in episodes]))
    return BenchReport(strategy, int(seed), trials, successes, mean_len, episodes if keep_episodes else [])


def reports_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


# -- ablation grids ---------------------------------------------------------------

_ENTRY_KEYS = {"id", "strategy", "n", "tau_sample", "tau_ref", "mask", "aggregation", "ckpt"}


@dataclass(frozen=True)
class GridEntry:
    config_id: str
    strategy: Strategy
    ckpt: str | None = None


def default_grid(joint_ckpts=None) -> dict:
    """The six ablation tables over the recommended hyperparameter ranges.

    ``joint_ckpts`` lists checkpoints for the joint-training table (e.g. one
    trained with and one without condition dropout).
    """
    base = {"strategy": "mg_select", "n": 4, "tau_sample": 1.0, "tau_ref": 4.0, "mask": "text", "aggregation": "first5"}
    return {
        "base": base,
        "tables": {
            "strategy": {"axis": "strategy", "values": ["greedy", "temperature", "likelihood", "uniform_kl", "mg_select"]},
            "candidates": {"axis": "n", "values": [1, 2, 4, 8]},
            "masking": {"axis": "mask", "values": ["text", "state", "both"]},
            "joint": {"axis": "ckpt", "values": list(joint_ckpts or [None])},
            "tau_ref": {"axis": "tau_ref", "values": [4.0, 6.0, 8.0, 10.0, 12.0, 14.0, 16.0]},
            "aggregation": {"axis": "aggregation", "values": ["sum", "mean", "first5"]},
        },
    }


def _entry(config_id: str, params: dict) -> GridEntry:
    unknown = set(params) - _ENTRY_KEYS
    if unknown:
        raise ValueError(f"unknown grid keys {sorted(unknown)}")
    p = dict(params)
    ckpt = p.pop("ckpt", None)
    p.pop("id", None)
    return GridEntry(config_id, Strategy.build(p.pop("strategy", "mg_select"), **p), ckpt)


def expand_grid(grid) -> list[GridEntry]:
    """Grid forms: a list of entries, or {"base", "tables"} where each table is
    a list of overrides or {"axis": key, "values": [...]}."""
    if isinstance(grid, list):
        return [_entry(str(e.get("id", i)), e) for i, e in enumerate(grid)]
    if not isinstance(grid, dict) or "tables" not in grid:
        raise ValueError("grid must be a list or an object with 'tables'")
    extra = set(grid) - {"base", "tables", "trials", "seeds"}
    if extra:
        raise ValueError(f"unknown grid keys {sorted(extra)}")
    base = dict(grid.get("base", {}))
    out = []
    for table, table_def in grid["tables"].items():
        if isinstance(table_def, dict):
            if set(table_def) != {"axis", "values"}:
                raise ValueError(f"table {table!r} needs exactly 'axis' and 'values'")
            overrides = [{table_def["axis"]: v, "id": f"{table_def['axis']}={v}"} for v in table_def["values"]]
        elif isinstance(table_def, list):
            overrides = table_def
        else:
            raise ValueError(f"table {table!r} is malformed")
        for i, o in enumerate(overrides):
            params = {**base, **o}
            if params.get("ckpt") is None:
                params.pop("ckpt", None)
            out.append(_entry(f"{table}/{o.get('id', i)}", params))
    return out


def run_ablation(entries, seeds, trials: int, load_model, joint_of=lambda ckpt: "") -> list[dict]:
    """One CSV row per (entry, seed). ``load_model(ckpt)`` maps an entry's
    checkpoint (None for the default) to a policy."""
    rows = []
    models = {}
    for e in entries:
        if e.ckpt not in models:
            models[e.ckpt] = load_model(e.ckpt)
        for s in seeds:
            rep = evaluate(models[e.ckpt], e.strategy, trials, s)
            rows.append(rep.row(e.config_id, joint_of(e.ckpt)))
    return rows


def mean_success(reports) -> float:
    return float(np.mean([r.success_rate for r in reports]))


def with_sampler(strategy: Strategy, **changes) -> Strategy:
    return Strategy(strategy.name, replace(strategy.sampler, **changes))

