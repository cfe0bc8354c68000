"""Best-of-N action selection with condition-masking distributional confidence.

Candidates are sampled under the full context. Each one is re-scored by
teacher forcing under a masked context (text and/or state replaced by
placeholders); the per-token confidence is KL(Q_i || P_i) between the
tempered masked distribution Q_i and the conditioned distribution P_i, and
the candidate with the largest aggregated confidence is executed.
"""

from __future__ import annotations

import csv
import io
import re
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import torch

from . import tokenizer as tk
from .engine import InferenceEngine, context_fingerprint
from .policy import ActionPolicy, ConditionMask

P_FLOOR = 1e-12


class Score(str, Enum):
    MASK_KL = "mask_kl"
    UNIFORM_KL = "uniform_kl"
    LOG_LIKELIHOOD = "likelihood"


@dataclass(frozen=True)
class Aggregation:
    kind: str = "first"
    k: int = 5

    def __post_init__(self):
        if self.kind not in ("sum", "mean", "first"):
            raise ValueError(f"unknown aggregation {self.kind!r}")
        if self.kind == "first" and self.k < 1:
            raise ValueError("FirstK needs k >= 1")

    @classmethod
    def parse(cls, text: str) -> "Aggregation":
        text = text.strip().lower()
        if text in ("sum", "sum_all", "sumall"):
            return cls("sum", 0)
        if text in ("mean", "mean_all", "meanall", "avg"):
            return cls("mean", 0)
        m = re.fullmatch(r"first[_-]?(\d+)", text)
        if m:
            return cls("first", int(m.group(1)))
        raise ValueError(f"unknown aggregation {text!r}")

    def __str__(self) -> str:
        return f"first{self.k}" if self.kind == "first" else self.kind


@dataclass(frozen=True)
class SamplerConfig:
    n: int = 4
    tau_sample: float = 1.0
    tau_ref: float = 4.0
    mask: ConditionMask = ConditionMask.TEXT
    aggregation: Aggregation = Aggregation()
    score: Score = Score.MASK_KL

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("N must be >= 1")
        if not self.tau_sample > 0 or not self.tau_ref > 0:
            raise ValueError("temperatures must be > 0")


@dataclass
class Candidate:
    tokens: list
    cond_rows: np.ndarray
    cond_logits: np.ndarray | None = None
    ref_rows: np.ndarray | None = None
    token_confidences: np.ndarray | None = None
    score: float = float("nan")
    log_likelihood: float = float("nan")
    forced: bool = False

    def __len__(self):
        return len(self.tokens)


# -- math ------------------------------------------------------------------------


def softmax_temp(logits, tau: float) -> np.ndarray:
    """softmax(logits / tau) along the last axis, max-subtracted."""
    if not tau > 0:
        raise ValueError("tau must be > 0")
    z = np.asarray(logits, dtype=np.float64) / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def kl(q, p) -> float | np.ndarray:
    """KL(q || p) along the last axis, with 0 ln 0 = 0 and p floored at 1e-12."""
    q = np.asarray(q, dtype=np.float64)
    p_raw = np.asarray(p, dtype=np.float64)
    p = np.maximum(p_raw, P_FLOOR)
    safe_q = np.where(q > 0, q, 1.0)
    # identical entries contribute exactly zero, even below the floor
    terms = np.where((q > 0) & (q != p_raw), q * (np.log(safe_q) - np.log(p)), 0.0)
    return terms.sum(axis=-1)


def aggregate(confidences, strategy: Aggregation) -> float:
    c = np.asarray(confidences, dtype=np.float64)
    if c.size == 0:
        raise ValueError("no confidences to aggregate")
    if strategy.kind == "sum":
        return float(c.sum())
    if strategy.kind == "mean":
        return float(c.mean())
    return float(c[: strategy.k].sum())


def candidate_rngs(seed, n: int) -> list[np.random.Generator]:
    """One independent stream per candidate index."""
    key = list(np.atleast_1d(seed).astype(np.int64))
    return [np.random.default_rng([*key, i]) for i in range(n)]


# -- model-facing operations --------------------------------------------------------


def _context(model: ActionPolicy, obs, state, instr, mask) -> torch.Tensor:
    with torch.no_grad():
        return model.build_context(obs, state, instr, mask)


def _candidates_from_streams(streams) -> list[Candidate]:
    out = []
    for s in streams:
        logits = np.stack(s.logits)
        rows = softmax_temp(logits, 1.0)
        ll = float(np.sum(np.log(np.maximum(rows[np.arange(len(s.tokens)), s.tokens], P_FLOOR))))
        out.append(Candidate(tokens=list(s.tokens), cond_rows=rows, cond_logits=logits, log_likelihood=ll,
                             forced=s.forced))
    return out


def sample_candidates(model: ActionPolicy, obs, state, instr, cfg: SamplerConfig, seed=0,
                      engine: InferenceEngine | None = None, shared: bool = True) -> list[Candidate]:
    """N stochastic rollouts under the full context at ``cfg.tau_sample``."""
    engine = engine or InferenceEngine(model)
    ctx = _context(model, obs, state, instr, ConditionMask.ALL)
    fp = context_fingerprint(obs, state, instr, ConditionMask.ALL)
    rngs = candidate_rngs(seed, cfg.n)
    sampler = engine.sample_shared if shared else engine.sample_vanilla
    return _candidates_from_streams(sampler(ctx, cfg.tau_sample, rngs, fp))


def greedy_decode(model: ActionPolicy, obs, state, instr, engine: InferenceEngine | None = None) -> list[int]:
    engine = engine or InferenceEngine(model)
    ctx = _context(model, obs, state, instr, ConditionMask.ALL)
    return engine.sample_vanilla(ctx, 0.0, [None])[0].tokens


def reference_rows(model: ActionPolicy, obs, state, instr, tokens, mask, tau_ref: float) -> np.ndarray:
    """Q_i for every position of ``tokens`` via one uncached teacher-forced pass."""
    tk.validate(tokens)
    ctx = _context(model, obs, state, instr, mask)
    prefix = torch.tensor([[model.cfg.bos, *tokens[:-1]]])
    with torch.no_grad():
        logits = model(ctx, prefix)[0].numpy()
    return softmax_temp(logits, tau_ref)


def batched_reference_pass(model: ActionPolicy, obs, state, instr, candidates, mask, tau_ref: float,
                           engine: InferenceEngine | None = None) -> list[np.ndarray]:
    """Q rows for all candidates from one masked prefill and one batched pass."""
    engine = engine or InferenceEngine(model)
    ctx = _context(model, obs, state, instr, mask)
    fp = context_fingerprint(obs, state, instr, mask)
    logits = engine.reference_logits(ctx, [c.tokens for c in candidates], fp)
    return [softmax_temp(l, tau_ref) for l in logits]


def score_candidates(candidates, cfg: SamplerConfig) -> np.ndarray:
    """Fill token confidences and scores in place; returns the score vector."""
    uniform = None
    for c in candidates:
        if cfg.score is Score.LOG_LIKELIHOOD:
            c.token_confidences = np.log(np.maximum(c.cond_rows[np.arange(len(c)), c.tokens], P_FLOOR))
            c.score = float(c.token_confidences.sum())
            continue
        if cfg.score is Score.UNIFORM_KL:
            if uniform is None:
                v = c.cond_rows.shape[1]
                uniform = np.full(v, 1.0 / v)
            c.token_confidences = kl(uniform, c.cond_rows)
        else:
            c.token_confidences = kl(c.ref_rows, c.cond_rows)
        c.score = aggregate(c.token_confidences, cfg.aggregation)
    return np.array([c.score for c in candidates])


def select(candidates, cfg: SamplerConfig | None = None) -> tuple[int, np.ndarray]:
    """Index of the highest-scoring candidate (lowest index on ties) and all scores.

    With ``cfg`` given, scores are (re)computed; otherwise existing
    ``Candidate.score`` values are used.
    """
    if not candidates:
        raise ValueError("no candidates")
    scores = score_candidates(candidates, cfg) if cfg is not None else np.array([c.score for c in candidates])
    return int(np.argmax(scores)), scores


def select_by_scores(scores) -> int:
    return int(np.argmax(np.asarray(scores, dtype=np.float64)))


@dataclass
class Selection:
    index: int
    candidates: list
    scores: np.ndarray

    @property
    def tokens(self) -> list:
        return self.candidates[self.index].tokens


def best_of_n(model: ActionPolicy, obs, state, instr, cfg: SamplerConfig, seed=0,
              engine: InferenceEngine | None = None, shared: bool = True) -> Selection:
    """Sample, score, select. ``shared`` picks single-prefill vs vanilla execution."""
    engine = engine or InferenceEngine(model)
    cands = sample_candidates(model, obs, state, instr, cfg, seed, engine, shared)
    if cfg.score is Score.MASK_KL and cfg.mask is ConditionMask.ALL:
        # teacher forcing under the sampling context reproduces the sampled logits
        for c in cands:
            c.ref_rows = softmax_temp(c.cond_logits, cfg.tau_ref)
    elif cfg.score is Score.MASK_KL:
        if shared:
            rows = batched_reference_pass(model, obs, state, instr, cands, cfg.mask, cfg.tau_ref, engine)
        else:
            rows = [batched_reference_pass(model, obs, state, instr, [c], cfg.mask, cfg.tau_ref, engine)[0]
                    for c in cands]
        for c, q in zip(cands, rows):
            c.ref_rows = q
    idx, scores = select(cands, cfg)
    return Selection(idx, cands, scores)


def score_table_csv(selection: Selection) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["candidate", "score", "log_likelihood", "length", "forced", "selected"])
    for i, c in enumerate(selection.candidates):
        w.writerow([i, f"{c.score:.10g}", f"{c.log_likelihood:.10g}", len(c), int(c.forced), int(i == selection.index)])
    return buf.getvalue()
