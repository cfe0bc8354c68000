"""KV-cached decoding with shared-prefill Best-of-N sampling.

Vanilla sampling runs one prefill and one decode stream per candidate. The
single-prefill path runs one prefill and decodes all candidates as a batch;
each stream attends to the shared prefix keys/values by broadcasting (no
copy) plus its own private suffix cache.
"""

from __future__ import annotations

import hashlib
import statistics
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from . import tokenizer as tk
from .policy import N_CONTEXT, ActionPolicy, ConditionMask, ShapeError


class CacheOverflow(ShapeError):
    pass


@dataclass
class KVCache:
    """Per-layer (k, v) of shape (B, heads, cached_len, head_dim)."""

    layers: list
    n_context: int
    fingerprint: str = ""

    @property
    def cached_len(self) -> int:
        return self.layers[0][0].shape[2] if self.layers else 0

    @property
    def batch(self) -> int:
        return self.layers[0][0].shape[0]


@dataclass
class Stream:
    """One candidate's decoding record."""

    tokens: list = field(default_factory=list)
    logits: list = field(default_factory=list)
    forced: bool = False
    done: bool = False


def context_fingerprint(obs, state, instr, mask, repeat: int = 1) -> str:
    """Hash of the inputs the masked context actually depends on."""
    mask = ConditionMask(int(mask))
    h = hashlib.sha256()
    h.update(np.asarray(obs, dtype=np.float64).tobytes())
    h.update(b"S" if mask.masks_state else np.asarray(state, dtype=np.float64).tobytes())
    h.update(b"I" if mask.masks_text else int(instr).to_bytes(2, "little"))
    h.update(bytes([int(mask), repeat & 0xFF]))
    return h.hexdigest()[:16]


def allowed_mask(vocab_size: int, n_emitted: int) -> np.ndarray:
    """Token grammar: action levels, EOS only after whole bands, EOS forced at the cap."""
    ok = np.zeros(vocab_size, dtype=bool)
    max_actions = tk.MAX_TOKENS - 1
    if n_emitted < max_actions:
        ok[: vocab_size - 2] = True
    if n_emitted >= tk.ACTION_DIM and n_emitted % tk.ACTION_DIM == 0:
        ok[vocab_size - 1] = True
    return ok


def draw_token(logits: np.ndarray, tau: float, allowed: np.ndarray, rng) -> int:
    """Sample from softmax(logits / tau) restricted to ``allowed``; tau == 0 is argmax."""
    masked = np.where(allowed, logits, -np.inf)
    if tau == 0:
        return int(np.argmax(masked))
    z = masked / tau
    p = np.exp(z - z.max())
    cdf = np.cumsum(p)
    idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(idx, len(p) - 1)


class InferenceEngine:
    """Cached inference over a fixed policy with instrumented counters."""

    def __init__(self, model: ActionPolicy):
        self.model = model
        self.reset_counters()

    def reset_counters(self):
        self.prefills = 0
        self.decode_steps = 0
        self.batched_passes = 0

    # -- primitives ----------------------------------------------------------

    @torch.no_grad()
    def prefill(self, context: torch.Tensor, fingerprint: str = "") -> tuple[KVCache, torch.Tensor]:
        """Process context slots + BOS. Returns the cache and BOS-position logits (B, V)."""
        self.prefills += 1
        x = self.model.embed_prompt(context)
        logits, kv = self.model.run(x)
        return KVCache(kv, context.shape[1], fingerprint), logits[:, -1]

    def _offset(self, cache: KVCache, suffix: KVCache | None = None) -> int:
        n = cache.cached_len - cache.n_context
        if suffix is not None:
            n += suffix.cached_len
        if n >= self.model.cfg.max_prefix:
            raise CacheOverflow(f"no position left after offset {n}")
        return n

    @torch.no_grad()
    def decode_step(self, cache: KVCache, last_token) -> torch.Tensor:
        """Feed one token per row, extend ``cache`` in place, return next logits (B, V)."""
        tok = torch.as_tensor(np.atleast_1d(last_token), dtype=torch.long)[:, None]
        x = self.model.embed_tokens(tok, self._offset(cache))
        self.decode_steps += 1
        logits, kv = self.model.run(x, past=cache.layers)
        cache.layers = kv
        return logits[:, -1]

    @torch.no_grad()
    def decode_step_shared(self, prefix: KVCache, suffix: KVCache | None, last_tokens):
        """Decode one token for every stream against a shared batch-1 prefix.

        Returns logits (N, V) and the extended private suffix cache.
        """
        tok = torch.as_tensor(np.atleast_1d(last_tokens), dtype=torch.long)[:, None]
        x = self.model.embed_tokens(tok, self._offset(prefix, suffix))
        self.decode_steps += 1
        logits, kv = self.model.run(
            x, past=None if suffix is None else suffix.layers, shared=prefix.layers
        )
        return logits[:, -1], KVCache(kv, 0, prefix.fingerprint)

    # -- sampling ------------------------------------------------------------

    def _advance(self, stream: Stream, logits: np.ndarray, tau: float, rng) -> int:
        n = len(stream.tokens)
        allowed = allowed_mask(len(logits), n)
        tok = draw_token(logits, tau, allowed, rng)
        if not allowed[:-1].any() and int(np.argmax(logits)) != len(logits) - 1:
            stream.forced = True
        stream.tokens.append(tok)
        stream.logits.append(logits)
        stream.done = tok == len(logits) - 1
        return tok

    def sample_vanilla(self, context: torch.Tensor, tau: float, rngs, fingerprint: str = "") -> list[Stream]:
        """Independent prefill + decode per candidate (``len(rngs)`` candidates)."""
        streams = []
        for rng in rngs:
            cache, logits = self.prefill(context, fingerprint)
            s = Stream()
            tok = self._advance(s, logits[0].numpy(), tau, rng)
            while not s.done:
                tok = self._advance(s, self.decode_step(cache, tok)[0].numpy(), tau, rng)
            streams.append(s)
        return streams

    def sample_shared(self, context: torch.Tensor, tau: float, rngs, fingerprint: str = "") -> list[Stream]:
        """One prefill shared by all candidates, batched decode."""
        prefix, logits = self.prefill(context, fingerprint)
        first = logits[0].numpy()
        streams = [Stream() for _ in rngs]
        last = [self._advance(s, first, tau, rng) for s, rng in zip(streams, rngs)]
        suffix = None
        while not all(s.done for s in streams):
            step_logits, suffix = self.decode_step_shared(prefix, suffix, last)
            step_logits = step_logits.numpy()
            for i, (s, rng) in enumerate(zip(streams, rngs)):
                if not s.done:
                    last[i] = self._advance(s, step_logits[i], tau, rng)
        return streams

    # -- reference scoring -----------------------------------------------------

    @torch.no_grad()
    def reference_logits(self, context: torch.Tensor, sequences, fingerprint: str = "") -> list[np.ndarray]:
        """Teacher-forced logits for each sequence under one shared prefill.

        Sequences are right-padded into one batch; row i of the result has
        exactly len(sequences[i]) positions.
        """
        prefix, first = self.prefill(context, fingerprint)
        lengths = [len(s) for s in sequences]
        width = max(lengths) - 1
        out = [np.empty((n, first.shape[-1])) for n in lengths]
        for o in out:
            o[0] = first[0].numpy()
        if width > 0:
            pad = self.model.cfg.eos
            batch = np.full((len(sequences), width), pad, dtype=np.int64)
            for i, s in enumerate(sequences):
                batch[i, : len(s) - 1] = s[:-1]
            x = self.model.embed_tokens(torch.as_tensor(batch), 1)
            self.batched_passes += 1
            logits, _ = self.model.run(x, shared=prefix.layers)
            logits = logits.numpy()
            for i, n in enumerate(lengths):
                out[i][1:] = logits[i, : n - 1]
        return out


# -- latency benchmark ---------------------------------------------------------


@dataclass
class LatencyRow:
    strategy: str
    n: int
    mean_ms: float
    std_ms: float
    median_ms: float
    prefills: int
    decode_steps: int
    mode: str


def _timed_selection(engine, context, masked_context, n, tau, seed, strategy):
    from .selector import candidate_rngs

    rngs = candidate_rngs(seed, n)
    engine.reset_counters()
    t0 = time.perf_counter()
    if strategy == "vanilla":
        streams = engine.sample_vanilla(context, tau, rngs)
        for s in streams:
            engine.reference_logits(masked_context, [s.tokens])
    else:
        streams = engine.sample_shared(context, tau, rngs)
        engine.reference_logits(masked_context, [s.tokens for s in streams])
    return (time.perf_counter() - t0) * 1e3, engine.prefills, engine.decode_steps


def bench_latency(model: ActionPolicy, n_list=(1, 2, 4, 8, 16), context_factor: int = 8,
                  repeats: int = 20, warmup: int = 2, tau: float = 1.0, seed: int = 0,
                  mask=ConditionMask.TEXT) -> list[LatencyRow]:
    """Wall-clock selection latency, vanilla vs single-prefill.

    ``context_factor`` replicates the condition slots to emulate a long
    prompt. Each repeat uses a fresh seed, shared by both strategies so they
    decode identical tokens.
    """
    rng = np.random.default_rng(seed)
    obs = rng.uniform(0.1, 0.9, 8)
    state = np.array([*rng.uniform(0.1, 0.9, 2), 0.0])
    instr = int(rng.integers(4))
    with torch.no_grad():
        context = model.build_context(obs, state, instr, ConditionMask.ALL).repeat(1, context_factor, 1)
        masked = model.build_context(obs, state, instr, mask).repeat(1, context_factor, 1)
    engine = InferenceEngine(model)
    rows = []
    for n in n_list:
        if n < 1:
            raise ValueError("N must be >= 1")
        times = {"vanilla": [], "single_prefill": []}
        counts = {}
        for r in range(warmup + repeats):
            # alternate order so drift hits both strategies alike
            order = ("vanilla", "single_prefill") if r % 2 == 0 else ("single_prefill", "vanilla")
            for strategy in order:
                ms, prefills, steps = _timed_selection(engine, context, masked, n, tau, seed + r, strategy)
                if r >= warmup:
                    times[strategy].append(ms)
                    counts[strategy] = (prefills, steps)
        for strategy, mode in (("vanilla", "serial"), ("single_prefill", "batched")):
            t = times[strategy]
            rows.append(LatencyRow(
                strategy=strategy,
                n=n,
                mean_ms=statistics.fmean(t),
                std_ms=statistics.pstdev(t) if len(t) > 1 else 0.0,
                median_ms=statistics.median(t),
                prefills=counts[strategy][0],
                decode_steps=counts[strategy][1],
                mode=mode,
            ))
    return rows
