"""Decoder-only autoregressive action policy with condition masking.

Context layout: ``[obs, state|MASK_STATE, instr|MASK_TEXT, BOS, a_1, a_2, ...]``.
Masked conditions are replaced by learned placeholder vectors so that the
context length, and therefore cache shapes, never depend on the mask.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from enum import IntEnum

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import tokenizer as tk

DTYPE = torch.float64
N_CONTEXT = 3


class ConditionMask(IntEnum):
    ALL = 0
    TEXT = 1
    STATE = 2
    BOTH = 3

    @property
    def masks_text(self) -> bool:
        return self in (ConditionMask.TEXT, ConditionMask.BOTH)

    @property
    def masks_state(self) -> bool:
        return self in (ConditionMask.STATE, ConditionMask.BOTH)

    @classmethod
    def parse(cls, name: str | int | "ConditionMask") -> "ConditionMask":
        if isinstance(name, (int, ConditionMask)):
            return cls(int(name))
        key = name.strip().lower().replace("&", "_").replace("-", "_")
        aliases = {
            "all": cls.ALL, "none": cls.ALL, "all_conditions": cls.ALL,
            "text": cls.TEXT, "state": cls.STATE,
            "both": cls.BOTH, "text_state": cls.BOTH,
        }
        if key not in aliases:
            raise ValueError(f"unknown mask variant {name!r}")
        return aliases[key]


JOINT_RATES = (0.7, 0.1, 0.1, 0.1)


class ShapeError(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    def __init__(self, step: int | None = None):
        self.step = step
        super().__init__("non-finite loss" + (f" at step {step}" if step is not None else ""))


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = tk.VOCAB_SIZE
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    n_layers: int = 2
    max_positions: int = N_CONTEXT + 1 + tk.MAX_TOKENS  # 29: slots, BOS, 25 tokens
    n_instructions: int = 4
    obs_dim: int = 8
    state_dim: int = 3

    @property
    def bos(self) -> int:
        return self.vocab_size - 2

    @property
    def eos(self) -> int:
        return self.vocab_size - 1

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def max_prefix(self) -> int:
        """Longest BOS-led token prefix the position table can hold."""
        return self.max_positions - N_CONTEXT


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig, dtype=DTYPE):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.ln1 = nn.LayerNorm(cfg.d_model, dtype=dtype)
        self.qkv = nn.Linear(cfg.d_model, 3 * cfg.d_model, dtype=dtype)
        self.proj = nn.Linear(cfg.d_model, cfg.d_model, dtype=dtype)
        self.ln2 = nn.LayerNorm(cfg.d_model, dtype=dtype)
        self.fc1 = nn.Linear(cfg.d_model, cfg.d_ff, dtype=dtype)
        self.fc2 = nn.Linear(cfg.d_ff, cfg.d_model, dtype=dtype)

    def _split(self, t: torch.Tensor) -> torch.Tensor:
        b, n, d = t.shape
        return t.view(b, n, self.n_heads, d // self.n_heads).transpose(1, 2)

    def forward(self, x, past=None, shared=None):
        """Run one block over ``x`` (B, L, d).

        ``past`` is this stream's own (k, v) history, ``shared`` a batch-1
        (k, v) prefix read by every row through broadcasting. New tokens
        attend to shared, then past, then causally to each other. Returns the
        output and the updated private (k, v).
        """
        b, n, d = x.shape
        q, k, v = self.qkv(self.ln1(x)).split(d, dim=-1)
        q, k, v = self._split(q), self._split(k), self._split(v)
        if past is not None:
            k = torch.cat([past[0], k], dim=2)
            v = torch.cat([past[1], v], dim=2)
        q = q * (1.0 / math.sqrt(q.shape[-1]))
        scores = q @ k.transpose(-1, -2)
        if n > 1:
            n_past = k.shape[2] - n
            causal = torch.ones(n, k.shape[2], dtype=torch.bool).tril(diagonal=n_past)
            scores = scores.masked_fill(~causal, float("-inf"))
        if shared is not None:
            sk, sv = shared
            shared_scores = q @ sk.transpose(-1, -2)
            probs = torch.softmax(torch.cat([shared_scores, scores], dim=-1), dim=-1)
            n_shared = sk.shape[2]
            att = probs[..., :n_shared] @ sv + probs[..., n_shared:] @ v
        else:
            att = torch.softmax(scores, dim=-1) @ v
        att = att.transpose(1, 2).reshape(b, n, d)
        x = x + self.proj(att)
        x = x + self.fc2(F.gelu(self.fc1(self.ln2(x))))
        return x, (k, v)


class ActionPolicy(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig(), dtype=DTYPE):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.tok_emb = nn.Parameter(torch.zeros(cfg.vocab_size, d, dtype=dtype))
        self.pos_emb = nn.Parameter(torch.zeros(cfg.max_positions, d, dtype=dtype))
        self.instr_emb = nn.Parameter(torch.zeros(cfg.n_instructions, d, dtype=dtype))
        self.mask_text = nn.Parameter(torch.zeros(d, dtype=dtype))
        self.mask_state = nn.Parameter(torch.zeros(d, dtype=dtype))
        self.obs_proj = nn.Linear(cfg.obs_dim, d, dtype=dtype)
        self.state_proj = nn.Linear(cfg.state_dim, d, dtype=dtype)
        self.blocks = nn.ModuleList(Block(cfg, dtype) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(d, dtype=dtype)
        self.head = nn.Linear(d, cfg.vocab_size, dtype=dtype)

    def init_weights(self, seed: int, std: float = 0.02, zero_head: bool = True) -> "ActionPolicy":
        gen = torch.Generator().manual_seed(int(seed))
        norms = {id(p) for m in self.modules() if isinstance(m, nn.LayerNorm) for p in m.parameters()}
        with torch.no_grad():
            for name, p in self.named_parameters():
                if id(p) in norms:
                    p.fill_(1.0 if name.endswith("weight") else 0.0)
                elif name.endswith("bias"):
                    p.zero_()
                else:
                    p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * std)
            if zero_head:
                self.head.weight.zero_()
                self.head.bias.zero_()
        return self

    @property
    def dtype(self) -> torch.dtype:
        return self.tok_emb.dtype

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    # -- context -----------------------------------------------------------

    def build_context(self, obs, state, instr, mask) -> torch.Tensor:
        """Condition slots (B, 3, d) before positional embeddings.

        ``mask`` may be a single ConditionMask or one per batch row.
        """
        obs = torch.as_tensor(np.asarray(obs), dtype=self.dtype).reshape(-1, self.cfg.obs_dim)
        state = torch.as_tensor(np.asarray(state), dtype=self.dtype).reshape(-1, self.cfg.state_dim)
        instr = torch.as_tensor(np.asarray(instr), dtype=torch.long).reshape(-1)
        b = obs.shape[0]
        if instr.numel() and (instr.min() < 0 or instr.max() >= self.cfg.n_instructions):
            raise ShapeError("instruction id out of range")
        masks = torch.as_tensor(np.broadcast_to(np.asarray(mask, dtype=np.int64), (b,)).copy())
        text_off = ((masks == ConditionMask.TEXT) | (masks == ConditionMask.BOTH))[:, None]
        state_off = ((masks == ConditionMask.STATE) | (masks == ConditionMask.BOTH))[:, None]

        obs_slot = self.obs_proj(obs)
        state_slot = torch.where(state_off, self.mask_state.expand(b, -1), self.state_proj(state))
        instr_slot = torch.where(text_off, self.mask_text.expand(b, -1), self.instr_emb[instr])
        return torch.stack([obs_slot, state_slot, instr_slot], dim=1)

    def _context_positions(self, n_ctx: int) -> torch.Tensor:
        # replicated slots (latency benchmark) reuse their base slot's position
        return torch.arange(n_ctx) % N_CONTEXT

    def embed_prompt(self, context: torch.Tensor) -> torch.Tensor:
        """Context slots plus BOS with positions, (B, C+1, d)."""
        b, c, _ = context.shape
        x = context + self.pos_emb[self._context_positions(c)]
        bos = self.tok_emb[self.cfg.bos] + self.pos_emb[N_CONTEXT]
        return torch.cat([x, bos.expand(b, 1, -1)], dim=1)

    def embed_tokens(self, tokens: torch.Tensor, start: int) -> torch.Tensor:
        """Embed action tokens at prefix offsets start, start+1, ... (BOS is offset 0)."""
        n = tokens.shape[1]
        if start + n > self.cfg.max_prefix:
            raise ShapeError(f"prefix longer than {self.cfg.max_prefix}")
        if tokens.numel() and (tokens.min() < 0 or tokens.max() >= self.cfg.vocab_size):
            raise ShapeError("token id out of range")
        pos = torch.arange(start, start + n) + N_CONTEXT
        return self.tok_emb[tokens] + self.pos_emb[pos]

    def run(self, x, past=None, shared=None):
        """Transformer stack over embedded inputs; returns logits and new caches."""
        new = []
        for i, block in enumerate(self.blocks):
            x, kv = block(
                x,
                past=None if past is None else past[i],
                shared=None if shared is None else shared[i],
            )
            new.append(kv)
        return self.head(self.ln_f(x)), new

    def forward(self, context: torch.Tensor, prefix) -> torch.Tensor:
        """Uncached next-token logits for every prefix position.

        ``prefix`` is (B, L) token ids beginning with BOS. Returns (B, L, V);
        row j predicts the token following prefix[:, :j+1].
        """
        prefix = torch.as_tensor(prefix, dtype=torch.long)
        if prefix.dim() == 1:
            prefix = prefix[None]
        if prefix.shape[1] < 1 or bool((prefix[:, 0] != self.cfg.bos).any()):
            raise ShapeError("prefix must begin with BOS")
        if prefix.shape[1] > self.cfg.max_prefix:
            raise ShapeError(f"prefix longer than {self.cfg.max_prefix}")
        x = self.embed_prompt(context)
        if prefix.shape[1] > 1:
            x = torch.cat([x, self.embed_tokens(prefix[:, 1:], 1)], dim=1)
        logits, _ = self.run(x)
        return logits[:, context.shape[1]:]


# -- losses and training -----------------------------------------------------


def collate(examples, cfg: ModelConfig):
    """Stack (obs, state, instr, tokens) examples into padded tensors."""
    obs = np.stack([e[0] for e in examples])
    state = np.stack([e[1] for e in examples])
    instr = np.array([e[2] for e in examples])
    lengths = [len(e[3]) for e in examples]
    width = max(lengths)
    targets = np.full((len(examples), width), cfg.eos, dtype=np.int64)
    for i, e in enumerate(examples):
        targets[i, : len(e[3])] = e[3]
    valid = np.arange(width)[None, :] < np.array(lengths)[:, None]
    return obs, state, instr, torch.as_tensor(targets), torch.as_tensor(valid)


def sequence_log_probs(model: ActionPolicy, context: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Per-token log pi(a_k | context, a_<k) under teacher forcing, (B, T)."""
    b = targets.shape[0]
    bos = torch.full((b, 1), model.cfg.bos, dtype=torch.long)
    prefix = torch.cat([bos, targets[:, :-1]], dim=1)
    logits = model(context, prefix)
    if not torch.isfinite(logits).all():
        raise NonFiniteLoss()
    logp = torch.log_softmax(logits, dim=-1)
    return logp.gather(-1, targets[..., None])[..., 0]


def nll_loss(model: ActionPolicy, examples, masks=None) -> torch.Tensor:
    """Mean over the batch of the summed token NLL, EOS included."""
    if not examples:
        raise ValueError("empty batch")
    obs, state, instr, targets, valid = collate(examples, model.cfg)
    if masks is None:
        masks = ConditionMask.ALL
    context = model.build_context(obs, state, instr, masks)
    logp = sequence_log_probs(model, context, targets)
    loss = -(logp * valid).sum(dim=1).mean()
    if not torch.isfinite(loss):
        raise NonFiniteLoss()
    return loss


def loss_and_grads(model: ActionPolicy, examples, masks=None):
    model.zero_grad(set_to_none=False)
    loss = nll_loss(model, examples, masks)
    loss.backward()
    grads = {name: p.grad.detach().clone() for name, p in model.named_parameters()}
    return float(loss), grads


def sample_mask(rng: np.random.Generator, rates=JOINT_RATES) -> ConditionMask:
    rates = np.asarray(rates, dtype=np.float64)
    if rates.shape != (4,) or np.any(rates < 0) or abs(rates.sum() - 1.0) > 1e-9:
        raise ValueError("rates must be four nonnegative numbers summing to 1")
    cdf = np.cumsum(rates)
    idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return ConditionMask(min(idx, 3))


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 3e-4
    joint: bool = False
    seed: int = 0
    rates: tuple = field(default=JOINT_RATES)
    compute_dtype: str = "float32"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rates"] = list(self.rates)
        return d


def train(model: ActionPolicy, dataset, config: TrainConfig, callback=None):
    """Adam on the (joint) imitation loss. Returns the model and per-step losses.

    Batch order and mask draws use separate seed-derived streams, so joint
    training with rates (1, 0, 0, 0) reproduces plain training exactly.
    Optimization runs in ``compute_dtype``; the model is handed back in its
    original dtype, holding values exactly representable in float32 when
    training ran in float32 (which is what checkpoints store).
    """
    if not dataset:
        raise ValueError("empty dataset")
    if config.steps < 1 or config.batch_size < 1 or config.lr <= 0:
        raise ValueError("invalid training config")
    batch_rng = np.random.default_rng([config.seed, 0])
    mask_rng = np.random.default_rng([config.seed, 1])
    out_dtype = model.dtype
    model.to(getattr(torch, config.compute_dtype))
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, betas=(0.9, 0.999), eps=1e-8)
    order: list[int] = []
    losses = []
    model.train()
    for step in range(config.steps):
        idx = []
        while len(idx) < config.batch_size:
            if not order:
                order = list(batch_rng.permutation(len(dataset)))
            idx.append(order.pop())
        batch = [dataset[i] for i in idx]
        if config.joint:
            masks = [int(sample_mask(mask_rng, config.rates)) for _ in batch]
        else:
            masks = ConditionMask.ALL
        opt.zero_grad()
        try:
            loss = nll_loss(model, batch, masks)
        except NonFiniteLoss as exc:
            raise NonFiniteLoss(step) from exc
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if callback is not None:
            callback(step, losses[-1])
    model.eval()
    model.to(out_dtype)
    return model, losses


def new_policy(seed: int = 0, cfg: ModelConfig = ModelConfig(), **init) -> ActionPolicy:
    return ActionPolicy(cfg).init_weights(seed, **init)
