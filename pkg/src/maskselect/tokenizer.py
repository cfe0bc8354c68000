"""Action chunk <-> token sequence mapping.

Each action dimension is transformed with an orthonormal DCT-II, scaled and
rounded to an integer level in [-127, 127], and emitted frequency-major so
that low-frequency bands come first. Trailing all-zero bands are dropped,
which gives variable-length sequences terminated by EOS.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

HORIZON = 8
ACTION_DIM = 3
LEVELS = 127
N_LEVELS = 2 * LEVELS + 1
BOS = N_LEVELS
EOS = N_LEVELS + 1
VOCAB_SIZE = N_LEVELS + 2
SCALE = 128.0
MAX_TOKENS = HORIZON * ACTION_DIM + 1

MAX_MOVE = 0.15
MAX_GRIP = 1.0

# round-trip error bound implied by orthonormality
ROUNDTRIP_BOUND = np.sqrt(HORIZON) * 0.5 / SCALE


class MalformedSequence(ValueError):
    pass


class DomainError(ValueError):
    pass


def token_id(level: int) -> int:
    return int(level) + LEVELS


def token_level(tok: int) -> int:
    return int(tok) - LEVELS


def _dct_matrix(n: int) -> np.ndarray:
    t = np.arange(n)
    f = np.arange(n)[:, None]
    basis = np.cos(np.pi * (2 * t + 1) * f / (2 * n))
    alpha = np.full((n, 1), np.sqrt(2.0 / n))
    alpha[0, 0] = np.sqrt(1.0 / n)
    return alpha * basis


_DCT = _dct_matrix(HORIZON)


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class ActionChunk:
    """H x D block of (dx, dy, gripper) commands."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (HORIZON, ACTION_DIM):
            raise DomainError(f"chunk must be {HORIZON}x{ACTION_DIM}, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise DomainError("chunk has non-finite entries")
        if np.any(np.abs(v[:, :2]) > MAX_MOVE + 1e-12) or np.any(np.abs(v[:, 2]) > MAX_GRIP + 1e-12):
            raise DomainError("chunk outside action bounds")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def clipped(cls, values) -> "ActionChunk":
        v = np.asarray(values, dtype=np.float64).copy()
        v[:, :2] = np.clip(v[:, :2], -MAX_MOVE, MAX_MOVE)
        v[:, 2] = np.clip(v[:, 2], -MAX_GRIP, MAX_GRIP)
        return cls(v)


class ActionTokenizer:
    """Stateless apart from the ``saturations`` diagnostic counter."""

    def __init__(self):
        self.saturations = 0

    def encode(self, chunk: ActionChunk) -> list[int]:
        coeffs = _DCT @ chunk.values  # (H, D), row f is frequency band f
        q = round_half_away(SCALE * coeffs)
        clipped = np.clip(q, -LEVELS, LEVELS)
        self.saturations += int(np.count_nonzero(clipped != q))
        q = clipped.astype(np.int64)

        n_bands = HORIZON
        while n_bands > 1 and not q[n_bands - 1].any():
            n_bands -= 1
        tokens = [token_id(level) for level in q[:n_bands].reshape(-1)]
        tokens.append(EOS)
        return tokens

    def decode(self, tokens) -> ActionChunk:
        return ActionChunk.clipped(decode_values(tokens))


def validate(tokens) -> None:
    tokens = list(tokens)
    if not tokens or tokens[-1] != EOS:
        raise MalformedSequence("sequence must end with EOS")
    if len(tokens) > MAX_TOKENS:
        raise MalformedSequence(f"sequence longer than {MAX_TOKENS}")
    if (len(tokens) - 1) % ACTION_DIM or len(tokens) == 1:
        raise MalformedSequence("action tokens must form whole frequency bands")
    for t in tokens[:-1]:
        if not 0 <= t < N_LEVELS:
            raise MalformedSequence(f"non-action id {t} before EOS")


def decode_values(tokens) -> np.ndarray:
    """Inverse DCT of the dequantized bands; no bound clipping."""
    validate(tokens)
    levels = np.array([token_level(t) for t in tokens[:-1]], dtype=np.float64)
    coeffs = np.zeros((HORIZON, ACTION_DIM))
    coeffs[: len(levels) // ACTION_DIM] = levels.reshape(-1, ACTION_DIM) / SCALE
    return _DCT.T @ coeffs


_default = ActionTokenizer()


def encode(chunk: ActionChunk) -> list[int]:
    return _default.encode(chunk)


def decode(tokens) -> ActionChunk:
    return _default.decode(tokens)
