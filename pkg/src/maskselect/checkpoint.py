"""Binary checkpoint format and atomic file helpers.

Layout: ``b"MGSL"`` | u32 version | u32 metadata length | UTF-8 JSON metadata |
float32 tensors (little-endian) concatenated in manifest order.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import asdict

import numpy as np
import torch

from . import tokenizer as tk
from .policy import ActionPolicy, ModelConfig

MAGIC = b"MGSL"
VERSION = 1


class CheckpointError(ValueError):
    pass


def atomic_write(path, data: bytes | str) -> None:
    """Write via a temp file in the target directory, then rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def vocab_header() -> dict:
    return {
        "levels": tk.N_LEVELS,
        "bos": tk.BOS,
        "eos": tk.EOS,
        "vocab_size": tk.VOCAB_SIZE,
        "scale": tk.SCALE,
        "horizon": tk.HORIZON,
        "action_dim": tk.ACTION_DIM,
    }


def to_bytes(model: ActionPolicy, metadata: dict | None = None) -> bytes:
    state = model.state_dict()
    manifest = [{"name": name, "shape": list(t.shape)} for name, t in state.items()]
    meta = dict(metadata or {})
    meta.update({
        "architecture": asdict(model.cfg),
        "vocab": vocab_header(),
        "n_params": model.n_params(),
        "manifest": manifest,
    })
    header = canonical_json(meta).encode("utf-8")
    body = b"".join(
        t.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes() for t in state.values()
    )
    return MAGIC + struct.pack("<II", VERSION, len(header)) + header + body


def from_bytes(blob: bytes, dtype=torch.float64) -> tuple[ActionPolicy, dict]:
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CheckpointError("bad magic")
    version, meta_len = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    try:
        meta = json.loads(blob[12:12 + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError("corrupt metadata") from exc
    body = blob[12 + meta_len:]
    manifest = meta["manifest"]
    n_values = sum(int(np.prod(e["shape"], dtype=np.int64)) for e in manifest)
    if n_values * 4 != len(body):
        raise CheckpointError(f"manifest expects {n_values * 4} bytes, found {len(body)}")
    model = ActionPolicy(ModelConfig(**meta["architecture"]), dtype=dtype)
    flat = np.frombuffer(body, dtype="<f4")
    state, offset = {}, 0
    for e in manifest:
        n = int(np.prod(e["shape"], dtype=np.int64))
        state[e["name"]] = torch.from_numpy(flat[offset:offset + n].astype(np.float64).reshape(e["shape"])).to(dtype)
        offset += n
    model.load_state_dict(state)
    model.eval()
    extra = {k: v for k, v in meta.items() if k not in ("architecture", "vocab", "n_params", "manifest")}
    return model, extra


def save(path, model: ActionPolicy, metadata: dict | None = None) -> None:
    atomic_write(path, to_bytes(model, metadata))


def load(path, dtype=torch.float64) -> tuple[ActionPolicy, dict]:
    with open(path, "rb") as fh:
        return from_bytes(fh.read(), dtype)
