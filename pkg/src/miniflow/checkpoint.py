"""CKPT training-state container and the LATS generated-latent container.

CKPT v1 layout (little-endian):

    magic "CKPT" | u32 version | u64 step
    u32 config length | canonical config text (UTF-8)
    u32 meta length   | canonical JSON: adam step + train rng state
    u32 tensor count  | per tensor (sorted by name):
        u32 name length | name | u32 ndim | u32 dims... | f64 data

Sorting plus canonical config/JSON text make save -> load -> save produce
byte-identical files.

LATS reuses the TEMB record layout (magic "LATS"): ids may repeat, each
record carries one latent as C rows of H*W float32 values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from miniflow.binio import FormatError, Reader, Writer
from miniflow.config import RunConfig, parse_config, serialize_config
from miniflow.model import ModelParams
from miniflow.optim import Adam
from miniflow.supervision import ProjectionHead

CKPT_MAGIC = b"CKPT"
CKPT_VERSION = 1
LATS_MAGIC = b"LATS"
LATS_VERSION = 1


@dataclass
class TrainState:
    config: RunConfig
    step: int
    params: ModelParams
    head: ProjectionHead | None
    opt: Adam
    train_rng: np.random.Generator


def _state_tensors(state: TrainState) -> dict[str, np.ndarray]:
    tensors = dict(state.params.arrays)
    if state.head is not None:
        for name, arr in state.head.arrays.items():
            tensors[f"proj.{name}"] = arr
    for name, arr in state.opt.m.items():
        tensors[f"adam.m.{name}"] = arr
    for name, arr in state.opt.v.items():
        tensors[f"adam.v.{name}"] = arr
    return tensors


def save_checkpoint(state: TrainState, path) -> None:
    w = Writer()
    w.magic(CKPT_MAGIC)
    w.u32(CKPT_VERSION)
    w.u64(state.step)

    config_text = serialize_config(state.config).encode("utf-8")
    w.u32(len(config_text))
    w.raw(config_text)

    meta = {
        "adam_step": state.opt.step_count,
        "train_rng": state.train_rng.bit_generator.state,
    }
    meta_text = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    w.u32(len(meta_text))
    w.raw(meta_text)

    tensors = _state_tensors(state)
    w.u32(len(tensors))
    for name in sorted(tensors):
        arr = tensors[name]
        encoded = name.encode("utf-8")
        w.u32(len(encoded))
        w.raw(encoded)
        w.u32(arr.ndim)
        for dim in arr.shape:
            w.u32(dim)
        w.f64_array(arr)
    with open(path, "wb") as f:
        f.write(w.getvalue())


def load_checkpoint(path) -> TrainState:
    with open(path, "rb") as f:
        r = Reader(f.read(), name=str(path))
    r.magic(CKPT_MAGIC)
    version = r.u32("version")
    if version != CKPT_VERSION:
        raise FormatError(f"{r.name}: unsupported checkpoint version {version}")
    step = r.u64("step")

    config_text = r.take(r.u32("config length"), "config text").decode("utf-8")
    config = parse_config(config_text, source=f"{r.name}#config")

    meta_text = r.take(r.u32("meta length"), "meta json").decode("utf-8")
    try:
        meta = json.loads(meta_text)
    except json.JSONDecodeError as e:
        raise FormatError(f"{r.name}: corrupt meta block: {e}") from None

    tensors: dict[str, np.ndarray] = {}
    count = r.u32("tensor count")
    for i in range(count):
        name = r.take(r.u32(f"name length of tensor {i}"), f"name of tensor {i}").decode("utf-8")
        if name in tensors:
            raise FormatError(f"{r.name}: duplicate tensor {name!r}")
        ndim = r.u32(f"ndim of {name}")
        shape = tuple(r.u32(f"dim of {name}") for _ in range(ndim))
        n_elem = int(np.prod(shape)) if shape else 1
        tensors[name] = r.f64_array(n_elem, f"data of {name}").reshape(shape)
    r.expect_eof()

    model_arrays = {k: v for k, v in tensors.items()
                    if not k.startswith(("proj.", "adam."))}
    params = ModelParams(config.model, model_arrays)

    head = None
    head_arrays = {k[len("proj."):]: v for k, v in tensors.items() if k.startswith("proj.")}
    if head_arrays:
        if config.align is None:
            raise FormatError(f"{r.name}: projection tensors present but supervision disabled in config")
        head = ProjectionHead(config.align.variant, config.model.hidden_dim,
                              config.teacher.embed_dim, head_arrays,
                              config.align.num_queries)

    opt = Adam(lr=config.optimizer.lr, beta1=config.optimizer.beta1,
               beta2=config.optimizer.beta2, eps=config.optimizer.eps)
    opt.load_state({
        "step_count": meta["adam_step"],
        "m": {k[len("adam.m."):]: v for k, v in tensors.items() if k.startswith("adam.m.")},
        "v": {k[len("adam.v."):]: v for k, v in tensors.items() if k.startswith("adam.v.")},
    })

    rng = np.random.default_rng()
    rng.bit_generator.state = meta["train_rng"]
    return TrainState(config=config, step=step, params=params, head=head,
                      opt=opt, train_rng=rng)


# ---------------------------------------------------------------------------
# generated latents


def write_latents(path, latents: np.ndarray, caption_ids) -> None:
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim != 4:
        raise ValueError(f"expected [N, C, H, W] latents, got {latents.shape}")
    n, c, h, wd = latents.shape
    ids = list(caption_ids)
    if len(ids) != n:
        raise ValueError(f"{n} latents vs {len(ids)} caption ids")
    w = Writer()
    w.magic(LATS_MAGIC)
    w.u32(LATS_VERSION)
    w.u32(n)
    w.u32(c)
    w.u32(h * wd)
    for i in range(n):
        w.u64(int(ids[i]))
        w.f32_array(latents[i])
    with open(path, "wb") as f:
        f.write(w.getvalue())


def read_latents(path, latent_shape: tuple[int, int, int] | None = None):
    """Returns (caption_ids list, latents [N, C, rows*cols] or reshaped)."""
    with open(path, "rb") as f:
        r = Reader(f.read(), name=str(path))
    r.magic(LATS_MAGIC)
    version = r.u32("version")
    if version != LATS_VERSION:
        raise FormatError(f"{r.name}: unsupported LATS version {version}")
    n = r.u32("record count")
    c = r.u32("channel count")
    hw = r.u32("pixels per channel")
    ids, rows = [], []
    for i in range(n):
        ids.append(r.u64(f"caption id of record {i}"))
        rows.append(r.f32_array(c * hw, f"latent payload of record {i}").reshape(c, hw))
    r.expect_eof()
    latents = np.stack(rows) if rows else np.zeros((0, c, hw))
    if latent_shape is not None:
        lc, lh, lw = latent_shape
        if (c, hw) != (lc, lh * lw):
            raise FormatError(f"{r.name}: latents are ({c}, {hw}), config wants {latent_shape}")
        latents = latents.reshape(len(rows) or 0, lc, lh, lw)
    return ids, latents
