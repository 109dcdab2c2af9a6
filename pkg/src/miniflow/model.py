"""Miniature dual-stream multimodal diffusion transformer.

Text and image tokens travel as parallel sequences; every block runs one
joint-attention sub-layer (keys/values concatenated across streams) and one
per-stream MLP sub-layer, each wrapped in adaptive layer-norm modulation
driven by the timestep embedding. The image stream can be tapped after any
block; the tap is strictly read-only so sampling never pays for it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from miniflow import tensor as T
from miniflow.tensor import ShapeError, Tape, Tensor


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 6
    hidden_dim: int = 64
    heads: int = 4
    latent_shape: tuple[int, int, int] = (4, 8, 8)
    patch_size: int = 2
    text_tokens: int = 8
    text_embed_dim: int = 32
    time_embed_dim: int | None = None
    mlp_ratio: int = 4

    def __post_init__(self):
        c, h, w = self.latent_shape
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.hidden_dim % self.heads != 0:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")
        if h % self.patch_size != 0 or w % self.patch_size != 0:
            raise ValueError(f"latent {h}x{w} not divisible by patch_size {self.patch_size}")
        if self.time_dim % 2 != 0:
            raise ValueError(f"time_embed_dim must be even, got {self.time_dim}")

    @property
    def time_dim(self) -> int:
        return self.time_embed_dim if self.time_embed_dim is not None else self.hidden_dim

    @property
    def grid(self) -> tuple[int, int]:
        _, h, w = self.latent_shape
        return h // self.patch_size, w // self.patch_size

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def patch_dim(self) -> int:
        return self.latent_shape[0] * self.patch_size * self.patch_size

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.heads


@dataclass(frozen=True)
class FeatureTap:
    """Capture image-stream hidden states after block ``depth_n`` (1-based)."""

    depth_n: int


class ModelParams:
    """Every learnable array of the model, keyed by a stable dotted name.

    Construction order is fixed so that parameter initialization consumes
    the rng stream identically for identical configs.
    """

    def __init__(self, cfg: ModelConfig, arrays: dict[str, np.ndarray]):
        self.cfg = cfg
        self.arrays = arrays

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator, init_std: float = 0.02) -> "ModelParams":
        d = cfg.hidden_dim
        arrays: dict[str, np.ndarray] = {}

        def normal(name, shape):
            arrays[name] = rng.normal(0.0, init_std, size=shape)

        def zeros(name, shape):
            arrays[name] = np.zeros(shape)

        normal("patch_embed.w", (cfg.patch_dim, d))
        zeros("patch_embed.b", (d,))
        normal("pos_embed", (cfg.num_patches, d))
        normal("text_embed.w", (cfg.text_embed_dim, d))
        zeros("text_embed.b", (d,))
        normal("time_mlp.w1", (cfg.time_dim, d))
        zeros("time_mlp.b1", (d,))
        normal("time_mlp.w2", (d, d))
        zeros("time_mlp.b2", (d,))
        for i in range(cfg.depth):
            for stream in ("img", "txt"):
                base = f"blocks.{i}.{stream}"
                for proj in ("wq", "wk", "wv", "wo"):
                    normal(f"{base}.{proj}", (d, d))
                for bias in ("bq", "bk", "bv", "bo"):
                    zeros(f"{base}.{bias}", (d,))
                normal(f"{base}.mlp.w1", (d, cfg.mlp_ratio * d))
                zeros(f"{base}.mlp.b1", (cfg.mlp_ratio * d,))
                normal(f"{base}.mlp.w2", (cfg.mlp_ratio * d, d))
                zeros(f"{base}.mlp.b2", (d,))
                # modulation heads start at zero: blocks begin as identities
                zeros(f"{base}.attn_mod.w", (d, 3 * d))
                zeros(f"{base}.attn_mod.b", (3 * d,))
                zeros(f"{base}.mlp_mod.w", (d, 3 * d))
                zeros(f"{base}.mlp_mod.b", (3 * d,))
        zeros("final_mod.w", (d, 2 * d))
        zeros("final_mod.b", (2 * d,))
        zeros("final_head.w", (d, cfg.patch_dim))
        zeros("final_head.b", (cfg.patch_dim,))
        return cls(cfg, arrays)

    def as_tensors(self, tape: Tape | None = None) -> dict[str, Tensor]:
        if tape is None:
            return {k: Tensor(v) for k, v in self.arrays.items()}
        return {k: tape.leaf(v) for k, v in self.arrays.items()}

    def copy(self) -> "ModelParams":
        return ModelParams(self.cfg, {k: v.copy() for k, v in self.arrays.items()})

    def num_params(self) -> int:
        return sum(v.size for v in self.arrays.values())

    def names(self) -> list[str]:
        return list(self.arrays.keys())


# ---------------------------------------------------------------------------
# building blocks


def timestep_embedding(t: float, dim: int) -> Tensor:
    """Sinusoidal embedding of a scalar time in [0, 1]."""
    return Tensor(timestep_embedding_batch(np.asarray([t], dtype=np.float64), dim)[0])


def timestep_embedding_batch(t: np.ndarray, dim: int) -> np.ndarray:
    if dim % 2 != 0:
        raise ShapeError(f"timestep embedding dim must be even, got {dim}")
    half = dim // 2
    freqs = np.geomspace(1.0, 1e4, num=half) if half > 1 else np.ones(1)
    angles = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def patchify(latent: Tensor, patch_size: int) -> Tensor:
    """[C,H,W] -> [P, C*p*p] (or batched with a leading axis), row-major patches."""
    latent = latent if isinstance(latent, Tensor) else Tensor(latent)
    batched = latent.ndim == 4
    shape = latent.shape[1:] if batched else latent.shape
    if len(shape) != 3:
        raise ShapeError(f"patchify expects [C,H,W] or [B,C,H,W], got {latent.shape}")
    c, h, w = shape
    p = patch_size
    if h % p or w % p:
        raise ShapeError(f"latent {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    if batched:
        b = latent.shape[0]
        x = T.reshape(latent, (b, c, gh, p, gw, p))
        x = T.transpose(x, (0, 2, 4, 1, 3, 5))
        return T.reshape(x, (b, gh * gw, c * p * p))
    x = T.reshape(latent, (c, gh, p, gw, p))
    x = T.transpose(x, (1, 3, 0, 2, 4))
    return T.reshape(x, (gh * gw, c * p * p))


def unpatchify(tokens: Tensor, latent_shape: tuple[int, int, int], patch_size: int) -> Tensor:
    tokens = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
    c, h, w = latent_shape
    p = patch_size
    gh, gw = h // p, w // p
    batched = tokens.ndim == 3
    if tokens.shape[-2:] != (gh * gw, c * p * p):
        raise ShapeError(f"unpatchify: tokens {tokens.shape} do not match latent {latent_shape}, patch {p}")
    if batched:
        b = tokens.shape[0]
        x = T.reshape(tokens, (b, gh, gw, c, p, p))
        x = T.transpose(x, (0, 3, 1, 4, 2, 5))
        return T.reshape(x, (b, c, h, w))
    x = T.reshape(tokens, (gh, gw, c, p, p))
    x = T.transpose(x, (2, 0, 3, 1, 4))
    return T.reshape(x, (c, h, w))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.add_bias(T.matmul(x, w), b)


def adaln_modulate(x: Tensor, cond: Tensor, w: Tensor, b: Tensor, eps: float = 1e-6) -> tuple[Tensor, Tensor]:
    """AdaLN sub-layer entry: (layer_norm(x)*(1+scale)+shift, gate).

    ``x`` is [..., tokens, d]; ``cond`` is [..., 1, d]. The head ``w, b``
    maps silu(cond) to (shift, scale, gate); zero-initialized heads leave
    x normalized-but-unshifted and gate the sub-layer off entirely.
    """
    d = x.shape[-1]
    mod = linear(T.silu(cond), w, b)
    n = x.shape[-2]
    shift = T.expand(T.slice_last(mod, 0, d), -2, n)
    sc = T.slice_last(mod, d, 2 * d)
    gate = T.expand(T.slice_last(mod, 2 * d, 3 * d), -2, n)
    scale1 = T.expand(sc + 1.0, -2, n)
    return T.mul(T.layer_norm(x, eps), scale1) + shift, gate


def _split_heads(x: Tensor, heads: int) -> Tensor:
    """[..., n, d] -> [..., heads, n, d/heads]"""
    n, d = x.shape[-2], x.shape[-1]
    lead = x.shape[:-2]
    x = T.reshape(x, lead + (n, heads, d // heads))
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return T.transpose(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    """[..., heads, n, hd] -> [..., n, heads*hd]"""
    lead = x.shape[:-3]
    heads, n, hd = x.shape[-3:]
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return T.reshape(T.transpose(x, axes), lead + (n, heads * hd))


def joint_attention(img: Tensor, txt: Tensor, p: dict[str, Tensor], block: int, cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    """Symmetric joint attention: each stream queries the concatenated K/V."""
    P, Tn = img.shape[-2], txt.shape[-2]
    bi, bt = f"blocks.{block}.img", f"blocks.{block}.txt"
    q_img = linear(img, p[f"{bi}.wq"], p[f"{bi}.bq"])
    k_img = linear(img, p[f"{bi}.wk"], p[f"{bi}.bk"])
    v_img = linear(img, p[f"{bi}.wv"], p[f"{bi}.bv"])
    q_txt = linear(txt, p[f"{bt}.wq"], p[f"{bt}.bq"])
    k_txt = linear(txt, p[f"{bt}.wk"], p[f"{bt}.bk"])
    v_txt = linear(txt, p[f"{bt}.wv"], p[f"{bt}.bv"])

    k = _split_heads(T.concat([k_img, k_txt], axis=-2), cfg.heads)
    v = _split_heads(T.concat([v_img, v_txt], axis=-2), cfg.heads)
    q = _split_heads(T.concat([q_img, q_txt], axis=-2), cfg.heads)

    kt_axes = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    scores = T.scale(T.matmul(q, T.transpose(k, kt_axes)), 1.0 / math.sqrt(cfg.head_dim))
    attn = T.matmul(T.softmax(scores, axis=-1), v)
    joined = _merge_heads(attn)

    img_attn = _take_tokens(joined, 0, P)
    txt_attn = _take_tokens(joined, P, P + Tn)
    img_out = linear(img_attn, p[f"{bi}.wo"], p[f"{bi}.bo"])
    txt_out = linear(txt_attn, p[f"{bt}.wo"], p[f"{bt}.bo"])
    return img_out, txt_out


def _take_tokens(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice along the token axis (second to last)."""
    axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    return T.transpose(T.slice_last(T.transpose(x, axes), start, stop), axes)


def _block(img: Tensor, txt: Tensor, cond: Tensor, p: dict[str, Tensor], i: int, cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    bi, bt = f"blocks.{i}.img", f"blocks.{i}.txt"
    img_mod, img_gate = adaln_modulate(img, cond, p[f"{bi}.attn_mod.w"], p[f"{bi}.attn_mod.b"])
    txt_mod, txt_gate = adaln_modulate(txt, cond, p[f"{bt}.attn_mod.w"], p[f"{bt}.attn_mod.b"])
    img_attn, txt_attn = joint_attention(img_mod, txt_mod, p, i, cfg)
    img = img + T.mul(img_gate, img_attn)
    txt = txt + T.mul(txt_gate, txt_attn)

    for stream, base in (("img", bi), ("txt", bt)):
        x = img if stream == "img" else txt
        x_mod, gate = adaln_modulate(x, cond, p[f"{base}.mlp_mod.w"], p[f"{base}.mlp_mod.b"])
        h = T.silu(linear(x_mod, p[f"{base}.mlp.w1"], p[f"{base}.mlp.b1"]))
        h = linear(h, p[f"{base}.mlp.w2"], p[f"{base}.mlp.b2"])
        x = x + T.mul(gate, h)
        if stream == "img":
            img = x
        else:
            txt = x
    return img, txt


def mmdit_forward_batch(
    p: dict[str, Tensor],
    cfg: ModelConfig,
    z_t: np.ndarray,
    t: np.ndarray,
    text_cond: np.ndarray,
    tap: FeatureTap | None = None,
) -> tuple[Tensor, Tensor | None]:
    """Batched forward: z_t [B,C,H,W], t [B], text_cond [B,T,text_embed_dim].

    Returns (velocity [B,C,H,W], tapped [B,P,d] or None). The tap records a
    reference to the post-block hidden states and never alters the velocity.
    """
    z_t = np.asarray(z_t, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    text_cond = np.asarray(text_cond, dtype=np.float64)
    b = z_t.shape[0]
    if z_t.shape[1:] != cfg.latent_shape:
        raise ShapeError(f"latent shape {z_t.shape[1:]} does not match config {cfg.latent_shape}")
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError(f"timesteps must lie in [0, 1], got range [{t.min()}, {t.max()}]")
    if text_cond.shape != (b, cfg.text_tokens, cfg.text_embed_dim):
        raise ShapeError(f"text_cond shape {text_cond.shape} does not match config "
                         f"({b}, {cfg.text_tokens}, {cfg.text_embed_dim})")
    if tap is not None and not 1 <= tap.depth_n <= cfg.depth:
        raise ValueError(f"tap depth {tap.depth_n} outside [1, {cfg.depth}]")

    img = linear(patchify(Tensor(z_t), cfg.patch_size), p["patch_embed.w"], p["patch_embed.b"])
    img = img + T.expand(T.reshape(p["pos_embed"], (1, cfg.num_patches, cfg.hidden_dim)), 0, b)
    txt = linear(Tensor(text_cond), p["text_embed.w"], p["text_embed.b"])

    temb = timestep_embedding_batch(t, cfg.time_dim)[:, None, :]
    cond = T.silu(linear(Tensor(temb), p["time_mlp.w1"], p["time_mlp.b1"]))
    cond = linear(cond, p["time_mlp.w2"], p["time_mlp.b2"])

    tapped = None
    for i in range(cfg.depth):
        img, txt = _block(img, txt, cond, p, i, cfg)
        if tap is not None and tap.depth_n == i + 1:
            tapped = img

    d = cfg.hidden_dim
    mod = linear(T.silu(cond), p["final_mod.w"], p["final_mod.b"])
    shift = T.expand(T.slice_last(mod, 0, d), -2, cfg.num_patches)
    scale1 = T.expand(T.slice_last(mod, d, 2 * d) + 1.0, -2, cfg.num_patches)
    out = T.mul(T.layer_norm(img), scale1) + shift
    vel_tokens = linear(out, p["final_head.w"], p["final_head.b"])
    velocity = unpatchify(vel_tokens, cfg.latent_shape, cfg.patch_size)
    return velocity, tapped


def mmdit_forward(
    z_t,
    t: float,
    text_cond: np.ndarray,
    params: ModelParams,
    tap: FeatureTap | None = None,
    tensors: dict[str, Tensor] | None = None,
) -> tuple[Tensor, Tensor | None]:
    """Single-sample forward; see mmdit_forward_batch."""
    cfg = params.cfg
    p = tensors if tensors is not None else params.as_tensors()
    z = np.asarray(z_t.data if isinstance(z_t, Tensor) else z_t, dtype=np.float64)
    vel, tapped = mmdit_forward_batch(
        p, cfg, z[None], np.asarray([t]), np.asarray(text_cond, dtype=np.float64)[None], tap)
    velocity = T.reshape(vel, cfg.latent_shape)
    if tapped is not None:
        tapped = T.reshape(tapped, (cfg.num_patches, cfg.hidden_dim))
    return velocity, tapped
