"""Independent numpy re-implementation of the training loss for oracle use.

This forward is written directly against broadcast numpy (no tape, no shared
op layer) so it can double as (a) an equivalence check on the tape-built
loss and (b) a vectorized central-difference engine: every parameter may
carry a leading perturbation axis Q, and the loss comes back as [Q].
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

EPS = 1e-6


def _ln(x):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + EPS)


def _softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _split_heads(x, heads):
    n, d = x.shape[-2], x.shape[-1]
    x = x.reshape(x.shape[:-1] + (heads, d // heads))
    return np.swapaxes(x, -3, -2)


def _merge_heads(x):
    x = np.swapaxes(x, -3, -2)
    return x.reshape(x.shape[:-2] + (x.shape[-2] * x.shape[-1],))


def _bcast_concat(a, b, axis=-2):
    lead = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    a = np.broadcast_to(a, lead + a.shape[-2:])
    b = np.broadcast_to(b, lead + b.shape[-2:])
    return np.concatenate([a, b], axis=axis)


def _patchify(z, patch):
    c, h, w = z.shape
    gh, gw = h // patch, w // patch
    x = z.reshape(c, gh, patch, gw, patch).transpose(1, 3, 0, 2, 4)
    return x.reshape(gh * gw, c * patch * patch)


def _sinusoid(t, dim):
    half = dim // 2
    freqs = np.geomspace(1.0, 1e4, num=half) if half > 1 else np.ones(1)
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


def _modulation(cond, w, b):
    return np.matmul(expit(cond) * cond, w) + b[..., None, :]


def reference_total_loss(cfg, p, head, sample, text_cond, pooled_teacher,
                         tap_depth, lam):
    """L_total for one flow sample; every param in ``p``/``head`` must carry
    exactly one leading perturbation axis (length Q or 1, broadcastable);
    returns losses [Q]."""
    d = cfg.hidden_dim
    patches = _patchify(sample.z_t, cfg.patch_size)[None]  # [1, P, pd]

    img = np.matmul(patches, p["patch_embed.w"]) + p["patch_embed.b"][..., None, :]
    img = img + p["pos_embed"]
    txt = np.matmul(text_cond[None], p["text_embed.w"]) + p["text_embed.b"][..., None, :]

    temb = _sinusoid(sample.t, cfg.time_dim)[None, None]  # [1, 1, ted]
    cond = np.matmul(temb, p["time_mlp.w1"]) + p["time_mlp.b1"][..., None, :]
    cond = expit(cond) * cond
    cond = np.matmul(cond, p["time_mlp.w2"]) + p["time_mlp.b2"][..., None, :]

    tapped = None
    for i in range(cfg.depth):
        bi, bt = f"blocks.{i}.img", f"blocks.{i}.txt"
        im = _modulation(cond, p[f"{bi}.attn_mod.w"], p[f"{bi}.attn_mod.b"])
        tm = _modulation(cond, p[f"{bt}.attn_mod.w"], p[f"{bt}.attn_mod.b"])
        img_in = _ln(img) * (1 + im[..., d:2 * d]) + im[..., 0:d]
        txt_in = _ln(txt) * (1 + tm[..., d:2 * d]) + tm[..., 0:d]

        def qkv(x, base):
            return (np.matmul(x, p[f"{base}.wq"]) + p[f"{base}.bq"][..., None, :],
                    np.matmul(x, p[f"{base}.wk"]) + p[f"{base}.bk"][..., None, :],
                    np.matmul(x, p[f"{base}.wv"]) + p[f"{base}.bv"][..., None, :])

        qi, ki, vi = qkv(img_in, bi)
        qt, kt, vt = qkv(txt_in, bt)
        q = _split_heads(_bcast_concat(qi, qt), cfg.heads)
        k = _split_heads(_bcast_concat(ki, kt), cfg.heads)
        v = _split_heads(_bcast_concat(vi, vt), cfg.heads)
        scores = np.matmul(q, np.swapaxes(k, -1, -2)) / np.sqrt(cfg.head_dim)
        joined = _merge_heads(np.matmul(_softmax(scores), v))
        n_img = cfg.num_patches
        att_i = np.matmul(joined[..., :n_img, :], p[f"{bi}.wo"]) + p[f"{bi}.bo"][..., None, :]
        att_t = np.matmul(joined[..., n_img:, :], p[f"{bt}.wo"]) + p[f"{bt}.bo"][..., None, :]
        img = img + im[..., 2 * d:] * att_i
        txt = txt + tm[..., 2 * d:] * att_t

        for name, base in (("img", bi), ("txt", bt)):
            x = img if name == "img" else txt
            mm = _modulation(cond, p[f"{base}.mlp_mod.w"], p[f"{base}.mlp_mod.b"])
            x_in = _ln(x) * (1 + mm[..., d:2 * d]) + mm[..., 0:d]
            h = np.matmul(x_in, p[f"{base}.mlp.w1"]) + p[f"{base}.mlp.b1"][..., None, :]
            h = expit(h) * h
            h = np.matmul(h, p[f"{base}.mlp.w2"]) + p[f"{base}.mlp.b2"][..., None, :]
            if name == "img":
                img = img + mm[..., 2 * d:] * h
            else:
                txt = txt + mm[..., 2 * d:] * h
        if tap_depth == i + 1:
            tapped = img

    fm_mod = _modulation(cond, p["final_mod.w"], p["final_mod.b"])
    out = _ln(img) * (1 + fm_mod[..., d:2 * d]) + fm_mod[..., 0:d]
    vel_tokens = np.matmul(out, p["final_head.w"]) + p["final_head.b"][..., None, :]

    c, hgt, wid = cfg.latent_shape
    gh, gw = cfg.grid
    ps = cfg.patch_size
    q_lead = vel_tokens.shape[0]
    vel = vel_tokens.reshape(q_lead, gh, gw, c, ps, ps)
    vel = vel.transpose(0, 3, 1, 4, 2, 5).reshape(q_lead, c, hgt, wid)

    resid = vel - sample.u_t
    fm = (resid * resid).mean(axis=(-3, -2, -1))

    hidden = np.matmul(tapped, head["w1"]) + head["b1"][..., None, :]
    hidden = expit(hidden) * hidden
    rows = np.matmul(hidden, head["w2"]) + head["b2"][..., None, :]
    norms = np.sqrt((rows * rows).sum(axis=-1, keepdims=True))
    rows_n = rows / np.where(norms == 0, 1.0, norms)
    cos = np.matmul(rows_n, pooled_teacher[:, None])[..., 0]
    align = 1.0 - cos.mean(axis=-1)
    return fm + lam * align


def batched_central_differences(loss_fn, base: dict[str, np.ndarray], h: float = 1e-5,
                                chunk: int = 512) -> dict[str, np.ndarray]:
    """Per-element central differences of ``loss_fn(params)`` over every array
    in ``base``, evaluating up to ``chunk`` perturbations per vectorized call.

    ``loss_fn`` receives {name: [Q, ...]} stacks and must return [Q] losses.
    """
    stacked = {k: v[None] for k, v in base.items()}
    grads = {}
    for name, arr in base.items():
        flat = arr.reshape(-1)
        grad = np.empty_like(flat)
        for lo in range(0, flat.size, chunk):
            hi = min(lo + chunk, flat.size)
            n = hi - lo
            block = np.repeat(arr[None], 2 * n, axis=0).reshape(2 * n, -1)
            idx = np.arange(lo, hi)
            block[2 * np.arange(n), idx] += h
            block[2 * np.arange(n) + 1, idx] -= h
            trial = dict(stacked)
            trial[name] = block.reshape((2 * n,) + arr.shape)
            # params the loss never reads keep a length-1 lead axis; that is
            # a correct constant loss, so expand it (their fd is exactly 0)
            losses = np.broadcast_to(loss_fn(trial), (2 * n,))
            grad[lo:hi] = (losses[0::2] - losses[1::2]) / (2.0 * h)
        grads[name] = grad.reshape(arr.shape)
    return grads


def grad_rel_err(analytic: np.ndarray, fd: np.ndarray, floor: float = 1e-4) -> float:
    """Max relative error with a denominator floor that absorbs the
    oracle's own f64 roundoff (~1e-11 absolute at h=1e-5)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), floor)
    return float(np.max(np.abs(analytic - fd) / denom))
