"""Vision-aligned text-feature supervision of the image branch.

A frozen teacher provides per-caption token embeddings; a trainable
projection head maps tapped image-stream features into the teacher's
space; the alignment loss is the mean cosine distance between projected
rows and the pooled teacher vector. The total objective adds this to the
flow-matching loss with weight lambda, and the whole branch vanishes at
inference.

Teacher embeddings travel in the TEMB container:

    bytes 0-3   ASCII magic "TEMB"
    u32 LE      version (= 1)
    u32 LE      record count N
    u32 LE      token count K
    u32 LE      embedding width e
    N records:  u64 LE caption_id, then K*e little-endian IEEE-754 f32,
                row-major (token-major)

The loader upcasts f32 -> f64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from miniflow import tensor as T
from miniflow.binio import FormatError, Reader, Writer
from miniflow.model import FeatureTap, ModelParams, mmdit_forward_batch
from miniflow.optim import Adam
from miniflow.tensor import ShapeError, Tape, Tensor

TEMB_MAGIC = b"TEMB"
TEMB_VERSION = 1


@dataclass(frozen=True)
class TeacherEmbedding:
    """Frozen token embeddings for one caption. Never on any tape."""

    caption_id: int
    vectors: np.ndarray  # [K, e]

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2:
            raise ShapeError(f"teacher vectors must be [K, e], got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError(f"teacher embedding {self.caption_id} has non-finite entries")
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)

    def pooled(self) -> np.ndarray:
        """L2-normalized mean of the token vectors (zero if degenerate)."""
        m = self.vectors.mean(axis=0)
        n = np.linalg.norm(m)
        return m / n if n > 0 else np.zeros_like(m)


def synthetic_teacher(caption_id: int, e: int = 24, k: int = 4, seed: int = 0) -> TeacherEmbedding:
    """Deterministic stand-in for a frozen text encoder: hash-seeded Gaussian
    token rows, L2-normalized. Same (caption_id, seed) -> identical bytes."""
    if e < 1 or k < 1:
        raise ValueError(f"need e >= 1 and k >= 1, got e={e}, k={k}")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(int(seed), int(caption_id), 0x7EA)))
    rows = rng.normal(size=(k, e))
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    rows = rows / np.where(norms == 0, 1.0, norms)
    return TeacherEmbedding(caption_id=caption_id, vectors=rows)


def build_teacher_map(caption_ids: Sequence[int], e: int = 24, k: int = 4,
                      seed: int = 0) -> dict[int, TeacherEmbedding]:
    return {cid: synthetic_teacher(cid, e=e, k=k, seed=seed) for cid in sorted(set(caption_ids))}


def store_teacher_file(path, teacher_map: Mapping[int, TeacherEmbedding]) -> None:
    """Write a TEMB v1 file; records sorted by caption id for canonical bytes."""
    items = sorted(teacher_map.items())
    if not items:
        raise ValueError("refusing to write an empty teacher file")
    k, e = items[0][1].vectors.shape
    for cid, emb in items:
        if emb.vectors.shape != (k, e):
            raise ShapeError(f"teacher {cid} has shape {emb.vectors.shape}, expected ({k}, {e})")
    w = Writer()
    w.magic(TEMB_MAGIC)
    w.u32(TEMB_VERSION)
    w.u32(len(items))
    w.u32(k)
    w.u32(e)
    for cid, emb in items:
        w.u64(cid)
        w.f32_array(emb.vectors)
    with open(path, "wb") as f:
        f.write(w.getvalue())


def load_teacher_file(path) -> dict[int, TeacherEmbedding]:
    with open(path, "rb") as f:
        r = Reader(f.read(), name=str(path))
    r.magic(TEMB_MAGIC)
    version = r.u32("version")
    if version != TEMB_VERSION:
        raise FormatError(f"{r.name}: unsupported TEMB version {version}, expected {TEMB_VERSION}")
    n = r.u32("record count")
    k = r.u32("token count")
    e = r.u32("embedding width")
    if k < 1 or e < 1:
        raise FormatError(f"{r.name}: invalid dimensions K={k}, e={e}")
    out: dict[int, TeacherEmbedding] = {}
    for i in range(n):
        cid = r.u64(f"caption id of record {i}")
        if cid in out:
            raise FormatError(f"{r.name}: duplicate caption id {cid} at record {i}")
        vecs = r.f32_array(k * e, f"embedding payload of record {i}").reshape(k, e)
        out[cid] = TeacherEmbedding(caption_id=cid, vectors=vecs)
    r.expect_eof()
    return out


# ---------------------------------------------------------------------------
# projection heads


@dataclass(frozen=True)
class AlignmentConfig:
    """Ablation axes of the supervision branch."""

    depth_n: int | None = None  # None resolves to depth // 3, the 1/3 stage
    lam: float = 0.1
    variant: str = "mlp"  # "mlp" | "query"
    num_queries: int = 4

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.variant not in ("mlp", "query"):
            raise ValueError(f"unknown projection variant {self.variant!r}")
        if self.num_queries < 1:
            raise ValueError(f"num_queries must be >= 1, got {self.num_queries}")

    def resolved_depth(self, model_depth: int) -> int:
        n = self.depth_n if self.depth_n is not None else max(1, model_depth // 3)
        if not 1 <= n <= model_depth:
            raise ValueError(f"injection depth {n} outside [1, {model_depth}]")
        return n


class ProjectionHead:
    """Trainable map from model width d to teacher width e.

    "mlp" applies a two-layer pointwise MLP per image token, preserving the
    token count; "query" pools through num_queries learnable query vectors
    with one cross-attention layer, emitting exactly num_queries rows.
    """

    def __init__(self, variant: str, d: int, e: int, arrays: dict[str, np.ndarray],
                 num_queries: int = 4):
        self.variant = variant
        self.d = d
        self.e = e
        self.num_queries = num_queries
        self.arrays = arrays

    @classmethod
    def init(cls, variant: str, d: int, e: int, rng: np.random.Generator,
             num_queries: int = 4) -> "ProjectionHead":
        # 1/sqrt(fan_in) keeps projected rows O(1): the cosine loss has
        # 1/||row|| curvature, so near-zero rows would explode its gradients
        std = 1.0 / np.sqrt(d)
        arrays: dict[str, np.ndarray] = {}
        if variant == "mlp":
            arrays["w1"] = rng.normal(0.0, std, size=(d, d))
            arrays["b1"] = np.zeros(d)
            arrays["w2"] = rng.normal(0.0, std, size=(d, e))
            arrays["b2"] = np.zeros(e)
        elif variant == "query":
            arrays["queries"] = rng.normal(0.0, 1.0, size=(num_queries, d))
            arrays["wk"] = rng.normal(0.0, std, size=(d, d))
            arrays["bk"] = np.zeros(d)
            arrays["wv"] = rng.normal(0.0, std, size=(d, d))
            arrays["bv"] = np.zeros(d)
            arrays["wo"] = rng.normal(0.0, std, size=(d, e))
            arrays["bo"] = np.zeros(e)
        else:
            raise ValueError(f"unknown projection variant {variant!r}")
        return cls(variant, d, e, arrays, num_queries)

    def as_tensors(self, tape: Tape | None = None) -> dict[str, Tensor]:
        if tape is None:
            return {k: Tensor(v) for k, v in self.arrays.items()}
        return {k: tape.leaf(v) for k, v in self.arrays.items()}

    def copy(self) -> "ProjectionHead":
        return ProjectionHead(self.variant, self.d, self.e,
                              {k: v.copy() for k, v in self.arrays.items()}, self.num_queries)

    def names(self) -> list[str]:
        return list(self.arrays.keys())


def project(head: ProjectionHead, h_img: Tensor, tensors: dict[str, Tensor] | None = None) -> Tensor:
    """Apply the projection head to tapped features [P, d] or [B, P, d]."""
    if h_img.shape[-1] != head.d:
        raise ShapeError(f"projection expects width {head.d}, got features {h_img.shape}")
    p = tensors if tensors is not None else head.as_tensors()
    if head.variant == "mlp":
        hidden = T.silu(T.add_bias(T.matmul(h_img, p["w1"]), p["b1"]))
        return T.add_bias(T.matmul(hidden, p["w2"]), p["b2"])

    # query pooler: learnable queries cross-attend over the image tokens
    k = T.add_bias(T.matmul(h_img, p["wk"]), p["bk"])
    v = T.add_bias(T.matmul(h_img, p["wv"]), p["bv"])
    q = p["queries"]
    if h_img.ndim == 3:
        b = h_img.shape[0]
        q = T.expand(T.reshape(q, (1, head.num_queries, head.d)), 0, b)
    kt_axes = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    scores = T.scale(T.matmul(q, T.transpose(k, kt_axes)), 1.0 / np.sqrt(head.d))
    pooled = T.matmul(T.softmax(scores, axis=-1), v)
    return T.add_bias(T.matmul(pooled, p["wo"]), p["bo"])


# ---------------------------------------------------------------------------
# losses


@dataclass
class AlignDiagnostics:
    zero_rows: int = 0


def alignment_loss(teacher: TeacherEmbedding, projected: Tensor,
                   diag: AlignDiagnostics | None = None) -> Tensor:
    """Mean over projected rows of (1 - cosine(row, pooled teacher vector)).

    Rows are L2-normalized first; zero-norm rows contribute cosine 0 (loss 1)
    and are counted in ``diag``. The teacher is a detached constant.
    """
    if projected.ndim != 2:
        raise ShapeError(f"alignment_loss expects [R, e] rows, got {projected.shape}")
    if projected.shape[-1] != teacher.vectors.shape[-1]:
        raise ShapeError(f"width mismatch: projected {projected.shape} vs teacher "
                         f"{teacher.vectors.shape}")
    pooled = teacher.pooled()
    return _cosine_distance(projected, Tensor(pooled[:, None]), diag)


def alignment_loss_batch(pooled_stack: np.ndarray, projected: Tensor,
                         diag: AlignDiagnostics | None = None) -> Tensor:
    """Batched alignment: projected [B, R, e] against per-sample pooled
    teacher vectors [B, e]; mean over all B*R rows."""
    if projected.ndim != 3 or pooled_stack.shape != (projected.shape[0], projected.shape[2]):
        raise ShapeError(f"batched alignment: projected {projected.shape} vs pooled "
                         f"{pooled_stack.shape}")
    return _cosine_distance(projected, Tensor(pooled_stack[:, :, None]), diag)


def _cosine_distance(projected: Tensor, pooled_col: Tensor, diag: AlignDiagnostics | None) -> Tensor:
    if diag is not None:
        norms = np.linalg.norm(projected.data, axis=-1)
        diag.zero_rows += int(np.count_nonzero(norms == 0.0))
    rows = T.l2_normalize(projected, axis=-1)
    cos = T.matmul(rows, pooled_col)
    return T.scale(T.mean(cos), -1.0) + 1.0


def total_loss(fm: Tensor, align: Tensor, lam: float) -> Tensor:
    """fm + lambda * align; at lambda == 0 this IS fm, bit for bit."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    if lam == 0.0:
        return fm
    return T.add(fm, T.scale(align, lam))


# ---------------------------------------------------------------------------
# one optimization step


@dataclass
class StepStats:
    fm: float
    align: float
    total: float
    zero_rows: int = 0


def train_step(
    params: ModelParams,
    batch: Sequence[tuple],
    text_lookup: Callable[[int], np.ndarray],
    teacher_map: Mapping[int, TeacherEmbedding] | None,
    head: ProjectionHead | None,
    acfg: AlignmentConfig | None,
    opt: Adam,
) -> tuple[ModelParams, StepStats]:
    """One joint update of model and projection-head parameters.

    ``batch`` holds (FlowSample, caption_id) pairs; ``text_lookup`` supplies
    the model's text condition per caption. With ``acfg`` (and ``head``)
    absent the supervision branch does not exist at all; with lam == 0 the
    branch is evaluated for logging but contributes neither gradients nor
    updates, so the model trajectory is identical either way.
    """
    cfg = params.cfg
    supervised = head is not None and acfg is not None
    if supervised:
        for _, cid in batch:
            if cid not in teacher_map:
                raise KeyError(f"caption id {cid} missing from teacher map")

    z_t = np.stack([s.z_t for s, _ in batch])
    u_t = np.stack([s.u_t for s, _ in batch])
    t = np.asarray([s.t for s, _ in batch])
    text = np.stack([text_lookup(cid) for _, cid in batch])

    tape = Tape()
    p = params.as_tensors(tape)
    tap = FeatureTap(acfg.resolved_depth(cfg.depth)) if supervised else None
    velocity, tapped = mmdit_forward_batch(p, cfg, z_t, t, text, tap)
    fm = T.mean(T.square(T.sub(velocity, Tensor(u_t))))

    diag = AlignDiagnostics()
    if supervised:
        hp = head.as_tensors(tape)
        projected = project(head, tapped, tensors=hp)
        pooled = np.stack([teacher_map[cid].pooled() for _, cid in batch])
        align = alignment_loss_batch(pooled, projected, diag)
        total = total_loss(fm, align, acfg.lam)
        align_val = align.item()
    else:
        total = fm
        align_val = 0.0

    total.backward()
    arrays = dict(params.arrays)
    grads = {name: tape.grad(p[name]).data for name in params.names()}
    if supervised:
        for name in head.names():
            arrays[f"proj.{name}"] = head.arrays[name]
            grads[f"proj.{name}"] = tape.grad(hp[name]).data
    opt.update(arrays, grads)

    return params, StepStats(fm=fm.item(), align=align_val, total=total.item(),
                             zero_rows=diag.zero_rows)
