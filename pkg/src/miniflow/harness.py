"""Reproducible experiment driver.

A run is a pure function of its RunConfig: rng streams are derived from the
master seed by fixed labels, logs are written with repr-exact floats, and
checkpoints capture everything needed to resume on the exact trajectory.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, replace

import numpy as np

from miniflow.checkpoint import TrainState, load_checkpoint, save_checkpoint, write_latents
from miniflow.config import ConfigError, RunConfig, serialize_config
from miniflow.data import SyntheticDataset
from miniflow.flow import euler_sample, sample_batch
from miniflow.metrics import (
    alignment_score,
    build_scoring_map,
    fit_gaussian,
    frechet_distance,
    pareto_report,
    score_features,
)
from miniflow.model import ModelParams
from miniflow.optim import Adam
from miniflow.seeds import derive_rng, derive_seed
from miniflow.supervision import (
    ProjectionHead,
    TeacherEmbedding,
    build_teacher_map,
    load_teacher_file,
    train_step,
)

METRICS_HEADER = "step,fm_loss,align_loss,total_loss"


@dataclass
class World:
    """Everything a run shares besides learnable state."""

    dataset: SyntheticDataset
    teacher_map: dict[int, TeacherEmbedding]
    scoring_map: np.ndarray


def build_world(config: RunConfig) -> World:
    dataset = SyntheticDataset(config.dataset, config.model, config.seed)
    if config.teacher.source == "synthetic":
        teacher_map = build_teacher_map(dataset.class_ids(),
                                        e=config.teacher.embed_dim,
                                        k=config.teacher.tokens,
                                        seed=derive_seed(config.seed, "teacher"))
    else:
        teacher_map = load_teacher_file(config.teacher.source)
        missing = sorted(set(dataset.class_ids()) - set(teacher_map))
        if missing:
            raise ConfigError(f"teacher file {config.teacher.source} lacks caption ids {missing}")
        widths = {emb.vectors.shape for emb in teacher_map.values()}
        k, e = next(iter(widths))
        if e != config.teacher.embed_dim or k != config.teacher.tokens:
            raise ConfigError(
                f"teacher file has K={k}, e={e}; config declares "
                f"tokens={config.teacher.tokens}, embed_dim={config.teacher.embed_dim}")
    scoring_map = build_scoring_map(dataset.prototypes, teacher_map)
    return World(dataset=dataset, teacher_map=teacher_map, scoring_map=scoring_map)


def init_state(config: RunConfig) -> TrainState:
    params = ModelParams.init(config.model, derive_rng(config.seed, "model-init"))
    head = None
    if config.align is not None:
        head = ProjectionHead.init(config.align.variant, config.model.hidden_dim,
                                   config.teacher.embed_dim,
                                   derive_rng(config.seed, "proj-init"),
                                   num_queries=config.align.num_queries)
    opt = Adam(lr=config.optimizer.lr, beta1=config.optimizer.beta1,
               beta2=config.optimizer.beta2, eps=config.optimizer.eps)
    return TrainState(config=config, step=0, params=params, head=head,
                      opt=opt, train_rng=derive_rng(config.seed, "train"))


def params_digest(params: ModelParams) -> str:
    digest = hashlib.sha256()
    for name in sorted(params.arrays):
        digest.update(name.encode())
        digest.update(params.arrays[name].tobytes())
    return digest.hexdigest()


@dataclass
class RunResult:
    state: TrainState
    checkpoint_path: str
    metrics_path: str
    initial_digest: str


def run_train(config: RunConfig, resume_from: str | None = None,
              world: World | None = None) -> RunResult:
    config.validate()
    try:
        os.makedirs(config.out_dir, exist_ok=True)
        probe = os.path.join(config.out_dir, ".write-probe")
        with open(probe, "w") as f:
            f.write("")
        os.remove(probe)
    except OSError as e:
        raise ConfigError(f"output dir {config.out_dir!r} is not writable: {e}") from None

    if world is None:
        world = build_world(config)

    if resume_from is not None:
        state = load_checkpoint(resume_from)
        # out_dir and the step target may change on resume; nothing else may
        normalized = replace(state.config, out_dir=config.out_dir, steps=config.steps)
        if serialize_config(normalized) != serialize_config(config):
            raise ConfigError("resume config does not match checkpoint config")
        state.config = config
    else:
        state = init_state(config)
    initial_digest = params_digest(state.params)

    lookup = world.dataset.text_cond
    rows = []
    for step in range(state.step + 1, config.steps + 1):
        batch = sample_batch(world.dataset, config.batch_size, state.train_rng)
        _, stats = train_step(state.params, batch, lookup, world.teacher_map,
                              state.head, config.align, state.opt)
        state.step = step
        if step == 1 or step == config.steps or step % config.log_interval == 0:
            rows.append(f"{step},{stats.fm!r},{stats.align!r},{stats.total!r}")

    metrics_path = os.path.join(config.out_dir, "metrics.csv")
    with open(metrics_path, "w", encoding="utf-8") as f:
        f.write(METRICS_HEADER + "\n")
        for row in rows:
            f.write(row + "\n")

    checkpoint_path = os.path.join(config.out_dir, "checkpoint.ckpt")
    save_checkpoint(state, checkpoint_path)
    return RunResult(state=state, checkpoint_path=checkpoint_path,
                     metrics_path=metrics_path, initial_digest=initial_digest)


def run_sample(checkpoint_path: str, caption_id: int, steps: int, count: int,
               seed: int, out_path: str | None = None) -> np.ndarray:
    """Generate ``count`` latents for one caption; deterministic under seed."""
    state = load_checkpoint(checkpoint_path)
    dataset = SyntheticDataset(state.config.dataset, state.config.model, state.config.seed)
    text = dataset.text_cond(caption_id)
    rng = derive_rng(seed, "sample")
    latents = euler_sample(state.params, text, steps=steps, rng=rng, count=count)
    if out_path is not None:
        write_latents(out_path, latents, [caption_id] * count)
    return latents


@dataclass
class EvalResult:
    frechet_gap: float
    align_score: float
    samples_per_class: int

    def row(self) -> str:
        return f"{self.frechet_gap!r},{self.align_score!r}"


def evaluate_state(state: TrainState, world: World, seed: int | None = None) -> EvalResult:
    """Fréchet gap (held-out vs generated features) plus alignment score."""
    config = state.config
    seed = config.seed if seed is None else seed
    per_class = config.eval.samples_per_class
    dataset = world.dataset

    gen_latents, gen_ids = [], []
    for cid in dataset.class_ids():
        rng = derive_rng(seed, "sample", cid)
        latents = euler_sample(state.params, dataset.text_cond(cid),
                               steps=config.eval.sample_steps, rng=rng, count=per_class)
        gen_latents.append(latents)
        gen_ids.extend([cid] * per_class)
    gen = np.concatenate(gen_latents) if gen_latents else np.zeros((0,) + config.model.latent_shape)

    real_feats = score_features(dataset.holdout_latents, world.scoring_map)
    gen_feats = score_features(gen, world.scoring_map)
    gap = frechet_distance(fit_gaussian(real_feats), fit_gaussian(gen_feats))
    score = alignment_score(world.teacher_map, gen, gen_ids, world.scoring_map)
    return EvalResult(frechet_gap=gap, align_score=score, samples_per_class=per_class)


@dataclass
class SweepCell:
    label: str
    lam: float
    depth_n: int
    result: RunResult
    eval: EvalResult


@dataclass
class SweepResult:
    cells: list[SweepCell]
    report_text_path: str
    report_csv_path: str
    report: object


def run_sweep(base: RunConfig, lams: list[float], depths: list[int]) -> SweepResult:
    """Train every (lambda, depth) cell from one shared initialization and
    emit the Pareto report over (Fréchet gap, alignment score)."""
    if not lams or not depths:
        raise ConfigError("sweep needs non-empty lambda and depth lists")
    base.validate()
    if base.align is None:
        raise ConfigError("sweep needs align.enabled = true in the base config")
    os.makedirs(base.out_dir, exist_ok=True)

    world = build_world(base)
    cells: list[SweepCell] = []
    digests = set()
    for lam in lams:
        for depth_n in depths:
            label = f"lam{lam:g}_depth{depth_n}"
            cell_cfg = replace(
                base,
                align=replace(base.align, lam=lam, depth_n=depth_n),
                out_dir=os.path.join(base.out_dir, label),
            )
            try:
                result = run_train(cell_cfg, world=world)
                cell_eval = evaluate_state(result.state, world)
            except Exception as e:
                raise RuntimeError(f"sweep cell {label} failed: {e}") from e
            digests.add(result.initial_digest)
            cells.append(SweepCell(label=label, lam=lam, depth_n=depth_n,
                                   result=result, eval=cell_eval))
    if len(digests) != 1:
        raise RuntimeError(f"sweep cells disagree on initial parameters: {sorted(digests)}")

    report = pareto_report([(c.label, c.eval.frechet_gap, c.eval.align_score) for c in cells])
    text_path = os.path.join(base.out_dir, "pareto.txt")
    csv_path = os.path.join(base.out_dir, "pareto.csv")
    with open(text_path, "w", encoding="utf-8") as f:
        f.write(report.to_text())
    with open(csv_path, "w", encoding="utf-8") as f:
        f.write(report.to_delimited())
    return SweepResult(cells=cells, report_text_path=text_path,
                       report_csv_path=csv_path, report=report)
