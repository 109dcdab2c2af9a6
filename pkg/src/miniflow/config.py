"""Run configuration: dataclasses plus the plain-text key=value schema.

The text form is canonical: fixed key order, repr-formatted floats, every
field always written. A checkpoint embeds this text verbatim, so a config
round-trips bitwise through serialize -> parse -> serialize. Unknown keys
are errors (they are almost always sweep-script typos).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from miniflow.data import DatasetSpec
from miniflow.model import ModelConfig
from miniflow.supervision import AlignmentConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class TeacherConfig:
    source: str = "synthetic"  # "synthetic" or a TEMB file path
    embed_dim: int = 24
    tokens: int = 4


@dataclass(frozen=True)
class EvalConfig:
    samples_per_class: int = 8
    sample_steps: int = 20


@dataclass(frozen=True)
class RunConfig:
    seed: int = 7
    steps: int = 2000
    batch_size: int = 16
    log_interval: int = 50
    out_dir: str = "runs/default"
    model: ModelConfig = field(default_factory=ModelConfig)
    align: AlignmentConfig | None = field(default_factory=AlignmentConfig)
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        problems = []
        if self.seed < 0:
            problems.append(f"seed: must be >= 0, got {self.seed}")
        if self.steps < 0:
            problems.append(f"steps: must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            problems.append(f"batch_size: must be >= 1, got {self.batch_size}")
        if self.log_interval < 1:
            problems.append(f"log_interval: must be >= 1, got {self.log_interval}")
        if self.optimizer.lr <= 0:
            problems.append(f"optimizer.lr: must be > 0, got {self.optimizer.lr}")
        if self.teacher.embed_dim < 1:
            problems.append(f"teacher.embed_dim: must be >= 1, got {self.teacher.embed_dim}")
        if self.teacher.tokens < 1:
            problems.append(f"teacher.tokens: must be >= 1, got {self.teacher.tokens}")
        if self.eval.samples_per_class < 0:
            problems.append(f"eval.samples_per_class: must be >= 0, got {self.eval.samples_per_class}")
        if self.eval.sample_steps < 1:
            problems.append(f"eval.sample_steps: must be >= 1, got {self.eval.sample_steps}")
        if self.align is not None:
            try:
                self.align.resolved_depth(self.model.depth)
            except ValueError as e:
                problems.append(f"align.depth_n: {e}")
        if problems:
            raise ConfigError("invalid config fields:\n  " + "\n  ".join(problems))


# ---------------------------------------------------------------------------
# text schema


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def serialize_config(cfg: RunConfig) -> str:
    m, o, d, t, e = cfg.model, cfg.optimizer, cfg.dataset, cfg.teacher, cfg.eval
    a = cfg.align
    lines = [
        f"seed = {cfg.seed}",
        f"steps = {cfg.steps}",
        f"batch_size = {cfg.batch_size}",
        f"log_interval = {cfg.log_interval}",
        f"out_dir = {cfg.out_dir}",
        f"model.depth = {m.depth}",
        f"model.hidden_dim = {m.hidden_dim}",
        f"model.heads = {m.heads}",
        f"model.latent_shape = {m.latent_shape[0]},{m.latent_shape[1]},{m.latent_shape[2]}",
        f"model.patch_size = {m.patch_size}",
        f"model.text_tokens = {m.text_tokens}",
        f"model.text_embed_dim = {m.text_embed_dim}",
        f"model.time_embed_dim = {'default' if m.time_embed_dim is None else m.time_embed_dim}",
        f"model.mlp_ratio = {m.mlp_ratio}",
        f"align.enabled = {_fmt(a is not None)}",
        f"align.depth_n = {'auto' if a is None or a.depth_n is None else a.depth_n}",
        f"align.lambda = {_fmt(a.lam if a is not None else 0.1)}",
        f"align.variant = {a.variant if a is not None else 'mlp'}",
        f"align.num_queries = {a.num_queries if a is not None else 4}",
        f"optimizer.lr = {_fmt(o.lr)}",
        f"optimizer.beta1 = {_fmt(o.beta1)}",
        f"optimizer.beta2 = {_fmt(o.beta2)}",
        f"optimizer.eps = {_fmt(o.eps)}",
        f"dataset.num_classes = {d.num_classes}",
        f"dataset.size = {d.size}",
        f"dataset.jitter = {_fmt(d.jitter)}",
        f"dataset.prototype_scale = {_fmt(d.prototype_scale)}",
        f"dataset.fine_scale = {_fmt(d.fine_scale)}",
        f"dataset.text_scale = {_fmt(d.text_scale)}",
        f"teacher.source = {t.source}",
        f"teacher.embed_dim = {t.embed_dim}",
        f"teacher.tokens = {t.tokens}",
        f"eval.samples_per_class = {e.samples_per_class}",
        f"eval.sample_steps = {e.sample_steps}",
    ]
    return "\n".join(lines) + "\n"


def _parse_int(key, raw):
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None


def _parse_float(key, raw):
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {raw!r}") from None


def _parse_bool(key, raw):
    if raw in ("true", "false"):
        return raw == "true"
    raise ConfigError(f"{key}: expected true or false, got {raw!r}")


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = raw.strip()

    known = set(serialize_config(RunConfig()).splitlines())
    known = {line.split(" = ")[0] for line in known}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"{source}: unknown keys: {', '.join(unknown)}")

    def pop(key, default):
        return values.pop(key, default)

    defaults = RunConfig()
    try:
        latent_raw = pop("model.latent_shape", "4,8,8")
        parts = [p for p in latent_raw.split(",") if p.strip()]
        if len(parts) != 3:
            raise ConfigError(f"model.latent_shape: expected C,H,W, got {latent_raw!r}")
        time_raw = pop("model.time_embed_dim", "default")
        model = ModelConfig(
            depth=_parse_int("model.depth", pop("model.depth", "6")),
            hidden_dim=_parse_int("model.hidden_dim", pop("model.hidden_dim", "64")),
            heads=_parse_int("model.heads", pop("model.heads", "4")),
            latent_shape=tuple(_parse_int("model.latent_shape", p) for p in parts),
            patch_size=_parse_int("model.patch_size", pop("model.patch_size", "2")),
            text_tokens=_parse_int("model.text_tokens", pop("model.text_tokens", "8")),
            text_embed_dim=_parse_int("model.text_embed_dim", pop("model.text_embed_dim", "32")),
            time_embed_dim=None if time_raw == "default" else _parse_int("model.time_embed_dim", time_raw),
            mlp_ratio=_parse_int("model.mlp_ratio", pop("model.mlp_ratio", "4")),
        )
    except ValueError as e:
        raise ConfigError(f"{source}: model: {e}") from None

    try:
        if _parse_bool("align.enabled", pop("align.enabled", "true")):
            depth_raw = pop("align.depth_n", "auto")
            align = AlignmentConfig(
                depth_n=None if depth_raw == "auto" else _parse_int("align.depth_n", depth_raw),
                lam=_parse_float("align.lambda", pop("align.lambda", "0.1")),
                variant=pop("align.variant", "mlp"),
                num_queries=_parse_int("align.num_queries", pop("align.num_queries", "4")),
            )
        else:
            for k in ("align.depth_n", "align.lambda", "align.variant", "align.num_queries"):
                values.pop(k, None)
            align = None
    except ValueError as e:
        raise ConfigError(f"{source}: align: {e}") from None

    try:
        dataset = DatasetSpec(
            num_classes=_parse_int("dataset.num_classes", pop("dataset.num_classes", "8")),
            size=_parse_int("dataset.size", pop("dataset.size", "2048")),
            jitter=_parse_float("dataset.jitter", pop("dataset.jitter", "0.1")),
            prototype_scale=_parse_float("dataset.prototype_scale", pop("dataset.prototype_scale", "2.0")),
            fine_scale=_parse_float("dataset.fine_scale", pop("dataset.fine_scale", "0.25")),
            text_scale=_parse_float("dataset.text_scale", pop("dataset.text_scale", "1.0")),
        )
    except ValueError as e:
        raise ConfigError(f"{source}: dataset: {e}") from None

    cfg = RunConfig(
        seed=_parse_int("seed", pop("seed", str(defaults.seed))),
        steps=_parse_int("steps", pop("steps", str(defaults.steps))),
        batch_size=_parse_int("batch_size", pop("batch_size", str(defaults.batch_size))),
        log_interval=_parse_int("log_interval", pop("log_interval", str(defaults.log_interval))),
        out_dir=pop("out_dir", defaults.out_dir),
        model=model,
        align=align,
        optimizer=OptimConfig(
            lr=_parse_float("optimizer.lr", pop("optimizer.lr", "0.001")),
            beta1=_parse_float("optimizer.beta1", pop("optimizer.beta1", "0.9")),
            beta2=_parse_float("optimizer.beta2", pop("optimizer.beta2", "0.999")),
            eps=_parse_float("optimizer.eps", pop("optimizer.eps", "1e-08")),
        ),
        dataset=dataset,
        teacher=TeacherConfig(
            source=pop("teacher.source", "synthetic"),
            embed_dim=_parse_int("teacher.embed_dim", pop("teacher.embed_dim", "24")),
            tokens=_parse_int("teacher.tokens", pop("teacher.tokens", "4")),
        ),
        eval=EvalConfig(
            samples_per_class=_parse_int("eval.samples_per_class", pop("eval.samples_per_class", "8")),
            sample_steps=_parse_int("eval.sample_steps", pop("eval.sample_steps", "20")),
        ),
    )
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read(), source=str(path))


def with_overrides(cfg: RunConfig, *, seed=None, steps=None, out_dir=None,
                   lam=None, depth_n=None, teacher=None) -> RunConfig:
    """Apply CLI flag overrides onto a parsed config."""
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    if steps is not None:
        cfg = replace(cfg, steps=steps)
    if out_dir is not None:
        cfg = replace(cfg, out_dir=out_dir)
    if lam is not None or depth_n is not None:
        base = cfg.align if cfg.align is not None else AlignmentConfig()
        cfg = replace(cfg, align=replace(
            base,
            lam=base.lam if lam is None else lam,
            depth_n=base.depth_n if depth_n is None else depth_n))
    if teacher is not None:
        cfg = replace(cfg, teacher=replace(cfg.teacher, source=teacher))
    cfg.validate()
    return cfg
