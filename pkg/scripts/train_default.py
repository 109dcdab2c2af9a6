"""Train the default toy configuration and evaluate it against the held-out
split. Equivalent to `miniflow train` with no config file."""

import sys

from miniflow.config import RunConfig
from miniflow.harness import build_world, evaluate_state, init_state, run_train


def main() -> int:
    cfg = RunConfig(out_dir="runs/default")
    world = build_world(cfg)
    before = evaluate_state(init_state(cfg), world)
    print(f"initial: frechet_gap={before.frechet_gap:.5f} align_score={before.align_score:.5f}")
    result = run_train(cfg, world=world)
    after = evaluate_state(result.state, world)
    print(f"trained: frechet_gap={after.frechet_gap:.5f} align_score={after.align_score:.5f}")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics:    {result.metrics_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
