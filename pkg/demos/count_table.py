"""Parameter and compute accounting at full encoder widths.

Nothing here allocates weights: both tables come from the closed-form
accounting used by the counts-only sweep (configs/paper-dims.cfg).
"""
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from latentloop.encoder import TEXT, VISION
from latentloop.refinement import (RefineConfig, block_eval_count,
                                   block_eval_ratio, parameter_count)

D_VISION, D_TEXT = 768, 512
L, K = 12, 4


def main():
    print(f"trainable parameters at d_v={D_VISION}, d_t={D_TEXT}, rank 1, K={K}")
    print(f"{'variant':<16} {'depths':<10} {'params':>8}")
    rows = [
        ("shared", (7,), "shared"),
        ("per_step", (7,), "per_step"),
        ("per_layer", (7, 9, 11), "per_layer"),
        ("per_layer_step", (7, 9, 11), "per_layer_step"),
    ]
    for name, depths, sharing in rows:
        cfg = RefineConfig(injection_depths=depths, k_steps=K, sharing=sharing)
        count = parameter_count(cfg, D_VISION, D_TEXT)
        print(f"{name:<16} {','.join(map(str, depths)):<10} {count:>8,}")

    for modality, width in ((VISION, D_VISION), (TEXT, D_TEXT)):
        cfg = RefineConfig(injection_depths=(7,), k_steps=K, modalities=(modality,))
        count = parameter_count(cfg, D_VISION, D_TEXT)
        print(f"{modality + ' only':<16} {'7':<10} {count:>8,}   (5*{width}+1)")

    print(f"\nblock evaluations per example at L={L}, injection depth 7")
    print(f"{'K':>3} {'evals':>6} {'vs one pass':>12}")
    for k in range(7):
        cfg = RefineConfig(injection_depths=(7,), k_steps=k)
        print(f"{k:>3} {block_eval_count(L, cfg):>6} "
              f"{block_eval_ratio(L, cfg):>11.3f}x")


if __name__ == "__main__":
    main()
