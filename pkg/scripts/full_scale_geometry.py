"""Shape check at full scale (224px input, C1=128); no training.

Prints the token grid, Stage-2 feature shape, attention-map shape and the
parameter overhead of the attention module.
"""
import numpy as np

from loupe.attention import overhead_ratio, param_count
from loupe.backbone import BackboneConfig, build, count_params, forward


def main():
    cfg = BackboneConfig.full_scale()
    state = build(cfg, "single")
    x = np.random.default_rng(0).random((1, 3, 224, 224)).astype(np.float32)
    res = forward(state, x)
    counts = count_params(state)
    print(f"patch-embed grid      {res.embed_shape[2]}x{res.embed_shape[3]} x {res.embed_shape[1]} channels")
    for s, shape in enumerate(res.stage_shapes, 1):
        print(f"stage {s} output        {shape[2]}x{shape[3]} x {shape[1]} channels")
    print(f"attention map         {res.map.shape[2]}x{res.map.shape[3]}")
    print(f"attention parameters  {counts['loupe']:,} (formula: {param_count(256):,})")
    print(f"surrogate backbone    {counts['backbone']:,} -> overhead {counts['ratio']:.3%}")
    print(f"against ~88M params   overhead {overhead_ratio(256, 88_000_000):.3%}")


if __name__ == "__main__":
    main()
