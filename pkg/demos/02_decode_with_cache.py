"""
Token-by-token decoding against one full pass
=============================================

A random tiny model is run once over a whole sequence and once a token at a
time through its KV cache. Follower layers read the owner's keys and values
instead of writing their own, so the cache shrinks with ``m`` while the
logits stay the same.
"""

import numpy as np

from mlkv import Model, ModelConfig, ShareConfig, decode_step, forward

rng = np.random.default_rng(0)
tokens = rng.integers(0, 64, (2, 16))

for m, g in [(4, 4), (4, 2), (4, 1), (2, 1), (1, 1)]:
    cfg = ModelConfig(vocab=64, d=32, max_seq=16, share=ShareConfig(4, 4, m, g, 8), d_ff=128)
    model = Model.random(cfg, seed=1)

    full = forward(model, tokens)

    cache = model.new_cache(2)
    steps = np.concatenate([decode_step(model, tokens[:, t:t + 1], cache) for t in range(16)], axis=1)

    print(f"m={m} g={g}: max |decode - full| = {np.abs(steps - full).max():.1e}, "
          f"cache holds {cache.element_count():,d} elements ({cache.nbytes():,d} bytes)")
