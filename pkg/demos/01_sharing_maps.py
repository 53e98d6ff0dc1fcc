"""
Which KV head does each query use?
==================================

Walks through the two block maps that place a query head on an in-layer KV
group and a layer on a KV-layer group, then counts what the cache holds.
"""

from mlkv import ShareConfig, cache_elements, layer_to_kv_group, query_to_group, reduction_ratio

# 12 query heads in 4 groups: three consecutive heads per KV head
print("query head -> KV head:", [query_to_group(i, 12, 4) for i in range(1, 13)])

# 12 layers sharing 4 sets of KV heads: layers 1, 4, 7, 10 own theirs
print("layer -> KV layer group:", [layer_to_kv_group(n, 12, 4) for n in range(1, 13)])

# cache elements for b=8, s=1024 on a 12x12 model with d_k=64
for name, (m, g) in {"MHA": (12, 12), "GQA-48": (12, 4), "MQA": (12, 1), "MLKV-6": (6, 1), "MLKV-1": (1, 1)}.items():
    share = ShareConfig(12, 12, m, g, 64)
    print(f"{name:7s} mg={share.kv_heads:3d}  elements={cache_elements(8, 1024, m, g, 64):>12,d}"
          f"  fraction of MHA={reduction_ratio(share)}")
