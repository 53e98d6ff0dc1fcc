"""Transformer decoding with multi-layer key-value sharing (MHA, GQA, MQA and MLKV in one model)."""

from .attention import ShareConfig, layer_to_kv_group, owns_kv, query_to_group
from .convert import Checkpoint, merge_kv
from .kvcache import KvCache, cache_bytes, cache_elements, new_cache, reduction_ratio
from .model import Model, ModelConfig, compensate_mlp, decode_step, forward, generate, param_count

__all__ = [
    "Checkpoint", "KvCache", "Model", "ModelConfig", "ShareConfig",
    "cache_bytes", "cache_elements", "compensate_mlp", "decode_step", "forward", "generate",
    "layer_to_kv_group", "merge_kv", "new_cache", "owns_kv", "param_count", "query_to_group",
    "reduction_ratio",
]
