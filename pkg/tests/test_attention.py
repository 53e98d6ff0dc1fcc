import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mlkv import autodiff as ad
from mlkv.attention import (
    LayerAttentionWeights,
    ShareConfig,
    attention_forward,
    layer_to_kv_group,
    owns_kv,
    query_to_group,
)
from mlkv.errors import ConfigError, ValidationError
from mlkv.kvcache import new_cache
from reference import grouped_layer


def test_query_to_group_formula():
    assert query_to_group(4, 12, 4) == 2


def test_query_to_group_extremes():
    assert [query_to_group(i, 12, 12) for i in range(1, 13)] == list(range(1, 13))
    assert {query_to_group(i, 12, 1) for i in range(1, 13)} == {1}


@pytest.mark.parametrize("n, expected", [(4, 2), (3, 1), (12, 4)])
def test_layer_to_kv_group_formula(n, expected):
    assert layer_to_kv_group(n, 12, 4) == expected


def test_layer_to_kv_group_extremes():
    assert [layer_to_kv_group(n, 12, 12) for n in range(1, 13)] == list(range(1, 13))
    assert {layer_to_kv_group(n, 12, 1) for n in range(1, 13)} == {1}


def test_owners():
    assert [n for n in range(1, 13) if owns_kv(n, 12, 4)] == [1, 4, 7, 10]
    assert all(owns_kv(n, 12, 12) for n in range(1, 13))
    assert [n for n in range(1, 13) if owns_kv(n, 12, 1)] == [1]


@pytest.mark.parametrize("f, args", [
    (query_to_group, (0, 12, 4)), (query_to_group, (13, 12, 4)), (query_to_group, (1, 12, 5)),
    (layer_to_kv_group, (0, 12, 4)), (layer_to_kv_group, (1, 12, 5)), (owns_kv, (1, 10, 4)),
])
def test_map_errors(f, args):
    with pytest.raises(ValidationError):
        f(*args)


divisor_pairs = st.integers(1, 12).flatmap(
    lambda count: st.tuples(st.just(count), st.sampled_from([d for d in range(1, count + 1) if count % d == 0]))
)


@given(divisor_pairs)
def test_maps_are_balanced_surjections(pair):
    count, groups = pair
    for f in (query_to_group, layer_to_kv_group):
        image = [f(i, count, groups) for i in range(1, count + 1)]
        assert sorted(set(image)) == list(range(1, groups + 1))
        assert all(image.count(j) == count // groups for j in range(1, groups + 1))
        assert image == sorted(image)


@pytest.mark.parametrize("kwargs, field", [
    (dict(l=12, h=12, m=5, g=1, d_k=8), "m"),
    (dict(l=12, h=12, m=12, g=5, d_k=8), "g"),
    (dict(l=12, h=12, m=12, g=12, d_k=7), "d_k"),
    (dict(l=0, h=12, m=1, g=1, d_k=8), "l"),
])
def test_share_config_validation(kwargs, field):
    with pytest.raises(ConfigError) as exc:
        ShareConfig(**kwargs)
    assert exc.value.field == field


def _weights(rng, d, h, g, d_k, owner=True, dtype=np.float64):
    def w(*shape):
        return ad.Var(rng.standard_normal(shape).astype(dtype) * 0.3)

    kv = dict(wk=w(d, g * d_k), bk=w(g * d_k), wv=w(d, g * d_k), bv=w(g * d_k)) if owner else {}
    return LayerAttentionWeights(wq=w(d, h * d_k), bq=w(h * d_k), wo=w(h * d_k, d), bo=w(d), **kv)


def _params(weights):
    return {name: getattr(weights, name).value for name in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")
            if getattr(weights, name) is not None}


def test_singleton_attention_returns_value_head():
    rng = np.random.default_rng(0)
    cfg = ShareConfig(1, 2, 1, 2, 4)
    w = _weights(rng, 8, 2, 2, 4)
    x = rng.standard_normal((1, 1, 8))
    out = attention_forward(x, w, new_cache(cfg, 1, 4, np.float64), 1, cfg, 0).value
    p = _params(w)
    v = x[0, 0] @ p["wv"] + p["bv"]
    np.testing.assert_allclose(out[0, 0], v @ p["wo"] + p["bo"], atol=1e-12)


def test_matches_brute_force_loop():
    rng = np.random.default_rng(1)
    cfg = ShareConfig(1, 2, 1, 2, 4)
    w = _weights(rng, 8, 2, 2, 4)
    x = rng.standard_normal((3, 6, 8))
    out = attention_forward(x, w, new_cache(cfg, 3, 6, np.float64), 1, cfg, 0).value
    for b in range(3):
        expected, _ = grouped_layer(list(x[b]), _params(w), "", 2, 2, 4)
        assert np.abs(out[b] - np.stack(expected)).max() < 1e-5


def test_causal_masking():
    rng = np.random.default_rng(2)
    cfg = ShareConfig(1, 4, 1, 2, 4)
    w = _weights(rng, 16, 4, 2, 4)
    x = rng.standard_normal((1, 7, 16))
    base = attention_forward(x, w, new_cache(cfg, 1, 7, np.float64), 1, cfg, 0).value
    for t in range(7):
        y = x.copy()
        y[0, t] += 5.0
        out = attention_forward(y, w, new_cache(cfg, 1, 7, np.float64), 1, cfg, 0).value
        np.testing.assert_array_equal(out[0, :t], base[0, :t])
        assert not np.allclose(out[0, t], base[0, t])


def test_probability_rows_and_mask(monkeypatch):
    captured = []
    real = ad.masked_softmax

    def spy(x, mask, name="softmax"):
        out = real(x, mask, name)
        captured.append((out.value, mask))
        return out

    monkeypatch.setattr(ad, "masked_softmax", spy)
    rng = np.random.default_rng(3)
    cfg = ShareConfig(1, 2, 1, 1, 4)
    attention_forward(rng.standard_normal((2, 5, 8)), _weights(rng, 8, 2, 1, 4), new_cache(cfg, 2, 5, np.float64), 1, cfg, 0)
    probs, mask = captured[0]
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-6)
    assert (probs[..., ~mask] == 0.0).all()


def test_follower_does_not_write_cache():
    rng = np.random.default_rng(4)
    cfg = ShareConfig(2, 2, 1, 1, 4)
    cache = new_cache(cfg, 1, 8, np.float64)
    x = rng.standard_normal((1, 3, 8))
    attention_forward(x, _weights(rng, 8, 2, 1, 4), cache, 1, cfg, 0)
    snapshot = cache.keys[0].copy(), cache.values[0].copy(), list(cache.lengths)
    attention_forward(x, _weights(rng, 8, 2, 1, 4, owner=False), cache, 2, cfg, 0)
    assert cache.lengths == snapshot[2]
    np.testing.assert_array_equal(cache.keys[0], snapshot[0])
    np.testing.assert_array_equal(cache.values[0], snapshot[1])


def test_precondition_errors():
    rng = np.random.default_rng(5)
    cfg = ShareConfig(2, 2, 1, 1, 4)
    cache = new_cache(cfg, 1, 8, np.float64)
    x = rng.standard_normal((1, 2, 8))
    with pytest.raises(ValidationError):
        attention_forward(x, _weights(rng, 8, 2, 1, 4, owner=False), cache, 2, cfg, 0)
    with pytest.raises(ValidationError):
        attention_forward(x, _weights(rng, 8, 2, 1, 4), cache, 1, cfg, 3)
    with pytest.raises(ValidationError):
        attention_forward(x, _weights(rng, 8, 2, 1, 4, owner=False), cache, 1, cfg, 0)
