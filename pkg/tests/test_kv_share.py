import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from posegen.dit import DiT
from posegen.errors import CacheMissError, ConfigError, UsageError
from posegen.kv_share import (
    GateConfig,
    KvCache,
    SharingController,
    fuse,
    layer_mask,
    otsu_threshold,
    shared_attention,
    subject_attn_map,
    threshold_map,
)
from posegen.numerics import Rng
from posegen.sampler import SamplerConfig, sample

import oracles
from conftest import random_bundle, tiny_config


# ------------------------------------------------------------------ gates


def test_gate_sets():
    g = GateConfig(20, 8, 5, 4)
    assert g.timesteps() == [20, 19, 18, 17, 16]
    assert g.layers() == [5, 6, 7, 8]
    assert (8, 20) in g and (4, 20) not in g and (8, 15) not in g
    assert len(g.pairs()) == 20


@pytest.mark.parametrize("T,L,kt,kl", [(20, 8, 5, 4), (1, 1, 1, 1), (4, 2, 1, 1), (50, 12, 13, 6)])
def test_default_gate(T, L, kt, kl):
    g = GateConfig.default(T, L)
    assert (g.k_t, g.k_l) == (kt, kl)


@pytest.mark.parametrize("kt,kl", [(-1, 1), (21, 1), (1, 9)])
def test_gate_bounds(kt, kl):
    with pytest.raises(ConfigError):
        GateConfig(20, 8, kt, kl)


def test_empty_gate_contains_nothing():
    g = GateConfig.empty(20, 8)
    assert g.is_empty and not g.pairs()
    assert all((l, t) not in g for l in range(1, 9) for t in range(1, 21))


# ------------------------------------------------------------ mask oracles


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), heads=st.integers(1, 4), n_text=st.integers(1, 6), n_vid=st.integers(1, 12))
def test_subject_map_matches_explicit_mean(seed, heads, n_text, n_vid):
    rng = Rng(seed)
    logits = rng.normal(heads, n_text, n_vid)
    idx = sorted(set(rng.integers(0, n_text, size=2).tolist()))
    lg = oracles.to_np(logits)
    expect = np.array([sum(lg[h, i, j] for h in range(heads) for i in idx) / (heads * len(idx)) for j in range(n_vid)])
    assert oracles.rel_err(oracles.to_np(subject_attn_map(logits, idx)), expect) < 1e-5


def test_subject_map_validates_indices():
    with pytest.raises(ConfigError):
        subject_attn_map(torch.zeros(2, 3, 4), [])
    with pytest.raises(ConfigError):
        subject_attn_map(torch.zeros(2, 3, 4), [3])


@settings(max_examples=150, deadline=None)
@given(
    values=st.lists(st.floats(-5, 5, allow_nan=False, width=32), min_size=2, max_size=80),
)
def test_otsu_matches_exhaustive_search(values):
    v = torch.tensor(values, dtype=torch.float32)
    assert otsu_threshold(v) == oracles.otsu_exhaustive(v.double().numpy())


def test_otsu_separates_two_clusters():
    v = torch.cat([torch.full((30,), 0.1), torch.full((10,), 0.9)])
    thr = otsu_threshold(v)
    assert 0.1 <= thr < 0.9
    assert threshold_map(v).values.sum() == 10


def test_constant_map_is_degenerate_and_empty():
    m = threshold_map(torch.full((9,), 0.3))
    assert m.degenerate and m.values.sum() == 0


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000), n_maps=st.integers(1, 6), n=st.integers(1, 20))
def test_layer_mask_majority(seed, n_maps, n):
    rng = np.random.default_rng(seed)
    maps = [torch.tensor(rng.integers(0, 2, size=n), dtype=torch.float32) for _ in range(n_maps)]
    stacked = np.stack([m.numpy() for m in maps])
    expect = (2 * stacked.sum(0) >= n_maps).astype(np.float32)
    assert np.array_equal(layer_mask(maps).values.numpy(), expect)


def test_layer_mask_prefix():
    a, b, c = torch.tensor([1.0, 0, 0]), torch.tensor([1.0, 1, 0]), torch.tensor([0.0, 1, 1])
    assert torch.equal(layer_mask([a, b, c], 1).values, a)
    assert torch.equal(layer_mask([a, b, c]).values, torch.tensor([1.0, 1, 0]))


# ------------------------------------------------------------ shared attention


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), heads=st.integers(1, 3), n=st.integers(1, 8), n_src=st.integers(1, 8))
def test_shared_attention_literal_matches_oracle(seed, heads, n, n_src):
    rng = Rng(seed)
    q, k, v = rng.normal(heads, n, 6), rng.normal(heads, n_src, 6), rng.normal(heads, n_src, 6)
    m = torch.tensor(rng.integers(0, 2, size=n_src), dtype=torch.float32)
    expect = oracles.shared_attention_literal(*(oracles.to_np(t) for t in (q, k, v, m)))
    got = oracles.to_np(shared_attention(q, k, v, m, "literal"))
    assert np.max(np.abs(got - expect)) <= 1e-5 * max(1.0, np.abs(expect).max())


def test_shared_attention_identities():
    rng = Rng(1)
    q, k, v = rng.normal(2, 5, 6), rng.normal(2, 4, 6), rng.normal(2, 4, 6)
    zeros, ones = torch.zeros(4), torch.ones(4)
    plain = torch.softmax(q @ k.transpose(-1, -2) / 6**0.5, -1) @ v
    for mode in ("literal", "renorm"):
        assert torch.allclose(shared_attention(q, k, v, zeros, mode), plain, atol=1e-6)
        assert torch.equal(shared_attention(q, k, v, ones, mode), torch.zeros_like(q))


def test_renorm_rows_sum_to_one_over_kept_keys():
    rng = Rng(2)
    q, k = rng.normal(1, 3, 6), rng.normal(1, 4, 6)
    m = torch.tensor([1.0, 0, 1, 0])
    v = torch.eye(4)[None].expand(1, 4, 4).contiguous()
    out = shared_attention(q, k, torch.cat([v, torch.zeros(1, 4, 2)], -1), m, "renorm")
    assert torch.allclose(out[..., :4].sum(-1), torch.ones(1, 3))
    assert torch.equal(out[..., 0], torch.zeros(1, 3))


def test_shared_attention_validation():
    q = torch.zeros(2, 3, 6)
    with pytest.raises(ConfigError):
        shared_attention(q, torch.zeros(2, 4, 6), torch.zeros(2, 4, 6), torch.zeros(3))
    with pytest.raises(ConfigError):
        shared_attention(q, torch.zeros(2, 4, 6), torch.zeros(2, 4, 6), torch.zeros(4), "cosine")


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 16))
def test_fuse_elementwise(seed, n):
    rng = np.random.default_rng(seed)
    cur, src = rng.normal(size=(n, 4)), rng.normal(size=(n, 4))
    m, ms = rng.integers(0, 2, size=n), rng.integers(0, 2, size=n)
    out = fuse(*(torch.tensor(a) for a in (cur, src, m.astype(float), ms.astype(float)))).numpy()
    for i in range(n):
        assert np.array_equal(out[i], cur[i] if (m[i] or ms[i]) else src[i])


def test_fuse_with_all_subject_mask_is_identity():
    cur, src = Rng(0).normal(6, 3), Rng(1).normal(6, 3)
    assert torch.equal(fuse(cur, src, torch.ones(6), torch.zeros(6)), cur)


# ------------------------------------------------------------------- cache


def _filled_cache() -> KvCache:
    rng = Rng(3)
    cache = KvCache()
    for l, t in [(2, 20), (2, 19), (1, 20)]:
        cache.put(l, t, rng.normal(2, 5, 6), rng.normal(2, 5, 6), torch.tensor([1.0, 0, 0, 1, 0]))
    return cache


def test_cache_roundtrip(tmp_path):
    cache = _filled_cache().freeze()
    cache.save(tmp_path / "c.pgck", meta={"f": 1})
    back, meta = KvCache.load(tmp_path / "c.pgck")
    assert back.keys() == cache.keys() and back.digest() == cache.digest()
    assert meta["f"] == "1"
    assert back.nbytes() == cache.nbytes() == 3 * (2 * 2 * 5 * 6 * 4 + 5 * 4)


def test_cache_frozen_and_misses():
    cache = _filled_cache().freeze()
    with pytest.raises(UsageError):
        cache.put(3, 20, torch.zeros(1), torch.zeros(1), torch.zeros(1))
    with pytest.raises(CacheMissError):
        cache.get(3, 20)


def test_cache_stores_copies():
    k = torch.zeros(1, 2, 6)
    cache = KvCache()
    cache.put(1, 1, k, k, torch.zeros(2))
    k += 1
    assert cache.get(1, 1).k.abs().sum() == 0


# ---------------------------------------------------------- controller paths


@pytest.fixture(scope="module")
def setup():
    cfg = tiny_config(L=3)
    model = DiT(cfg)
    with torch.no_grad():  # nonzero adapters so the trained pathway is exercised
        for n, p in model.trainable_state().items():
            if "lora_B" in n:
                p.copy_(Rng(7).normal(*p.shape, std=0.1))
    return cfg, model, random_bundle(cfg, 2, 4, 4, seed=1)


def test_capture_writes_exactly_gated_pairs_and_leaves_output_untouched(setup):
    cfg, model, b = setup
    sc = SamplerConfig(T=4, seed=0)
    gate = GateConfig(4, 3, 2, 2)
    res = sample(model, b, sc, gate=gate, capture=True, return_controller=True)
    ctrl = res.controller
    assert set(ctrl.cache.keys()) == gate.pairs()
    assert ctrl.counters["capture"] == 4 and ctrl.counters["cross"] == 4 * 3
    assert torch.equal(res.latents, sample(model, b, sc))
    assert ctrl.cache.frozen


def test_source_cache_is_not_mutated_by_consumers(setup):
    cfg, model, b = setup
    sc = SamplerConfig(T=4, seed=0)
    gate = GateConfig.default(4, 3)
    cache = sample(model, b, sc, gate=gate, capture=True, return_controller=True).controller.cache
    before = cache.digest()
    res = sample(model, b.replace(z_pose=Rng(9).normal(*b.z_pose.shape)), SamplerConfig(4, 1),
                 cache=cache, gate=gate, return_controller=True)
    assert res.controller.counters["share"] == len(gate.pairs())
    assert cache.digest() == before


def test_share_requires_cache_with_gated_pairs(setup):
    cfg, model, b = setup
    with pytest.raises(UsageError):
        SharingController("share", [2], GateConfig(4, 3, 1, 1), None)
    with pytest.raises(CacheMissError):
        SharingController("share", [2], GateConfig(4, 3, 1, 1), KvCache())


@pytest.mark.parametrize("mode", ["literal", "renorm"])
def test_noop_gates_are_bit_identical_to_plain_sampling(setup, mode):
    cfg, model, b = setup
    sc = SamplerConfig(T=4, seed=2)
    full = GateConfig(4, 3, 4, 3)
    cache = sample(model, b, SamplerConfig(4, 0), gate=full, capture=True, return_controller=True).controller.cache
    other = b.replace(z_pose=Rng(5).normal(*b.z_pose.shape))
    plain = sample(model, other, sc)
    # empty gate through an explicit share controller
    empty = SharingController("share", other.subject_indices, GateConfig.empty(4, 3), cache, attn_mode=mode)
    x = Rng(sc.seed).normal(*plain.shape)
    x_ref = x.clone()
    n_vid = 2 * 2 * 2
    with torch.no_grad():
        m = torch.zeros(cfg.s, 2, 4, 4)
        for k, (tc, tn) in enumerate(zip(sc.schedule()[:-1], sc.schedule()[1:])):
            empty.begin_step(4 - k)
            x = x + (tn - tc) * model(other.replace(z_vid=x, m=m), tc, empty)
            x_ref = x_ref + (tn - tc) * model(other.replace(z_vid=x_ref, m=m), tc)
    assert torch.equal(x, x_ref) and torch.equal(x_ref, plain)
    assert empty.counters["share"] == 0
    # full gate with an all-subject mask keeps every current token
    forced = sample(model, other, sc, cache=cache, gate=full, return_controller=True,
                    controller_kw=dict(force_mask=torch.ones(n_vid), attn_mode=mode))
    assert forced.controller.counters["share"] == 12
    assert torch.equal(forced.latents, plain)


def test_sharing_changes_background_tokens(setup):
    cfg, model, b = setup
    gate = GateConfig(4, 3, 4, 3)
    cache = sample(model, b, SamplerConfig(4, 0), gate=gate, capture=True, return_controller=True).controller.cache
    plain = sample(model, b, SamplerConfig(4, 3))
    shared = sample(model, b, SamplerConfig(4, 3), cache=cache, gate=gate,
                    controller_kw=dict(force_mask=torch.zeros(8)))
    assert not torch.equal(plain, shared)
