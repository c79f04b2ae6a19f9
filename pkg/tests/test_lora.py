import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avsr_llm import autograd as ag
from avsr_llm.autograd import ParameterError, Tensor
from avsr_llm.lora import (LoraConfig, LoraStateError, attach, count_lora_params, lora_forward, lora_merge,
                           lora_unmerge, projection_shapes)
from avsr_llm.nn import TransformerConfig
from avsr_llm.params import ParamStore

from helpers import grad_check, tiny_decoder, tiny_model


def adapted_weight(d_in=8, d_out=8, rank=4, seed=0, random_b=True, dtype=np.float64):
    rng = np.random.default_rng(seed)
    with ag.default_dtype(dtype):
        store = ParamStore()
        store.add("w", rng.normal(size=(d_in, d_out)), locked=True)
        adapter = attach(store, "w", LoraConfig(rank=rank), rng)
        if random_b:
            store.assign(adapter.B.name, rng.normal(size=adapter.B.shape))
    return store, adapter


class TestLoraForward:
    def test_zero_init_reproduces_base_exactly(self):
        store, adapter = adapted_weight(random_b=False, dtype=np.float32)
        x = Tensor(np.random.default_rng(1).normal(size=(3, 8)))
        assert np.array_equal(lora_forward(x, store["w"], adapter).data, (x.data @ store["w"].data))

    def test_dense_oracle(self):
        store, adapter = adapted_weight(seed=2)
        x = np.random.default_rng(3).normal(size=(5, 8))
        # column-vector convention: y = (W^T + (alpha/r) B A) x
        W_col = store["w"].data.T
        dense = W_col + adapter.scale * adapter.B.data @ adapter.A.data
        got = lora_forward(Tensor(x, dtype=np.float64), store["w"], adapter).data
        assert np.max(np.abs(got - x @ dense.T)) < 1e-10

    def test_identity_adapter_adds_input(self):
        with ag.default_dtype(np.float64):
            store = ParamStore()
            W = np.random.default_rng(0).normal(size=(4, 4))
            store.add("w", W, locked=True)
            adapter = attach(store, "w", LoraConfig(rank=4, alpha=4), np.random.default_rng(1))
            store.assign(adapter.A.name, np.eye(4))
            store.assign(adapter.B.name, np.eye(4))
            x = np.random.default_rng(2).normal(size=(3, 4))
            assert np.allclose(lora_forward(Tensor(x), store["w"], adapter).data, x @ W + x, atol=1e-12)

    def test_gradients_reach_adapter_not_base(self):
        store, adapter = adapted_weight(seed=4)
        x = Tensor(np.random.default_rng(5).normal(size=(2, 8)), dtype=np.float64)
        ag.tsum(lora_forward(x, store["w"], adapter)).backward()
        assert store["w"].grad is None
        assert adapter.A.grad is not None and adapter.B.grad is not None

    def test_lora_path_gradients(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            W = rng.normal(size=(6, 5))
            scale = 2.0

            def fn(x, A, B):
                return ag.matmul(x, Tensor(W, dtype=np.float64)) + ag.matmul(
                    ag.matmul(x, ag.transpose(A)), ag.transpose(B)) * scale

            err = grad_check(fn, [rng.normal(size=(3, 6)), rng.normal(size=(2, 6)), rng.normal(size=(5, 2))], rng)
            assert err < 1e-5

    def test_rank_above_min_dimension_rejected(self):
        store = ParamStore()
        store.add("w", np.zeros((4, 3)), locked=True)
        with pytest.raises(ParameterError):
            attach(store, "w", LoraConfig(rank=4), np.random.default_rng(0))

    def test_config_defaults(self):
        cfg = LoraConfig(rank=8)
        assert cfg.alpha == 16 and cfg.scale == 2.0 and cfg.targets == ("q", "v")
        with pytest.raises(ParameterError):
            LoraConfig(rank=0)


class TestMerge:
    def test_merged_matches_additive_64bit(self):
        store, adapter = adapted_weight(seed=7)
        rng = np.random.default_rng(8)
        xs = [Tensor(rng.normal(size=(4, 8)), dtype=np.float64) for _ in range(20)]
        additive = [lora_forward(x, store["w"], adapter).data for x in xs]
        lora_merge(adapter)
        merged = [lora_forward(x, store["w"], None).data for x in xs]
        assert max(np.max(np.abs(a - m)) for a, m in zip(additive, merged)) < 1e-10

    def test_merged_matches_additive_32bit(self):
        store, adapter = adapted_weight(seed=9, dtype=np.float32)
        x = Tensor(np.random.default_rng(10).normal(size=(4, 8)))
        before = lora_forward(x, store["w"], adapter).data
        lora_merge(adapter)
        assert np.max(np.abs(lora_forward(x, store["w"], None).data - before)) < 1e-5

    def test_unmerge_restores_base(self):
        store, adapter = adapted_weight(seed=11, dtype=np.float32)
        W0 = store["w"].data.copy()
        lora_merge(adapter)
        lora_unmerge(adapter)
        assert np.max(np.abs(store["w"].data - W0)) < 1e-6

    def test_zero_delta_merge_is_noop(self):
        store, adapter = adapted_weight(random_b=False)
        W0 = store["w"].data.copy()
        lora_merge(adapter)
        assert np.array_equal(store["w"].data, W0)

    def test_state_errors(self):
        store, adapter = adapted_weight()
        with pytest.raises(LoraStateError):
            lora_unmerge(adapter)
        lora_merge(adapter)
        with pytest.raises(LoraStateError):
            lora_merge(adapter)
        with pytest.raises(LoraStateError):
            lora_forward(Tensor(np.ones((1, 8))), store["w"], adapter)

    def test_merged_model_logits_agree(self):
        with ag.default_dtype(np.float64):
            model = tiny_model(seed=3)
        ids = np.array([[1, 5, 7, 2]])
        with ag.no_grad():
            x = model.llm.embed(ids)
            additive = model.llm.forward(x, model.adapters).data
            for a in model.adapters.values():
                lora_merge(a)
            merged = model.llm.forward(x, None).data
        assert np.max(np.abs(additive - merged)) < 1e-10


class TestZeroInitModel:
    def test_fresh_adapters_reproduce_base_decoder(self):
        model = tiny_model(seed=1, randomize_lora=False)
        ids = np.array([[1, 2, 3, 4, 5]])
        with ag.no_grad():
            x = model.llm.embed(ids)
            assert np.array_equal(model.llm.forward(x, model.adapters).data, model.llm.forward(x, None).data)


class TestParameterCounting:
    def test_video_encoder_scale(self):
        enc = TransformerConfig(n_layers=24, d_model=1024, n_heads=16, vocab_size=2, max_seq_len=2)
        assert count_lora_params(enc, LoraConfig(rank=64)) == 6_291_456

    def test_grouped_query_decoder_scale(self):
        llm = TransformerConfig(n_layers=32, d_model=4096, n_heads=32, n_kv_heads=8, vocab_size=2, max_seq_len=2)
        assert count_lora_params(llm, LoraConfig(rank=64)) == 27_262_976

    def test_toy_decoder(self):
        assert count_lora_params(TransformerConfig(), LoraConfig(rank=4)) == 8_192

    def test_matches_attached_tensors(self):
        model = tiny_model()
        attached = sum(a.num_params() for a in model.adapters.values())
        assert attached == count_lora_params(model.cfg.llm, model.cfg.lora)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 6), st.sampled_from([8, 16, 32]), st.sampled_from([1, 2, 4]), st.integers(1, 8),
           st.sampled_from([("q",), ("q", "v"), ("q", "k", "v", "o")]))
    def test_formula(self, n_layers, d, heads, rank, targets):
        cfg = TransformerConfig(n_layers=n_layers, d_model=d, n_heads=heads, vocab_size=2, max_seq_len=2)
        shapes = projection_shapes(n_layers, d, heads)
        expected = n_layers * sum(rank * sum(shapes[t]) for t in targets)
        assert count_lora_params(cfg, LoraConfig(rank=rank, targets=targets)) == expected


class TestFreezeUnderUpdates:
    def test_decoder_base_untouched_by_adapter_updates(self):
        dec, store = tiny_decoder(0)
        store.lock("llm.")
        rng = np.random.default_rng(0)
        adapters = {t: attach(store, t, LoraConfig(rank=2), rng) for t in ("llm.block0.attn.q", "llm.block1.attn.v")}
        base = {n: t.data.copy() for n, t in store.items() if n.startswith("llm.")}
        for _ in range(3):
            loss = ag.tsum(dec.forward(dec.embed([[1, 2, 3]]), adapters))
            loss.backward()
            for a in adapters.values():
                store.assign(a.B.name, a.B.data - 0.1 * a.B.grad)
                store.assign(a.A.name, a.A.data - 0.1 * a.A.grad)
            store.zero_grad()
        assert all(np.array_equal(base[n], store[n].data) for n in base)
