"""Model assembly: parameter naming, freezing, state IO, adapter folding."""

import numpy as np
import pytest

from c2emb.errors import CheckpointError, ContractError
from c2emb.model import EmbeddingModel, ModelConfig

TINY = ModelConfig(d_llm=4, n_layers=2, n_heads=2, max_len=48, d=4, pma_heads=2)
TINY_LORA = ModelConfig(d_llm=4, n_layers=2, n_heads=2, max_len=48, d=4, pma_heads=2,
                        use_lora=True, lora_rank=2, lora_alpha=4.0)


class TestConfig:
    def test_vocab_must_cover_tokenizer(self):
        with pytest.raises(ContractError, match="vocab_size"):
            ModelConfig(vocab_size=100)

    def test_pma_head_divisibility(self):
        with pytest.raises(ContractError):
            ModelConfig(d=6, pma_heads=4)

    def test_lora_rank_bound(self):
        with pytest.raises(ContractError, match="lora_rank"):
            ModelConfig(d_llm=4, n_heads=2, use_lora=True, lora_rank=8)

    def test_full_scale_preset(self):
        cfg = ModelConfig.full_scale()
        assert cfg.pma_heads == 32
        assert cfg.use_lora and cfg.lora_rank == 64 and cfg.lora_alpha == 32.0
        assert cfg.max_len == 1024

    def test_digest_stable_and_sensitive(self):
        assert TINY.digest() == ModelConfig(**{
            **{f.name: getattr(TINY, f.name) for f in TINY.__dataclass_fields__.values()}
        }).digest()
        assert TINY.digest() != TINY_LORA.digest()


class TestParameters:
    def test_names_cover_everything(self):
        m = EmbeddingModel.create(TINY, seed=0)
        names = set(m.named_parameters())
        assert "backbone.tok_emb" in names
        assert "backbone.layers.1.w_out" in names
        assert "pma.query" in names and "pma.ln2_beta" in names
        assert not any(n.startswith("lora.") for n in names)

    def test_full_fine_tune_everything_trainable(self):
        m = EmbeddingModel.create(TINY, seed=0)
        assert m.trainable_parameters().keys() == m.named_parameters().keys()

    def test_lora_freezes_backbone(self):
        m = EmbeddingModel.create(TINY_LORA, seed=0)
        trainable = m.trainable_parameters()
        assert all(not n.startswith("backbone.") for n in trainable)
        assert any(n.startswith("lora.") for n in trainable)
        assert any(n.startswith("pma.") for n in trainable)  # head always trains
        assert "lora.layers.0.w_q.a" in trainable
        assert "lora.layers.1.w_o.b" in trainable

    def test_create_deterministic(self):
        a = EmbeddingModel.create(TINY, seed=7)
        b = EmbeddingModel.create(TINY, seed=7)
        for n, t in a.named_parameters().items():
            assert np.array_equal(t.data, b.named_parameters()[n].data)


class TestState:
    def test_round_trip_preserves_embeddings(self):
        a = EmbeddingModel.create(TINY, seed=1)
        b = EmbeddingModel.create(TINY, seed=2)
        state = a.state_arrays()
        b.load_state(state)
        ea = a.embed_text("def f(): pass").values.data
        eb = b.embed_text("def f(): pass").values.data
        assert np.array_equal(ea, eb)

    def test_state_arrays_are_copies(self):
        m = EmbeddingModel.create(TINY, seed=1)
        state = m.state_arrays()
        state["backbone.tok_emb"][:] = 0.0
        assert not np.array_equal(m.backbone.tok_emb.data, state["backbone.tok_emb"])

    def test_load_rejects_name_mismatch(self):
        m = EmbeddingModel.create(TINY, seed=1)
        state = m.state_arrays()
        state.pop("pma.query")
        with pytest.raises(CheckpointError, match="pma.query"):
            m.load_state(state)

    def test_load_rejects_shape_mismatch(self):
        m = EmbeddingModel.create(TINY, seed=1)
        state = m.state_arrays()
        state["pma.w_o"] = np.zeros((3, 3))
        with pytest.raises(CheckpointError, match="pma.w_o"):
            m.load_state(state)


class TestEmbed:
    def test_normalized_by_default(self):
        m = EmbeddingModel.create(TINY, seed=3)
        e = m.embed_text("x = 1")
        assert e.values.shape == (1, TINY.d)
        assert abs(np.linalg.norm(e.values.data) - 1.0) < 1e-12

    def test_respects_max_len(self):
        m = EmbeddingModel.create(TINY, seed=3)
        e = m.embed_text("y" * 500)  # longer than max_len bytes
        assert np.isfinite(e.values.data).all()

    def test_scaled_attention_config_changes_output(self):
        scaled_cfg = ModelConfig(d_llm=4, n_layers=2, n_heads=2, max_len=48, d=4,
                                 pma_heads=2, scaled_pma_attention=True)
        a = EmbeddingModel.create(TINY, seed=4).embed_text("snippet").values.data
        b = EmbeddingModel.create(scaled_cfg, seed=4).embed_text("snippet").values.data
        assert not np.array_equal(a, b)


class TestMergeLora:
    def test_merged_matches_adapter_model(self):
        m = EmbeddingModel.create(TINY_LORA, seed=5)
        # push the adapters away from zero so the merge is non-trivial
        rng = np.random.default_rng(0)
        for ad in m.adapters.values():
            ad.b.data[:] = rng.normal(size=ad.b.shape) * 0.1
        merged = m.merge_lora()
        assert merged.adapters == {}
        assert merged.lora_meta() == {"rank": 2, "alpha": 4.0, "merged": True}
        for i, text in enumerate(["a", "def g(x): return x", "SELECT 1", "0" * 40, "é π"]):
            ea = m.embed_text(text).values.data
            eb = merged.embed_text(text).values.data
            assert np.abs(ea - eb).max() < 1e-12, f"input {i} diverged"

    def test_merge_without_adapters_rejected(self):
        with pytest.raises(ContractError):
            EmbeddingModel.create(TINY, seed=5).merge_lora()
