import math

import numpy as np
import pytest
import torch

from attnguide.attention import (
    AttentionHooks,
    AttentionRecord,
    AttentionRecorder,
    GuidanceConfig,
    GuidanceEditor,
    aggregate_token_map,
    apply_guided_attention,
    cross_attention,
    edit_attention,
    normalize_map,
    run_hooks,
)
from attnguide.querymap import QueryAttentionMap


class TestCrossAttention:
    def test_single_token_rows_are_one(self):
        out = cross_attention(torch.randn(5, 4), torch.randn(1, 4))
        assert torch.allclose(out, torch.ones(5, 1))

    def test_zero_queries_give_uniform_rows(self):
        out = cross_attention(torch.zeros(3, 4), torch.randn(6, 4))
        assert torch.allclose(out, torch.full((3, 6), 1.0 / 6.0), atol=1e-7)

    def test_hand_computed_two_token_softmax(self):
        q = torch.tensor([[1.0]], dtype=torch.float64)
        k = torch.tensor([[0.0], [math.log(3.0)]], dtype=torch.float64)
        out = cross_attention(q, k)
        assert out[0, 0].item() == pytest.approx(0.25, abs=1e-9)
        assert out[0, 1].item() == pytest.approx(0.75, abs=1e-9)

    def test_rows_sum_to_one(self):
        gen = torch.Generator().manual_seed(0)
        q = torch.randn(64, 16, generator=gen)
        k = torch.randn(8, 16, generator=gen)
        out = cross_attention(q, k)
        assert torch.allclose(out.sum(dim=-1), torch.ones(64), atol=1e-5)

    def test_dim_mismatch_rejected(self):
        with pytest.raises(ValueError):
            cross_attention(torch.zeros(2, 3), torch.zeros(2, 4))


class TestAttentionRecord:
    def test_add_get_and_missing_key(self):
        rec = AttentionRecord()
        m = torch.rand(16, 8)
        rec.add(1, 0, 380, m, (4, 4))
        assert torch.equal(rec.get(1, 0, 380), m)
        assert rec.spatial_shapes[1] == (4, 4)
        with pytest.raises(KeyError, match=r"\(2, 0, 380\)"):
            rec.get(2, 0, 380)

    def test_recorder_stores_per_head(self):
        recorder = AttentionRecorder()
        attn = torch.rand(4, 16, 8)
        out = recorder.on_layer(0, attn, 500, (4, 4))
        assert out is None  # pure observer
        assert recorder.record.heads(0, 500) == [0, 1, 2, 3]
        assert torch.equal(recorder.record.get(0, 2, 500), attn[2])


class TestRunHooks:
    def test_none_hooks_pass_through(self):
        attn = torch.rand(2, 4, 3)
        assert run_hooks(None, 0, attn, 10, (2, 2)) is attn

    def test_chained_replacement(self):
        class Doubler(AttentionHooks):
            def on_layer(self, layer_id, attn, t, spatial_shape):
                return attn * 2.0

        attn = torch.rand(2, 4, 3)
        out = run_hooks([Doubler(), Doubler()], 0, attn, 10, (2, 2))
        assert torch.allclose(out, attn * 4.0)


class TestAggregateTokenMap:
    def _record(self, per_head_cols, spatial, layer=0, t=100, n_tok=4):
        rec = AttentionRecord()
        h, w = spatial
        for head, col in enumerate(per_head_cols):
            m = torch.zeros(h * w, n_tok, dtype=torch.float64)
            m[:, 1] = torch.as_tensor(col, dtype=torch.float64)
            rec.add(layer, head, t, m, spatial)
        return rec

    def test_single_head_unchanged(self):
        col = torch.rand(16, dtype=torch.float64)
        rec = self._record([col], (4, 4))
        maps, mean = aggregate_token_map(rec, 1, [0], 100)
        assert torch.equal(maps[0].values, col.reshape(4, 4))
        assert torch.equal(mean, col.reshape(4, 4))

    def test_mean_of_identical_heads_idempotent(self):
        col = torch.rand(16, dtype=torch.float64)
        rec = self._record([col, col.clone()], (4, 4))
        _, mean = aggregate_token_map(rec, 1, [0], 100)
        assert torch.allclose(mean, col.reshape(4, 4))

    def test_two_heads_scalar_mean(self):
        rec = self._record([torch.full((16,), 0.2), torch.full((16,), 0.4)], (4, 4))
        _, mean = aggregate_token_map(rec, 1, [0], 100)
        assert torch.allclose(mean, torch.full((4, 4), 0.3, dtype=torch.float64), atol=1e-12)

    def test_cross_layer_mean_at_largest_resolution(self):
        rec = AttentionRecord()
        low = torch.full((4, 3), 0.2, dtype=torch.float64)   # 2x2, token col 1
        high = torch.full((16, 3), 0.6, dtype=torch.float64)  # 4x4
        rec.add(0, 0, 100, low, (2, 2))
        rec.add(1, 0, 100, high, (4, 4))
        maps, mean = aggregate_token_map(rec, 1, [0, 1], 100)
        assert mean.shape == (4, 4)
        # Constant maps stay constant under bilinear resampling.
        assert torch.allclose(mean, torch.full((4, 4), 0.4, dtype=torch.float64), atol=1e-12)

    def test_missing_layer_raises_with_key(self):
        rec = self._record([torch.rand(16)], (4, 4))
        with pytest.raises(KeyError, match="layer 3"):
            aggregate_token_map(rec, 1, [3], 100)


class TestNormalizeMap:
    def test_standardizes_to_zero_mean_unit_std(self):
        values = torch.rand(8, 8, dtype=torch.float64) * 5
        normalized, mu, sigma, degenerate = normalize_map(values)
        assert not degenerate
        assert float(normalized.mean()) == pytest.approx(0.0, abs=1e-6)
        assert float(normalized.std(unbiased=False)) == pytest.approx(1.0, abs=1e-6)
        assert mu == pytest.approx(float(values.mean()))

    def test_constant_map_degenerate(self):
        normalized, mu, sigma, degenerate = normalize_map(torch.full((4, 4), 0.7))
        assert degenerate
        assert torch.all(normalized == 0)

    def test_two_point_standardization(self):
        normalized, mu, sigma, _ = normalize_map(torch.tensor([[0.0, 2.0]], dtype=torch.float64))
        assert mu == pytest.approx(1.0)
        assert sigma == pytest.approx(1.0)  # population std
        assert torch.allclose(normalized, torch.tensor([[-1.0, 1.0]], dtype=torch.float64))

    def test_destandardization_round_trip(self):
        values = torch.rand(6, 6, dtype=torch.float64)
        normalized, mu, sigma, _ = normalize_map(values)
        back = normalized * sigma + mu
        assert torch.allclose(back, values, atol=1e-6)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            normalize_map(torch.tensor([[float("nan"), 1.0]]))


class TestEditAttention:
    def test_identity_edit(self):
        config = GuidanceConfig(beta_object=1.0, beta_background=1.0)
        m = torch.rand(4, 4, dtype=torch.float64)
        query = QueryAttentionMap(np.zeros((4, 4)))
        out = edit_attention(m, query, "object", config, (0.0, 1.0))
        assert torch.allclose(out, m)

    def test_beta_zero_returns_query(self):
        config = GuidanceConfig(beta_object=0.0)
        query_values = np.random.default_rng(0).uniform(size=(4, 4))
        out = edit_attention(
            torch.rand(4, 4, dtype=torch.float64),
            QueryAttentionMap(query_values),
            "object", config, (0.0, 1.0),
        )
        assert torch.allclose(out, torch.as_tensor(query_values), atol=1e-12)

    def test_scalar_blend(self):
        config = GuidanceConfig(beta_object=2.0)
        out = edit_attention(
            torch.tensor([[0.3]], dtype=torch.float64),
            QueryAttentionMap(np.array([[0.5]])),
            "object", config, (0.0, 1.0),
        )
        assert out.item() == pytest.approx(1.1, abs=1e-9)

    def test_background_ignores_query(self):
        config = GuidanceConfig(beta_background=1.0)
        m = torch.rand(4, 4, dtype=torch.float64)
        out = edit_attention(m, QueryAttentionMap(np.ones((4, 4))), "background",
                             config, (0.0, 1.0))
        assert torch.allclose(out, m)

    def test_destandardizes_and_clamps(self):
        config = GuidanceConfig(beta_object=1.0)
        m = torch.tensor([[-5.0, 1.0]], dtype=torch.float64)
        out = edit_attention(m, QueryAttentionMap(np.zeros((1, 2))), "object",
                             config, (0.1, 0.2))
        # raw = m_edit * sigma + mu, then clamped at zero
        expected = torch.clamp(
            (m + (0.0 - 0.1) / 0.2) * 0.2 + 0.1, min=0.0
        )
        assert torch.allclose(out, expected)
        assert out.min() >= 0.0

    def test_resolution_mismatch_rejected(self):
        config = GuidanceConfig()
        with pytest.raises(ValueError, match="resample"):
            edit_attention(torch.rand(4, 4), QueryAttentionMap(np.zeros((2, 2))),
                           "object", config, (0.0, 1.0))

    def test_unknown_role_rejected(self):
        with pytest.raises(ValueError):
            edit_attention(torch.rand(2, 2), QueryAttentionMap(np.zeros((2, 2))),
                           "subject", GuidanceConfig(), (0.0, 1.0))


class TestApplyGuidedAttention:
    def test_no_edits_returns_input_exactly(self):
        attn = torch.rand(6, 4)
        out = apply_guided_attention(attn, {})
        assert out is attn

    def test_row_renormalization(self):
        attn = torch.tensor([[0.5, 0.5]])
        out = apply_guided_attention(attn, {0: torch.tensor([0.2]), 1: torch.tensor([0.2])})
        assert torch.allclose(out, torch.tensor([[0.5, 0.5]]))

    def test_zero_row_falls_back_to_uniform(self):
        attn = torch.tensor([[0.5, 0.5]])
        out = apply_guided_attention(attn, {0: torch.tensor([0.0]), 1: torch.tensor([0.0])})
        assert torch.allclose(out, torch.tensor([[0.5, 0.5]]))

    def test_edited_rows_sum_to_one(self):
        gen = torch.Generator().manual_seed(1)
        attn = torch.softmax(torch.randn(10, 5, generator=gen), dim=-1)
        edits = {2: torch.rand(10, generator=gen) * 3}
        out = apply_guided_attention(attn, edits)
        assert torch.allclose(out.sum(dim=-1), torch.ones(10), atol=1e-6)
        # untouched columns keep their relative proportions
        ratio = out[:, 0] / out[:, 1]
        assert torch.allclose(ratio, attn[:, 0] / attn[:, 1], atol=1e-5)

    def test_wrong_length_rejected(self):
        with pytest.raises(ValueError):
            apply_guided_attention(torch.rand(4, 2), {0: torch.rand(3)})


class TestGuidanceConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            GuidanceConfig(beta_object=-1.0)
        with pytest.raises(ValueError):
            GuidanceConfig(stop_step=-1)

    def test_target_layers_coerced_to_tuple(self):
        assert GuidanceConfig(target_layers=[0, 1]).target_layers == (0, 1)


class TestGuidanceEditor:
    def _attn(self, heads=4, spatial=(4, 4), n_tok=5, seed=0):
        gen = torch.Generator().manual_seed(seed)
        h, w = spatial
        return torch.softmax(torch.randn(heads, h * w, n_tok, generator=gen), dim=-1)

    def test_identity_configuration_short_circuits(self):
        editor = GuidanceEditor(
            QueryAttentionMap(np.zeros((8, 8))),
            GuidanceConfig(beta_object=1.0, beta_background=1.0, stop_step=15),
            guided_timesteps=[900],
            unit_stats=True,
        )
        assert editor.on_layer(0, self._attn(), 900, (4, 4)) is None

    def test_inactive_outside_window_and_layers(self):
        editor = GuidanceEditor(
            QueryAttentionMap(np.ones((8, 8)) * 0.5),
            GuidanceConfig(target_layers=(0, 1)),
            guided_timesteps=[900],
        )
        attn = self._attn()
        assert editor.on_layer(2, attn, 900, (4, 4)) is None  # untargeted layer
        assert editor.on_layer(0, attn, 880, (4, 4)) is None  # outside window

    def test_edit_redistributes_mass_toward_query_peak(self):
        query = np.zeros((8, 8))
        query[1, 1] = 1.0
        editor = GuidanceEditor(
            QueryAttentionMap(query),
            GuidanceConfig(beta_object=1.0, beta_background=1.0),
            guided_timesteps=[900],
        )
        attn = self._attn(spatial=(8, 8), n_tok=5)
        out = editor.on_layer(0, attn, 900, (8, 8))
        assert out is not None
        assert out.shape == attn.shape
        assert torch.allclose(out.sum(dim=-1), torch.ones_like(out.sum(dim=-1)), atol=1e-6)
        # all heads share the edited map
        assert torch.allclose(out[0], out[1])
        # object token gains mass at the query peak relative to before
        pixel = 1 * 8 + 1
        assert out[0, pixel, 0] > attn.mean(dim=0)[pixel, 0]
