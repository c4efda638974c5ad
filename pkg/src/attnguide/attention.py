"""Cross-attention maps: compute, record, aggregate, normalize, edit.

The denoiser invokes an :class:`AttentionHooks` object at every decoder
cross-attention layer with the softmaxed maps, once per head. Hooks can
observe (recording never perturbs the run) or return a replacement that
is used in place of the original attention before the value
multiplication.

Guidance edits work on the head-averaged per-token maps: each map is
standardized, scaled by the role-specific beta, the query map (itself
standardized against the same statistics) is added for the object token,
and the result is mapped back to raw scale, clamped at zero, and
reassembled into a row-stochastic attention matrix shared by all heads.
"""

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import torch
import torch.nn.functional as F

from .querymap import QueryAttentionMap, resample_map

__all__ = [
    "cross_attention",
    "AttentionRecord",
    "AttentionHooks",
    "AttentionRecorder",
    "TokenMap",
    "GuidanceConfig",
    "GuidanceEditor",
    "aggregate_token_map",
    "normalize_map",
    "edit_attention",
    "apply_guided_attention",
    "run_hooks",
]

OBJECT_TOKEN_INDEX = 0


def cross_attention(q, k):
    """Row-stochastic attention weights softmax(Q K^T / sqrt(d_k)).

    Args:
        q: (..., n_q, d_k) query matrix.
        k: (..., n_tok, d_k) key matrix.

    Returns:
        (..., n_q, n_tok) tensor whose rows sum to 1.
    """
    q = torch.as_tensor(q)
    k = torch.as_tensor(k)
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"key dim mismatch: {q.shape[-1]} vs {k.shape[-1]}")
    d_k = q.shape[-1]
    logits = q @ k.transpose(-2, -1) / math.sqrt(d_k)
    return torch.softmax(logits, dim=-1)


@dataclass
class TokenMap:
    """One token's spatial attention map at one decoder layer."""

    values: torch.Tensor
    token_index: int
    layer_id: int


class NormalizedMap(NamedTuple):
    values: torch.Tensor
    mu: float
    sigma: float
    degenerate: bool


class AttentionRecord:
    """Per-(layer, head, timestep) softmaxed maps captured during a run.

    Owned by exactly one sampling run; not safe to share between
    concurrent runs.
    """

    def __init__(self):
        self.entries = {}
        self.spatial_shapes = {}

    def add(self, layer_id, head, t, attn_map, spatial_shape):
        self.entries[(layer_id, head, int(t))] = attn_map
        self.spatial_shapes[layer_id] = tuple(spatial_shape)

    def get(self, layer_id, head, t):
        key = (layer_id, head, int(t))
        if key not in self.entries:
            raise KeyError(f"no recorded attention for (layer, head, t)={key}")
        return self.entries[key]

    def heads(self, layer_id, t):
        """Head indices recorded for one layer and timestep, sorted."""
        return sorted(h for (l, h, tt) in self.entries if l == layer_id and tt == int(t))

    def layers(self):
        return sorted({l for (l, _, _) in self.entries})

    def timesteps(self):
        return sorted({t for (_, _, t) in self.entries})


class AttentionHooks:
    """Base hook: observes or rewrites softmaxed attention maps.

    ``on_layer`` receives all heads at once, shape (heads, n_q, n_tok),
    and may return a full replacement. The default implementation calls
    ``on_head`` per head, preserving the per-head observation contract.
    Returning ``None`` everywhere leaves the run bit-identical.
    """

    def on_layer(self, layer_id, attn, t, spatial_shape):
        replaced = None
        for head in range(attn.shape[0]):
            current = attn[head] if replaced is None else replaced[head]
            out = self.on_head(layer_id, head, current, t, spatial_shape)
            if out is not None:
                if replaced is None:
                    replaced = attn.clone()
                replaced[head] = out
        return replaced

    def on_head(self, layer_id, head, attn_map, t, spatial_shape):
        return None


class AttentionRecorder(AttentionHooks):
    """Pure observer; stores each head's map into an AttentionRecord."""

    def __init__(self, record=None):
        self.record = record if record is not None else AttentionRecord()

    def on_head(self, layer_id, head, attn_map, t, spatial_shape):
        self.record.add(layer_id, head, t, attn_map, spatial_shape)
        return None


def run_hooks(hooks, layer_id, attn, t, spatial_shape):
    """Apply one hook or a sequence of hooks in order; chain replacements."""
    if hooks is None:
        return attn
    if isinstance(hooks, AttentionHooks):
        hooks = (hooks,)
    current = attn
    for hook in hooks:
        out = hook.on_layer(layer_id, current, t, spatial_shape)
        if out is not None:
            current = out
    return current


def aggregate_token_map(record, token, layers, timestep):
    """Head-averaged spatial maps for one token, plus their cross-layer mean.

    Per layer, the token's column is averaged over all recorded heads and
    reshaped to the layer's spatial grid. The cross-layer mean is taken
    after bilinearly resampling every layer map to the largest recorded
    resolution among ``layers``.

    Returns:
        (per_layer_maps, mean_values): list of TokenMap and a 2D tensor.
    """
    per_layer = []
    for layer_id in layers:
        heads = record.heads(layer_id, timestep)
        if not heads:
            raise KeyError(f"no recorded attention for layer {layer_id} at t={timestep}")
        cols = [record.get(layer_id, h, timestep)[:, token] for h in heads]
        mean_col = torch.stack(cols, dim=0).mean(dim=0)
        h, w = record.spatial_shapes[layer_id]
        per_layer.append(TokenMap(mean_col.reshape(h, w), token, layer_id))

    target = max((m.values.shape for m in per_layer), key=lambda s: s[0] * s[1])
    resampled = []
    for m in per_layer:
        if m.values.shape == target:
            resampled.append(m.values)
        else:
            up = F.interpolate(
                m.values[None, None], size=target, mode="bilinear", align_corners=False
            )
            resampled.append(up[0, 0])
    mean_values = torch.stack(resampled, dim=0).mean(dim=0)
    return per_layer, mean_values


def normalize_map(tmap):
    """Standardize a token map by its own mean and population std.

    A map with std below 1e-8 cannot be standardized; it comes back as an
    all-zero map flagged degenerate instead of raising.
    """
    values = tmap.values if isinstance(tmap, TokenMap) else torch.as_tensor(tmap)
    if not torch.isfinite(values).all():
        raise ValueError("token map contains non-finite values")
    # Statistics in float64: float32 variance roundoff would push an
    # exactly constant map past the degeneracy threshold.
    mu = float(values.double().mean())
    sigma = float(values.double().std(unbiased=False))
    if sigma < 1e-8:
        return NormalizedMap(torch.zeros_like(values), mu, sigma, True)
    return NormalizedMap((values - mu) / sigma, mu, sigma, False)


@dataclass(frozen=True)
class GuidanceConfig:
    """Scaling and scheduling knobs for attention guidance."""

    beta_object: float = 1.0
    beta_background: float = 1.0
    stop_step: int = 15
    target_layers: tuple = (0, 1, 2)
    opt_timestep: int = 30
    control_scale: float = 1.0

    def __post_init__(self):
        if self.beta_object < 0 or self.beta_background < 0:
            raise ValueError("betas must be nonnegative")
        if self.stop_step < 0:
            raise ValueError("stop_step must be nonnegative")
        object.__setattr__(self, "target_layers", tuple(self.target_layers))


def edit_attention(normalized, query, token_role, config, stats):
    """Blend a standardized token map with the standardized query map.

    ``edited = beta_role * normalized + query_std`` where ``query_std``
    is the query map standardized against the same (mu, sigma) for the
    object token and zero for background tokens. The result is mapped
    back to raw scale and clamped at zero.

    Args:
        normalized: TokenMap or 2D tensor in standardized space.
        query: QueryAttentionMap (or 2D array) already at this map's
            resolution.
        token_role: "object" or "background".
        stats: (mu, sigma) used for standardization and its inverse.

    Returns:
        2D tensor of edited raw attention values, >= 0.
    """
    if token_role not in ("object", "background"):
        raise ValueError(f"unknown token role {token_role!r}")
    values = normalized.values if isinstance(normalized, TokenMap) else torch.as_tensor(normalized)
    qvals = query.values if isinstance(query, QueryAttentionMap) else query
    qvals = torch.as_tensor(qvals, dtype=values.dtype)
    if tuple(qvals.shape) != tuple(values.shape):
        raise ValueError(
            f"query map resolution {tuple(qvals.shape)} does not match "
            f"token map {tuple(values.shape)}; resample it first"
        )
    mu, sigma = stats
    beta = config.beta_object if token_role == "object" else config.beta_background
    if token_role == "object":
        query_std = (qvals - mu) / sigma
    else:
        query_std = torch.zeros_like(values)
    edited = beta * values + query_std
    return torch.clamp(edited * sigma + mu, min=0.0)


def apply_guided_attention(attn, edits):
    """Reassemble an attention matrix from per-token edited maps.

    Tokens absent from ``edits`` keep their original columns. With no
    edits the input is returned untouched. Otherwise each row is
    renormalized to sum to 1; rows summing to 0 fall back to uniform.

    Args:
        attn: (n_q, n_tok) original softmaxed matrix.
        edits: mapping token index -> edited raw map, flat (n_q,) or 2D.

    Returns:
        (n_q, n_tok) row-stochastic replacement matrix.
    """
    if not edits:
        return attn
    n_q, n_tok = attn.shape
    out = attn.clone()
    for token, values in edits.items():
        flat = values.reshape(-1)
        if flat.shape[0] != n_q:
            raise ValueError(
                f"edited map for token {token} has {flat.shape[0]} values, expected {n_q}"
            )
        out[:, token] = flat
    sums = out.sum(dim=1, keepdim=True)
    zero = sums.squeeze(1) <= 0
    out = out / torch.where(sums == 0, torch.ones_like(sums), sums)
    if zero.any():
        out[zero] = 1.0 / n_tok
    return out


class GuidanceEditor(AttentionHooks):
    """Rewrites attention at targeted layers during the guided window.

    The editor is armed with the set of training timesteps that fall in
    the guided window (inference step index below ``stop_step``) so the
    sampling loop stays stateless. The same edit is applied at every
    guided timestep.

    With unit statistics, both betas at 1, and an all-zero query map the
    configured edit is the identity; that configuration short-circuits
    to no replacement so unguided trajectories are preserved bit-exactly.
    """

    def __init__(self, query_map, config, guided_timesteps, unit_stats=False):
        self.query_map = query_map
        self.config = config
        self.guided_timesteps = frozenset(int(t) for t in guided_timesteps)
        self.unit_stats = unit_stats
        self._query_cache = {}
        self._identity = (
            unit_stats
            and config.beta_object == 1.0
            and config.beta_background == 1.0
            and float(query_map.values.max(initial=0.0)) == 0.0
        )

    def _query_at(self, spatial_shape, dtype):
        key = (tuple(spatial_shape), dtype)
        if key not in self._query_cache:
            resampled = resample_map(self.query_map, spatial_shape)
            self._query_cache[key] = torch.as_tensor(resampled.values, dtype=dtype)
        return self._query_cache[key]

    def on_layer(self, layer_id, attn, t, spatial_shape):
        if self._identity:
            return None
        if layer_id not in self.config.target_layers:
            return None
        if int(t) not in self.guided_timesteps:
            return None

        heads, n_q, n_tok = attn.shape
        h, w = spatial_shape
        mean_attn = attn.mean(dim=0)
        query = self._query_at(spatial_shape, attn.dtype)

        edits = {}
        for token in range(n_tok):
            token_map = mean_attn[:, token].reshape(h, w)
            normalized, mu, sigma, degenerate = normalize_map(token_map)
            if self.unit_stats:
                normalized, mu, sigma = token_map, 0.0, 1.0
            elif degenerate:
                # Constant map: nothing to rescale, leave the column alone.
                continue
            role = "object" if token == OBJECT_TOKEN_INDEX else "background"
            edits[token] = edit_attention(
                normalized, query, role, self.config, (mu, sigma)
            )
        guided = apply_guided_attention(mean_attn, edits)
        return guided.unsqueeze(0).expand(heads, n_q, n_tok).clone()
