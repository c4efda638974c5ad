"""Object-token embedding optimization against query attention maps.

Only the first embedding row (the object token) is optimized, by plain
gradient descent on the mean squared error between the model's
head-and-layer-averaged object-token attention and each labeled image's
query map. The per-image noise drawn at the optimization timestep is
frozen for the whole run so the objective is deterministic under a
fixed seed.
"""

import warnings
from dataclasses import dataclass, field

import torch

from .attention import OBJECT_TOKEN_INDEX, AttentionRecorder, aggregate_token_map
from .backbone import ConditioningInput, TextEmbedding
from .querymap import build_query_map, resample_map
from .scheduler import add_noise

__all__ = ["TextOptConfig", "OptimizationState", "attention_loss", "optimize_embedding"]


@dataclass(frozen=True)
class TextOptConfig:
    learning_rate: float = 1e-2
    max_steps: int = 200
    opt_timestep: int = 30
    rng_seed: int = 0
    sigma_scale: float = 0.5
    control_scale: float = 1.0


@dataclass
class OptimizationState:
    """Result of an optimization run; ``embedding`` is the best-loss state."""

    embedding: TextEmbedding
    step: int
    loss_history: list = field(default_factory=list)
    config: TextOptConfig = field(default_factory=TextOptConfig)


def _image_noise(shape, rng_seed, index, dtype):
    gen = torch.Generator().manual_seed(int(rng_seed) * 100003 + index)
    return torch.randn(shape, generator=gen, dtype=dtype)


def attention_loss(e, images, backbone, schedule, opt_timestep, rng_seed=0,
                   sigma_scale=0.5, control_scale=1.0):
    """Mean squared distance between object-token attention and query maps.

    Each image is encoded, noised to the training timestep behind
    inference step ``opt_timestep`` with its frozen per-image noise, and
    denoised (conditioned on itself) under a recording hook. The
    object-token maps are averaged over every decoder layer and head,
    the image's query map is resampled to the aggregate resolution, and
    the squared error is summed per image and averaged over images.

    Returns:
        0-dim tensor >= 0; differentiable w.r.t. ``e.tokens``.
    """
    if not images:
        raise ValueError("need at least one labeled image")
    t = schedule.training_timestep(opt_timestep)
    layers = backbone.decoder_cross_attention_layer_ids
    dtype = e.tokens.dtype

    total = None
    for index, img in enumerate(images):
        if not img.boxes:
            raise ValueError(
                f"image {img.identifier!r} has no boxes: no target signal to optimize against"
            )
        x0 = backbone.encode_image(img.image)
        eps = _image_noise(x0.shape, rng_seed, index, x0.dtype)
        x_t = add_noise(x0, eps, t, schedule)

        recorder = AttentionRecorder()
        cond = ConditioningInput(img.image, control_scale)
        backbone.denoise(x_t, t, e, cond=cond, hooks=recorder)
        _, aggregate = aggregate_token_map(recorder.record, OBJECT_TOKEN_INDEX, layers, t)

        qmap = build_query_map(img.boxes, img.image.shape[:2], sigma_scale=sigma_scale)
        target = resample_map(qmap, tuple(aggregate.shape))
        target_t = torch.as_tensor(target.values, dtype=dtype)
        err = ((aggregate.to(dtype) - target_t) ** 2).sum()
        total = err if total is None else total + err

    return total / len(images)


def optimize_embedding(e0, images, backbone, schedule, config=None):
    """Gradient-descend the object-token row; all other rows stay frozen.

    Returns:
        OptimizationState whose ``embedding`` had the lowest recorded
        loss. ``max_steps=0`` returns the initial embedding untouched.
    """
    config = config or TextOptConfig()
    if not images:
        raise ValueError("need at least one labeled image")
    if len(images) < 5:
        warnings.warn(
            f"only {len(images)} labeled images; at least five are needed for a "
            "reliable optimized embedding",
            stacklevel=2,
        )

    row0 = e0.tokens[OBJECT_TOKEN_INDEX].detach().clone().requires_grad_(True)
    frozen = e0.tokens[OBJECT_TOKEN_INDEX + 1 :].detach().clone()

    def assemble(row):
        return TextEmbedding(torch.cat([row[None, :], frozen], dim=0))

    best_loss = float("inf")
    best_row = row0.detach().clone()
    history = []
    for step in range(config.max_steps):
        e = assemble(row0)
        loss = attention_loss(
            e, images, backbone, schedule, config.opt_timestep,
            rng_seed=config.rng_seed, sigma_scale=config.sigma_scale,
            control_scale=config.control_scale,
        )
        value = float(loss)
        if not torch.isfinite(loss):
            raise RuntimeError(
                f"non-finite optimization loss {value} at step {step}; "
                "lower the learning rate"
            )
        history.append(value)
        if value < best_loss:
            best_loss = value
            best_row = row0.detach().clone()
        # A loss blind to the embedding means a zero gradient (stationary).
        grad = None
        if loss.requires_grad:
            (grad,) = torch.autograd.grad(loss, row0, allow_unused=True)
        if grad is not None:
            with torch.no_grad():
                row0 -= config.learning_rate * grad

    return OptimizationState(
        embedding=assemble(best_row.requires_grad_(False)),
        step=len(history),
        loss_history=history,
        config=config,
    )
