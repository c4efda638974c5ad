"""Orchestration: domain fine-tuning, guided translation, ablations.

Translation samples the target model from seeded pure noise,
conditioned on the source image, while a guidance editor rewrites
object-token attention toward the source boxes' query map for the
configured early window. Source boxes are copied onto the generated
image unchanged: the method moves content to the labels, never the
labels themselves.
"""

import hashlib
import json
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .attention import (
    OBJECT_TOKEN_INDEX,
    AttentionRecorder,
    GuidanceConfig,
    GuidanceEditor,
    aggregate_token_map,
)
from .backbone import ConditioningInput
from .querymap import build_query_map
from .scheduler import ddim_step

__all__ = [
    "FinetuneConfig",
    "TranslationJob",
    "TranslatedSample",
    "finetune_domain",
    "guided_translate",
    "ablation_run",
    "attention_window",
    "mean_object_maps",
]


@dataclass(frozen=True)
class FinetuneConfig:
    max_steps: int = 500
    batch_size: int = 8
    seed: int = 0
    loss_threshold: float = None


@dataclass
class TranslationJob:
    """Everything one translation needs; models share arch and schedule."""

    source_model: object
    target_model: object
    e_star: object
    guidance: GuidanceConfig
    schedule: object
    seed: int = 0
    sigma_scale: float = 0.5

    def provenance_hash(self):
        payload = {
            "guidance": {
                "beta_object": self.guidance.beta_object,
                "beta_background": self.guidance.beta_background,
                "stop_step": self.guidance.stop_step,
                "target_layers": list(self.guidance.target_layers),
                "control_scale": self.guidance.control_scale,
            },
            "sigma_scale": self.sigma_scale,
            "seed": self.seed,
        }
        digest = hashlib.sha256(
            json.dumps(payload, sort_keys=True).encode()
            + np.asarray(self.schedule.alpha_bar).tobytes()
        )
        return digest.hexdigest()[:16]


@dataclass
class TranslatedSample:
    image: np.ndarray
    transferred_boxes: list
    provenance: dict = field(default_factory=dict)


def finetune_domain(backbone, dataset, e, schedule, config=None):
    """Run seeded fine-tune steps until the budget or loss threshold.

    The condition for each sample is the image itself (reconstruction
    regime); augmentation happens inside the training step. The loss
    threshold, when set, is compared against the mean of the last ten
    step losses.

    Returns:
        (backbone, loss_curve)
    """
    config = config or FinetuneConfig()
    if not dataset.images:
        raise ValueError("dataset must be non-empty")
    rng = np.random.default_rng(config.seed)
    n = len(dataset.images)
    losses = []
    for step in range(config.max_steps):
        idx = rng.choice(n, size=min(config.batch_size, n), replace=n < config.batch_size)
        batch = [(dataset.images[i].image, dataset.images[i].image) for i in idx]
        loss = backbone.finetune_step(batch, e, schedule, rng_seed=config.seed * 1_000_003 + step)
        if not np.isfinite(loss):
            raise RuntimeError(f"fine-tuning diverged at step {step}: loss={loss}")
        losses.append(loss)
        if config.loss_threshold is not None and len(losses) >= 10:
            if float(np.mean(losses[-10:])) <= config.loss_threshold:
                break
    return backbone, losses


def attention_window(schedule, guidance):
    """Training timesteps whose attention summarizes a run.

    The guided window when guidance is active; the default early window
    otherwise, so guided and unguided runs are summarized comparably.
    """
    stop = guidance.stop_step if guidance.stop_step > 0 else min(15, schedule.inference_steps)
    return tuple(schedule.timestep_map[:stop])


def mean_object_maps(record, layers, timesteps):
    """Per-layer and cross-layer object-token maps averaged over steps.

    Returns:
        ({layer_id: 2D tensor}, 2D tensor)
    """
    per_layer = {layer: [] for layer in layers}
    aggregates = []
    for t in timesteps:
        maps, aggregate = aggregate_token_map(record, OBJECT_TOKEN_INDEX, layers, t)
        for m in maps:
            per_layer[m.layer_id].append(m.values)
        aggregates.append(aggregate)
    return (
        {layer: torch.stack(v).mean(dim=0) for layer, v in per_layer.items()},
        torch.stack(aggregates).mean(dim=0),
    )


def guided_translate(source_image, job, recorder_pre=None, recorder_post=None):
    """Translate one labeled source image into the target domain.

    Args:
        recorder_pre: optional AttentionRecorder capturing maps as the
            model produced them, before any edit.
        recorder_post: optional AttentionRecorder capturing the maps
            actually used, after edits.

    Returns:
        TranslatedSample with the source boxes copied verbatim.
    """
    model = job.target_model
    layer_ids = set(model.decoder_cross_attention_layer_ids)
    missing = [l for l in job.guidance.target_layers if l not in layer_ids]
    if missing:
        raise ValueError(f"guidance targets nonexistent decoder layers {missing}")
    if not source_image.boxes:
        warnings.warn(
            f"source image {source_image.identifier!r} has no boxes; "
            "translation runs unguided",
            stacklevel=2,
        )

    h, w = source_image.image.shape[:2]
    qmap = build_query_map(source_image.boxes, (h, w), sigma_scale=job.sigma_scale)
    guided_ts = job.schedule.timestep_map[: job.guidance.stop_step]
    editor = GuidanceEditor(qmap, job.guidance, guided_ts)
    hooks = [hk for hk in (recorder_pre, editor, recorder_post) if hk is not None]

    gen = torch.Generator().manual_seed(int(job.seed))
    dtype = model.config.torch_dtype() if hasattr(model, "config") else torch.float32
    x = torch.randn(model.latent_shape, generator=gen, dtype=dtype)
    cond = ConditioningInput(source_image.image, job.guidance.control_scale)

    ts = job.schedule.timestep_map
    with torch.no_grad():
        for i, t in enumerate(ts):
            eps = model.denoise(x, t, job.e_star, cond=cond, hooks=hooks)
            t_prev = ts[i + 1] if i + 1 < len(ts) else None
            x = ddim_step(x, eps, t, t_prev, job.schedule)

    return TranslatedSample(
        image=model.decode_latent(x),
        transferred_boxes=list(source_image.boxes),
        provenance={
            "source_id": source_image.identifier,
            "seed": int(job.seed),
            "config_hash": job.provenance_hash(),
        },
    )


def ablation_run(mode, source_images, job, e_baseline=None):
    """Translate a set under one of the ablation modes.

    ``full`` uses the optimized embedding with guidance, ``no_text_optim``
    swaps in the unoptimized embedding, ``no_guidance`` keeps the
    optimized embedding but never edits attention. Image ``i`` runs with
    seed ``job.seed + i``.
    """
    if mode == "full":
        run_job = job
    elif mode == "no_text_optim":
        if e_baseline is None:
            raise ValueError("no_text_optim mode needs the unoptimized embedding")
        run_job = replace(job, e_star=e_baseline)
    elif mode == "no_guidance":
        run_job = replace(job, guidance=replace(job.guidance, stop_step=0))
    else:
        raise ValueError(f"unknown ablation mode {mode!r}")

    samples = []
    for index, img in enumerate(source_images):
        samples.append(guided_translate(img, replace(run_job, seed=job.seed + index)))
    return samples
