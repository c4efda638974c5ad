"""Attention-guided cross-domain image translation with label transfer.

Desk-scale library: Gaussian query maps from box labels, a deterministic
reverse sampler, a toy conditioned denoiser with cross-attention hook
points, object-token embedding optimization, attention-edit guidance,
and evaluation metrics, wired together by a translation pipeline and a
subcommand CLI.
"""

from .attention import (
    AttentionRecord,
    AttentionRecorder,
    GuidanceConfig,
    GuidanceEditor,
    aggregate_token_map,
    apply_guided_attention,
    cross_attention,
    edit_attention,
    normalize_map,
)
from .backbone import (
    BackboneInterface,
    ConditioningInput,
    TextEmbedding,
    ToyBackbone,
    ToyBackboneConfig,
)
from .data import DomainDataset, augment, load_coco, make_toy_fixture, write_coco
from .metrics import (
    RandomProjectionFeatures,
    attention_coverage,
    compute_fid,
    domain_score,
    plot_maps,
)
from .pipeline import (
    FinetuneConfig,
    TranslatedSample,
    TranslationJob,
    ablation_run,
    finetune_domain,
    guided_translate,
)
from .querymap import BoundingBox, LabeledImage, QueryAttentionMap, build_query_map, gaussian_marker, resample_map
from .scheduler import NoiseSchedule, add_noise, ddim_step, make_schedule, predict_x0
from .serialization import load_array, load_checkpoint, save_array, save_checkpoint
from .textopt import OptimizationState, TextOptConfig, attention_loss, optimize_embedding

__version__ = "0.1.0"
