"""Subcommand front-end over the translation pipeline.

Every stage reads one validated configuration (file plus ``--set``
overrides), writes its outputs under the configured directories, and
stamps them with the configuration hash. Exit codes: 0 success, 1
runtime failure, 2 configuration error, 3 missing input artifact.
"""

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .attention import AttentionRecorder, GuidanceConfig
from .backbone import TextEmbedding, ToyBackbone, ToyBackboneConfig
from .config import ConfigError, RunConfig
from .data import DomainDataset, load_coco, make_toy_fixture, save_image, write_coco
from .metrics import (
    RandomProjectionFeatures,
    attention_coverage,
    compute_fid,
    domain_score,
    plot_maps,
)
from .querymap import LabeledImage
from .pipeline import (
    FinetuneConfig,
    TranslationJob,
    attention_window,
    finetune_domain,
    guided_translate,
    mean_object_maps,
)
from .querymap import build_query_map
from .scheduler import make_schedule
from .serialization import load_array, load_checkpoint, save_array, save_checkpoint
from .textopt import TextOptConfig, optimize_embedding

__all__ = ["main"]


def _build_backbone(cfg):
    return ToyBackbone(ToyBackboneConfig(
        image_size=cfg["backbone.image_size"],
        base_channels=cfg["backbone.base_channels"],
        embed_dim=cfg["backbone.embed_dim"],
        vocab_size=cfg["backbone.vocab_size"],
        n_tokens=cfg["backbone.n_tokens"],
        heads=cfg["backbone.heads"],
        seed=cfg["backbone.seed"],
        finetune_lr=cfg["finetune.lr"],
    ))


def _build_schedule(cfg):
    return make_schedule(
        cfg["schedule.t_train"],
        cfg["schedule.inference_steps"],
        (cfg["schedule.beta_min"], cfg["schedule.beta_max"]),
    )


def _guidance(cfg, stop_step=None):
    return GuidanceConfig(
        beta_object=cfg["guidance.beta_object"],
        beta_background=cfg["guidance.beta_background"],
        stop_step=cfg["guidance.stop_step"] if stop_step is None else stop_step,
        target_layers=tuple(cfg["guidance.target_layers"]),
        opt_timestep=cfg["textopt.opt_timestep"],
        control_scale=cfg["guidance.control_scale"],
    )


def _load_domain(cfg, domain):
    root = cfg.data_dir() / domain
    return load_coco(root / "annotations.json", root / "images", name=domain,
                     labeled=domain == "source")


def _checkpoint_path(cfg, name):
    return cfg.out_dir() / "checkpoints" / f"{name}.ckpt"


def _load_backbone_checkpoint(cfg, name):
    path = _checkpoint_path(cfg, name)
    if not path.exists():
        raise FileNotFoundError(
            f"{name} checkpoint not found at {path}; run `finetune --domain {name}` first"
        )
    model, manifest = ToyBackbone.load(path)
    return model, manifest


def cmd_make_fixture(cfg, args):
    source, target = make_toy_fixture(
        cfg.data_dir(),
        n_images=cfg["fixture.n_images"],
        seed=cfg["fixture.seed"],
        image_size=cfg["fixture.image_size"],
    )
    print(f"wrote fixture to {cfg.data_dir()}: {len(source.images)} source / "
          f"{len(target.images)} target images")
    return 0


def cmd_finetune(cfg, args):
    dataset = _load_domain(cfg, args.domain)
    backbone = _build_backbone(cfg)
    schedule = _build_schedule(cfg)
    e0 = backbone.text_encode(cfg["prompt.token_ids"])
    ft = FinetuneConfig(
        max_steps=cfg["finetune.steps"],
        batch_size=cfg["finetune.batch_size"],
        seed=cfg["finetune.seed"] + (0 if args.domain == "source" else 1),
        loss_threshold=cfg["finetune.loss_threshold"],
    )
    backbone, losses = finetune_domain(backbone, dataset, e0, schedule, ft)

    path = _checkpoint_path(cfg, args.domain)
    path.parent.mkdir(parents=True, exist_ok=True)
    backbone.save(path, extra_manifest={
        "domain": args.domain,
        "config_hash": cfg.hash,
        "steps": len(losses),
        "final_loss": losses[-1] if losses else None,
    })
    curve_path = path.with_suffix(".loss.json")
    curve_path.write_text(json.dumps({"config_hash": cfg.hash, "losses": losses}))
    first = float(np.mean(losses[:10])) if losses else float("nan")
    last = float(np.mean(losses[-10:])) if losses else float("nan")
    print(f"fine-tuned {args.domain}: {len(losses)} steps, "
          f"loss {first:.2f} -> {last:.2f}, saved {path}")
    return 0


def cmd_optimize_embedding(cfg, args):
    backbone, _ = _load_backbone_checkpoint(cfg, "source")
    dataset = _load_domain(cfg, "source")
    schedule = _build_schedule(cfg)
    e0 = backbone.text_encode(cfg["prompt.token_ids"])
    topt = TextOptConfig(
        learning_rate=cfg["textopt.lr"],
        max_steps=cfg["textopt.max_steps"],
        opt_timestep=cfg["textopt.opt_timestep"],
        rng_seed=cfg["textopt.seed"],
        sigma_scale=cfg["guidance.sigma_scale"],
    )
    state = optimize_embedding(e0, dataset.images, backbone, schedule, topt)

    path = _checkpoint_path(cfg, "embedding")
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, {
        "kind": "embedding",
        "config_hash": cfg.hash,
        "images_used": [img.identifier for img in dataset.images],
        "rng_seed": topt.rng_seed,
        "opt_timestep": topt.opt_timestep,
        "steps": state.step,
        "initial_loss": state.loss_history[0] if state.loss_history else None,
        "final_loss": min(state.loss_history) if state.loss_history else None,
    }, {
        "tokens": state.embedding.tokens.detach().cpu().numpy(),
        "initial_tokens": e0.tokens.detach().cpu().numpy(),
    })
    if state.loss_history:
        print(f"optimized embedding: loss {state.loss_history[0]:.4f} -> "
              f"{min(state.loss_history):.4f} over {state.step} steps, saved {path}")
    else:
        print(f"optimized embedding: no steps requested, saved initial embedding to {path}")
    return 0


def _load_embedding(cfg, backbone, use_initial=False):
    path = _checkpoint_path(cfg, "embedding")
    if not path.exists():
        raise FileNotFoundError(
            f"embedding checkpoint not found at {path}; run `optimize-embedding` first"
        )
    _, tensors = load_checkpoint(path)
    name = "initial_tokens" if use_initial else "tokens"
    dtype = backbone.config.torch_dtype()
    return TextEmbedding(torch.as_tensor(tensors[name], dtype=dtype))


def _translate_one(index, img, job, schedule, guidance, out_dir):
    pre, post = AttentionRecorder(), AttentionRecorder()
    sample = guided_translate(img, replace(job, seed=job.seed + index),
                              recorder_pre=pre, recorder_post=post)
    name = f"gen_{img.identifier}"
    save_image(sample.image, out_dir / f"{name}.png")

    maps_dir = out_dir / "maps"
    window = attention_window(schedule, guidance)
    layers = job.target_model.decoder_cross_attention_layer_ids
    pre_layers, _ = mean_object_maps(pre.record, layers, window)
    post_layers, post_agg = mean_object_maps(post.record, layers, window)
    for layer in layers:
        save_array(maps_dir / f"{name}_layer{layer}_pre.f32", pre_layers[layer].numpy())
        save_array(maps_dir / f"{name}_layer{layer}_post.f32", post_layers[layer].numpy())
    save_array(maps_dir / f"{name}_object.f32", post_agg.numpy())
    (out_dir / f"{name}.provenance.json").write_text(
        json.dumps(sample.provenance, sort_keys=True)
    )
    return name, sample


def _run_translation(cfg, subdir, mode):
    target_model, _ = _load_backbone_checkpoint(cfg, "target")
    stop_step = 0 if mode == "no_guidance" else None
    guidance = _guidance(cfg, stop_step=stop_step)
    schedule = _build_schedule(cfg)
    embedding = _load_embedding(cfg, target_model, use_initial=mode == "no_text_optim")
    source = _load_domain(cfg, "source")
    images = source.images
    if cfg["translate.max_images"] is not None:
        images = images[: cfg["translate.max_images"]]

    job = TranslationJob(
        source_model=None,
        target_model=target_model,
        e_star=embedding,
        guidance=guidance,
        schedule=schedule,
        seed=cfg["translate.seed"],
        sigma_scale=cfg["guidance.sigma_scale"],
    )
    out_dir = cfg.out_dir() / subdir
    (out_dir / "maps").mkdir(parents=True, exist_ok=True)

    workers = max(1, cfg["workers"])
    if workers == 1:
        results = [_translate_one(i, img, job, schedule, guidance, out_dir)
                   for i, img in enumerate(images)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_translate_one, i, img, job, schedule, guidance, out_dir)
                       for i, img in enumerate(images)]
            results = [f.result() for f in futures]

    generated = DomainDataset(
        name=subdir,
        images=[
            LabeledImage(image=sample.image, boxes=sample.transferred_boxes, identifier=name)
            for name, sample in results
        ],
        labeled=True,
    )
    write_coco(generated, out_dir / "labels.json")
    print(f"translated {len(results)} images ({mode}) into {out_dir}")
    return 0


def cmd_translate(cfg, args):
    mode = "no_text_optim" if args.no_text_optim else "full"
    return _run_translation(cfg, "translated", mode)


def cmd_ablate(cfg, args):
    return _run_translation(cfg, f"ablate_{args.mode}", args.mode)


def cmd_evaluate(cfg, args):
    gen_dir = Path(args.generated_dir) if args.generated_dir else cfg.out_dir() / "translated"
    labels = gen_dir / "labels.json"
    if not labels.exists():
        raise FileNotFoundError(f"no generated set at {gen_dir}; run `translate` first")
    generated = load_coco(labels, gen_dir, name="generated")
    target = _load_domain(cfg, "target")

    extractor = RandomProjectionFeatures(
        feature_dim=cfg["evaluate.feature_dim"],
        pool=cfg["evaluate.pool"],
        seed=cfg["evaluate.feature_seed"],
    )
    fid = compute_fid(
        extractor.embed_set([img.image for img in generated.images]),
        extractor.embed_set([img.image for img in target.images]),
    )

    coverages = []
    for img in generated.images:
        map_path = gen_dir / "maps" / f"{img.identifier}_object.f32"
        if not map_path.exists():
            raise FileNotFoundError(f"attention map missing: {map_path}")
        cov = attention_coverage(load_array(map_path), img.boxes, img.image.shape[:2])
        coverages.append(cov.value)
    scores = [domain_score(img.image) for img in generated.images]

    report = {
        "fid": fid,
        "coverage_mean": float(np.mean(coverages)) if coverages else 0.0,
        "domain_score_rate": float(np.mean([s >= 0.5 for s in scores])) if scores else 0.0,
        "config_hash": cfg.hash,
    }
    out_path = cfg.out_dir() / "metrics.json"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(report, sort_keys=True) + "\n")
    for key in sorted(report):
        print(f"{key}: {report[key]}")
    print(f"wrote {out_path}")
    return 0


def cmd_plot(cfg, args):
    gen_dir = Path(args.generated_dir) if args.generated_dir else cfg.out_dir() / "translated"
    labels = gen_dir / "labels.json"
    if not labels.exists():
        raise FileNotFoundError(f"no generated set at {gen_dir}; run `translate` first")
    generated = load_coco(labels, gen_dir, name="generated")
    source = _load_domain(cfg, "source")
    by_id = {img.identifier: img for img in source.images}

    plots_dir = cfg.out_dir() / "plots"
    plots_dir.mkdir(parents=True, exist_ok=True)
    layers = (0, 1, 2)
    count = 0
    for img in generated.images[: args.limit]:
        source_id = img.identifier.removeprefix("gen_")
        src = by_id.get(source_id)
        if src is None:
            continue
        maps = []
        for layer in layers:
            for phase in ("pre", "post"):
                maps.append(load_array(gen_dir / "maps" / f"{img.identifier}_layer{layer}_{phase}.f32"))
        qmap = build_query_map(src.boxes, src.image.shape[:2],
                               sigma_scale=cfg["guidance.sigma_scale"])
        out = plots_dir / f"{img.identifier}.png"
        plot_maps(maps, src.boxes, out, source_image=src.image, query_map=qmap,
                  image_size=src.image.shape[:2])
        count += 1
    print(f"wrote {count} plot(s) to {plots_dir}")
    return 0


COMMANDS = {
    "make-fixture": cmd_make_fixture,
    "finetune": cmd_finetune,
    "optimize-embedding": cmd_optimize_embedding,
    "translate": cmd_translate,
    "ablate": cmd_ablate,
    "evaluate": cmd_evaluate,
    "plot": cmd_plot,
}


def _parse_overrides(pairs):
    overrides = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, _, raw = pair.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        overrides[key.strip()] = value
    return overrides


def build_parser():
    parser = argparse.ArgumentParser(
        prog="attnguide",
        description="Attention-guided cross-domain translation, desk scale.",
    )
    parser.add_argument("--config", help="JSON or key=value config file")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("make-fixture", help="generate the two-domain toy fixture")
    p = sub.add_parser("finetune", help="fine-tune the denoiser on one domain")
    p.add_argument("--domain", choices=("source", "target"), required=True)
    sub.add_parser("optimize-embedding", help="optimize the object-token embedding")
    p = sub.add_parser("translate", help="translate source images into the target domain")
    p.add_argument("--no-text-optim", action="store_true",
                   help="use the unoptimized embedding")
    p = sub.add_parser("ablate", help="run one ablation mode")
    p.add_argument("--mode", choices=("full", "no_text_optim", "no_guidance"),
                   required=True)
    p = sub.add_parser("evaluate", help="compute the metrics report")
    p.add_argument("--generated-dir", help="directory with translated outputs")
    p = sub.add_parser("plot", help="render attention-map panels")
    p.add_argument("--generated-dir", help="directory with translated outputs")
    p.add_argument("--limit", type=int, default=4)
    return parser


def main(argv=None):
    # Tensors here are small; intra-op thread pools only add contention.
    # Stage parallelism is governed by the `workers` config key instead.
    torch.set_num_threads(1)
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.load(args.config, _parse_overrides(args.set))
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - categorized exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
