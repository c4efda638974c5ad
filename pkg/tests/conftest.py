"""Shared fixtures: the toy datasets and models trained once per session."""

import numpy as np
import pytest
import torch

import attnguide as ag

torch.set_num_threads(1)

PROMPT_IDS = [1, 2, 3, 4, 5, 6, 7, 8]
FIXTURE_SEED = 7


@pytest.fixture(scope="session")
def toy_fixture(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy_fixture")
    source, target = ag.make_toy_fixture(root, n_images=64, seed=FIXTURE_SEED)
    return {"root": root, "source": source, "target": target}


@pytest.fixture(scope="session")
def schedule():
    return ag.make_schedule(1000, 50, (1e-4, 0.02))


@pytest.fixture(scope="session")
def base_backbone():
    return ag.ToyBackbone(ag.ToyBackboneConfig(seed=11))


@pytest.fixture(scope="session")
def trained_models(toy_fixture, schedule, base_backbone):
    """Source and target models fine-tuned from one shared initialization."""
    e0 = base_backbone.text_encode(PROMPT_IDS)
    source_model = base_backbone.spawn_copy()
    target_model = base_backbone.spawn_copy()
    ft = ag.FinetuneConfig(max_steps=500, batch_size=8, seed=3)
    _, source_losses = ag.finetune_domain(
        source_model, toy_fixture["source"], e0, schedule, ft
    )
    _, target_losses = ag.finetune_domain(
        target_model, toy_fixture["target"], e0, schedule,
        ag.FinetuneConfig(max_steps=500, batch_size=8, seed=4),
    )
    return {
        "source": source_model,
        "target": target_model,
        "e0": e0,
        "source_losses": source_losses,
        "target_losses": target_losses,
    }


@pytest.fixture(scope="session")
def optimized_embedding(toy_fixture, schedule, trained_models):
    """Embedding optimized on the first five labeled source images."""
    config = ag.TextOptConfig(max_steps=200, rng_seed=5)
    state = ag.optimize_embedding(
        trained_models["e0"],
        toy_fixture["source"].images[:5],
        trained_models["source"],
        schedule,
        config,
    )
    return state
