"""Session-scoped trained artifacts shared by the integration and acceptance
suites. Training them once keeps the whole run inside a desk-scale budget."""

import numpy as np
import pytest

from draftrevise.config import parse_config_text
from draftrevise.data import make_synthetic_codes
from draftrevise.train import (
    load_autoencoder_checkpoint,
    load_transformer_checkpoint,
    train_autoencoder,
    train_transformer,
)

TOY_CONFIG = """
seed=3
data_source=synthetic
dataset_size=0
synthetic_positions=2
synthetic_depth=2
synthetic_codebook=3
structure_seed=0
d_model=48
n_heads=2
n_spatial_blocks=2
n_depth_blocks=2
d_embed=12
batch_size=512
steps=3500
lr_init=0.003
log_every=500
eval_size=512
"""

SPRITE_RQVAE_CONFIG = """
seed=11
data_source=sprites
dataset_size=1024
eval_size=256
image_size=16
downsample_f=4
n_z=16
codebook_size=64
depth=4
ae_hidden=64
batch_size=32
steps=3000
lr_init=0.002
reseed_warmup=200
reseed_every=50
log_every=200
"""

SPRITE_TRANSFORMER_CONFIG = """
seed=12
data_source=sprites
dataset_size=512
eval_size=128
image_size=16
downsample_f=4
n_z=16
codebook_size=64
depth=4
ae_hidden=64
n_classes=8
d_model=96
n_heads=2
n_spatial_blocks=2
n_depth_blocks=2
batch_size=16
steps=150
lr_init=0.001
log_every=50
"""


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    """A trained sequence model over the enumerable synthetic distribution."""
    out = tmp_path_factory.mktemp("toy_run")
    config = parse_config_text(TOY_CONFIG, overrides={"out_dir": str(out)})
    result = train_transformer(config)
    model, _, _ = load_transformer_checkpoint(result["checkpoint"], config)
    _, dist = make_synthetic_codes(
        config.synthetic_positions, config.synthetic_depth, config.synthetic_codebook,
        structure_seed=config.structure_seed,
    )
    return {"config": config, "result": result, "model": model, "dist": dist}


@pytest.fixture(scope="session")
def sprite_rqvae_run(tmp_path_factory):
    """The desk-scale autoencoder: 16x16 sprites, 4x downsampling, 64 codes, depth 4."""
    out = tmp_path_factory.mktemp("sprite_rqvae")
    config = parse_config_text(SPRITE_RQVAE_CONFIG, overrides={"out_dir": str(out)})
    result = train_autoencoder(config)
    model, codebook, _, _ = load_autoencoder_checkpoint(result["checkpoint"], config)
    return {"config": config, "result": result, "model": model, "codebook": codebook}


@pytest.fixture(scope="session")
def sprite_transformer_run(tmp_path_factory, sprite_rqvae_run):
    """A briefly-trained sprite-code sequence model: enough for pipeline plumbing."""
    out = tmp_path_factory.mktemp("sprite_transformer")
    config = parse_config_text(
        SPRITE_TRANSFORMER_CONFIG,
        overrides={
            "out_dir": str(out),
            "rqvae_checkpoint": sprite_rqvae_run["result"]["checkpoint"],
        },
    )
    result = train_transformer(config)
    model, _, _ = load_transformer_checkpoint(result["checkpoint"], config)
    return {
        "config": config,
        "result": result,
        "model": model,
        "rqvae_checkpoint": sprite_rqvae_run["result"]["checkpoint"],
    }
