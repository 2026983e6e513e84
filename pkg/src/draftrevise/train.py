"""Training loops for both stages, with deterministic resume.

All randomness in a run flows from per-step generators derived from
(seed, stream id, step), so a run interrupted at any checkpoint and resumed
reproduces the uninterrupted run bit for bit (in float32 precision, which
matches the checkpoint storage format).
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .autoencoder import PatchAutoencoder, autoencoder_train_step
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig
from .data import make_sprites, make_synthetic_codes
from .optim import AdamW, cosine_lr
from .quantize import Codebook, rq_encode_batch
from .transformer import (
    ContextualTransformer,
    TransformerConfig,
    condition_dropout,
    masked_nll,
    sample_training_mask,
)

__all__ = [
    "step_rng",
    "build_autoencoder",
    "build_transformer",
    "transformer_config_for",
    "train_autoencoder",
    "train_transformer",
    "encode_images",
    "load_autoencoder_checkpoint",
    "load_transformer_checkpoint",
]

STREAM_AUTOENCODER = 1
STREAM_TRANSFORMER = 2
STREAM_EVAL = 3


def step_rng(seed: int, stream: int, step: int) -> np.random.Generator:
    """Fresh generator for one training step; a pure function of its arguments."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=(stream, step))))


# ---------------------------------------------------------------------------
# construction and (de)serialisation helpers
# ---------------------------------------------------------------------------

def build_autoencoder(config: RunConfig):
    rng = np.random.default_rng(np.random.SeedSequence(entropy=config.seed, spawn_key=(0,)))
    model = PatchAutoencoder(
        image_size=config.image_size, channels=config.channels, factor=config.downsample_f,
        n_z=config.n_z, hidden=config.ae_hidden, rng=rng, dtype=config.dtype(),
    )
    codebook = Codebook.initialise(
        config.codebook_size, config.n_z, rng, dtype=config.dtype(),
        decay=config.ema_decay, laplace_eps=config.laplace_eps,
        pinned_zero=config.zero_code,
    )
    return model, codebook


def transformer_config_for(config: RunConfig) -> TransformerConfig:
    if config.data_source == "synthetic":
        return TransformerConfig(
            seq_len=config.synthetic_positions,
            depth=config.synthetic_depth,
            codebook_size=config.synthetic_codebook,
            d_model=config.d_model,
            n_heads=config.n_heads,
            n_spatial_blocks=config.n_spatial_blocks,
            n_depth_blocks=config.n_depth_blocks,
            d_embed=config.d_embed,
            n_classes=2,          # one data class plus the null row
        )
    grid = config.image_size // config.downsample_f
    return TransformerConfig(
        seq_len=grid * grid,
        depth=config.depth,
        codebook_size=config.codebook_size,
        d_model=config.d_model,
        n_heads=config.n_heads,
        n_spatial_blocks=config.n_spatial_blocks,
        n_depth_blocks=config.n_depth_blocks,
        d_embed=config.n_z,
        n_classes=config.n_classes + 1,   # learned null row for guidance
    )


def build_transformer(config: RunConfig, code_embed_init: np.ndarray | None = None) -> ContextualTransformer:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=config.seed, spawn_key=(1,)))
    return ContextualTransformer(
        transformer_config_for(config), rng, dtype=config.dtype(),
        code_embed_init=code_embed_init, freeze_code_embed=config.freeze_code_embed,
    )


def _assign_params(params: dict[str, Tensor], arrays: dict[str, np.ndarray], dtype, what: str) -> None:
    for name, p in params.items():
        if name not in arrays:
            raise CheckpointError(f"checkpoint missing {what} array {name!r}")
        arr = arrays[name]
        if tuple(arr.shape) != tuple(p.data.shape):
            raise CheckpointError(
                f"checkpoint/config dimension mismatch for {what} {name!r}: "
                f"{tuple(arr.shape)} vs {tuple(p.data.shape)}"
            )
        p.data = arr.astype(dtype)


def _optimizer_sections(opt: AdamW) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for name in opt.params:
        out[f"m.{name}"] = opt.state.m[name]
        out[f"v.{name}"] = opt.state.v[name]
    out["step_count"] = np.array([opt.state.step_count], dtype=np.float32)
    return out


def _restore_optimizer(opt: AdamW, arrays: dict[str, np.ndarray], dtype) -> int:
    for name in opt.params:
        for slot, store in (("m", opt.state.m), ("v", opt.state.v)):
            key = f"{slot}.{name}"
            if key not in arrays:
                raise CheckpointError(f"checkpoint missing optimizer array {key!r}")
            if tuple(arrays[key].shape) != tuple(store[name].shape):
                raise CheckpointError(f"optimizer shape mismatch for {key!r}")
            store[name] = arrays[key].astype(dtype)
    opt.state.step_count = int(arrays["step_count"][0])
    return opt.state.step_count


def _codebook_sections(codebook: Codebook) -> dict[str, np.ndarray]:
    return {
        "embeddings": codebook.embeddings,
        "ema_cluster_size": codebook.ema_cluster_size,
        "ema_embed_sum": codebook.ema_embed_sum,
    }


def _restore_codebook(codebook: Codebook, arrays: dict[str, np.ndarray], dtype) -> None:
    for key in ("embeddings", "ema_cluster_size", "ema_embed_sum"):
        if key not in arrays:
            raise CheckpointError(f"checkpoint missing codebook array {key!r}")
        current = getattr(codebook, key)
        if tuple(arrays[key].shape) != tuple(current.shape):
            raise CheckpointError(f"codebook shape mismatch for {key!r}")
        setattr(codebook, key, arrays[key].astype(dtype))


def load_autoencoder_checkpoint(path: str | Path, config: RunConfig):
    """Rebuild (autoencoder, codebook, optimizer, step) from a stage-1 checkpoint."""
    _, sections = load_checkpoint(path)
    model, codebook = build_autoencoder(config)
    dtype = config.dtype()
    _assign_params(model.named_parameters(), sections.get("autoencoder", {}), dtype, "autoencoder")
    _restore_codebook(codebook, sections.get("codebook", {}), dtype)
    opt = AdamW(model.named_parameters(), weight_decay=config.weight_decay)
    step = _restore_optimizer(opt, sections.get("optimizer", {}), dtype)
    return model, codebook, opt, step


def load_transformer_checkpoint(path: str | Path, config: RunConfig):
    """Rebuild (transformer, optimizer, step) from a stage-2 checkpoint."""
    _, sections = load_checkpoint(path)
    model = build_transformer(config)
    dtype = config.dtype()
    _assign_params(model.named_parameters(), sections.get("transformer", {}), dtype, "transformer")
    opt = AdamW(model.trainable_parameters(), weight_decay=config.weight_decay)
    step = _restore_optimizer(opt, sections.get("optimizer", {}), dtype)
    return model, opt, step


# ---------------------------------------------------------------------------
# stage 1: autoencoder + codebook
# ---------------------------------------------------------------------------

def train_autoencoder(config: RunConfig, out_dir: str | Path | None = None) -> dict:
    """Train the patch autoencoder on sprites; writes checkpoint and loss CSV."""
    if config.data_source != "sprites":
        raise ConfigError("stage-1 training runs on the sprite data source")
    out = Path(out_dir if out_dir is not None else config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images, _ = make_sprites(config.dataset_size, config.seed)

    if config.resume_from:
        model, codebook, opt, start_step = load_autoencoder_checkpoint(config.resume_from, config)
    else:
        model, codebook = build_autoencoder(config)
        opt = AdamW(model.named_parameters(), weight_decay=config.weight_decay)
        start_step = 0

    ckpt_path = out / "rqvae.ckpt"
    csv_path = out / "rqvae_loss.csv"
    first_report = None
    last_report = None
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "total", "reconstruction", "commitment", "lr"])
        for step in range(start_step, config.steps):
            rng = step_rng(config.seed, STREAM_AUTOENCODER, step)
            idx = rng.integers(0, images.shape[0], size=config.batch_size)
            lr = cosine_lr(step, config.steps, config.lr_init, config.lr_final)
            reseed = rng if (step >= config.reseed_warmup and step % config.reseed_every == 0) else None
            report = autoencoder_train_step(
                model, opt, codebook, images[idx], config.depth, lr,
                beta=config.commitment_beta, reseed_rng=reseed,
                reseed_threshold=config.reseed_threshold,
            )
            writer.writerow([step, f"{report.total:.8e}", f"{report.reconstruction:.8e}",
                             f"{report.commitment:.8e}", f"{lr:.8e}"])
            if first_report is None:
                first_report = report
            last_report = report
            if config.save_every and (step + 1) % config.save_every == 0 and step + 1 < config.steps:
                _save_autoencoder(out / f"rqvae_step{step + 1:06d}.ckpt", config, model, codebook, opt)
    _save_autoencoder(ckpt_path, config, model, codebook, opt)
    return {
        "checkpoint": str(ckpt_path),
        "loss_csv": str(csv_path),
        "first_loss": None if first_report is None else first_report.total,
        "final_loss": None if last_report is None else last_report.total,
    }


def _save_autoencoder(path: Path, config: RunConfig, model: PatchAutoencoder,
                      codebook: Codebook, opt: AdamW) -> None:
    save_checkpoint(path, config.to_text(), {
        "autoencoder": {k: v.data for k, v in model.named_parameters().items()},
        "codebook": _codebook_sections(codebook),
        "optimizer": _optimizer_sections(opt),
    })


# ---------------------------------------------------------------------------
# stage 2: masked code-stack modelling
# ---------------------------------------------------------------------------

def encode_images(model: PatchAutoencoder, codebook: Codebook, images: np.ndarray,
                  depth: int, batch: int = 256) -> np.ndarray:
    """Encode images straight to flattened code sequences (B, N, depth)."""
    out = []
    with no_grad():
        for start in range(0, images.shape[0], batch):
            chunk = images[start:start + batch]
            features = model.encode(chunk).data
            b, h, w, n_z = features.shape
            codes, _ = rq_encode_batch(features.reshape(-1, n_z), codebook, depth)
            out.append(codes.reshape(b, h * w, depth))
    return np.concatenate(out, axis=0)


def _transformer_data(config: RunConfig):
    """Returns (codes, conds, distribution-or-None, codebook embeddings or None)."""
    if config.data_source == "synthetic":
        count = config.dataset_size
        samples, dist = make_synthetic_codes(
            config.synthetic_positions, config.synthetic_depth, config.synthetic_codebook,
            structure_seed=config.structure_seed,
            count=count, sample_seed=config.seed,
        )
        conds = np.zeros(samples.shape[0], dtype=np.int64)
        return samples, conds, dist, None
    if not config.rqvae_checkpoint:
        raise ConfigError("sprite-based stage-2 training needs rqvae_checkpoint")
    ae, codebook, _, _ = load_autoencoder_checkpoint(config.rqvae_checkpoint, config)
    images, labels = make_sprites(config.dataset_size, config.seed)
    codes = encode_images(ae, codebook, images, config.depth)
    return codes, labels, None, codebook.embeddings


def train_transformer(config: RunConfig, out_dir: str | Path | None = None) -> dict:
    """Masked-infilling training with condition dropout and the cosine schedule."""
    out = Path(out_dir if out_dir is not None else config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    codes, conds, dist, code_init = _transformer_data(config)
    streaming = config.data_source == "synthetic" and config.dataset_size == 0

    if config.resume_from:
        model, opt, start_step = load_transformer_checkpoint(config.resume_from, config)
    else:
        init = None
        if code_init is not None:
            init = np.asarray(code_init, dtype=config.dtype())
        model = build_transformer(config, code_embed_init=init)
        opt = AdamW(model.trainable_parameters(), weight_decay=config.weight_decay)
        start_step = 0

    n_pos = model.config.seq_len
    eval_rng = step_rng(config.seed, STREAM_EVAL, 0)
    if streaming:
        eval_codes = dist.sample(eval_rng, config.eval_size)
        eval_conds = np.zeros(config.eval_size, dtype=np.int64)
    else:
        eval_idx = eval_rng.integers(0, codes.shape[0], size=min(config.eval_size, codes.shape[0]))
        eval_codes, eval_conds = codes[eval_idx], conds[eval_idx]
    eval_masks = np.stack([sample_training_mask(n_pos, eval_rng) for _ in range(eval_codes.shape[0])])

    ckpt_path = out / "transformer.ckpt"
    csv_path = out / "transformer_loss.csv"
    first_loss = None
    last_loss = None
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "lr", "eval_loss"])
        for step in range(start_step, config.steps):
            rng = step_rng(config.seed, STREAM_TRANSFORMER, step)
            if streaming:
                batch_codes = dist.sample(rng, config.batch_size)
                batch_conds = np.zeros(config.batch_size, dtype=np.int64)
            else:
                idx = rng.integers(0, codes.shape[0], size=config.batch_size)
                batch_codes, batch_conds = codes[idx], conds[idx]
            masks = np.stack([sample_training_mask(n_pos, rng) for _ in range(batch_codes.shape[0])])
            dropped = condition_dropout(batch_conds, config.cond_dropout, rng)
            loss = masked_nll(model, batch_codes, masks, dropped)
            ad.assert_finite(loss.data, "training loss")
            opt.zero_grad()
            loss.backward()
            lr = cosine_lr(step, config.steps, config.lr_init, config.lr_final)
            opt.step(lr)
            value = float(loss.data)
            if first_loss is None:
                first_loss = value
            last_loss = value
            eval_value = ""
            if config.log_every and (step % config.log_every == 0 or step + 1 == config.steps):
                with no_grad():
                    eval_value = f"{float(masked_nll(model, eval_codes, eval_masks, eval_conds).data):.8e}"
            writer.writerow([step, f"{value:.8e}", f"{lr:.8e}", eval_value])
            if config.save_every and (step + 1) % config.save_every == 0 and step + 1 < config.steps:
                _save_transformer(out / f"transformer_step{step + 1:06d}.ckpt", config, model, opt)
    _save_transformer(ckpt_path, config, model, opt)
    return {
        "checkpoint": str(ckpt_path),
        "loss_csv": str(csv_path),
        "first_loss": first_loss,
        "final_loss": last_loss,
    }


def _save_transformer(path: Path, config: RunConfig, model: ContextualTransformer, opt: AdamW) -> None:
    save_checkpoint(path, config.to_text(), {
        "transformer": {k: v.data for k, v in model.named_parameters().items()},
        "optimizer": _optimizer_sections(opt),
    })
