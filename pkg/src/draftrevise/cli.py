"""Command-line pipeline: gen-data, train-rqvae, train-transformer, sample,
inpaint, and eval.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numeric error
(NaN/Inf reached a guarded computation). The DRAFTREVISE_THREADS environment
variable caps the worker count for sample generation; per-sample RNG streams
make the output bytes independent of the worker count.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .autodiff import NumericError, no_grad
from .checkpoint import (
    CheckpointError,
    read_ppm,
    write_code_map,
    write_ppm,
)
from .codemap import CodeStackMap
from .config import ConfigError, RunConfig, load_config
from .data import make_sprites, make_synthetic_codes
from .decoding import DecodePlan, InpaintRegion, generate_batch, inpaint
from .evaluate import (
    EvalReport,
    conditional_tv_probes,
    reconstruction_mse,
    sample_match_tv,
    sample_wall_clock,
    strategy_sample_entropy,
)
from .train import (
    load_autoencoder_checkpoint,
    load_transformer_checkpoint,
    step_rng,
    train_autoencoder,
    train_transformer,
)
from .transformer import masked_nll, sample_training_mask

__all__ = ["main"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

STREAM_EVAL_CLI = 4


def _worker_count() -> int:
    raw = os.environ.get("DRAFTREVISE_THREADS", "1")
    try:
        count = int(raw)
    except ValueError as exc:
        raise ConfigError(f"DRAFTREVISE_THREADS must be an integer, got {raw!r}") from exc
    if count < 1:
        raise ConfigError("DRAFTREVISE_THREADS must be at least 1")
    return count


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="draftrevise",
        description="Two-phase mask-infilling generation over residual code stacks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, region: bool = False, image: bool = False):
        p.add_argument("--config", type=str, default=None, help="key=value config file")
        p.add_argument("--seed", type=int, default=None, help="run seed")
        p.add_argument("--out", type=str, default=None, help="output directory")
        p.add_argument("--t-draft", type=int, default=None)
        p.add_argument("--t-revise", type=int, default=None)
        p.add_argument("--revise-iters", type=int, default=None)
        p.add_argument("--temperature", type=float, default=None)
        p.add_argument("--guidance", type=float, default=None)
        p.add_argument("--strategy", choices=("random", "topc", "topc50"), default=None)
        p.add_argument("--dump-stages", action="store_true", default=None)
        p.add_argument("--class", dest="class_id", type=int, default=None, help="condition class id")
        if region:
            p.add_argument("--region", type=str, default=None, help="x0,y0,x1,y1 in patch coordinates")
        if image:
            p.add_argument("image", type=str, help="input PPM image")

    for name in ("gen-data", "train-rqvae", "train-transformer", "sample", "eval"):
        common(sub.add_parser(name))
    common(sub.add_parser("inpaint"), region=True, image=True)
    return parser


def _config_from_args(args) -> RunConfig:
    overrides = {
        "seed": args.seed,
        "out_dir": args.out,
        "t_draft": args.t_draft,
        "t_revise": args.t_revise,
        "revise_iters": args.revise_iters,
        "temperature": args.temperature,
        "guidance": args.guidance,
        "strategy": args.strategy,
        "class_id": args.class_id,
        "dump_stages": args.dump_stages,
    }
    return load_config(args.config, overrides)


def _plan(config: RunConfig) -> DecodePlan:
    return DecodePlan(
        t_draft=config.t_draft,
        t_revise=config.t_revise,
        revise_iters=config.revise_iters,
        temperature=config.temperature,
        guidance_scale=config.guidance,
        strategy=config.strategy,
        seed=config.seed,
    )


def _load_stage2(config: RunConfig):
    if not config.transformer_checkpoint:
        raise ConfigError("transformer_checkpoint is required")
    model, _, _ = load_transformer_checkpoint(config.transformer_checkpoint, config)
    return model


def _load_stage1(config: RunConfig):
    if not config.rqvae_checkpoint:
        raise ConfigError("rqvae_checkpoint is required")
    ae, codebook, _, _ = load_autoencoder_checkpoint(config.rqvae_checkpoint, config)
    return ae, codebook


def _grid(config: RunConfig) -> tuple[int, int]:
    if config.data_source == "synthetic":
        return 1, config.synthetic_positions
    side = config.image_size // config.downsample_f
    return side, side


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_gen_data(config: RunConfig) -> int:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if config.data_source == "sprites":
        images, labels = make_sprites(config.dataset_size, config.seed)
        with open(out / "labels.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index", "label"])
            for i, label in enumerate(labels):
                writer.writerow([i, int(label)])
        for i in range(images.shape[0]):
            write_ppm(out / f"sprite_{i:05d}.ppm", images[i])
        print(f"wrote {images.shape[0]} sprites to {out}")
    else:
        samples, dist = make_synthetic_codes(
            config.synthetic_positions, config.synthetic_depth, config.synthetic_codebook,
            structure_seed=config.structure_seed,
            count=config.dataset_size, sample_seed=config.seed,
        )
        with open(out / "distribution.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["state_index", "probability"])
            for i, p in enumerate(dist.probs):
                writer.writerow([i, f"{p:.12e}"])
        for i in range(samples.shape[0]):
            code_map = CodeStackMap(samples[i].reshape(1, dist.n_positions, dist.depth),
                                    dist.codebook_size)
            write_code_map(out / f"codes_{i:05d}.rqcm", code_map)
        print(f"wrote {samples.shape[0]} code maps and the exact table to {out}")
    return EXIT_OK


def _cmd_train_rqvae(config: RunConfig) -> int:
    result = train_autoencoder(config)
    print(f"checkpoint: {result['checkpoint']}")
    print(f"loss: {result['first_loss']:.6f} -> {result['final_loss']:.6f}")
    return EXIT_OK


def _cmd_train_transformer(config: RunConfig) -> int:
    result = train_transformer(config)
    print(f"checkpoint: {result['checkpoint']}")
    print(f"loss: {result['first_loss']:.6f} -> {result['final_loss']:.6f}")
    return EXIT_OK


def _generate_codes(model, plan, config: RunConfig, collect_stages: bool):
    """Batched, optionally threaded generation; bytes never depend on the workers."""
    total = config.n_samples
    batch = config.sample_batch
    starts = list(range(0, total, batch))
    threads = _worker_count()

    def run(start: int):
        indices = range(start, min(start + batch, total))
        stages: list | None = [] if collect_stages else None
        codes = generate_batch(model, plan, config.class_id, indices, collect_stages=stages)
        return codes, stages

    if threads == 1 or len(starts) == 1:
        results = [run(s) for s in starts]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, starts))
    all_codes = np.concatenate([r[0] for r in results], axis=0)
    all_stages = None
    if collect_stages:
        n_stages = len(results[0][1])
        all_stages = [np.concatenate([r[1][s] for r in results], axis=0) for s in range(n_stages)]
    return all_codes, all_stages


def _cmd_sample(config: RunConfig) -> int:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = _load_stage2(config)
    plan = _plan(config)
    height, width = _grid(config)
    decoder = None
    if config.data_source == "sprites":
        decoder = _load_stage1(config)

    import time

    start_time = time.perf_counter()
    codes, stages = _generate_codes(model, plan, config, config.dump_stages)
    elapsed = time.perf_counter() - start_time

    for i in range(codes.shape[0]):
        code_map = CodeStackMap.from_flat(codes[i], height, width, model.config.codebook_size)
        write_code_map(out / f"sample_{i:05d}.rqcm", code_map)
        if stages is not None:
            for s, stage_codes in enumerate(stages):
                stage_map = CodeStackMap.from_flat(stage_codes[i], height, width, model.config.codebook_size)
                write_code_map(out / f"sample_{i:05d}_stage{s}.rqcm", stage_map)
    if decoder is not None:
        ae, codebook = decoder
        with no_grad():
            for i in range(codes.shape[0]):
                code_map = CodeStackMap.from_flat(codes[i], height, width, model.config.codebook_size)
                image = ae.decode_codes([code_map], codebook).data[0]
                write_ppm(out / f"sample_{i:05d}.ppm", image)

    report = EvalReport()
    report.add("n_samples", codes.shape[0])
    report.add("wall_clock_per_sample", elapsed / max(1, codes.shape[0]))
    report.write_csv(out / "sample_report.csv")
    print(f"wrote {codes.shape[0]} samples to {out}")
    return EXIT_OK


def _parse_region(raw: str, grid: tuple[int, int]) -> np.ndarray:
    try:
        x0, y0, x1, y1 = (int(v) for v in raw.split(","))
    except ValueError as exc:
        raise ConfigError(f"region must be x0,y0,x1,y1 integers, got {raw!r}") from exc
    height, width = grid
    if not (0 <= x0 < x1 <= width and 0 <= y0 < y1 <= height):
        raise ConfigError(f"region {raw!r} is empty or out of the {width}x{height} patch grid")
    mask2d = np.zeros((height, width), dtype=bool)
    mask2d[y0:y1, x0:x1] = True
    return mask2d.reshape(-1)


def _cmd_inpaint(config: RunConfig, image_path: str, region_raw: str | None) -> int:
    if region_raw is None:
        raise ConfigError("inpaint needs --region x0,y0,x1,y1")
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = _load_stage2(config)
    ae, codebook = _load_stage1(config)
    grid = _grid(config)
    region = _parse_region(region_raw, grid)

    image = read_ppm(image_path)
    if image.shape[0] != config.image_size or image.shape[1] != config.image_size:
        raise ConfigError(f"input image must be {config.image_size}x{config.image_size}")
    with no_grad():
        features = ae.encode(image[None].astype(ae.dtype))
        maps, _, _, _ = ae.quantize_map(features, codebook, config.depth)
    source = maps[0]

    plan = _plan(config)
    result = inpaint(source, InpaintRegion(region), config.class_id, plan, model)
    with no_grad():
        decoded = ae.decode_codes([result], codebook).data[0]
    write_code_map(out / "inpaint.rqcm", result)
    write_ppm(out / "inpaint.ppm", decoded)
    print(f"inpainted region {region_raw} -> {out / 'inpaint.ppm'}")
    return EXIT_OK


def _cmd_eval(config: RunConfig) -> int:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = EvalReport()
    plan = _plan(config)

    if config.data_source == "synthetic":
        model = _load_stage2(config)
        _, dist = make_synthetic_codes(
            config.synthetic_positions, config.synthetic_depth, config.synthetic_codebook,
            structure_seed=config.structure_seed,
        )
        worst, mean = conditional_tv_probes(model, dist, config.class_id, n_probes=200,
                                            seed=config.seed + 1)
        report.add("conditional_tv_max", worst)
        report.add("conditional_tv_mean", mean)
        report.add("sample_tv", sample_match_tv(model, dist, plan, config.class_id,
                                                config.n_samples, batch=config.sample_batch))
        for strategy in ("random", "topc", "topc50"):
            entropy = strategy_sample_entropy(
                model, dist, strategy, min(config.t_draft, model.config.seq_len),
                config.class_id, config.seed + 2, config.n_samples, batch=config.sample_batch,
            )
            report.add(f"entropy_{strategy}", entropy)
        rng = step_rng(config.seed, STREAM_EVAL_CLI, 0)
        eval_codes = dist.sample(rng, config.eval_size)
        masks = np.stack([sample_training_mask(model.config.seq_len, rng)
                          for _ in range(eval_codes.shape[0])])
        conds = np.full(eval_codes.shape[0], config.class_id, dtype=np.int64)
        with no_grad():
            nll = float(masked_nll(model, eval_codes, masks, conds).data)
        report.add("masked_nll", nll)
        report.add("wall_clock_per_sample",
                   sample_wall_clock(model, plan, config.class_id,
                                     min(config.n_samples, 2000), batch=config.sample_batch))
    else:
        print("note: exact-oracle rows are omitted for image-scale configs", file=sys.stderr)
        ae, codebook = _load_stage1(config)
        images, _ = make_sprites(config.eval_size, config.seed + 7)
        report.add("reconstruction_mse", reconstruction_mse(ae, codebook, images, config.depth))
        if config.transformer_checkpoint:
            model = _load_stage2(config)
            report.add("wall_clock_per_sample",
                       sample_wall_clock(model, plan, config.class_id,
                                         min(config.n_samples, 64), batch=config.sample_batch))

    report.write_csv(out / "eval_report.csv")
    for name, value in report.metrics.items():
        print(f"{name}: {value:.6g}")
    return EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        config = _config_from_args(args)
        if args.command == "gen-data":
            return _cmd_gen_data(config)
        if args.command == "train-rqvae":
            return _cmd_train_rqvae(config)
        if args.command == "train-transformer":
            return _cmd_train_transformer(config)
        if args.command == "sample":
            return _cmd_sample(config)
        if args.command == "inpaint":
            return _cmd_inpaint(config, args.image, args.region)
        if args.command == "eval":
            return _cmd_eval(config)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, CheckpointError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
