"""Pipeline and CLI integration: training artifacts, resume determinism,
command surfaces, exit codes, and thread-count invariance."""

import csv
import os
import struct
from pathlib import Path

import numpy as np
import pytest

from draftrevise.checkpoint import load_checkpoint, read_code_map, read_ppm, save_checkpoint, write_ppm
from draftrevise.cli import EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_OK, main
from draftrevise.config import parse_config_text
from draftrevise.data import make_sprites
from draftrevise.evaluate import reconstruction_mse
from draftrevise.train import (
    load_autoencoder_checkpoint,
    load_transformer_checkpoint,
    train_autoencoder,
    train_transformer,
)

FAST_RQVAE = """
seed=21
data_source=sprites
dataset_size=128
eval_size=32
n_z=8
codebook_size=16
depth=2
ae_hidden=32
batch_size=16
steps=60
lr_init=0.002
save_every=30
"""

FAST_TOY_TF = """
seed=22
data_source=synthetic
dataset_size=0
synthetic_positions=2
synthetic_depth=2
synthetic_codebook=3
d_model=32
n_heads=2
n_spatial_blocks=1
n_depth_blocks=1
d_embed=8
batch_size=32
steps=40
lr_init=0.002
save_every=20
log_every=10
"""


def _read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def _ema_smooth(values, alpha=0.05):
    out = []
    acc = values[0]
    for v in values:
        acc = (1 - alpha) * acc + alpha * v
        out.append(acc)
    return out


# ---------------------------------------------------------------------------
# stage-1 training artifacts
# ---------------------------------------------------------------------------

def test_rqvae_training_loss_decreases_and_reloads(tmp_path):
    config = parse_config_text(FAST_RQVAE, overrides={"out_dir": str(tmp_path)})
    result = train_autoencoder(config)
    rows = _read_csv(result["loss_csv"])
    assert rows[0] == ["step", "total", "reconstruction", "commitment", "lr"]
    losses = [float(r[1]) for r in rows[1:]]
    smooth = _ema_smooth(losses)
    assert smooth[-1] < smooth[0]

    model, codebook, _, step = load_autoencoder_checkpoint(result["checkpoint"], config)
    assert step == config.steps
    images, _ = make_sprites(64, seed=100)
    mse_a = reconstruction_mse(model, codebook, images, config.depth)
    model2, codebook2, _, _ = load_autoencoder_checkpoint(result["checkpoint"], config)
    mse_b = reconstruction_mse(model2, codebook2, images, config.depth)
    assert mse_a == mse_b


def test_rqvae_interrupt_resume_bit_exact(tmp_path):
    # an interrupted run is the same 60-step schedule continued from the
    # mid-run checkpoint, not a fresh 30-step run
    full_cfg = parse_config_text(FAST_RQVAE, overrides={"out_dir": str(tmp_path / "full")})
    full = train_autoencoder(full_cfg)
    mid = Path(full_cfg.out_dir) / "rqvae_step000030.ckpt"
    assert mid.exists()

    resumed_cfg = parse_config_text(FAST_RQVAE, overrides={
        "out_dir": str(tmp_path / "resumed"),
        "resume_from": str(mid),
    })
    resumed = train_autoencoder(resumed_cfg)

    _, full_sections = load_checkpoint(full["checkpoint"])
    _, resumed_sections = load_checkpoint(resumed["checkpoint"])
    for section in full_sections:
        for name, arr in full_sections[section].items():
            assert (arr == resumed_sections[section][name]).all(), f"{section}/{name} diverged"


def test_transformer_training_reproducible_and_resumable(tmp_path):
    cfg_a = parse_config_text(FAST_TOY_TF, overrides={"out_dir": str(tmp_path / "a")})
    cfg_b = parse_config_text(FAST_TOY_TF, overrides={"out_dir": str(tmp_path / "b")})
    ra = train_transformer(cfg_a)
    rb = train_transformer(cfg_b)
    rows_a = _read_csv(ra["loss_csv"])
    rows_b = _read_csv(rb["loss_csv"])
    assert rows_a == rows_b                       # bit-identical loss curve

    mid = Path(cfg_a.out_dir) / "transformer_step000020.ckpt"
    assert mid.exists()
    resumed_cfg = parse_config_text(FAST_TOY_TF, overrides={
        "out_dir": str(tmp_path / "r"), "resume_from": str(mid),
    })
    resumed = train_transformer(resumed_cfg)
    _, sections_a = load_checkpoint(ra["checkpoint"])
    _, sections_r = load_checkpoint(resumed["checkpoint"])
    for section in sections_a:
        for name, arr in sections_a[section].items():
            assert (arr == sections_r[section][name]).all(), f"{section}/{name} diverged"


def test_transformer_initial_loss_near_uniform(tmp_path):
    cfg = parse_config_text(FAST_TOY_TF, overrides={"out_dir": str(tmp_path), "steps": 1})
    result = train_transformer(cfg)
    assert abs(result["first_loss"] - np.log(3)) < 0.05


def test_checkpoint_dim_mismatch_rejected(tmp_path):
    cfg = parse_config_text(FAST_TOY_TF, overrides={"out_dir": str(tmp_path)})
    result = train_transformer(cfg)
    wrong = parse_config_text(FAST_TOY_TF, overrides={"out_dir": str(tmp_path), "d_model": 16})
    from draftrevise.checkpoint import CheckpointError

    with pytest.raises(CheckpointError):
        load_transformer_checkpoint(result["checkpoint"], wrong)


# ---------------------------------------------------------------------------
# CLI surfaces
# ---------------------------------------------------------------------------

def _write(path: Path, text: str) -> str:
    path.write_text(text)
    return str(path)


def test_cli_gen_data_sprites(tmp_path):
    cfg = _write(tmp_path / "c.cfg", "data_source=sprites\ndataset_size=6\n")
    code = main(["gen-data", "--config", cfg, "--out", str(tmp_path / "d")])
    assert code == EXIT_OK
    ppms = sorted((tmp_path / "d").glob("*.ppm"))
    assert len(ppms) == 6
    rows = _read_csv(tmp_path / "d" / "labels.csv")
    assert rows[0] == ["index", "label"] and len(rows) == 7


def test_cli_gen_data_synthetic(tmp_path):
    cfg = _write(tmp_path / "c.cfg",
                 "data_source=synthetic\ndataset_size=5\nsynthetic_positions=2\n"
                 "synthetic_depth=2\nsynthetic_codebook=3\n")
    code = main(["gen-data", "--config", cfg, "--out", str(tmp_path / "d")])
    assert code == EXIT_OK
    assert len(list((tmp_path / "d").glob("*.rqcm"))) == 5
    rows = _read_csv(tmp_path / "d" / "distribution.csv")
    total = sum(float(r[1]) for r in rows[1:])
    assert abs(total - 1.0) < 1e-9


def test_cli_unknown_key_exits_config_error(tmp_path):
    cfg = _write(tmp_path / "c.cfg", "bogus_key=1\n")
    assert main(["gen-data", "--config", cfg]) == EXIT_CONFIG


def test_cli_missing_checkpoint_exits_io_error(tmp_path):
    cfg = _write(tmp_path / "c.cfg",
                 "data_source=synthetic\ntransformer_checkpoint=/nonexistent/x.ckpt\n")
    assert main(["sample", "--config", cfg, "--out", str(tmp_path / "s")]) == EXIT_IO


def test_cli_nan_checkpoint_exits_numeric_error(tmp_path):
    cfg_text = FAST_TOY_TF + f"out_dir={tmp_path / 'm'}\n"
    cfg_path = _write(tmp_path / "c.cfg", cfg_text)
    assert main(["train-transformer", "--config", cfg_path]) == EXIT_OK
    ckpt = tmp_path / "m" / "transformer.ckpt"
    config_text, sections = load_checkpoint(ckpt)
    sections["transformer"]["head.w"][:] = np.nan
    save_checkpoint(ckpt, config_text, sections)
    sample_cfg = _write(tmp_path / "s.cfg", cfg_text + f"transformer_checkpoint={ckpt}\nn_samples=2\n")
    assert main(["sample", "--config", sample_cfg, "--out", str(tmp_path / "out")]) == EXIT_NUMERIC


def test_cli_sample_dump_stages_and_determinism(tmp_path):
    cfg_text = FAST_TOY_TF + f"out_dir={tmp_path / 'm'}\n"
    cfg_path = _write(tmp_path / "c.cfg", cfg_text)
    assert main(["train-transformer", "--config", cfg_path]) == EXIT_OK
    ckpt = tmp_path / "m" / "transformer.ckpt"
    sample_cfg = _write(
        tmp_path / "s.cfg",
        cfg_text + f"transformer_checkpoint={ckpt}\nn_samples=3\nsample_batch=2\n"
        "t_draft=2\nt_revise=1\nrevise_iters=2\n",
    )
    out_a = tmp_path / "out_a"
    assert main(["sample", "--config", sample_cfg, "--out", str(out_a), "--dump-stages"]) == EXIT_OK
    # three stage files per sample: draft plus two revisions
    for i in range(3):
        stages = sorted(out_a.glob(f"sample_{i:05d}_stage*.rqcm"))
        assert len(stages) == 3
    out_b = tmp_path / "out_b"
    assert main(["sample", "--config", sample_cfg, "--out", str(out_b), "--dump-stages"]) == EXIT_OK
    for name in ("sample_00000.rqcm", "sample_00001_stage1.rqcm", "sample_00002.rqcm"):
        assert (out_a / name).read_bytes() == (out_b / name).read_bytes()


def test_cli_sample_thread_count_invariance(tmp_path):
    cfg_text = FAST_TOY_TF + f"out_dir={tmp_path / 'm'}\n"
    cfg_path = _write(tmp_path / "c.cfg", cfg_text)
    assert main(["train-transformer", "--config", cfg_path]) == EXIT_OK
    ckpt = tmp_path / "m" / "transformer.ckpt"
    sample_cfg = _write(
        tmp_path / "s.cfg",
        cfg_text + f"transformer_checkpoint={ckpt}\nn_samples=8\nsample_batch=2\n"
        "t_draft=2\nt_revise=1\nrevise_iters=1\n",
    )
    outputs = {}
    for threads in ("1", "3"):
        out = tmp_path / f"out_t{threads}"
        os.environ["DRAFTREVISE_THREADS"] = threads
        try:
            assert main(["sample", "--config", sample_cfg, "--out", str(out)]) == EXIT_OK
        finally:
            os.environ.pop("DRAFTREVISE_THREADS", None)
        outputs[threads] = b"".join(
            (out / f"sample_{i:05d}.rqcm").read_bytes() for i in range(8)
        )
    assert outputs["1"] == outputs["3"]


# ---------------------------------------------------------------------------
# sprite-scale CLI (shared fixtures)
# ---------------------------------------------------------------------------

def test_cli_sprite_sample_writes_images(tmp_path, sprite_transformer_run):
    run = sprite_transformer_run
    cfg = run["config"]
    sample_cfg = _write(
        tmp_path / "s.cfg",
        cfg.to_text().replace("out_dir=", "# out_dir=")
        + f"\ntransformer_checkpoint={run['result']['checkpoint']}\n"
        f"out_dir={tmp_path / 'out'}\nn_samples=2\nsample_batch=2\n"
        "t_draft=4\nt_revise=2\nrevise_iters=1\ntemperature=0.8\nguidance=1.5\nclass_id=3\n",
    )
    assert main(["sample", "--config", sample_cfg]) == EXIT_OK
    out = tmp_path / "out"
    for i in range(2):
        image = read_ppm(out / f"sample_{i:05d}.ppm")
        assert image.shape == (16, 16, 3)
        cmap = read_code_map(out / f"sample_{i:05d}.rqcm")
        assert cmap.codes.shape == (4, 4, 4)
    rows = _read_csv(out / "sample_report.csv")
    assert rows[0] == ["metric", "value"]


def test_cli_sample_seed_reproduces_ppm_bytes(tmp_path, sprite_transformer_run):
    run = sprite_transformer_run
    base = run["config"].to_text().replace("out_dir=", "# out_dir=")
    results = []
    for tag in ("x", "y"):
        sample_cfg = _write(
            tmp_path / f"{tag}.cfg",
            base + f"\ntransformer_checkpoint={run['result']['checkpoint']}\n"
            f"out_dir={tmp_path / tag}\nn_samples=2\nsample_batch=2\nt_draft=4\n",
        )
        assert main(["sample", "--config", sample_cfg, "--seed", "555"]) == EXIT_OK
        results.append((tmp_path / tag / "sample_00000.ppm").read_bytes())
    assert results[0] == results[1]


def test_cli_inpaint_keeps_fixed_codes(tmp_path, sprite_transformer_run):
    run = sprite_transformer_run
    images, _ = make_sprites(1, seed=777)
    src_path = tmp_path / "src.ppm"
    write_ppm(src_path, images[0])

    cfg_text = (
        run["config"].to_text().replace("out_dir=", "# out_dir=")
        + f"\ntransformer_checkpoint={run['result']['checkpoint']}\n"
        f"out_dir={tmp_path / 'out'}\nt_draft=4\nt_revise=2\nrevise_iters=1\nclass_id=2\n"
    )
    cfg_path = _write(tmp_path / "i.cfg", cfg_text)
    assert main(["inpaint", "--config", cfg_path, "--region", "1,1,3,3", str(src_path)]) == EXIT_OK

    out_map = read_code_map(tmp_path / "out" / "inpaint.rqcm")
    # recompute the source encoding to compare fixed positions
    from draftrevise.autodiff import no_grad

    ae, codebook, _, _ = load_autoencoder_checkpoint(run["rqvae_checkpoint"], run["config"])
    with no_grad():
        feats = ae.encode(read_ppm(src_path)[None].astype(ae.dtype))
        maps, _, _, _ = ae.quantize_map(feats, codebook, run["config"].depth)
    region = np.zeros((4, 4), dtype=bool)
    region[1:3, 1:3] = True
    fixed = ~region.reshape(-1)
    assert (out_map.flatten()[fixed] == maps[0].flatten()[fixed]).all()
    assert (tmp_path / "out" / "inpaint.ppm").exists()


def test_cli_inpaint_different_class_completes(tmp_path, sprite_transformer_run):
    run = sprite_transformer_run
    images, labels = make_sprites(1, seed=778)
    src_path = tmp_path / "src.ppm"
    write_ppm(src_path, images[0])
    other_class = (int(labels[0]) + 3) % 8
    cfg_text = (
        run["config"].to_text().replace("out_dir=", "# out_dir=")
        + f"\ntransformer_checkpoint={run['result']['checkpoint']}\n"
        f"out_dir={tmp_path / 'out'}\nt_draft=2\nrevise_iters=1\n"
    )
    cfg_path = _write(tmp_path / "i.cfg", cfg_text)
    code = main(["inpaint", "--config", cfg_path, "--region", "0,0,4,4",
                 "--class", str(other_class), str(src_path)])
    assert code == EXIT_OK


def test_cli_inpaint_region_validation(tmp_path, sprite_transformer_run):
    run = sprite_transformer_run
    images, _ = make_sprites(1, seed=779)
    src_path = tmp_path / "src.ppm"
    write_ppm(src_path, images[0])
    cfg_text = (
        run["config"].to_text().replace("out_dir=", "# out_dir=")
        + f"\ntransformer_checkpoint={run['result']['checkpoint']}\nout_dir={tmp_path / 'o'}\n"
    )
    cfg_path = _write(tmp_path / "i.cfg", cfg_text)
    assert main(["inpaint", "--config", cfg_path, "--region", "2,2,2,3", str(src_path)]) == EXIT_CONFIG
    assert main(["inpaint", "--config", cfg_path, "--region", "0,0,9,9", str(src_path)]) == EXIT_CONFIG
    assert main(["inpaint", "--config", cfg_path, str(src_path)]) == EXIT_CONFIG


def test_cli_eval_writes_report(tmp_path):
    cfg_text = FAST_TOY_TF + f"out_dir={tmp_path / 'm'}\n"
    cfg_path = _write(tmp_path / "c.cfg", cfg_text)
    assert main(["train-transformer", "--config", cfg_path]) == EXIT_OK
    ckpt = tmp_path / "m" / "transformer.ckpt"
    eval_cfg = _write(
        tmp_path / "e.cfg",
        cfg_text + f"transformer_checkpoint={ckpt}\nn_samples=500\nsample_batch=250\n"
        "t_draft=2\nt_revise=1\nrevise_iters=1\n",
    )
    assert main(["eval", "--config", eval_cfg, "--out", str(tmp_path / "ev")]) == EXIT_OK
    rows = _read_csv(tmp_path / "ev" / "eval_report.csv")
    assert rows[0] == ["metric", "value"]
    metrics = {r[0]: float(r[1]) for r in rows[1:]}
    for key in ("conditional_tv_max", "sample_tv", "entropy_random", "entropy_topc",
                "entropy_topc50", "masked_nll", "wall_clock_per_sample"):
        assert key in metrics and np.isfinite(metrics[key])
        assert key not in ("conditional_tv_max", "sample_tv") or 0 <= metrics[key] <= 1
