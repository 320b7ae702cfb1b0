"""The default desk-scale benchmark: data + config presets for comparing
the full SSL pipeline against its ablations under identical seeds.

Three presets mirror the comparisons that matter:

    supervised  - student trained on the fully-annotated subset only,
                  evaluated directly (no teacher is part of this baseline)
    ssl_no_cam  - teacher-student loop where pseudo-labels come from the
                  teacher alone from the very first epoch
    ssl_cam     - the full pipeline: CAM-fused pseudo-labels during the
                  early epochs, then teacher-only, frozen normalization

The benchmark EMA factor is 0.99 rather than the full-scale 0.999: these
runs take on the order of a thousand steps, and a 0.999 teacher would
still be mostly its initialization at the end, measuring EMA lag instead
of the training signal.
"""
from __future__ import annotations

from .dataset import SyntheticConfig, generate_synthetic, split_partial
from .ema import FROZEN_BN, NormStrategy
from .toydet import TrainConfig

BENCH_N_TRAIN = 96
BENCH_N_TEST = 48
BENCH_RATIO = 0.25
BENCH_ALPHA = 0.99


def benchmark_synthetic_config() -> SyntheticConfig:
    return SyntheticConfig()


def make_benchmark_data(seed: int, ratio: float = BENCH_RATIO):
    """(train split, held-out test records) for one benchmark seed."""
    cfg = benchmark_synthetic_config()
    train_records = generate_synthetic(BENCH_N_TRAIN, seed=seed, config=cfg)
    test_records = generate_synthetic(BENCH_N_TEST, seed=seed + 10_000, config=cfg)
    split = split_partial(train_records, ratio=ratio, seed=seed + 20_000)
    return split, test_records


def _base_config(seed: int) -> TrainConfig:
    # cam_epochs covers half the run: the toy teacher needs ~15 epochs before
    # its own pseudo-labels are worth training on (the full-scale system gets
    # there within 2 epochs of thousands of steps each)
    return TrainConfig(
        epochs=30,
        steps_per_epoch=24,
        batch_full=4,
        batch_weak=4,
        lr=0.05,
        lambda_weak=0.25,
        alpha=BENCH_ALPHA,
        cam_epochs=15,
        norm=NormStrategy(kind=FROZEN_BN),
        seed=seed,
    )


def supervised_config(seed: int) -> TrainConfig:
    cfg = _base_config(seed)
    cfg.weak_enabled = False
    cfg.eval_model = "student"
    return cfg


def ssl_no_cam_config(seed: int) -> TrainConfig:
    cfg = _base_config(seed)
    cfg.cam_epochs = 0  # pseudo-labels are teacher-only from the start
    return cfg


def ssl_cam_config(seed: int) -> TrainConfig:
    return _base_config(seed)


def label_efficiency_presets(seed: int) -> dict[str, TrainConfig]:
    return {
        "supervised": supervised_config(seed),
        "ssl_no_cam": ssl_no_cam_config(seed),
        "ssl_cam": ssl_cam_config(seed),
    }


def run_benchmark(seed: int, preset: str):
    """Train one preset on the benchmark data; returns the TrainReport."""
    from .toydet import train

    presets = label_efficiency_presets(seed)
    if preset not in presets:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(presets)}")
    split, test_records = make_benchmark_data(seed)
    return train(presets[preset], split, test_records)
