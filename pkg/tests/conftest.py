import dataclasses

import pytest

from residiff.config import DiffTrainConfig, ExperimentConfig, SegTrainConfig
from residiff.data import generate_phantoms, split_dataset, write_dataset


def tiny_config(dataset_dir: str, out_dir: str, seed: int = 11, **overrides) -> ExperimentConfig:
    """Small, fast profile used by pipeline-level tests."""
    cfg = ExperimentConfig(
        seed=seed,
        dataset_dir=str(dataset_dir),
        out_dir=str(out_dir),
        lambda_weight=0.5,
        finetune_epochs=1,
        seg=SegTrainConfig(depth=2, base_width=8, epochs=2, lr=1e-3, batch_size=4),
        diff=DiffTrainConfig(
            T=10, beta_start=1e-3, beta_end=0.08, depth=2, base_width=8, epochs=2, lr=1e-3,
            batch_size=4, inference_steps=5,
        ),
        ablation_steps=(2, 4, 8),
    )
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """24 phantom cases at 32x32, split 18/3/3, written once per session."""
    root = tmp_path_factory.mktemp("tiny_data")
    cases = generate_phantoms(24, 32, seed=21, noise_sigma=0.3)
    manifest = split_dataset(cases, (0.75, 0.125, 0.125), seed=21)
    write_dataset(manifest, cases, root)
    return root
