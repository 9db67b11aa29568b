import numpy as np
import pytest

from neighbornorm.harness import load_experiment_config, train_model
from neighbornorm.stream import DomainSpec, TemplateBank

SMALL_CONFIG = {
    "data": {"num_classes": 6, "template_seed": 7, "base_noise": 0.25},
    "model": {
        "seed": 11,
        "train_batches": 8,
        "train_batch_size": 32,
        "clean_eval_batches": 4,
    },
    "scenario": {"num_batches": 12, "batch_size": 32, "seed": 0},
    "seeds": [0, 1],
}


@pytest.fixture(scope="session")
def small_setup(tmp_path_factory):
    """Fast trained model + bank + config for harness-level tests."""
    import json

    path = tmp_path_factory.mktemp("cfg") / "small.json"
    path.write_text(json.dumps(SMALL_CONFIG))
    cfg = load_experiment_config(path)
    net, bank, meta = train_model(cfg)
    return cfg, net, bank, meta, path


@pytest.fixture(scope="session")
def default_setup():
    """Model trained with the stock defaults; used by the acceptance suite."""
    cfg = load_experiment_config()
    net, bank, meta = train_model(cfg)
    return cfg, net, bank, meta


def separated_bank(seed: int, num_classes: int = 4) -> TemplateBank:
    """Template bank for separation-constructed streams: one dominant shared
    map plus small class deltas, so instance means cluster tightly per domain."""
    rng = np.random.default_rng([seed, 555])
    common = rng.normal(0.0, 1.0, size=(1, 16, 16)).astype(np.float32)
    deltas = rng.normal(0.0, 0.05, size=(num_classes, 1, 16, 16)).astype(np.float32)
    return TemplateBank(templates=common[None] + deltas, base_noise=0.02, seed=seed)


def separated_domains(num_domains: int) -> list:
    """Domains spaced along the brightness/contrast direction arc so their
    slot-0 instance means occupy disjoint cosine neighborhoods."""
    if num_domains == 2:
        brightness = [-2.0, 2.0]
    elif num_domains == 5:
        brightness = [-2.0, -0.5, 0.0, 0.5, 2.0]
    else:
        raise ValueError("separation construction is calibrated for M in {2, 5}")
    return [
        DomainSpec(id=i, contrast=1.0, brightness=b, noise_sigma=0.01, severity=5)
        for i, b in enumerate(brightness)
    ]
