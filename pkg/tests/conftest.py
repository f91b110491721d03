import numpy as np
import pytest

from tailaug import diffusion, synth, trainer
from tailaug.core import Manifest
from tailaug.stats import HeadTailPartition
from tailaug.synth import LesionSpec, SynthWorldConfig

# One line per acceptance criterion, echoed in the terminal summary so the
# pass/fail record survives pytest's output capture.
ACCEPTANCE_LINES: list[str] = []


def record_criterion(line: str) -> None:
    ACCEPTANCE_LINES.append(line)
    print("\n" + line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def world32(tmp_path_factory):
    """Small default-style world at 32px: manifest, ground truth, config."""
    cfg = synth.default_world_config(seed=5, image_size=32)
    out = tmp_path_factory.mktemp("world32")
    manifest, store = synth.generate_synthetic_dataset(cfg, out, 200, "train")
    return cfg, manifest, store


@pytest.fixture(scope="session")
def toy_generator(tmp_path_factory):
    """Diffusion generator trained on lesion-free 32px backgrounds."""
    specs = (LesionSpec("ellipse", 0.3, 4, 6), LesionSpec("bar", 0.3, 4, 6))
    cfg = SynthWorldConfig(
        num_classes=2,
        class_frequencies=(0.0, 0.0),
        lesion_specs=specs,
        entangle_prob=np.zeros((2, 2)),
        image_size=32,
        seed=9,
    )
    out = tmp_path_factory.mktemp("bg_world")
    normals, _ = synth.generate_synthetic_dataset(cfg, out, 200, "train")
    dcfg = diffusion.DiffusionConfig(
        image_size=32, timesteps=50, train_epochs=12, batch_size=32, learning_rate=2e-3
    )
    ckpt = diffusion.train_normal_generator(normals, dcfg, seed=3)
    return ckpt, normals


def entangled_world_config(seed: int = 21, entangle: float = 0.5) -> SynthWorldConfig:
    """K=4 world where head c00 overlaps tail c02 with the given probability."""
    specs = (
        LesionSpec("ellipse", 0.38, 8, 12),
        LesionSpec("bar", 0.34, 8, 12),
        LesionSpec("ring", -0.30, 6, 9),
        LesionSpec("cross", -0.28, 6, 9),
    )
    prob = np.zeros((4, 4))
    prob[0, 2] = prob[2, 0] = entangle
    return SynthWorldConfig(
        num_classes=4,
        class_frequencies=(0.60, 0.50, 0.35, 0.10),
        lesion_specs=specs,
        entangle_prob=prob,
        image_size=64,
        seed=seed,
    )


@pytest.fixture(scope="session")
def entangled_world(tmp_path_factory):
    """500-sample entangled world plus a classifier trained on it."""
    cfg = entangled_world_config()
    out = tmp_path_factory.mktemp("entangled_world")
    manifest, store = synth.generate_synthetic_dataset(cfg, out, 500, "train")
    partition = HeadTailPartition(head=frozenset({0, 1}), tail=frozenset({2, 3}))
    tcfg = trainer.TrainConfig(epochs=14, batch_size=32, seed=17, image_size=64)
    classifier = trainer.train_classifier(tcfg, trainer.constant_provider(manifest), manifest.registry)
    return cfg, manifest, store, partition, classifier
