import os

# pin BLAS to one thread before numpy loads: keeps runs bit-reproducible and
# makes the timing assertions honest on a single core
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "pkg", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("pkg")


@pytest.fixture(scope="session")
def synth_small(tmp_path_factory):
    """Small synthetic dataset shared by fast tests: 5 classes x 40 images."""
    from divegest.dataset import SyntheticSpec, load_dataset, split, synth_generate

    root = tmp_path_factory.mktemp("synth_small")
    manifest = synth_generate(SyntheticSpec(classes=5, per_class=40, seed=11), root)
    train_m, test_m = split(manifest, (0.8, 0.2), seed=11)
    return {
        "root": root,
        "manifest": manifest,
        "train": load_dataset(train_m),
        "test": load_dataset(test_m),
    }


@pytest.fixture(scope="session")
def quick_model(synth_small):
    """tiny-resnet trained briefly on the small dataset; good enough for
    attribution and streaming tests that need a non-degenerate model."""
    from divegest.model import TINY_RESNET_CONFIG, build_model
    from divegest.train import train

    model = build_model(TINY_RESNET_CONFIG, seed=3)
    train(model, synth_small["train"], epochs=8, batch_size=32,
          mode="fine-tuning", augment_cfg=None, seed=3)
    return model
