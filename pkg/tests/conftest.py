import numpy as np
import pytest

from promptmed import LabelMask, PhantomBody, PhantomConfig, make_phantom
from promptmed.assist import TrainPair
from promptmed.backbone import ToyConvBackbone


@pytest.fixture(scope="session")
def backbone() -> ToyConvBackbone:
    return ToyConvBackbone(seed=7)


@pytest.fixture(scope="session")
def disk_phantom():
    """Small cylinder phantom: identical disk cross-sections, light noise."""
    cfg = PhantomConfig(
        shape=(8, 64, 64),
        bodies=(PhantomBody("cylinder", center=(3.5, 32, 32), radii=(4, 20, 20), intensity=1.0),),
        bg_intensity=0.0,
        noise_sigma=0.01,
        seed=2,
    )
    return make_phantom(cfg)


@pytest.fixture(scope="session")
def disk_pairs(disk_phantom):
    volume, mask = disk_phantom
    return [TrainPair(volume.slices[z], LabelMask(mask[z]), case_id=f"z{z}") for z in (2, 5)]


def rand_mask(rng: np.random.Generator, shape=(8, 8), p=0.4) -> LabelMask:
    return LabelMask((rng.random(shape) < p).astype(np.uint8))
