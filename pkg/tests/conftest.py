import pytest

from ifwm.config import TrainConfig
from ifwm.data import SceneSpec, generate_dataset


@pytest.fixture(scope="session")
def micro_manifest(tmp_path_factory):
    """Small tiled dataset shared by training-path tests."""
    root = tmp_path_factory.mktemp("micro_data")
    return generate_dataset(str(root), 4, SceneSpec(), seed=11, tile=64, stride=48)


@pytest.fixture
def micro_cfg(micro_manifest):
    def make(**overrides):
        base = dict(data_manifest=micro_manifest, stem_channels=4,
                    branch_widths=(4, 6, 8, 10), blocks_per_stage=1, num_stages=1,
                    epochs=2, batch_size=8, lr=0.01, lr_decay=0.97, momentum=0.9,
                    seed=0)
        base.update(overrides)
        return TrainConfig(**base)
    return make
