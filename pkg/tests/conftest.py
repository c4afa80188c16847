import pytest

from usr.config import SRConfig, DEConfig, TrainConfig
from usr.degrade import synth_dataset, preset
from usr.rng import DeterministicRng, StreamKey


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='run desk-scale training tests')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='desk-scale run, use --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return DeterministicRng(StreamKey(1234, 0, 'tests'))


def make_tiny_sr(**changes) -> SRConfig:
    values = dict(channels=4, n_vddc=1, habs_per_block=1, window=4, heads=2, dyn_kernel=3, scale=2, mlp_ratio=2)
    values.update(changes)
    return SRConfig(**values)


def make_tiny_cfg(**changes) -> TrainConfig:
    sr = changes.pop('sr', None) or make_tiny_sr()
    values = dict(steps=(2, 2, 2), batch=1, lr_patch=8, pair_patch=16, seed=11, sr=sr,
                  de=DEConfig(udr_dim=sr.udr_dim, channels=4, blocks=1, hidden=8))
    values.update(changes)
    return TrainConfig(**values)


@pytest.fixture
def tiny_sr() -> SRConfig:
    return make_tiny_sr()


@pytest.fixture
def tiny_cfg() -> TrainConfig:
    return make_tiny_cfg()


@pytest.fixture(scope='session')
def tiny_data():
    """
    Two 32px procedural HR images with their x2 LR (16px)
    """
    return synth_dataset(2, 32, preset('bnj', 2), seed=3, threads=1)


TINY_RUN_CONFIG = """
seed: 5
sr: {channels: 4, n_vddc: 1, habs_per_block: 1, window: 4, heads: 2, dyn_kernel: 3, scale: 2, mlp_ratio: 2}
de: {channels: 4, blocks: 1, hidden: 8}
train: {steps: [1, 1, 1], batch: 1, lr_patch: 8, pair_patch: 16}
data: {count: 2, size: 32, mode: bnj}
"""


@pytest.fixture
def tiny_run_config(tmp_path) -> str:
    path = tmp_path / 'tiny.yaml'
    path.write_text(TINY_RUN_CONFIG)
    return str(path)
