import copy
import os

import numpy as np
import pytest
import torch

from matchkit import config
from matchkit.evaluation import EvalReport, KindModels, evaluate
from matchkit.schema import DatasetManifest, NetsConfig, RunConfig, SynthConfig
from matchkit.synth import SensorSpec, dataset_paths, generate_dataset, generate_scene
from matchkit.train import pretrain_proxy, train_transform

TESTS_DIR = os.path.dirname(__file__)


def pytest_addoption(parser):
    parser.addoption(
        "--run-slow", action="store_true", default=False, help="run the long training experiments"
    )


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance experiment")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def _single_thread(monkeypatch):
    monkeypatch.setenv("MATCHKIT_THREADS", "1")
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture()
def small_nets() -> NetsConfig:
    return NetsConfig(branch_widths=[4, 8], trunk_widths=[8, 8], mlp_hidden=[4, 4])


@pytest.fixture()
def tiny_synth() -> SynthConfig:
    return SynthConfig(scenes=3, frames_per_scene=2, height=96, width=128, test_fraction=0.34)


@pytest.fixture()
def fast_run_config(small_nets, tiny_synth) -> RunConfig:
    rc = RunConfig(nets=small_nets, synth=tiny_synth)
    rc.train.epochs = 1
    rc.train.batch_size = 4
    rc.train.resize_height = 64
    rc.train.validation_pairs = 4
    rc.matcher.ransac_iters = 200
    return rc


@pytest.fixture()
def sensor() -> SensorSpec:
    return SensorSpec()


@pytest.fixture()
def scene():
    return generate_scene(seed=11, height=96, width=128)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("dataset")
    cfg = SynthConfig(scenes=3, frames_per_scene=2, height=96, width=128, test_fraction=0.34)
    manifest = generate_dataset(cfg, str(out), seed=3)
    return str(out), manifest


class Experiment:
    """A proxy pre-trained on a few hundred synthetic pairs, plus transforms trained against it on demand."""

    def __init__(self, root: str, run_config: RunConfig):
        paths = dataset_paths(root)
        self.run_config = run_config
        self.train = DatasetManifest.read(paths.train)
        self.test = DatasetManifest.read(paths.test)
        self.proxy, self.proxy_log = pretrain_proxy(
            self.train, run_config, validation=self.test, show_progress=False
        )
        self._trained: dict = {}

    def fresh_proxy(self):
        return copy.deepcopy(self.proxy)

    def trained(self, kind: str):
        kind = config.get_transform_kind(kind).primary_alias
        if kind not in self._trained:
            self._trained[kind] = train_transform(
                self.train, self.fresh_proxy(), self.run_config, kind=kind, validation=self.test, show_progress=False
            )
        return self._trained[kind]

    def trained_entry(self, kind: str) -> KindModels:
        models, proxy, _ = self.trained(kind)
        return KindModels(kind, models=models, proxy=proxy, target_scale=self.run_config.train.target_scale)

    def evaluate(self, entries) -> EvalReport:
        return evaluate(self.test, entries, seed=self.run_config.train.seed, run_config=self.run_config)


@pytest.fixture(scope="session")
def experiment(tmp_path_factory) -> Experiment:
    rc = RunConfig()
    rc.synth.scenes = 24
    out = tmp_path_factory.mktemp("experiment")
    manifest = generate_dataset(rc.synth, str(out), seed=rc.train.seed)
    assert len(manifest) >= 300
    return Experiment(str(out), rc)
