import pytest

from scalegen import datapipe as dp
from scalegen.netcore import Discriminator, Generator, ModelConfig
from scalegen.train import TrainConfig


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    """Small multi-resolution procedural corpus for p=32 tests."""
    out = tmp_path_factory.mktemp("corpus32")
    dp.generate_corpus(out, count=20, sizes=(32, 48, 64, 96), seed=3)
    return out


@pytest.fixture(scope="session")
def manifest(corpus_dir):
    return dp.ingest(corpus_dir, p=32)


@pytest.fixture(scope="session")
def tiny_model_cfg():
    return ModelConfig(p=32, s_max=96, d_z=16, d_w=32, fourier_channels=16,
                       synth_layers=3, synth_channels=32, disc_channels=16)


@pytest.fixture()
def tiny_gen(tiny_model_cfg):
    return Generator(tiny_model_cfg, seed=7)


@pytest.fixture()
def tiny_disc(tiny_model_cfg):
    return Discriminator(tiny_model_cfg, seed=8)


def tiny_train_config(**overrides):
    base = dict(p=32, d_z=16, d_w=32, fourier_channels=16, synth_layers=3,
                synth_channels=32, disc_channels=16, batch_size=4,
                steps_phase1=4, steps_phase2=4, log_every=2, proxy_pfid_n=24,
                lambda_r1=1.0, seed=11)
    base.update(overrides)
    return TrainConfig(**base)
