import pytest
import torch

from resedit import data, datamodel, networks

torch.set_num_threads(2)


@pytest.fixture(scope="session")
def tiny_config():
    """Smallest config that exercises the whole stack quickly."""
    return datamodel.default_config("glasses", "local").replace(
        image_size=64, width_scale=0.0625, batch_size=2, iterations=4,
        checkpoint_every=2, seed=11)


@pytest.fixture(scope="session")
def synth_glasses():
    return data.synth_generate(8, 64, "glasses-like", seed=3)


@pytest.fixture()
def mini_generator():
    spec = networks.GeneratorSpec(channels=(4, 8, 16, 8, 4))
    return networks.init_params(networks.Generator(spec), seed=5)


@pytest.fixture()
def mini_discriminator():
    spec = networks.DiscriminatorSpec(image_size=64, channels=(4, 8, 16))
    return networks.init_params(networks.Discriminator(spec), seed=6)
