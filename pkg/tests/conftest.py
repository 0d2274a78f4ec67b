import pytest


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run the training-based scenarios")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: trains models, skipped unless --runslow is given")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_config():
    from arfm.flow import FlowConfig
    from arfm.fusion import FusionConfig
    from arfm.model import ModelConfig

    def make(objective: str = "flow") -> ModelConfig:
        fusion = FusionConfig(width=16, layers=2, heads=2, mlp_ratio=2, max_points=16, max_timesteps=24)
        flow = FlowConfig(width=16, layers=1, heads=2, mlp_ratio=2, feature_width=16, time_embed_dim=8,
                          sample_steps=4)
        return ModelConfig(fusion=fusion, flow=flow, objective=objective)
    return make


@pytest.fixture
def tiny_model(tiny_config):
    import torch

    from arfm.model import ArfmModel

    def make(objective: str = "flow", seed: int = 0) -> ArfmModel:
        torch.manual_seed(seed)
        return ArfmModel(tiny_config(objective))
    return make
