import pytest
import torch

from drainsurrogate.networks import chain_network, tiny_network, toy_network

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def chain():
    return chain_network(3)


@pytest.fixture(scope="session")
def tiny():
    return tiny_network()


@pytest.fixture(scope="session")
def toy():
    return toy_network(0)


@pytest.fixture(scope="session")
def tiny_splits(tiny):
    from drainsurrogate.pipeline import build_splits
    from drainsurrogate.scenarios import EventConfig, build_event_set

    events = build_event_set(3, (2, 1, 1), EventConfig(min_duration=30, max_duration=40, min_peak=3.5, max_peak=5.0, tail=10))
    return build_splits(tiny, events, m=4, n=4, stride=3, tail=10)
