import itertools

import pytest

from shmchain.pool import PoolConfig, PoolRegistry

_prefix_counter = itertools.count()


@pytest.fixture
def registry(tmp_path):
    reg = PoolRegistry(registry_dir=tmp_path)
    yield reg
    reg.clear()


@pytest.fixture
def pool(registry):
    return registry.create(PoolConfig(f"test-{next(_prefix_counter)}", 64, 2048))


@pytest.fixture
def big_pool(registry):
    return registry.create(PoolConfig(f"big-{next(_prefix_counter)}", 2048, 2048))
