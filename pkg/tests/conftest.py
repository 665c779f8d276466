import random
import sys

import pytest

from acst.cluster import Cluster
from acst.config import Config

TEST_FILE_SIZE = 6_930_000


def make_data(size: int, seed: int = 1) -> bytes:
    return random.Random(seed).randbytes(size)


@pytest.fixture(scope="session")
def test_file_bytes() -> bytes:
    return make_data(TEST_FILE_SIZE)


def build_cluster(n: int, *, bandwidth: float = 1000, delay: float = 10, seed: int = 0,
                  config: Config | None = None, form: bool = True, **peer_kwargs) -> Cluster:
    cluster = Cluster(config, seed=seed)
    for peer in range(n):
        cluster.add_peer(peer, **peer_kwargs.get(peer, {}))
    cluster.full_mesh(bandwidth, delay)
    if form:
        cluster.form(0)
    return cluster


def replicate(cluster: Cluster, data: bytes, origin: int = 0):
    root = cluster[origin].add(data)
    pin = cluster[origin].cluster_pin(root)
    cluster.run_until(lambda: pin.done, 7200)
    cluster.settle()
    return root, pin


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, (ok, text) in sorted(module.RESULTS.items()):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {number}: {text}")
