import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from skybridge import demo
from skybridge.choreographer import Choreographer, Node, NodePool, SlaDictionary, SlaEntry
from skybridge.manifest import ResourceQuota, parse_manifest


@pytest.fixture
def detector_manifest():
    return parse_manifest(demo.detector_manifest_bytes())


@pytest.fixture
def mapper_manifest():
    return parse_manifest(demo.mapper_manifest_bytes())


@pytest.fixture
def demo_dictionary():
    return SlaDictionary([
        SlaEntry("detect", 100, ResourceQuota(4000, 1024)),
        SlaEntry("detect", 500, ResourceQuota(1000, 256)),
        SlaEntry("mapper", 400, ResourceQuota(4000, 2048)),
        SlaEntry("mapper", 1000, ResourceQuota(2000, 1024)),
    ])


def make_pool(n_nodes=2, cpu=32000, mem=65536):
    return NodePool([Node(f"node-{chr(97 + i)}", cpu, mem) for i in range(n_nodes)])


@pytest.fixture
def big_pool():
    return make_pool()


@pytest.fixture
def choreographer(demo_dictionary, big_pool, detector_manifest, mapper_manifest):
    ch = Choreographer(demo_dictionary, big_pool)
    ch.register_service(detector_manifest)
    ch.register_service(mapper_manifest)
    return ch
