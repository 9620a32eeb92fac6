import pytest

from lgvqa.backends import ToyDualEncoder, ToyFusionBackend
from lgvqa.core import GuidanceKind
from lgvqa.data import synth_dataset
from lgvqa.guidance import GuidanceCache, stub_generator


@pytest.fixture
def dual_backend():
    return ToyDualEncoder(seed=7)


@pytest.fixture
def fusion_backend():
    return ToyFusionBackend(seed=7)


@pytest.fixture
def synth32():
    return synth_dataset(seed=7, n=32, n_choices=4)


def build_stub_cache(instances, kinds=(GuidanceKind.RATIONALE, GuidanceKind.CAPTION),
                     seed=1, path=None):
    """Populate an in-memory cache with stub guidance for every instance."""
    cache = GuidanceCache(path)
    for kind in kinds:
        generator = stub_generator(kind, seed=seed)
        for instance in instances:
            cache.put(instance.id, kind,
                      generator.generate(instance.image_ref, instance.question, None))
    return cache


@pytest.fixture
def stub_cache(synth32):
    return build_stub_cache(synth32)
