import pytest
from hypothesis import settings

from lodsync.harness import data_path
from lodsync.organization import load_organization

settings.register_profile("default", max_examples=200, deadline=None)
settings.load_profile("default")


@pytest.fixture
def org():
    return load_organization(data_path("roles.txt"), data_path("groups.txt"))
