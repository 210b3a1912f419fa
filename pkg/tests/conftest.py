import pytest

from cem import fixtures
from cem.manager import Registry


@pytest.fixture(scope="session")
def modules():
    return {name.removesuffix(".cem"): fixtures.load_module(name) for name in fixtures.MODULE_FILES}


@pytest.fixture()
def v1_registry(modules):
    reg = Registry()
    out = reg.preflight_deploy(
        [modules["catalog_v1"], modules["marketing_v1"], modules["backoffice_v1"]]
    )
    assert type(out).__name__ == "Accepted", out
    return reg


@pytest.fixture()
def v2_registry(v1_registry, modules):
    out = v1_registry.preflight_deploy([modules["catalog_v2"], modules["marketing_v2"]])
    assert type(out).__name__ == "Accepted", out
    return v1_registry
