import pytest

from bundle_fixtures import write_manifest_bundle


@pytest.fixture
def tiny_bundle(tmp_path):
    return write_manifest_bundle(tmp_path / "bundle")
