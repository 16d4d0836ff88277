import pytest

from helpers import tiny_dataset


@pytest.fixture
def tiny_ds():
    return tiny_dataset()
