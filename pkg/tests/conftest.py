import pytest

from radnet import tensor as T


@pytest.fixture(autouse=True)
def _engine_defaults():
    T.set_precision("float32")
    T.set_debug(False)
    yield
    T.set_precision("float32")
