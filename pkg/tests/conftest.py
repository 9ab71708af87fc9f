import importlib.resources

import pytest

from steerkit.heat import Scenario


@pytest.fixture(scope="session")
def reference_scenario() -> Scenario:
    text = (importlib.resources.files("steerkit") / "data" / "reference.scn")\
        .read_text()
    return Scenario.parse(text)
