import os
import pytest


@pytest.fixture(autouse=True)
def isolated_app_home(tmp_path, mocker):
    """Logs and the run registry go to a per-test directory instead of ~/.prompt-adapters."""
    home = tmp_path / "app_home"
    mocker.patch.dict(os.environ, {"PROMPT_ADAPTERS_HOME": str(home)})
    return home
