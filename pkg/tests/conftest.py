import numpy as np
import pytest
import torch

from diffsr.field import Field, Scene, Units


@pytest.fixture(autouse=True)
def _torch_defaults():
    torch.set_default_dtype(torch.float32)
    yield


def make_scene(rows, cols, radar=None, scene_id="s0"):
    radar = np.zeros((rows, cols)) if radar is None else radar
    sat = tuple(Field(np.full((rows, cols), 250.0 + k), Units.BRIGHTNESS_K) for k in range(3))
    sat += (Field(np.zeros((rows, cols)), Units.FLASH_DENSITY),)
    return Scene(sat, Field(radar, Units.DBZ), scene_id)


from hypothesis import settings  # noqa: E402

settings.register_profile("default", deadline=None)
settings.load_profile("default")

ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects one line per acceptance criterion for the terminal summary."""
    return request.config.stash.setdefault(ACCEPTANCE, [])


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
