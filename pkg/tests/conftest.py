import numpy as np
import pytest

from featfield.fields import FieldConfig, FieldNetwork
from featfield.geometry import look_at


def tiny_config(**kw) -> FieldConfig:
    base = dict(d_teacher=4, d_int=16, c_enc=8, enc_channels=(4, 4, 8, 8), pe_x=2, pe_d=1, seed=3)
    base.update(kw)
    return FieldConfig(**base)


@pytest.fixture
def tiny_net():
    return FieldNetwork(tiny_config())


@pytest.fixture
def tiny_net64():
    return FieldNetwork(tiny_config(), dtype=np.float64)


def ring_camera(angle: float, size: int = 16, elevation: float = 0.5, radius: float = 2.0):
    eye = radius * np.array([np.cos(angle) * np.cos(elevation), np.sin(angle) * np.cos(elevation),
                             np.sin(elevation)])
    return look_at(eye, focal=1.25 * size, width=size, height=size)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Five chairs, four 16x16 views each: the smallest dataset with all three splits."""
    from featfield.synthscene import generate_dataset

    root = tmp_path_factory.mktemp("tiny_ds")
    generate_dataset("chair", 5, 4, root, seed=7, image_size=16, n_surface_points=256)
    return root


def pytest_terminal_summary(terminalreporter):
    """Echo acceptance verdicts so they survive output capturing."""
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
