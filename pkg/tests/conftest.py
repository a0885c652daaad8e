import json
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from switchqvi.config import load_config

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"
DESK = ["constants_g5", "constants_g1", "geometric_single", "ou_two_mode", "ou_own_component",
        "ou_fully_coupled", "ou_2d"]
NEGATIVE_CONTROLS = {"nc_free_loop": "NonFreeLoopViolation", "nc_nonmonotone": "MonotonicityViolation",
                     "nc_discount": "DiscountTooSmall"}

settings.register_profile("repo", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


def desk_path(name: str) -> Path:
    return CONFIG_DIR / f"{name}.json"


def desk_config(name: str):
    return load_config(desk_path(name))


def desk_json(name: str) -> dict:
    return json.loads(desk_path(name).read_text())


@pytest.fixture
def tmp_config(tmp_path):
    """Write a dict as a config file and return its path."""
    def write(data: dict, name: str = "cfg.json") -> Path:
        p = tmp_path / name
        p.write_text(json.dumps(data, indent=2))
        return p
    return write


def single_obstacle_desk():
    """OU obstacle problem used for the inner-solver comparison: (phi, f, op, r)."""
    import numpy as np

    from switchqvi import expr
    from switchqvi.grid import build_grid, discretize_generator
    from switchqvi.model import DiffusionSpec

    g = build_grid([(-5.0, 5.0)], 400)
    op = discretize_generator(DiffusionSpec.ornstein_uhlenbeck(1.0, 0.0, 0.5), g)
    phi = 0.5 * np.exp(-g.nodes[:, 0] ** 2)
    return phi, expr.parse("0.1 * x1"), op, 0.5


# --- acceptance reporting ----------------------------------------------------
ACCEPTANCE: dict[int, tuple[bool, str, str]] = {}


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (passed, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {n:2d} {title}: {detail}")
