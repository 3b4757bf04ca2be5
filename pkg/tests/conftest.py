import pytest

from resac.sim import synthetic_corridor
from resac.trainer import TrainerConfig


def tiny_corridor(**kw):
    base = dict(dispatch_interval=120.0, directional_offset=60.0, h_max=60.0, max_fleet=20)
    base.update(kw)
    return synthetic_corridor(4, 6 * 3600.0, 6 * 3600.0 + 1800.0, boardings_per_hour=120.0, base_speed=6.0, **base)


def tiny_config(**kw):
    base = dict(K=3, lr=1e-3, batch_size=16, hidden=(8, 8), episodes=2, probe_size=8, checkpoint_every=1)
    base.update(kw)
    return TrainerConfig(**base)


@pytest.fixture
def corridor():
    return tiny_corridor()


_CRITERIA: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    _CRITERIA[number] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
