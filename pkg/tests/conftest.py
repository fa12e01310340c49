import pytest

from cascade3d.augment import AugmentConfig
from cascade3d.network import UNetSpec
from cascade3d.phantom import PhantomSpec, generate
from cascade3d.pipeline import StageConfig

TINY = UNetSpec(levels=2, base_channels=2, num_classes=4, input_tile=(28, 28, 28))  # output 12^3
SMALL_PHANTOM = PhantomSpec(dims=(48, 48, 48), tube_radius=1.0)


@pytest.fixture(scope="session")
def tiny_spec():
    return TINY


@pytest.fixture(scope="session")
def small_cases():
    return generate(SMALL_PHANTOM, 4)


def stage_cfg(stage=1, iterations=6, **kw):
    base = dict(stage=stage, iterations=iterations, validate_every=3, checkpoint_every=3, seed=11,
                augment=AugmentConfig())
    base.update(kw)
    return StageConfig(**base)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
