import numpy as np
import pytest

from lilac import datamodel as dm
from lilac import synthbench as sb


def single_object_spec(motion_kind, increments, depth=1.0, seed=4, horizon=8):
    target = sb.SceneObject("block", "red", 16, (50, 50), depth)
    other = sb.SceneObject("ball", "blue", 14, (10, 10), 1.2)
    return sb.SceneSpec([target, other], 0, sb.MotionSpec(motion_kind, increments),
                        "move the red block right", "move", seed, horizon)


def shifted_episode(dx_px=0.0, dy_px=0.0, horizon=8):
    """Red block at depth 1 m translated by a whole-pixel image offset."""
    cam = dm.default_camera()
    count = sb.raw_steps_for(horizon) - 1
    if dx_px == 0 and dy_px == 0:
        incs = [dm.Pose6DoF.identity() for _ in range(count)]
    else:
        incs = sb._translation_increments(np.array([dx_px / cam.fx, dy_px / cam.fy, 0.0]), count)
    return sb.generate_episode(single_object_spec("translate", incs, horizon=horizon))


@pytest.fixture
def static_episode():
    return shifted_episode()


@pytest.fixture
def plus30_episode():
    return shifted_episode(30.0)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"ACCEPTANCE {k}: {'PASS' if ok else 'FAIL'}  {detail}")
