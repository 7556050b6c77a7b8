"""Shared helpers: hand-built nets and scenes with known rollout outcomes."""

import numpy as np
import pytest

from advtex import geometry as geo
from advtex import policy as pol
from advtex import render as rd

# One line per acceptance criterion, filled by tests/test_acceptance.py and
# echoed after the run so the verdicts survive pytest's output capture.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def constant_action_net(action, resolution=16):
    """A policy that ignores its input: zero weights, bias = the action.

    Useful because a constant EE-frame action (0, 0, -s) marches straight
    along the approach axis toward the adversarial anchor the start pose
    aims at.
    """
    net = pol.init_policy("toy", resolution, seed=0)
    for k in net.params:
        net.params[k] = np.zeros_like(net.params[k])
    net.params["fc2_b"] = np.asarray(action, dtype=np.float64)
    return net


def reachable_config(r=0.3, theta=0.3, phi=0.4, config_id=0, seed=7):
    """Scene whose goal center coincides with the adversarial anchor point,
    so the approach-axis march ends in a reached_goal (tie broken to goal)."""
    objects = rd.default_objects()
    adv_pos = np.array([0.1, -0.05, 0.0])
    goal_pos = adv_pos + objects.adv.centroid_offset() - objects.goal.centroid_offset()
    return geo.SceneConfig(
        config_id=config_id,
        seed=seed,
        goal_pos=goal_pos,
        goal_yaw=0.1,
        adv_pos=adv_pos,
        adv_yaw=0.2,
        distractor_pos=(np.array([-0.3, 0.3, 0.0]),),
        distractor_yaw=(0.0,),
        ee_init=geo.SphericalPose(r=r, theta=theta, phi=phi),
    )


def decoy_config(r=0.3, theta=1.1, phi=0.5, config_id=1, seed=11):
    """Scene with the goal far from the adversarial object: the approach-axis
    march reaches the adversarial object instead."""
    return geo.SceneConfig(
        config_id=config_id,
        seed=seed,
        goal_pos=np.array([-0.32, 0.30, 0.0]),
        goal_yaw=0.4,
        adv_pos=np.array([0.15, -0.10, 0.0]),
        adv_yaw=1.2,
        distractor_pos=(np.array([0.30, 0.32, 0.0]),),
        distractor_yaw=(0.9,),
        ee_init=geo.SphericalPose(r=r, theta=theta, phi=phi),
    )


@pytest.fixture(scope="session")
def march_net():
    return constant_action_net([0.0, 0.0, -0.02, 0.0, 0.0, 0.0])


@pytest.fixture(scope="session")
def small_intr():
    return rd.CameraIntrinsics.square(16)
