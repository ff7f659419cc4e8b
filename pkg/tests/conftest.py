"""Shared fixtures: the seeded LeNet fixture and its cached stage dumps.

Everything here is deterministic (seed 7 teacher parameters, seed 9 unseen
inputs, seed 8 calibration) and session-scoped so the acceptance suite and
the unit tests share one set of engine runs.
"""

import pytest

from coverify import (
    FLOAT32,
    StageConfig,
    default_fixed_mode,
    run_stage,
    sw_config,
)
from coverify.fixtures import make_calibration, make_images, make_parameters
from coverify.netspec import bundled_topology

SEED = 7
N_INPUTS = 20


@pytest.fixture(scope="session")
def lenet():
    return bundled_topology("lenet")


@pytest.fixture(scope="session")
def lenet_params(lenet):
    return make_parameters(lenet, SEED)


@pytest.fixture(scope="session")
def lenet_images(lenet):
    """The unseen test inputs (seed + 2, disjoint from calibration)."""
    return make_images(lenet, N_INPUTS, SEED + 2)


@pytest.fixture(scope="session")
def lenet_calibration(lenet, lenet_params):
    """100 labeled calibration pairs; labels from the teacher's sw stage."""
    return make_calibration(lenet, lenet_params, 100, SEED + 1)


@pytest.fixture(scope="session")
def lenet_spvf(lenet, lenet_params, lenet_calibration):
    """Envelope over the full 100-image calibration set."""
    from coverify.spvf import generate_spvf
    return generate_spvf(lenet, lenet_params, lenet_calibration, n=100)


def _run_all(net, params, images, cfg):
    return [run_stage(net, params, img, cfg, image_id=str(i))
            for i, img in enumerate(images)]


@pytest.fixture(scope="session")
def sw_dumps(lenet, lenet_params, lenet_images):
    return _run_all(lenet, lenet_params, lenet_images, sw_config())


@pytest.fixture(scope="session")
def f32_design_dumps(lenet, lenet_params, lenet_images):
    cfg = StageConfig(stage="design", mode=FLOAT32)
    return _run_all(lenet, lenet_params, lenet_images, cfg)


@pytest.fixture(scope="session")
def f32_hw_dumps(lenet, lenet_params, lenet_images):
    cfg = StageConfig(stage="hw", mode=FLOAT32)
    return _run_all(lenet, lenet_params, lenet_images, cfg)


@pytest.fixture(scope="session")
def fixed_design_dumps(lenet, lenet_params, lenet_images):
    cfg = StageConfig(stage="design", mode=default_fixed_mode())
    return _run_all(lenet, lenet_params, lenet_images, cfg)


@pytest.fixture(scope="session")
def fixed_hw_dumps(lenet, lenet_params, lenet_images):
    cfg = StageConfig(stage="hw", mode=default_fixed_mode())
    return _run_all(lenet, lenet_params, lenet_images, cfg)
