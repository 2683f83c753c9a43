import numpy as np
import pytest
import torch

from mesoflow.imagery import (
    RampEvent,
    Rotation,
    SyntheticScene,
    TextureParams,
    Translation,
    Vortex,
    generate_synthetic,
)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_scene(seed=0, T=15, size=64, motion=("translate",), ramp=False, speed=0.4):
    """Standard test scene builder shared across modules."""
    rng = np.random.default_rng((seed, 77))
    prims = []
    if "translate" in motion:
        ang = rng.uniform(0, 2 * np.pi)
        prims.append(Translation(speed * np.cos(ang), speed * np.sin(ang)))
    if "rotate" in motion:
        prims.append(Rotation((size / 2 + rng.uniform(-8, 8), size / 2 + rng.uniform(-8, 8)),
                              rng.uniform(-0.008, 0.008)))
    if "vortex" in motion:
        prims.append(Vortex((size / 2, size / 2), rng.uniform(-2, 2), size / 4))
    ramps = ()
    if ramp:
        ramps = (RampEvent((rng.uniform(16, size - 16), rng.uniform(16, size - 16)),
                           rng.uniform(6, 10), rng.uniform(0.02, 0.05)),)
    return SyntheticScene(
        seed=seed,
        velocity_params=tuple(prims),
        texture_params=TextureParams(count=20, sigma_range=(3.0, 7.0)),
        ramp_events=ramps,
        T=T,
        H=size,
        W=size,
    )


def make_dataset(n_seqs, seed=0, T=15, size=64, motion=("translate", "rotate"), ramp_every=3):
    """A pile of varied synthetic sequences for training/evaluation tests."""
    seqs = []
    for i in range(n_seqs):
        seqs.append(
            generate_synthetic(make_scene(seed=seed + i, T=T, size=size,
                                          motion=motion, ramp=(ramp_every and i % ramp_every == 0)))[0]
        )
    return seqs
