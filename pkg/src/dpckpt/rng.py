"""Replayable randomness built on a counter-based bit generator.

Every noise draw in a training run is addressed by (seed, stream, step):
the Philox key holds (seed, stream) and the step goes into the counter
block, so the draw for any step can be reproduced without replaying the
steps before it and is unaffected by what other runs or threads do.
Gaussian values are produced by the Box-Muller transform applied to
fixed counter slots, which pins coordinate j of a noise vector to the
j-th uniform pair of that step's stream.
"""

import numpy as np

# stream ids; distinct streams of one run never share counter space
STREAM_NOISE = 1
STREAM_INIT = 2
STREAM_BATCH = 3
STREAM_TRIAL = 4
STREAM_ORACLE = 5
STREAM_SELECT = 6

_U64 = np.uint64
_TWO64 = 2.0**64


def _philox(seed: int, stream: int, step: int) -> np.random.Philox:
    if step < 0:
        raise ValueError(f"step must be nonnegative, got {step}")
    key = [_U64(seed & 0xFFFFFFFFFFFFFFFF), _U64(stream & 0xFFFFFFFFFFFFFFFF)]
    return np.random.Philox(counter=[0, 0, 0, _U64(step)], key=key)


def step_generator(seed: int, stream: int, step: int) -> np.random.Generator:
    """Generator whose output depends only on (seed, stream, step)."""
    return np.random.Generator(_philox(seed, stream, step))


def uniform_vector(seed: int, stream: int, step: int, dim: int) -> np.ndarray:
    """dim uniforms in (0, 1], one fixed counter slot per coordinate."""
    raw = _philox(seed, stream, step).random_raw(dim)
    return (raw.astype(np.float64) + 1.0) / _TWO64


def gaussian_vector(seed: int, stream: int, step: int, dim: int) -> np.ndarray:
    """dim standard normals via Box-Muller on the (seed, stream, step) slot.

    Coordinate j consumes the uniform pair at counter slots (2j, 2j+1),
    so each coordinate is a pure function of (seed, stream, step, j).
    """
    if dim == 0:
        return np.zeros(0)
    raw = _philox(seed, stream, step).random_raw(2 * dim)
    u1 = (raw[0::2].astype(np.float64) + 1.0) / _TWO64  # in (0, 1]
    u2 = raw[1::2].astype(np.float64) / _TWO64  # in [0, 1)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
