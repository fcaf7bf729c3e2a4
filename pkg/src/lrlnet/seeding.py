"""Deterministic RNG derivation.

Every random draw in the package flows from one master seed through
`derive_rng`, keyed by small integer codes, so any worker can rebuild its
stream independently of scheduling.
"""

import numpy as np

from .errors import ArgumentError

# Purpose codes; distinct codes keep independently consumed streams apart.
PARAM_INIT = 1
DATASET = 2
SPLIT = 3
TRAIN_ORDER = 4
POINT_SHUFFLE = 5
BALL_SAMPLE = 6
RUM_GATHER = 7
SUBSAMPLE = 8
CSM_GATHER = 9


def derive_rng(*keys: int) -> np.random.Generator:
    """Build a Generator from non-negative integer keys.

    Identical key tuples give identical streams; any difference in any key
    gives an independent stream.
    """
    if not keys:
        raise ArgumentError("derive_rng needs at least one key")
    if any(int(k) < 0 for k in keys):
        raise ArgumentError(f"rng keys must be non-negative, got {keys!r}")
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def region_rng(seed: int, purpose: int, epoch: int, obj_index: int,
               layer: int, center: int) -> np.random.Generator:
    """Per-region stream: (seed, purpose, epoch, object) entropy + (layer, center) key.

    Same derivation guarantees as derive_rng but cheaper to construct, which
    matters because every region of every forward pass derives one.
    """
    ss = np.random.SeedSequence([int(seed), int(purpose), int(epoch), int(obj_index)],
                                spawn_key=(int(layer), int(center)))
    return np.random.default_rng(ss)


class SampleRng:
    """Per-pass sampling streams for one (seed, epoch, object) triple.

    Epoch 0 is reserved for evaluation; training epochs are 1-based.  Each
    (layer, region) pair owns its own stream so region workers are
    schedule-independent.
    """

    def __init__(self, seed: int, epoch: int, obj_index: int):
        self.seed = int(seed)
        self.epoch = int(epoch)
        self.obj_index = int(obj_index)

    def ball(self, layer: int, center: int) -> np.random.Generator:
        return region_rng(self.seed, BALL_SAMPLE, self.epoch, self.obj_index, layer, center)

    def rum_gather(self, layer: int, center: int) -> np.random.Generator:
        return region_rng(self.seed, RUM_GATHER, self.epoch, self.obj_index, layer, center)

    def csm_gather(self, layer: int, center: int) -> np.random.Generator:
        return region_rng(self.seed, CSM_GATHER, self.epoch, self.obj_index, layer, center)
