"""Random protocol messages for round-trip and fuzz testing."""

import random

import numpy as np

from steerkit.protocol import (
    Ack,
    Bye,
    GeometryUpdate,
    Hello,
    LevelSwitch,
    ParamUpdate,
    ResultFrame,
    Stats,
)
from steerkit.steering import VarKind

_NAME_ALPHABET = "abcdefghijklmnopqrstuvwxyz_0123456789äßπ"


def _name(rng: random.Random) -> str:
    n = rng.randint(1, 40)
    return "".join(rng.choice(_NAME_ALPHABET) for _ in range(n))


def _value(rng: random.Random, kind: VarKind):
    if kind == VarKind.INT:
        return rng.randint(-2**62, 2**62)
    if kind == VarKind.FLOAT:
        return rng.uniform(-1e12, 1e12)
    if kind == VarKind.BOOL:
        return rng.random() < 0.5
    if kind == VarKind.POINT2D:
        return (rng.uniform(-100, 100), rng.uniform(-100, 100))
    return rng.randbytes(rng.randint(0, 300))


def random_message(rng: random.Random):
    pick = rng.randrange(8)
    if pick == 0:
        return Hello(rng.randint(1, 4), rng.choice(["ui", "headless"]))
    if pick == 1:
        kind = VarKind(rng.randrange(5))
        return ParamUpdate(_name(rng), kind, _value(rng, kind))
    if pick == 2:
        return GeometryUpdate(
            op=rng.choice(["add", "move", "delete"]),
            entity=rng.choice(["heat_source", "boundary_point"]),
            entity_id=rng.randrange(2**32),
            x=rng.uniform(0, 1), y=rng.uniform(0, 1),
            temperature=None if rng.random() < 0.3
            else rng.uniform(-500, 500))
    if pick == 3:
        w = rng.randint(1, 12)
        h = rng.randint(1, 12)
        field = np.array([rng.uniform(-1e6, 1e6) for _ in range(w * h)])
        return ResultFrame(
            epoch=rng.randrange(2**63), level_index=rng.randrange(2**16),
            iteration=rng.randrange(2**63), residual=rng.uniform(0, 1e3),
            width=w, height=h, field=field)
    if pick == 4:
        return LevelSwitch(rng.randrange(2**16), rng.randrange(2**16),
                           _name(rng))
    if pick == 5:
        return Stats(rng.randrange(2**63), rng.uniform(0, 100),
                     rng.randrange(2**63), rng.randrange(2**32))
    if pick == 6:
        return Ack(rng.randrange(2**32))
    return Bye()
