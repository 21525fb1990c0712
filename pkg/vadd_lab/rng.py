# vadd_lab/rng.py

"""
Portable Random Streams

Every stochastic draw in the package comes from a named stream backed by
numpy's counter-based Philox generator. A stream's key is derived from
(seed, stream index, *path) through SeedSequence, so:
- streams never share state with each other
- derive(i) gives independent per-chunk / per-sequence streams
- results are identical across platforms and thread counts
"""

import numpy as np

STREAMS = (
    "data",
    "truth",
    "time",
    "mask",
    "latent",
    "categorical",
    "check",
    "init",
)


def make_generator(seed: int, *spawn_key: int) -> np.random.Generator:
    seq = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in spawn_key))
    return np.random.Generator(np.random.Philox(seq))


class RandomStreams:
    """Lazily created named Philox streams for one (seed, path)."""

    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        self._generators = {}

    def get(self, name: str) -> np.random.Generator:
        if name not in STREAMS:
            raise KeyError(f"unknown random stream '{name}'")
        if name not in self._generators:
            index = STREAMS.index(name)
            self._generators[name] = make_generator(self.seed, index, *self.path)
        return self._generators[name]

    def derive(self, *index: int) -> "RandomStreams":
        """Independent child streams, e.g. one per sampling chunk."""
        return RandomStreams(self.seed, self.path + tuple(index))

    @property
    def data(self):
        return self.get("data")

    @property
    def truth(self):
        return self.get("truth")

    @property
    def time(self):
        return self.get("time")

    @property
    def mask(self):
        return self.get("mask")

    @property
    def latent(self):
        return self.get("latent")

    @property
    def categorical(self):
        return self.get("categorical")

    @property
    def check(self):
        return self.get("check")

    @property
    def init(self):
        return self.get("init")

    def state_dict(self) -> dict:
        """JSON-ready Philox states of every stream created so far."""
        return {name: _jsonable(gen.bit_generator.state) for name, gen in sorted(self._generators.items())}

    def load_state_dict(self, states: dict):
        for name, state in states.items():
            self.get(name).bit_generator.state = _from_jsonable(state)

    def __repr__(self):
        return f"RandomStreams(seed={self.seed}, path={self.path})"


def _jsonable(state):
    if isinstance(state, dict):
        return {k: _jsonable(v) for k, v in state.items()}
    if isinstance(state, np.ndarray):
        return {"__uint64__": [int(v) for v in state.ravel()]}
    if isinstance(state, np.integer):
        return int(state)
    return state


def _from_jsonable(state):
    if isinstance(state, dict):
        if "__uint64__" in state:
            return np.array(state["__uint64__"], dtype=np.uint64)
        return {k: _from_jsonable(v) for k, v in state.items()}
    return state
