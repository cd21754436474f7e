import hashlib
from typing import Dict, List

import torch

STREAM_NAMES = ("data", "init", "sampler", "eval")


def derive_seed(seed: int, name: str) -> int:
    """Map (seed, stream name) to an independent 63-bit seed."""
    digest = hashlib.sha256(f"{seed}/{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def make_generator(seed: int, name: str) -> torch.Generator:
    generator = torch.Generator()
    generator.manual_seed(derive_seed(seed, name))
    return generator


class RandomStreams:
    """Named torch generators, all derived from one run seed."""

    def __init__(self, seed: int):
        self.seed = seed
        self._generators = {name: make_generator(seed, name) for name in STREAM_NAMES}

    @property
    def data(self) -> torch.Generator:
        return self._generators["data"]

    @property
    def init(self) -> torch.Generator:
        return self._generators["init"]

    @property
    def sampler(self) -> torch.Generator:
        return self._generators["sampler"]

    @property
    def eval(self) -> torch.Generator:
        return self._generators["eval"]

    def state_dict(self) -> Dict[str, List[int]]:
        return {name: gen.get_state().tolist() for name, gen in self._generators.items()}

    def load_state_dict(self, state: Dict[str, List[int]]) -> None:
        for name, values in state.items():
            if name not in self._generators:
                continue
            self._generators[name].set_state(torch.tensor(values, dtype=torch.uint8))
