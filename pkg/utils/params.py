import os
import logging
from collections import OrderedDict
from typing import Dict, Iterable, Iterator, List, Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)


class ParamStore:
    """
    Flat registry of named real parameter blocks and their accumulated gradients.

    Complex parameters live here as two real blocks (`<name>_re`, `<name>_im`).
    `version` increases on every in-place update so forward caches can detect
    that the parameters moved underneath them.
    """

    def __init__(self):
        self._values: 'OrderedDict[str, np.ndarray]' = OrderedDict()
        self.grads: Dict[str, np.ndarray] = {}
        self.version = 0

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self._values:
            raise KeyError(f"parameter block already registered: {name}")
        value = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise ValueError(f"parameter block {name} has non-finite values")
        self._values[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def names(self, prefix: str = '') -> List[str]:
        return [n for n in self._values if n.startswith(prefix)]

    def items(self) -> Iterable[Tuple[str, np.ndarray]]:
        return self._values.items()

    def get(self, name: str, default=None) -> Optional[np.ndarray]:
        return self._values.get(name, default)

    def set(self, name: str, value: np.ndarray):
        if name not in self._values:
            raise KeyError(f"unknown parameter block: {name}")
        if value.shape != self._values[name].shape:
            raise ValueError(f"shape mismatch for {name}: {value.shape} vs {self._values[name].shape}")
        self._values[name][...] = value
        self.version += 1

    def bump(self):
        self.version += 1

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def zero_grads_like(self) -> Dict[str, np.ndarray]:
        return {name: np.zeros_like(value) for name, value in self._values.items()}

    def accumulate(self, grads: Dict[str, np.ndarray], scale: float = 1.0):
        for name, g in grads.items():
            self.grads[name] += scale * g

    def n_values(self) -> int:
        return int(sum(v.size for v in self._values.values()))

    def copy(self) -> 'ParamStore':
        other = ParamStore()
        for name, value in self._values.items():
            other.add(name, value.copy())
        return other

    def save(self, stem: str):
        save_blocks(stem, self._values)

    @classmethod
    def load(cls, stem: str) -> 'ParamStore':
        store = cls()
        for name, value in load_blocks(stem).items():
            store.add(name, value)
        return store


def save_blocks(stem: str, blocks: Dict[str, np.ndarray]):
    """
    Write <stem>.bin (little-endian float64 blocks, back to back) and
    <stem>.index (name, shape, offset, count per line, tab separated).
    """
    os.makedirs(os.path.dirname(os.path.abspath(stem)), exist_ok=True)
    offset = 0
    lines = []
    with open(f"{stem}.bin", 'wb') as f:
        for name, value in blocks.items():
            if '\t' in name or '\n' in name:
                raise ValueError(f"invalid block name: {name!r}")
            data = np.ascontiguousarray(value, dtype='<f8')
            f.write(data.tobytes())
            shape = ','.join(str(d) for d in value.shape)
            lines.append(f"{name}\t{shape}\t{offset}\t{data.size}")
            offset += data.size
    with open(f"{stem}.index", 'w', encoding='utf-8') as f:
        f.write('\n'.join(lines) + '\n')
    logger.debug(f"[CKPT] saved {len(blocks)} blocks ({offset} values) to {stem}.bin")


def load_blocks(stem: str) -> 'OrderedDict[str, np.ndarray]':
    for ext in ('.bin', '.index'):
        if not os.path.exists(stem + ext):
            raise FileNotFoundError(f"Checkpoint file not found: {stem}{ext}")

    raw = np.fromfile(f"{stem}.bin", dtype='<f8')
    blocks = OrderedDict()
    with open(f"{stem}.index", 'r', encoding='utf-8') as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                name, shape, offset, count = line.rstrip('\n').split('\t')
                shape = tuple(int(d) for d in shape.split(',')) if shape else ()
                offset, count = int(offset), int(count)
            except ValueError:
                raise ValueError(f"{stem}.index:{line_no}: malformed index line")
            if offset + count > raw.size:
                raise ValueError(f"{stem}.bin truncated at block {name}")
            blocks[name] = raw[offset:offset + count].astype(np.float64).reshape(shape)
    return blocks
