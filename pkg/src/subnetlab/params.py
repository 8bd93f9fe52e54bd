"""Named parameter collections.

A ParameterTree maps "/"-separated paths to numpy arrays and always
iterates in lexicographic path order. Every path belongs to one of three
regions, derived purely from its prefix:

    encoder/...   -> "encoder"      (the prunable region)
    ctc_head/...  -> "ctc_head"
    anything else -> "feature_proj"
"""
from __future__ import annotations

from typing import Iterable, Iterator, Mapping

import numpy as np

REGION_ENCODER = "encoder"
REGION_CTC_HEAD = "ctc_head"
REGION_FEATURE_PROJ = "feature_proj"


def region_of(path: str) -> str:
    if path.startswith("encoder/"):
        return REGION_ENCODER
    if path.startswith("ctc_head/"):
        return REGION_CTC_HEAD
    return REGION_FEATURE_PROJ


class ParameterTree:
    """Ordered path -> array mapping with an optional attached model config."""

    def __init__(self, items: Mapping[str, np.ndarray] | None = None, config=None):
        self._data: dict[str, np.ndarray] = {}
        self.config = config
        if items:
            for path, value in items.items():
                self[path] = value

    def __setitem__(self, path: str, value: np.ndarray) -> None:
        arr = np.ascontiguousarray(value)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite values in parameter {path!r}")
        self._data[path] = arr

    def __getitem__(self, path: str) -> np.ndarray:
        return self._data[path]

    def __delitem__(self, path: str) -> None:
        del self._data[path]

    def __contains__(self, path: str) -> bool:
        return path in self._data

    def __len__(self) -> int:
        return len(self._data)

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._data))

    def paths(self) -> list[str]:
        return sorted(self._data)

    def items(self) -> Iterable[tuple[str, np.ndarray]]:
        for path in sorted(self._data):
            yield path, self._data[path]

    def region(self, path: str) -> str:
        if path not in self._data:
            raise KeyError(path)
        return region_of(path)

    def copy(self) -> "ParameterTree":
        out = ParameterTree(config=self.config)
        for path, value in self._data.items():
            out._data[path] = value.copy()
        return out

    def astype(self, dtype) -> "ParameterTree":
        out = ParameterTree(config=self.config)
        for path, value in self._data.items():
            out._data[path] = value.astype(dtype)
        return out

    def num_entries(self) -> int:
        return sum(v.size for v in self._data.values())

    def equals_bitwise(self, other: "ParameterTree") -> bool:
        if self.paths() != other.paths():
            return False
        return all(
            np.array_equal(self._data[p].view(np.uint8), other._data[p].view(np.uint8))
            for p in self._data
        )

    def __repr__(self) -> str:
        return f"ParameterTree({len(self._data)} params, {self.num_entries()} entries)"
