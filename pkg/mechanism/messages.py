"""
Message profiles exchanged by community users.

Arrays are user-major and 0-based. Distributed summaries are keyed by the
ordered pair (sender, neighbor) and hold one vector per pair.
"""

from dataclasses import dataclass, field, replace
from typing import Dict, Mapping, Tuple

import numpy as np

from mechanism.errors import DimensionMismatch, InvalidParameter

Pair = Tuple[int, int]


def _frozen_array(values, ndim: int, name: str) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if arr.ndim != ndim:
        raise DimensionMismatch(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


def _check_nonnegative(arr: np.ndarray, name: str) -> None:
    if np.any(arr < 0) or np.any(np.isnan(arr)):
        raise InvalidParameter(f"{name} messages must be nonnegative")


@dataclass(frozen=True, eq=False)
class CentralMessageProfile:
    """
    Messages (y, q, s, beta) of every user in the centralized mechanism.

    y, s, beta have shape (N, T) and q has shape (N, L). beta[i] is user i's
    prediction of user (i+1) mod N's demand.
    """
    y: np.ndarray
    q: np.ndarray
    s: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        for name, ndim in (('y', 2), ('q', 2), ('s', 2), ('beta', 2)):
            object.__setattr__(self, name, _frozen_array(getattr(self, name), ndim, name))
        n_users, horizon = self.y.shape
        if self.s.shape != (n_users, horizon) or self.beta.shape != (n_users, horizon):
            raise DimensionMismatch(
                f"s and beta must match y's shape {self.y.shape}, got {self.s.shape} and {self.beta.shape}")
        if self.q.shape[0] != n_users:
            raise DimensionMismatch(f"q must have {n_users} rows, got {self.q.shape[0]}")
        _check_nonnegative(self.q, 'q')
        _check_nonnegative(self.s, 's')

    @property
    def n_users(self) -> int:
        return self.y.shape[0]

    @property
    def horizon(self) -> int:
        return self.y.shape[1]

    @property
    def n_constraints(self) -> int:
        return self.q.shape[1]

    def check_against(self, n_users: int, horizon: int, n_constraints: int) -> None:
        expected = (n_users, horizon, n_constraints)
        if (self.n_users, self.horizon, self.n_constraints) != expected:
            raise DimensionMismatch(
                f"Profile is {self.n_users} users x {self.horizon} slots x {self.n_constraints} "
                f"constraints, instance is {expected[0]} x {expected[1]} x {expected[2]}")

    def with_entry(self, name: str, index: Tuple[int, ...], value: float) -> 'CentralMessageProfile':
        """Copy of the profile with one array entry replaced."""
        arr = np.array(getattr(self, name))
        arr[index] = value
        return replace(self, **{name: arr})

    def equals(self, other: 'CentralMessageProfile') -> bool:
        return all(np.array_equal(getattr(self, k), getattr(other, k)) for k in ('y', 'q', 's', 'beta'))


@dataclass(frozen=True, eq=False)
class DistMessageProfile:
    """
    Messages of the distributed mechanism.

    beta[(i, j)] is user i's prediction of user j's demand for each j with
    phi(j) = i. n_summary[(i, j)] (length L) and nu_summary[(i, j)] (length T)
    summarize, for neighbor j of i, the users reached from i through j.
    """
    y: np.ndarray
    q: np.ndarray
    s: np.ndarray
    beta: Mapping[Pair, np.ndarray] = field(default_factory=dict)
    n_summary: Mapping[Pair, np.ndarray] = field(default_factory=dict)
    nu_summary: Mapping[Pair, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for name in ('y', 'q', 's'):
            object.__setattr__(self, name, _frozen_array(getattr(self, name), 2, name))
        if self.s.shape != self.y.shape or self.q.shape[0] != self.y.shape[0]:
            raise DimensionMismatch("y, q and s must describe the same users and slots")
        _check_nonnegative(self.q, 'q')
        _check_nonnegative(self.s, 's')
        T, L = self.y.shape[1], self.q.shape[1]
        for name, length in (('beta', T), ('n_summary', L), ('nu_summary', T)):
            frozen: Dict[Pair, np.ndarray] = {}
            for key, vec in getattr(self, name).items():
                arr = _frozen_array(vec, 1, f"{name}{key}")
                if arr.size != length:
                    raise DimensionMismatch(f"{name}{key} has length {arr.size}, expected {length}")
                frozen[(int(key[0]), int(key[1]))] = arr
            object.__setattr__(self, name, frozen)

    @property
    def n_users(self) -> int:
        return self.y.shape[0]

    @property
    def horizon(self) -> int:
        return self.y.shape[1]

    @property
    def n_constraints(self) -> int:
        return self.q.shape[1]

    def with_entry(self, name: str, index, value: float) -> 'DistMessageProfile':
        """
        Copy with one entry replaced.

        For array fields `index` is an array index; for the keyed fields it is
        (pair, position).
        """
        if name in ('y', 'q', 's'):
            arr = np.array(getattr(self, name))
            arr[index] = value
            return replace(self, **{name: arr})
        pair, position = index
        table = {k: np.array(v) for k, v in getattr(self, name).items()}
        table[pair][position] = value
        return replace(self, **{name: table})
