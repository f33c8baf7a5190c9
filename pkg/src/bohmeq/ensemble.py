"""Populations of configurations and their recorded histories."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class Ensemble:
    """``N`` configuration points, shape ``(N, dim)``.

    ``positions`` live in the fundamental domain; ``unwrapped`` keeps the
    continuous history across the periodic seam. ``flags`` marks members
    that became node-degenerate during evolution.
    """

    positions: np.ndarray
    seed: int | None = None
    unwrapped: np.ndarray | None = None
    flags: np.ndarray | None = None

    def __post_init__(self):
        pos = np.array(self.positions, dtype=float)
        if pos.ndim == 1:
            pos = pos[:, None]
        if pos.ndim != 2 or pos.shape[0] < 1:
            raise ValueError("an ensemble needs at least one member")
        unwrapped = pos.copy() if self.unwrapped is None else np.array(self.unwrapped, dtype=float).reshape(pos.shape)
        flags = np.zeros(pos.shape[0], dtype=bool) if self.flags is None else np.array(self.flags, dtype=bool)
        for arr in (pos, unwrapped, flags):
            arr.flags.writeable = False
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "unwrapped", unwrapped)
        object.__setattr__(self, "flags", flags)

    def __len__(self):
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    @property
    def excluded_fraction(self) -> float:
        return float(self.flags.mean())

    def subset(self, index) -> "Ensemble":
        return Ensemble(self.positions[index], self.seed, self.unwrapped[index], self.flags[index])

    def to_csv(self, path) -> None:
        header = ",".join(f"Q_{k + 1}" for k in range(self.dim))
        np.savetxt(path, self.positions, delimiter=",", header=header, comments="", fmt="%.17g")


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Positions of one or more members recorded at increasing ``times``.

    ``positions`` and ``unwrapped`` have shape ``(n_times, N, dim)``.
    """

    times: np.ndarray
    positions: np.ndarray
    unwrapped: np.ndarray
    flags: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or (t.size > 1 and np.any(np.diff(t) <= 0)):
            raise ValueError("trajectory times must be strictly increasing")
        if self.positions.shape[0] != t.size:
            raise ValueError("one position row per recorded time is required")

    @property
    def n_members(self) -> int:
        return self.positions.shape[1]

    def member(self, i: int) -> "Trajectory":
        return Trajectory(
            self.times, self.positions[:, i : i + 1], self.unwrapped[:, i : i + 1], self.flags[i : i + 1]
        )

    def to_csv(self, path, member: int = 0) -> None:
        dim = self.positions.shape[2]
        header = ",".join(["t"] + [f"Q_{k + 1}" for k in range(dim)])
        table = np.column_stack((self.times, self.positions[:, member, :]))
        np.savetxt(path, table, delimiter=",", header=header, comments="", fmt="%.17g")
