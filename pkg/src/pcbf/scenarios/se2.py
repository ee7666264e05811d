"""Planar rigid-body frames: the symmetry group of the rover dynamics.

An element carries a translation and a heading rotation. Acting on a rover
state moves the pose components (x1, x2, x4) rigidly and leaves the forward
speed x3 untouched, which is exactly the coordinate change the bicycle-like
dynamics are invariant under.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Se2Element:
    """Pose (p, psi); `act` is the group action on 4-state rover poses."""

    p: np.ndarray
    psi: float

    def __post_init__(self):
        object.__setattr__(self, "p", np.asarray(self.p, float).reshape(2))
        object.__setattr__(self, "psi", float(self.psi))

    @staticmethod
    def identity() -> "Se2Element":
        return Se2Element(np.zeros(2), 0.0)

    def rotation(self):
        c, s = np.cos(self.psi), np.sin(self.psi)
        return np.array([[c, -s], [s, c]])

    def act(self, x):
        x = np.asarray(x, float)
        c, s = np.cos(self.psi), np.sin(self.psi)
        return np.array([
            c * x[0] - s * x[1] + self.p[0],
            s * x[0] + c * x[1] + self.p[1],
            x[2],
            x[3] + self.psi,
        ])

    def inverse_act(self, x):
        """Apply the inverse element without constructing it."""
        x = np.asarray(x, float)
        c, s = np.cos(self.psi), np.sin(self.psi)
        dx, dy = x[0] - self.p[0], x[1] - self.p[1]
        return np.array([c * dx + s * dy, -s * dx + c * dy, x[2],
                         x[3] - self.psi])

    def compose(self, other: "Se2Element") -> "Se2Element":
        """self∘other: apply `other` first, then `self`."""
        return Se2Element(self.p + self.rotation() @ other.p,
                          self.psi + other.psi)

    def inverse(self) -> "Se2Element":
        return Se2Element(-(self.rotation().T @ self.p), -self.psi)
