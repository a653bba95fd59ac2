"""Affine maps on the normalized [0,1]^2 canvas.

Used to express spatial edits of attention maps: translate an object's
mask, scale it about a point, or compose several such moves.  A
transform describes what happens to content; resampling inverts it to
find source coordinates.
"""

import math

import numpy as np


class Affine2D:
    """p -> M p + b on normalized coordinates (x right, y down)."""

    def __init__(self, m=((1.0, 0.0), (0.0, 1.0)), b=(0.0, 0.0)):
        self.m = np.array(m, dtype=np.float64).reshape(2, 2)
        self.b = np.array(b, dtype=np.float64).reshape(2)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def translate(cls, dx, dy):
        return cls(b=(dx, dy))

    @classmethod
    def scale(cls, sx, sy=None, about=(0.5, 0.5)):
        """Scale content by (sx, sy) about the point `about`."""
        if sy is None:
            sy = sx
        ax, ay = about
        m = ((sx, 0.0), (0.0, sy))
        b = (ax - sx * ax, ay - sy * ay)
        return cls(m=m, b=b)

    @classmethod
    def rotate(cls, theta, about=(0.5, 0.5)):
        c, s = math.cos(theta), math.sin(theta)
        ax, ay = about
        m = ((c, -s), (s, c))
        b = (ax - c * ax + s * ay, ay - s * ax - c * ay)
        return cls(m=m, b=b)

    def compose(self, other):
        """Return self applied after `other`."""
        return Affine2D(self.m @ other.m, self.m @ other.b + self.b)

    def __matmul__(self, other):
        return self.compose(other)

    def inverse(self):
        det = self.m[0, 0] * self.m[1, 1] - self.m[0, 1] * self.m[1, 0]
        if abs(det) < 1e-12:
            raise ValueError("transform is not invertible")
        inv = np.array([[self.m[1, 1], -self.m[0, 1]],
                        [-self.m[1, 0], self.m[0, 0]]]) / det
        return Affine2D(inv, -inv @ self.b)

    def apply(self, x, y):
        """Map coordinate arrays (x, y); returns transformed (x, y)."""
        xo = self.m[0, 0] * x + self.m[0, 1] * y + self.b[0]
        yo = self.m[1, 0] * x + self.m[1, 1] * y + self.b[1]
        return xo, yo

    def to_dict(self):
        return {"m": self.m.tolist(), "b": self.b.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(m=d["m"], b=d["b"])
