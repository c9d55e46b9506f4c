"""C1 piecewise-quadratic interpolation with breakpoints between the data points."""

from __future__ import annotations

import numpy as np


class QuadraticSpline:
    """Interpolating quadratic spline ``y = f(x)`` through ``(x_i, y_i)``.

    Breakpoints sit at the midpoints of consecutive data abscissae, except
    that the first and last two intervals are merged (not-a-knot ends), so
    ``n`` points give ``n - 2`` pieces.  On piece ``j`` the spline is
    ``y_j + m_j (x - x_j) + c_j (x - x_j)**2`` with ``x_j`` the breakpoint.
    Midpoint breakpoints keep the system diagonally dominant; knots at the
    data points instead admit an alternating error mode.
    """

    def __init__(self, x, y, breakpoints=None):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if x.ndim != 1 or x.shape != y.shape:
            raise ValueError("x and y must be 1-D arrays of equal length")
        n = len(x)
        if n < 3:
            raise ValueError("need at least 3 points")
        if np.any(np.diff(x) <= 0):
            raise ValueError("x must be strictly increasing")
        if breakpoints is None:
            mid = 0.5 * (x[1:] + x[:-1])
            breakpoints = np.concatenate(([x[0]], mid[1:-1], [x[-1]]))
        b = np.asarray(breakpoints, dtype=np.float64)
        p = len(b) - 1
        if p + 2 != n:
            raise ValueError("need exactly n - 1 breakpoints")

        # unknowns: values v_0..v_p then slopes s_0..s_p at the breakpoints
        h = np.diff(b)
        A = np.zeros((2 * (p + 1), 2 * (p + 1)))
        rhs = np.zeros(2 * (p + 1))
        row = 0
        for j in range(p):            # value continuity across breakpoint j+1
            A[row, j + 1] = 1.0
            A[row, j] = -1.0
            A[row, p + 1 + j] = -0.5 * h[j]
            A[row, p + 2 + j] = -0.5 * h[j]
            row += 1
        piece = np.clip(np.searchsorted(b, x, side="right") - 1, 0, p - 1)
        for xi, yi, j in zip(x, y, piece):
            u = xi - b[j]
            w = 0.5 * u * u / h[j]
            A[row, j] = 1.0
            A[row, p + 1 + j] = u - w
            A[row, p + 2 + j] = w
            rhs[row] = yi
            row += 1
        sol = np.linalg.solve(A, rhs)
        self._set(b, sol[:p + 1], sol[p + 1:])
        self.data_x = x
        self.data_y = y

    def _set(self, b, v, s):
        self.x = b
        self.y = v
        self.slopes = s
        self.curv = np.diff(s) / (2.0 * np.diff(b))

    def split(self, at) -> "QuadraticSpline":
        """Same function with an extra breakpoint at ``at`` (no-op if present)."""
        at = float(at)
        if np.any(self.x == at) or not self.x[0] < at < self.x[-1]:
            return self
        j = int(self.piece(at))
        out = object.__new__(QuadraticSpline)
        b = np.insert(self.x, j + 1, at)
        v = np.insert(self.y, j + 1, self(at))
        s = np.insert(self.slopes, j + 1, self(at, 1))
        out._set(b, v, s)
        out.data_x, out.data_y = self.data_x, self.data_y
        return out

    @property
    def n_pieces(self) -> int:
        return len(self.x) - 1

    def piece(self, xq) -> np.ndarray:
        """Index of the piece containing each query (clamped to the ends)."""
        i = np.searchsorted(self.x, xq, side="right") - 1
        return np.clip(i, 0, self.n_pieces - 1)

    def __call__(self, xq, nu: int = 0, piece=None) -> np.ndarray:
        xq = np.asarray(xq, dtype=np.float64)
        i = self.piece(xq) if piece is None else piece
        u = xq - self.x[i]
        m, c = self.slopes[i], self.curv[i]
        if nu == 0:
            return self.y[i] + u * (m + c * u)
        if nu == 1:
            return m + 2.0 * c * u
        if nu == 2:
            return 2.0 * c + 0.0 * u
        return 0.0 * u
