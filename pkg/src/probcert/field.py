"""Gridded safe-probability fields with spline value/gradient/Hessian access."""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from scipy.interpolate import NdBSpline, make_interp_spline

from .errors import ConfigurationError, OutOfHull
from .sde import AugmentedState

MAGIC = "PROBCERT-FIELD"
FORMAT_VERSION = 1
_HULL_TOL = 1e-12


def z_axis_names(n: int) -> list[str]:
    """Names of the augmented-state coordinates (T, L, phi, x0..x{n-1})."""
    return ["T", "L", "phi"] + [f"x{i}" for i in range(n)]


@dataclass
class SafeProbField:
    """Estimate of F(z) on an axis-aligned grid over a subset of z-coordinates.

    Coordinates of z that are not among ``axes`` are held at the values in
    ``fixed`` (if recorded); the field is constant along them, so their
    derivative components are zero.
    """

    axes: tuple
    grid: tuple
    values: np.ndarray
    stderr: np.ndarray
    n: int
    interp_order: str = "cubic"
    fixed: dict = dc_field(default_factory=dict)
    provenance: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        self.axes = tuple(self.axes)
        self.grid = tuple(np.asarray(g, dtype=float) for g in self.grid)
        names = z_axis_names(self.n)
        for a in self.axes:
            if a not in names:
                raise ConfigurationError(f"unknown field axis {a!r}")
        if len(self.grid) != len(self.axes):
            raise ConfigurationError("one grid vector per axis is required")
        shape = tuple(len(g) for g in self.grid)
        for g in self.grid:
            if np.any(np.diff(g) <= 0):
                raise ConfigurationError("grid axes must be strictly increasing")
        values = np.asarray(self.values, dtype=float).reshape(shape)
        self.values = np.clip(values, 0.0, 1.0)
        self.clamped_nodes = int(np.count_nonzero(values != self.values))
        self.stderr = np.broadcast_to(np.asarray(self.stderr, dtype=float), shape).copy()
        if self.interp_order not in ("linear", "cubic"):
            raise ConfigurationError("interp_order must be 'linear' or 'cubic'")
        k = 3 if self.interp_order == "cubic" else 1
        if any(len(g) < k + 1 for g in self.grid):
            raise ConfigurationError(f"{self.interp_order} interpolation needs at least {k + 1} nodes per axis")
        coef = self.values
        knots = []
        for ax, g in enumerate(self.grid):
            spl = make_interp_spline(g, coef, k=k, axis=ax)
            coef = spl.c
            # make_interp_spline moves the interpolation axis to the front
            coef = np.moveaxis(coef, 0, ax)
            knots.append(spl.t)
        self._spline = NdBSpline(tuple(knots), coef, k)
        self._index = [names.index(a) for a in self.axes]

    # -- geometry ---------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def lower(self) -> np.ndarray:
        return np.array([g[0] for g in self.grid])

    @property
    def upper(self) -> np.ndarray:
        return np.array([g[-1] for g in self.grid])

    def coords(self, Z: np.ndarray) -> np.ndarray:
        """Project augmented-state rows (B, n+3) onto the field's axes."""
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        return Z[:, self._index]

    def inside(self, P: np.ndarray) -> np.ndarray:
        return np.all((P >= self.lower - _HULL_TOL) & (P <= self.upper + _HULL_TOL), axis=1)

    def clamp(self, P: np.ndarray) -> np.ndarray:
        return np.clip(P, self.lower, self.upper)

    # -- evaluation -------------------------------------------------------
    def _eval(self, P: np.ndarray, nu) -> np.ndarray:
        return np.asarray(self._spline(P, nu=np.asarray(nu, dtype=np.int64)), dtype=float)

    def value_at(self, P: np.ndarray) -> np.ndarray:
        """Interpolated value at field coordinates P (B, d), clamped to [0, 1]."""
        P = np.atleast_2d(np.asarray(P, dtype=float))
        return np.clip(self._eval(P, [0] * len(self.axes)), 0.0, 1.0)

    def query_batch(self, Z: np.ndarray, clamp: bool = False):
        """F, gradient (B, n+3) and Hessian (B, n+3, n+3) at augmented states Z.

        With ``clamp`` set, rows outside the hull are evaluated at the nearest
        in-hull point; otherwise they raise OutOfHull.
        """
        P = self.coords(Z)
        inside = self.inside(P)
        if not inside.all():
            if not clamp:
                bad = int(np.flatnonzero(~inside)[0])
                raise OutOfHull(
                    f"query {dict(zip(self.axes, P[bad]))} is outside the field grid",
                    nearest=self.clamp(P[bad:bad + 1])[0],
                )
            P = self.clamp(P)
        B, d = P.shape
        dim = self.n + 3
        F = np.clip(self._eval(P, [0] * d), 0.0, 1.0)
        grad = np.zeros((B, dim))
        hess = np.zeros((B, dim, dim))
        for a in range(d):
            nu = [0] * d
            nu[a] = 1
            grad[:, self._index[a]] = self._eval(P, nu)
            for b in range(a, d):
                nu2 = [0] * d
                nu2[a] += 1
                nu2[b] += 1
                h = self._eval(P, nu2)
                hess[:, self._index[a], self._index[b]] = h
                hess[:, self._index[b], self._index[a]] = h
        return F, grad, hess

    def query(self, z: AugmentedState):
        """(F, grad, hess) at one augmented state; raises OutOfHull outside the grid."""
        F, g, h = self.query_batch(z.as_vector()[None, :])
        return float(F[0]), g[0], h[0]

    # -- persistence ------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format": MAGIC,
            "version": FORMAT_VERSION,
            "n": self.n,
            "axes": list(self.axes),
            "grid": [g.tolist() for g in self.grid],
            "shape": list(self.shape),
            "values": self.values.ravel().tolist(),
            "stderr": self.stderr.ravel().tolist(),
            "interp_order": self.interp_order,
            "fixed": self.fixed,
            "provenance": self.provenance,
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        body = json.dumps(self.to_dict(), indent=1, sort_keys=True)
        path.write_text(f"{MAGIC} {FORMAT_VERSION}\n{body}\n")
        return path

    @classmethod
    def from_dict(cls, d: dict) -> "SafeProbField":
        if d.get("format") != MAGIC:
            raise ConfigurationError("not a probcert field document")
        if d.get("version") != FORMAT_VERSION:
            raise ConfigurationError(f"unsupported field format version {d.get('version')}")
        shape = tuple(d["shape"])
        return cls(
            axes=tuple(d["axes"]),
            grid=tuple(np.array(g) for g in d["grid"]),
            values=np.array(d["values"]).reshape(shape),
            stderr=np.array(d["stderr"]).reshape(shape),
            n=int(d["n"]),
            interp_order=d["interp_order"],
            fixed=d.get("fixed", {}),
            provenance=d.get("provenance", {}),
        )

    @classmethod
    def load(cls, path) -> "SafeProbField":
        text = Path(path).read_text()
        header, _, body = text.partition("\n")
        parts = header.split()
        if len(parts) != 2 or parts[0] != MAGIC:
            raise ConfigurationError(f"{path}: missing {MAGIC} header")
        if int(parts[1]) != FORMAT_VERSION:
            raise ConfigurationError(f"{path}: unsupported field format version {parts[1]}")
        return cls.from_dict(json.loads(body))
