"""Chip power-delivery network as a 2-D resistive mesh with an inductive term.

Nodes form a rows x cols grid.  Orthogonal neighbours are joined by r_mesh,
every perimeter node is tied to the external supply through r_supply, and each
node carries l_node of series inductance that only matters when its drawn
current changes between solves.

The steady state solver is plain red-black Gauss-Seidel relaxation: number
crunching stays inside numpy, there is no linear-algebra dependency beyond it,
and the result is deterministic.  Tests check it against a dense direct solve.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, InputError

# Relative residual target for the relaxation loop.  Tighter than the headline
# 1e-9 voltage accuracy on purpose: the KCL residual is measured in amperes and
# has to be pushed further down for the voltage error to reach that level.
DEFAULT_TOLERANCE = 1e-12
DEFAULT_MAX_ITERATIONS = 100_000


@dataclass(frozen=True)
class GridSpec:
    """Mesh geometry and electrical constants.

    Defaults are calibration constants tuned for the experiments in this
    package, not measured silicon values.
    """

    rows: int
    cols: int
    r_mesh: float = 0.05
    r_supply: float = 0.1
    l_node: float = 0.5e-9
    v_supply: float = 1.33

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise InputError(f"grid must be at least 1x1, got {self.rows}x{self.cols}")
        if not (self.r_mesh > 0 and self.r_supply > 0):
            raise InputError("r_mesh and r_supply must be positive")
        if self.l_node < 0:
            raise InputError("l_node must be non-negative")
        if not self.v_supply > 0:
            raise InputError("v_supply must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        mask[0, :] = mask[-1, :] = True
        mask[:, 0] = mask[:, -1] = True
        return mask


@dataclass(frozen=True)
class CurrentMap:
    """Per-node drawn current in amperes.  Loads only draw, so entries are >= 0."""

    currents: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.currents, dtype=float)
        if arr.ndim != 2:
            raise InputError("current map must be a 2-D array")
        if not np.all(np.isfinite(arr)):
            raise InputError("current map contains non-finite entries")
        if np.any(arr < 0):
            raise InputError("current map entries must be non-negative")
        object.__setattr__(self, "currents", arr)


@dataclass(frozen=True)
class VoltageField:
    """Per-node voltage in volts at one simulation instant."""

    voltages: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        arr = np.asarray(self.voltages, dtype=float)
        if arr.ndim != 2:
            raise InputError("voltage field must be a 2-D array")
        if not np.all(np.isfinite(arr)):
            raise InputError("voltage field contains non-finite entries")
        object.__setattr__(self, "voltages", arr)


def _neighbour_sum(v: np.ndarray) -> np.ndarray:
    out = np.zeros_like(v)
    out[1:, :] += v[:-1, :]
    out[:-1, :] += v[1:, :]
    out[:, 1:] += v[:, :-1]
    out[:, :-1] += v[:, 1:]
    return out


def relax(
    grid: GridSpec,
    loads: np.ndarray,
    tolerance: float = DEFAULT_TOLERANCE,
    max_iterations: int = DEFAULT_MAX_ITERATIONS,
) -> np.ndarray:
    """Red-black Gauss-Seidel solve of the mesh KCL system, raw-array interface.

    Returns node voltages with the maximum KCL residual driven below
    ``tolerance`` relative to the right-hand-side magnitude.
    """
    g_mesh = 1.0 / grid.r_mesh
    g_sup = 1.0 / grid.r_supply
    boundary = grid.boundary_mask()

    degree = np.zeros(grid.shape)
    degree[1:, :] += 1
    degree[:-1, :] += 1
    degree[:, 1:] += 1
    degree[:, :-1] += 1
    diag = degree * g_mesh + boundary * g_sup

    rhs = boundary * (g_sup * grid.v_supply) - loads
    scale = np.max(np.abs(rhs))

    ii, jj = np.indices(grid.shape)
    red = (ii + jj) % 2 == 0
    black = ~red

    v = np.full(grid.shape, grid.v_supply)
    for _ in range(max_iterations):
        v[red] = ((rhs + g_mesh * _neighbour_sum(v)) / diag)[red]
        v[black] = ((rhs + g_mesh * _neighbour_sum(v)) / diag)[black]
        residual = rhs + g_mesh * _neighbour_sum(v) - diag * v
        if np.max(np.abs(residual)) <= tolerance * scale:
            return v
    raise ConvergenceError(
        f"mesh solve did not reach tolerance {tolerance:g} within "
        f"{max_iterations} iterations (residual {np.max(np.abs(residual)):.3e} "
        f"relative to {scale:.3e})"
    )


def solve_dc(
    grid: GridSpec,
    loads: CurrentMap,
    timestamp: float = 0.0,
    tolerance: float = DEFAULT_TOLERANCE,
    max_iterations: int = DEFAULT_MAX_ITERATIONS,
) -> VoltageField:
    """Steady-state node voltages for the given drawn currents.

    Satisfies KCL at every node to within the configured residual tolerance.
    With zero load every node sits exactly at v_supply.
    """
    if loads.currents.shape != grid.shape:
        raise InputError(
            f"current map shape {loads.currents.shape} does not match grid {grid.shape}"
        )
    v = relax(grid, loads.currents, tolerance, max_iterations)
    if np.any(v <= 0):
        raise InputError(
            "loads drive at least one node voltage to zero or below; "
            "outside the validity range of the mesh model"
        )
    return VoltageField(v, timestamp=timestamp)


def transient_step(
    grid: GridSpec,
    v_prev: VoltageField,
    loads_prev: CurrentMap,
    loads_now: CurrentMap,
    dt: float,
) -> VoltageField:
    """One quasi-static step: DC solve for the new loads plus an L*di/dt dip.

    Nodes whose current did not change see the pure DC solution.  Voltages
    are floored at 0 V; the oscillator layer treats such nodes as stalled.
    """
    if dt <= 0:
        raise InputError("transient step duration must be positive")
    if loads_prev.currents.shape != grid.shape or loads_now.currents.shape != grid.shape:
        raise InputError("current map shape does not match grid")
    dc = solve_dc(grid, loads_now)
    di_dt = (loads_now.currents - loads_prev.currents) / dt
    v = dc.voltages - grid.l_node * di_dt
    return VoltageField(np.maximum(v, 0.0), timestamp=v_prev.timestamp + dt)
