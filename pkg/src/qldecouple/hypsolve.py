"""Desk-scale 1D finite-volume harness demonstrating decoupling.

Solves the coupled system and, separately, a block-triangular system in
hierarchy order (each block reads the already-updated lower blocks frozen at
the matching time level), so the two solutions can be compared through the
decoupling map.  First-order schemes only: Lax-Friedrichs and characteristic
upwinding.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import exprlang as ex
from .errors import BlowupDetected, CFLViolation, GridMismatch, NonHyperbolic, SchemaError
from .system import QuasilinearSystem

SCHEMES = ("laxFriedrichs", "upwindCharacteristic")
BLOWUP_FACTOR = 1e6


@dataclass
class GridSolution:
    x: np.ndarray
    times: list
    data: list                  # per time level: array (n, N)
    scheme: str
    cfl: float
    boundary: str
    meta: dict = field(default_factory=dict)

    @property
    def n_cells(self):
        return len(self.x)

    def to_csv_rows(self, level):
        rows = []
        for i, xi in enumerate(self.x):
            rows.append([float(xi)] + [float(v) for v in self.data[level][:, i]])
        return rows


def _grid(sys_, n_cells):
    lo, hi = sys_.domain["x"]
    dx = (hi - lo) / n_cells
    x = lo + (np.arange(n_cells) + 0.5) * dx
    return x, dx


def _initial_values(sys_, initial, x):
    if isinstance(initial, np.ndarray):
        if initial.shape != (sys_.n, len(x)):
            raise SchemaError("initial data array has the wrong shape")
        return initial.astype(float).copy()
    out = np.empty((sys_.n, len(x)))
    symbols = {"x", "pi"} | set(sys_.parameters)
    binding = {"pi": np.pi, **sys_.parameters}
    for i, text in enumerate(initial):
        e = text if isinstance(text, ex.Expr) else ex.parse(str(text), symbols)
        fn = ex.compile_expression(ex.substitute(e, binding), ["x"])
        out[i] = fn(x)
    return out


def _shift(U, k, boundary):
    if boundary == "periodic":
        return np.roll(U, -k, axis=1)
    out = np.roll(U, -k, axis=1)
    if k > 0:
        out[:, -k:] = U[:, -1:]
    elif k < 0:
        out[:, :-k] = U[:, :1]
    return out


def _eig_batch(sys_, t, U):
    A = sys_.eval_matrix_batch(t, 0.0, U)       # (n, n, N)
    A = np.moveaxis(A, 2, 0)                    # (N, n, n)
    lam, V = np.linalg.eig(A)
    if np.max(np.abs(lam.imag)) > 1e-8 * (1.0 + np.max(np.abs(lam.real))):
        raise NonHyperbolic("complex characteristic speeds on the realized states")
    return lam.real, V.real, A


def _check_state(U, initial_scale, t):
    if not np.all(np.isfinite(U)):
        raise BlowupDetected(f"non-finite state at t = {t:.6g}")
    if np.max(np.abs(U)) > BLOWUP_FACTOR * (1.0 + initial_scale):
        raise BlowupDetected(f"state magnitude exceeded blowup threshold at t = {t:.6g}")


def solve_coupled(sys_: QuasilinearSystem, initial, n_cells, t_end,
                  scheme="laxFriedrichs", cfl=0.9, boundary="periodic",
                  t0=0.0) -> GridSolution:
    """March u_t + A(u) u_x = g(u) to t_end, first-order accurate."""
    if scheme not in SCHEMES:
        raise SchemaError(f"unknown scheme '{scheme}'")
    if not 0.0 < cfl <= 1.0:
        raise CFLViolation(f"cfl must lie in (0, 1], got {cfl}")
    x, dx = _grid(sys_, n_cells)
    U = _initial_values(sys_, initial, x)
    initial_scale = float(np.max(np.abs(U)))
    times = [t0]
    data = [U.copy()]
    t = t0
    guard = 0
    while t < t_end - 1e-14:
        lam, V, A = _eig_batch(sys_, t, U)
        lam_max = float(np.max(np.abs(lam)))
        dt = t_end - t if lam_max == 0.0 else min(cfl * dx / lam_max, t_end - t)
        if dt <= 0:
            break
        U = _step(sys_, U, A, lam, V, dt, dx, scheme, boundary, t)
        t += dt
        _check_state(U, initial_scale, t)
        guard += 1
        if guard > 200000:
            raise BlowupDetected("step count safety limit reached")
    times.append(t)
    data.append(U.copy())
    return GridSolution(x=x, times=times, data=data, scheme=scheme, cfl=cfl,
                        boundary=boundary,
                        meta={"steps": guard, "cells": n_cells, "tEnd": t_end})


def _step(sys_, U, A, lam, V, dt, dx, scheme, boundary, t):
    g = sys_.eval_source_batch(t, 0.0, U) if not sys_.homogeneous else None
    Up = _shift(U, 1, boundary)
    Um = _shift(U, -1, boundary)
    if scheme == "laxFriedrichs":
        DU = (Up - Um) / (2.0 * dx)                       # (n, N)
        AU = np.einsum("Nij,jN->iN", A, DU)
        out = 0.5 * (Up + Um) - dt * AU
    else:
        L = np.linalg.inv(V)                               # (N, n, n)
        Dp = (Up - U) / dx
        Dm = (U - Um) / dx
        ap = np.einsum("Nmj,jN->Nm", L, Dp)
        am = np.einsum("Nmj,jN->Nm", L, Dm)
        alpha = np.where(lam > 0.0, am, ap)                # (N, m)
        flux = np.einsum("Nim,Nm->iN", V, lam * alpha)
        out = U - dt * flux
    if g is not None:
        out = out + dt * g
    return out


def _validate_block_triangular(sys_, sizes, n_probe=16):
    bounds = np.cumsum([0] + list(sizes))
    rng = np.random.default_rng(0)
    lows = np.array([sys_.domain[nm][0] for nm in sys_.states])
    highs = np.array([sys_.domain[nm][1] for nm in sys_.states])
    for _ in range(n_probe):
        u = lows + rng.random(sys_.n) * (highs - lows)
        A = sys_.eval_matrix(0.0, 0.0, u)
        for bi in range(len(sizes) - 1):
            r0, r1 = bounds[bi], bounds[bi + 1]
            if np.max(np.abs(A[r0:r1, r1:])) > 1e-12 * (1 + np.abs(A).max()):
                raise SchemaError("hierarchical solve needs a block lower-triangular system")


def solve_hierarchical(sys_: QuasilinearSystem, sizes, initial, n_cells, t_end,
                       scheme="laxFriedrichs", cfl=0.9, boundary="periodic",
                       t0=0.0) -> GridSolution:
    """Solve a block lower-triangular system block by block.

    All blocks advance with the global CFL time step; block i reads blocks
    < i frozen at the step's starting time level, both for matrix entries and
    for the cross-derivative terms moved to the right-hand side.
    """
    if scheme not in SCHEMES:
        raise SchemaError(f"unknown scheme '{scheme}'")
    if not 0.0 < cfl <= 1.0:
        raise CFLViolation(f"cfl must lie in (0, 1], got {cfl}")
    if sum(sizes) != sys_.n:
        raise SchemaError("block sizes must sum to the system dimension")
    _validate_block_triangular(sys_, sizes)
    bounds = np.cumsum([0] + list(sizes))
    x, dx = _grid(sys_, n_cells)
    U = _initial_values(sys_, initial, x)
    initial_scale = float(np.max(np.abs(U)))
    times = [t0]
    data = [U.copy()]
    t = t0
    guard = 0
    while t < t_end - 1e-14:
        lam_full, _, A_full = _eig_batch(sys_, t, U)
        lam_max = float(np.max(np.abs(lam_full)))
        dt = t_end - t if lam_max == 0.0 else min(cfl * dx / lam_max, t_end - t)
        if dt <= 0:
            break
        frozen = U.copy()
        g_full = sys_.eval_source_batch(t, 0.0, frozen) if not sys_.homogeneous else None
        new = U.copy()
        for bi in range(len(sizes)):
            r0, r1 = bounds[bi], bounds[bi + 1]
            Ab = A_full[:, r0:r1, r0:r1]
            Ub = frozen[r0:r1]
            # cross-flux from already-known lower blocks, central differences
            rhs = np.zeros_like(Ub)
            if r0 > 0:
                lowp = _shift(frozen[:r0], 1, boundary)
                lowm = _shift(frozen[:r0], -1, boundary)
                Dlow = (lowp - lowm) / (2.0 * dx)
                rhs -= np.einsum("Nij,jN->iN", A_full[:, r0:r1, :r0], Dlow)
            if g_full is not None:
                rhs += g_full[r0:r1]
            lam_b, V_b = np.linalg.eig(Ab)
            lam_b, V_b = lam_b.real, V_b.real
            Up = _shift(Ub, 1, boundary)
            Um = _shift(Ub, -1, boundary)
            if scheme == "laxFriedrichs":
                DU = (Up - Um) / (2.0 * dx)
                AU = np.einsum("Nij,jN->iN", Ab, DU)
                nb = 0.5 * (Up + Um) - dt * AU + dt * rhs
            else:
                Lb = np.linalg.inv(V_b)
                ap = np.einsum("Nmj,jN->Nm", Lb, (Up - Ub) / dx)
                am = np.einsum("Nmj,jN->Nm", Lb, (Ub - Um) / dx)
                alpha = np.where(lam_b > 0.0, am, ap)
                flux = np.einsum("Nim,Nm->iN", V_b, lam_b * alpha)
                nb = Ub - dt * flux + dt * rhs
            new[r0:r1] = nb
        U = new
        t += dt
        _check_state(U, initial_scale, t)
        guard += 1
        if guard > 200000:
            raise BlowupDetected("step count safety limit reached")
    times.append(t)
    data.append(U.copy())
    return GridSolution(x=x, times=times, data=data, scheme=scheme, cfl=cfl,
                        boundary=boundary,
                        meta={"steps": guard, "cells": n_cells, "tEnd": t_end,
                              "blocks": list(sizes)})


def compare_solutions(a: GridSolution, b: GridSolution, mapping=None,
                      map_states=None, parameters=None):
    """Discrete L1/Linf norms of (mapped a) - b per stored time level."""
    if a.n_cells != b.n_cells or len(a.times) != len(b.times):
        raise GridMismatch("solutions live on different grids or time level sets")
    if not np.allclose(a.x, b.x):
        raise GridMismatch("cell centers differ")
    for ta, tb in zip(a.times, b.times):
        if abs(ta - tb) > 1e-10 * (1.0 + abs(tb)):
            raise GridMismatch("time levels differ")
    map_fns = None
    if mapping is not None:
        parameters = parameters or {}
        comps = []
        for e in mapping:
            if not isinstance(e, ex.Expr):
                e = ex.parse(str(e), set(map_states) | set(parameters))
            comps.append(ex.substitute(e, parameters))
        map_fns = [ex.compile_expression(e, list(map_states)) for e in comps]
    dx = float(a.x[1] - a.x[0])
    out = []
    for level in range(len(a.times)):
        ua = a.data[level]
        if map_fns is not None:
            ua = np.stack([fn(*ua) for fn in map_fns])
        diff = ua - b.data[level]
        out.append({
            "t": float(a.times[level]),
            "L1": [float(np.sum(np.abs(d)) * dx) for d in diff],
            "Linf": [float(np.max(np.abs(d))) for d in diff],
            "L1total": float(np.sum(np.abs(diff)) * dx),
            "LinfTotal": float(np.max(np.abs(diff))),
        })
    return out


def burgers_exact(u0_fn, x, t, length=None, tol=1e-12, max_iter=500):
    """Pre-shock Burgers solution by characteristic tracing: solves
    u = u0(x - u t) by fixed-point iteration (contraction for t |u0'| < 1)."""
    x = np.asarray(x, dtype=float)
    u = u0_fn(x)
    for _ in range(max_iter):
        arg = x - u * t
        if length is not None:
            lo = x[0] - 0.5 * (x[1] - x[0])
            arg = lo + np.mod(arg - lo, length)
        nxt = u0_fn(arg)
        if np.max(np.abs(nxt - u)) <= tol:
            return nxt
        u = nxt
    return u


def solution_meta_json(sol: GridSolution, norms=None, **kw):
    meta = {
        "scheme": sol.scheme,
        "cfl": sol.cfl,
        "boundary": sol.boundary,
        "cells": sol.n_cells,
        "times": [float(t) for t in sol.times],
        "meta": sol.meta,
    }
    if norms is not None:
        meta["norms"] = norms
    return json.dumps(meta, sort_keys=True, **kw)
