"""Candidate decoupling maps: verification, characteristic flows, and the
numeric flow-coordinate construction of a decoupling map.

A candidate U = H(u) decouples when every component of the leading blocks is
annihilated by the right autovectors of the later blocks; then the
transformed matrix T = (grad H) A (grad H)^-1 is block triangular with the
required dependence.  verify_transform measures both facts on a sample
sweep.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import eigen
from . import exprlang as ex
from .conditions import FrameMachine, PartitionScheme
from .errors import (
    DegenerateSample,
    DomainError,
    HintInconsistent,
    IllConditioned,
    MismatchedSignature,
    SchemaError,
    ShootingFailed,
    SingularCandidate,
)
from .system import QuasilinearSystem, SamplePlan


@dataclass
class TransformCandidate:
    """Components U = H(u) over the state names, with the block partition."""

    components: list
    partition: PartitionScheme
    inverse: list = None
    inverse_states: list = None

    @staticmethod
    def from_strings(texts, partition, states, parameters=None, inverse=None):
        parameters = parameters or {}
        symbols = set(states) | set(parameters)
        comps = [ex.substitute(ex.parse(s, symbols), parameters) for s in texts]
        inv = None
        inv_states = None
        if inverse is not None:
            inv_states = [f"U{i+1}" for i in range(len(texts))]
            inv = [ex.substitute(ex.parse(s, set(inv_states) | set(parameters)), parameters)
                   for s in inverse]
        return TransformCandidate(comps, partition, inv, inv_states)

    @staticmethod
    def from_hints(sys_, mode=None):
        hints = sys_.hints
        if "transform" not in hints:
            raise SchemaError("model supplies no transform hint")
        ph = hints.get("partition")
        if ph is None:
            raise SchemaError("model supplies no partition hint")
        partition = PartitionScheme([list(b) for b in ph["blocks"]],
                                    mode or ph.get("mode", "partial"))
        inv = hints.get("inverse")
        return TransformCandidate(list(hints["transform"]), partition, inv,
                                  hints.get("inverse_states"))


@dataclass
class TransformedSystem:
    """Sampled transformed system with the block-structure certificates."""

    partition: PartitionScheme
    samples: np.ndarray              # (N, 2 + n) admissible rows
    t_matrices: np.ndarray           # (N, n, n)
    u_values: np.ndarray             # (N, n) candidate images H(u)
    jacobian_dets: np.ndarray        # (N,)
    annihilation_max: float
    annihilation_mean: float
    off_block_max: float
    min_abs_det: float
    excluded: int
    degenerate: int
    verdict: str
    block_dependence: dict = None

    def to_dict(self):
        return {
            "mode": self.partition.mode,
            "blocks": [list(b) for b in self.partition.blocks],
            "samples": int(len(self.samples)),
            "excluded": self.excluded,
            "degenerate": self.degenerate,
            "annihilationMax": self.annihilation_max,
            "annihilationMean": self.annihilation_mean,
            "offBlockMax": self.off_block_max,
            "minAbsJacobianDet": self.min_abs_det,
            "blockDependence": self.block_dependence,
            "verdict": self.verdict,
        }

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), sort_keys=True, **kw)


def _off_block_mask(partition: PartitionScheme, n):
    mask = np.zeros((n, n), dtype=bool)
    for i, bi in enumerate(partition.blocks):
        for j, bj in enumerate(partition.blocks):
            off = j > i if partition.mode == "partial" else j != i
            if off:
                for r in bi:
                    for c in bj:
                        mask[r, c] = True
    return mask


def verify_transform(sys_: QuasilinearSystem, candidate: TransformCandidate,
                     plan: SamplePlan = None, tol: float = 1e-6,
                     frame="auto", det_floor=1e-8,
                     singular_fraction=0.01) -> TransformedSystem:
    """Measure annihilation residuals (grad H_a) . r_b, assemble T and its
    off-block norms, certify invertibility, and optionally probe the block
    dependence of T through the inverse map."""
    plan = plan or SamplePlan()
    n = sys_.n
    partition = candidate.partition
    partition.validate_for(n)
    if len(candidate.components) != n:
        raise SchemaError(f"candidate must have {n} components")

    order = sys_.arg_order
    comp_fns = [ex.compile_expression(e, order) for e in candidate.components]
    grad_fns = [[ex.compile_expression(ex.differentiate(e, nm), order)
                 for nm in sys_.states] for e in candidate.components]
    machine = FrameMachine(sys_, frame)
    mask = _off_block_mask(partition, n)
    comp_block = {}
    for bi, blk in enumerate(partition.blocks):
        for pos, slot in enumerate(blk):
            comp_block[slot] = bi

    # annihilation index set: H components of block i against r slots of the
    # blocks that the mode forbids block i to depend on
    pairs = []
    for i, bi in enumerate(partition.blocks):
        for j, bj in enumerate(partition.blocks):
            forbid = j > i if partition.mode == "partial" else j != i
            if forbid:
                pairs.extend((a, b) for a in bi for b in bj)

    rows, t_mats, u_vals, dets = [], [], [], []
    ann_max = ann_mean = 0.0
    ann_count = 0
    off_max = 0.0
    excluded = degenerate = singular = 0
    for row in sys_.sample_points(plan):
        t, x, u = row[0], row[1], row[2:]
        if sys_.is_excluded(t, x, u):
            excluded += 1
            continue
        try:
            f = machine.base(t, x, u)
            A = sys_.eval_matrix(t, x, u)
        except (IllConditioned, HintInconsistent, DomainError, MismatchedSignature):
            degenerate += 1
            continue
        args = (t, x, *u)
        J = np.array([[fn(*args) for fn in grads] for grads in grad_fns])
        det = float(np.linalg.det(J))
        if abs(det) < det_floor:
            singular += 1
            continue
        for a, b in pairs:
            r = float(J[a] @ f.rights[b])
            ann_max = max(ann_max, abs(r))
            ann_mean += abs(r)
            ann_count += 1
        T = J @ A @ np.linalg.inv(J)
        off = float(np.max(np.abs(T[mask]))) if mask.any() else 0.0
        off_max = max(off_max, off)
        rows.append(row)
        t_mats.append(T)
        u_vals.append([fn(*args) for fn in comp_fns])
        dets.append(det)

    admissible = len(rows) + singular
    if admissible and singular > singular_fraction * admissible:
        raise SingularCandidate(
            f"|det grad H| < {det_floor:g} at {singular} of {admissible} samples")
    if not rows:
        raise DegenerateSample("no admissible samples for transform verification")

    block_dep = None
    if candidate.inverse is not None:
        block_dep = _block_dependence(sys_, candidate, rows, comp_fns)

    verdict = "pass" if (ann_max <= tol and off_max <= tol) else "fail"
    return TransformedSystem(
        partition=partition, samples=np.array(rows), t_matrices=np.array(t_mats),
        u_values=np.array(u_vals), jacobian_dets=np.array(dets),
        annihilation_max=ann_max,
        annihilation_mean=(ann_mean / ann_count) if ann_count else 0.0,
        off_block_max=off_max, min_abs_det=float(np.min(np.abs(dets))),
        excluded=excluded, degenerate=degenerate, verdict=verdict,
        block_dependence=block_dep)


def _block_dependence(sys_, candidate, rows, comp_fns, h_rel=1e-5):
    """max |d T^i_j entry / d U_m| for U_m outside the allowed set of block i,
    probed by finite differences through the inverse map u = h(U)."""
    n = sys_.n
    partition = candidate.partition
    inv_states = candidate.inverse_states or [f"U{i+1}" for i in range(n)]
    inv_fns = [ex.compile_expression(e, inv_states) for e in candidate.inverse]

    def t_of_U(U):
        u = np.array([fn(*U) for fn in inv_fns])
        J = None
        args = (0.0, 0.0, *u)
        A = sys_.eval_matrix(0.0, 0.0, u)
        grads = [[ex.differentiate(e, nm) for nm in sys_.states]
                 for e in candidate.components]
        J = np.array([[ex.evaluate(g, dict(zip(sys_.arg_order, args))) for g in row]
                      for row in grads])
        return J @ A @ np.linalg.inv(J)

    out = {}
    probe_rows = rows[:: max(1, len(rows) // 8)]
    for i, bi in enumerate(partition.blocks):
        allowed = set()
        for j, bj in enumerate(partition.blocks):
            dep_ok = j <= i if partition.mode == "partial" else j == i
            if dep_ok:
                allowed.update(bj)
        forbidden = [m for m in range(n) if m not in allowed]
        worst = 0.0
        for row in probe_rows:
            t, x, u = row[0], row[1], row[2:]
            args = (t, x, *u)
            U0 = np.array([fn(*args) for fn in comp_fns])
            for m in forbidden:
                h = h_rel * (1.0 + abs(U0[m]))
                Up, Um = U0.copy(), U0.copy()
                Up[m] += h
                Um[m] -= h
                try:
                    dT = (t_of_U(Up) - t_of_U(Um)) / (2.0 * h)
                except (DomainError, np.linalg.LinAlgError):
                    continue
                rows_i = partition.blocks[i]
                worst = max(worst, float(np.max(np.abs(dT[np.ix_(rows_i, sorted(allowed))]))))
        out[f"block{i + 1}"] = worst
    return out


# ---------------------------------------------------------------------------
# characteristic flows
# ---------------------------------------------------------------------------

def integrate_field(field_fn, start, arc_length, steps, in_domain=None,
                    error_tol=1e-8, max_refine=6):
    """RK4 polyline of du/ds = field(u) with per-step halving error control.

    Returns (points, info); info carries the accumulated error estimate and a
    left_domain flag when the curve is truncated at the domain boundary.
    """
    start = np.asarray(start, dtype=float)

    def rk4_step(u, h):
        k1 = field_fn(u)
        k2 = field_fn(u + 0.5 * h * k1)
        k3 = field_fn(u + 0.5 * h * k2)
        k4 = field_fn(u + h * k3)
        return u + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    n_steps = max(1, int(steps))
    for _ in range(max_refine + 1):
        h = arc_length / n_steps
        pts = [start]
        err = 0.0
        left = False
        ok = True
        for _ in range(n_steps):
            u = pts[-1]
            try:
                full = rk4_step(u, h)
                half = rk4_step(rk4_step(u, 0.5 * h), 0.5 * h)
            except (DomainError, IllConditioned, MismatchedSignature):
                ok = False
                break
            err += float(np.linalg.norm(full - half)) / 15.0
            nxt = half  # keep the more accurate composition
            if in_domain is not None and not in_domain(nxt):
                left = True
                pts.append(nxt)
                break
            pts.append(nxt)
        budget = error_tol * max(abs(arc_length), 1e-12)
        if ok and (err <= budget or left):
            return np.array(pts), {"error_estimate": err, "left_domain": left,
                                   "steps": n_steps}
        n_steps *= 2
    return np.array(pts), {"error_estimate": err, "left_domain": left,
                           "steps": n_steps, "tolerance_met": False}


class _FrameFieldFlow:
    """Continuous autovector field along a curve: hinted frames evaluate
    directly, numeric frames align each evaluation to the previous one."""

    def __init__(self, sys_, slot, frame="auto", t=0.0, x=0.0, reference=None,
                 machine=None):
        self.sys = sys_
        self.machine = machine or FrameMachine(sys_, frame)
        self.slot = slot
        self.t = t
        self.x = x
        self.reference = reference

    def __call__(self, u):
        if self.machine.field is not None:
            f = self.machine.field.frame_at(self.t, self.x, u, check=False)
        else:
            f = eigen.spectrum_at(self.sys, self.t, self.x, u).frame
            if self.reference is not None:
                f = eigen.align_frames(self.reference, f)
            self.reference = f
        return f.rights[self.slot]


def characteristic_flow(sys_: QuasilinearSystem, slot, start, arc_length,
                        steps=64, frame="auto", t=0.0, x=0.0):
    """Integrate du/ds = r_slot(u) from an admissible start state."""
    start = np.asarray(start, dtype=float)
    if not sys_.in_domain(t, x, start) or sys_.is_excluded(t, x, start):
        raise DomainError("start state is outside the admissible domain")
    fieldfn = _FrameFieldFlow(sys_, slot, frame, t, x)
    return integrate_field(fieldfn, start, arc_length, steps,
                           in_domain=lambda u: sys_.in_domain(t, x, u))


# ---------------------------------------------------------------------------
# numeric construction of the decoupling map
# ---------------------------------------------------------------------------

def construct_transform_numeric(sys_: QuasilinearSystem, partition: PartitionScheme,
                                base_point, grid_counts, frame="auto",
                                report=None, shoot_tol=1e-8, max_shots=100,
                                box=None, t=0.0, x=0.0):
    """Flow-coordinate construction of the decoupling map on a state grid.

    For block level i the annihilating distribution is spanned by the right
    autovectors of the forbidden blocks; every grid state is pulled back
    along those flows onto a transversal slice through the base point, and
    the slice coordinates of the landing point provide the block's map
    components.  Quality gates: flow-invariance of the interpolated map and
    a grid-difference annihilation check.
    """
    n = sys_.n
    partition.validate_for(n)
    base_point = np.asarray(base_point, dtype=float)
    if not sys_.in_domain(t, x, base_point) or sys_.is_excluded(t, x, base_point):
        raise DomainError("base point is outside the admissible domain")
    machine = FrameMachine(sys_, frame)
    base_frame = machine.base(t, x, base_point)

    if box is None:
        box = {}
        for nm in sys_.states:
            lo, hi = sys_.domain[nm]
            pad = 0.05 * (hi - lo)
            box[nm] = (lo + pad, hi - pad)
    axes = [np.linspace(box[nm][0], box[nm][1], int(c))
            for nm, c in zip(sys_.states, grid_counts)]
    mesh = np.meshgrid(*axes, indexing="ij")
    grid_shape = mesh[0].shape
    points = np.stack([g.ravel() for g in mesh], axis=1)

    H_parts = []
    flagged = []
    for i, blk in enumerate(partition.blocks):
        keep, flow = [], []
        for j, bj in enumerate(partition.blocks):
            forbid = j > i if partition.mode == "partial" else j != i
            (flow if forbid else keep).extend(bj)
        if not flow:
            # unconstrained block: coordinates in the base frame directions
            M = np.column_stack([base_frame.rights[s] for s in keep])
            coords = np.linalg.solve(M, (points - base_point).T).T
            sel = [keep.index(s) for s in blk]
            H_parts.append(coords[:, sel])
            continue
        E = np.column_stack([base_frame.rights[s] for s in keep])
        W = np.column_stack([base_frame.rights[s] for s in flow])
        M = np.column_stack([E, W])
        Minv = np.linalg.inv(M)
        vals = np.full((len(points), len(blk)), np.nan)
        for pi, pt in enumerate(points):
            if sys_.is_excluded(t, x, pt):
                continue
            cur = pt.copy()
            ok = False
            for _ in range(max_shots):
                coords = Minv @ (cur - base_point)
                eta = coords[len(keep):]
                if np.linalg.norm(eta) <= shoot_tol:
                    ok = True
                    break
                try:
                    for qi, slot in enumerate(flow):
                        if abs(eta[qi]) < 1e-14:
                            continue
                        # anchor the field orientation to the base frame so a
                        # pivot flip between legs cannot reverse the flow
                        fieldfn = _FrameFieldFlow(sys_, slot, frame, t, x,
                                                  reference=base_frame,
                                                  machine=machine)
                        pts, _ = integrate_field(fieldfn, cur, -float(eta[qi]),
                                                 steps=8)
                        cur = pts[-1]
                except (DomainError, IllConditioned, MismatchedSignature):
                    break
            if ok:
                xi = (Minv @ (cur - base_point))[: len(keep)]
                sel = [keep.index(s) for s in blk]
                vals[pi] = xi[sel]
            else:
                flagged.append((i, pi))
        if np.isnan(vals).all():
            raise ShootingFailed(f"no grid state reached the level-{i + 1} slice")
        H_parts.append(vals)

    H_grid = np.concatenate(H_parts, axis=1)
    # reorder columns to slot order: parts were emitted block by block
    col_order = [s for blk in partition.blocks for s in blk]
    inv_order = np.argsort(col_order)
    H_grid = H_grid[:, inv_order]

    quality = _construction_quality(sys_, partition, axes, grid_shape, H_grid,
                                    machine, flagged, t, x)
    quality["untrusted"] = bool(report is None or
                                getattr(report, "verdict", "fail") != "pass")
    return {
        "axes": axes,
        "gridShape": grid_shape,
        "values": H_grid.reshape(*grid_shape, n),
        "blocks": [list(b) for b in partition.blocks],
        "basePoint": base_point.tolist(),
        "quality": quality,
    }


def interpolate_grid(axes, values, u):
    """Multilinear interpolation of gridded map values at one state."""
    u = np.asarray(u, dtype=float)
    nd = len(axes)
    idx = []
    frac = []
    for d in range(nd):
        ax = axes[d]
        j = int(np.clip(np.searchsorted(ax, u[d]) - 1, 0, len(ax) - 2))
        idx.append(j)
        frac.append((u[d] - ax[j]) / (ax[j + 1] - ax[j]))
    out = 0.0
    for corner in range(2 ** nd):
        w = 1.0
        loc = []
        for d in range(nd):
            bit = (corner >> d) & 1
            loc.append(idx[d] + bit)
            w *= frac[d] if bit else (1.0 - frac[d])
        out = out + w * values[tuple(loc)]
    return out


def _construction_quality(sys_, partition, axes, grid_shape, H_grid, machine,
                          flagged, t, x):
    n = sys_.n
    values = H_grid.reshape(*grid_shape, n)
    if np.isnan(values).any():
        fill = np.nanmean(H_grid, axis=0)
        values = np.where(np.isnan(values), fill, values)

    # invariance: interpolated map constant along the forbidden flows
    center = np.array([0.5 * (ax[0] + ax[-1]) for ax in axes])
    inv_max = 0.0
    curves = 0
    for i, blk in enumerate(partition.blocks):
        for j, bj in enumerate(partition.blocks):
            forbid = j > i if partition.mode == "partial" else j != i
            if not forbid:
                continue
            for slot in bj:
                try:
                    pts, info = characteristic_flow(sys_, slot, center, 0.1,
                                                    steps=16, frame=machine.mode,
                                                    t=t, x=x)
                except (DomainError, IllConditioned):
                    continue
                if info["left_domain"]:
                    continue
                h0 = interpolate_grid(axes, values, pts[0])
                h1 = interpolate_grid(axes, values, pts[-1])
                for a in blk:
                    inv_max = max(inv_max, abs(float(h1[a] - h0[a])))
                curves += 1

    # grid-difference Jacobian: annihilation and invertibility
    grads = np.stack(np.gradient(values, *axes, axis=tuple(range(n))), axis=-1)
    dets = np.linalg.det(grads)
    min_det = float(np.min(np.abs(dets)))
    ann = 0.0
    it = np.ndindex(*[max(1, s - 2) for s in grid_shape])
    for loc in it:
        loc = tuple(np.array(loc) + 1)
        u = np.array([axes[d][loc[d]] for d in range(n)])
        if sys_.is_excluded(t, x, u):
            continue
        try:
            f = machine.base(t, x, u)
        except (IllConditioned, HintInconsistent, DomainError):
            continue
        J = grads[loc]
        for i, blk in enumerate(partition.blocks):
            for j, bj in enumerate(partition.blocks):
                forbid = j > i if partition.mode == "partial" else j != i
                if not forbid:
                    continue
                for a in blk:
                    for b in bj:
                        ann = max(ann, abs(float(J[a] @ f.rights[b])))
    return {
        "invarianceResidual": inv_max,
        "invarianceCurves": curves,
        "gridAnnihilationMax": ann,
        "minAbsGridJacobianDet": min_det,
        "flaggedCells": len(flagged),
    }
