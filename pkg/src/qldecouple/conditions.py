"""Structure-condition residuals, partition verdicts and partition search.

Three residual families decide decouplability for a given partition of the
autovector slots into ordered blocks:

  gradient:     grad(lambda_a) . r_b            (speed variation across b-waves)
  interaction:  l_a . ((Dr_b) r_c - (Dr_c) r_b) (wave-wave reflection)
  source:       directional derivative of l_a . g along r_b

Gradient residuals are scale-free and interaction residuals are insensitive
to smooth rescalings of the frame fields (biorthogonality kills the scale
terms), so they run on hinted or numeric frames directly.  Source residuals
single out a normalization of the left fields; systems built by conjugation
expose the transported block-adapted frame for them (see FrameMachine).

Partial mode constrains block i against all later blocks j > i; full mode
constrains every ordered pair i != j.  Verdicts aggregate max residuals over
an admissible sample sweep.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import eigen
from .errors import (
    DegenerateSample,
    DomainError,
    HintInconsistent,
    IllConditioned,
    MismatchedSignature,
    NotApplicable,
    SchemaError,
    TooLarge,
)
from .system import QuasilinearSystem, SamplePlan, load_system

FD_STEP = 1e-5
DEFAULT_TOL = 1e-6
EXCLUDED_FRACTION_LIMIT = 0.2


@dataclass
class PartitionScheme:
    """Ordered blocks of frame slots; mode partial (hierarchy) or full."""

    blocks: list
    mode: str = "partial"

    def __post_init__(self):
        if self.mode not in ("partial", "full"):
            raise SchemaError(f"unknown mode '{self.mode}'")
        if len(self.blocks) < 2:
            raise SchemaError("a partition needs at least 2 blocks")
        if any(len(b) < 1 for b in self.blocks):
            raise SchemaError("empty partition block")

    @property
    def k(self):
        return len(self.blocks)

    @property
    def sizes(self):
        return tuple(len(b) for b in self.blocks)

    @property
    def n(self):
        return sum(self.sizes)

    def validate_for(self, n):
        slots = [s for b in self.blocks for s in b]
        if sorted(slots) != list(range(n)):
            raise SchemaError("partition must assign every frame slot exactly once")

    def block_of(self, slot):
        for i, b in enumerate(self.blocks):
            if slot in b:
                return i
        raise KeyError(slot)

    def label(self, slot):
        i = self.block_of(slot)
        return f"{i + 1},{self.blocks[i].index(slot) + 1}"

    @staticmethod
    def from_sizes(sizes, mode="partial"):
        blocks, start = [], 0
        for s in sizes:
            blocks.append(list(range(start, start + s)))
            start += s
        return PartitionScheme(blocks, mode)

    def constraint_count(self):
        """Sum over blocks of n_i * m_i * (n - m_i)."""
        n = self.n
        total, m = 0, 0
        for size in self.sizes:
            m += size
            total += size * m * (n - m)
        return total


def gradient_tuples(p: PartitionScheme):
    k = p.k
    for i in range(k):
        for j in range(k):
            if i == j:
                continue
            if p.mode == "partial" and j < i:
                continue
            for a in p.blocks[i]:
                for b in p.blocks[j]:
                    yield (a, b)


def interaction_tuples(p: PartitionScheme):
    k = p.k
    for i in range(k - 1 if p.mode == "partial" else k):
        ells = range(i + 1) if p.mode == "partial" else (i,)
        for ell in ells:
            for j in range(i + 1 if p.mode == "partial" else 0, k):
                if j == i:
                    continue
                for a in p.blocks[i]:
                    for b in p.blocks[ell]:
                        if ell == i and b == a:
                            continue
                        for c in p.blocks[j]:
                            yield (a, b, c)


def source_tuples(p: PartitionScheme):
    yield from gradient_tuples(p)


# ---------------------------------------------------------------------------
# frame machinery shared by the residual operations
# ---------------------------------------------------------------------------

class FrameMachine:
    """Builds base frames and centered FD sweeps of the frame field."""

    def __init__(self, sys_: QuasilinearSystem, frame="auto", cluster_tol=None):
        self.sys = sys_
        has_hints = "autovectors" in sys_.hints
        if frame == "auto":
            frame = "analytic" if has_hints else "numeric"
        if frame == "analytic" and not has_hints:
            raise HintInconsistent("model supplies no autovector hints")
        self.mode = frame
        self.cluster_tol = cluster_tol
        self.field = eigen.AnalyticFrameField(sys_) if frame == "analytic" else None

    @property
    def provenance(self):
        return "analyticHint" if self.mode == "analytic" else "numeric"

    def base(self, t, x, u) -> eigen.Frame:
        if self.field is not None:
            return self.field.frame_at(t, x, u)
        return eigen.spectrum_at(self.sys, t, x, u, self.cluster_tol).frame

    def near(self, t, x, u, reference: eigen.Frame) -> eigen.Frame:
        if self.field is not None:
            return self.field.frame_at(t, x, u, check=False)
        raw = eigen.spectrum_at(self.sys, t, x, u, self.cluster_tol).frame
        return eigen.align_frames(reference, raw)

    def sweep(self, t, x, u, base: eigen.Frame, slot, h):
        d = base.rights[slot]
        fp = self.near(t, x, u + h * d, base)
        fm = self.near(t, x, u - h * d, base)
        return fp, fm

    def source_field(self):
        """Smooth block-adapted frame field for source conditions, when the
        system can provide one (conjugation backend with known blocks)."""
        backend = getattr(self.sys, "_conjugated", None)
        if backend is None or backend.blocks is None:
            return None

        def field_at(t, x, u):
            parts = backend.adapted_components(t, x, u)
            if parts is None:
                raise DegenerateSample("adapted frame unavailable at this point")
            values, rights, lefts = parts
            clusters = [eigen.Cluster(complex(values[s]), 1, [s])
                        for s in range(self.sys.n)]
            return eigen.Frame(values=values.astype(complex), rights=rights,
                               lefts=lefts, kinds=[eigen.KIND_EIGEN] * self.sys.n,
                               clusters=clusters, point=(t, x, tuple(u)),
                               provenance="transportedAdapted")

        return field_at


def _fd_step(u):
    return FD_STEP * (1.0 + float(np.linalg.norm(u)))


def gradient_condition_residual(sys_, slot_a, slot_b, t, x, u, frame="auto",
                                path="auto", machine=None, base=None):
    """Directional derivative of the slot-a eigenvalue along the slot-b
    right autovector.  Simple eigenvalues use the perturbation formula
    l (D_w A) r / (l r); hinted fields are differentiated exactly; the FD
    fallback tracks cluster values across aligned frames."""
    u = np.asarray(u, dtype=float)
    m = machine or FrameMachine(sys_, frame)
    f = base if base is not None else m.base(t, x, u)
    if path == "auto":
        if m.field is not None:
            grads = np.array([fn(t, x, *u) for fn in m.field.value_gradient_fns(slot_a)])
            return float(grads @ f.rights[slot_b])
        if f.cluster_of_slot(slot_a).alg_mult == 1:
            return eigen.eigenvalue_directional_derivative(sys_, f, slot_a, f.rights[slot_b], t, x)
    h = _fd_step(u)
    fp, fm = m.sweep(t, x, u, f, slot_b, h)
    d = (fp.values[slot_a] - fm.values[slot_a]) / (2.0 * h)
    return float(abs(d)) if f.cluster_of_slot(slot_a).is_complex else float(d.real)


def interaction_condition_residual(sys_, slot_a, slot_b, slot_c, t, x, u,
                                   frame="auto", machine=None, base=None):
    """l_a . ((D r_b) r_c - (D r_c) r_b) with the field derivatives taken by
    central finite differences of aligned frames."""
    u = np.asarray(u, dtype=float)
    m = machine or FrameMachine(sys_, frame)
    f = base if base is not None else m.base(t, x, u)
    h = _fd_step(u)
    # (D r_b) r_c: derivative of the b field along direction r_c
    fpc, fmc = m.sweep(t, x, u, f, slot_c, h)
    d_b_along_c = (fpc.rights[slot_b] - fmc.rights[slot_b]) / (2.0 * h)
    fpb, fmb = m.sweep(t, x, u, f, slot_b, h)
    d_c_along_b = (fpb.rights[slot_c] - fmb.rights[slot_c]) / (2.0 * h)
    return float(f.lefts[slot_a] @ (d_b_along_c - d_c_along_b))


def source_condition_residual(sys_, slot_a, slot_b, t, x, u, frame="auto",
                              machine=None, base=None):
    """Directional FD of the scalar field l_a . g along r_b.

    The condition singles out a normalization of the frame: the left fields
    must carry scalings compatible with the block hierarchy.  Systems built
    by conjugation expose that transported block-adapted frame and it is used
    here automatically; otherwise the provided (hinted or numeric) frame is
    used as is and its provenance is the caller's responsibility.
    """
    u = np.asarray(u, dtype=float)
    m = machine or FrameMachine(sys_, frame)
    sfield = m.source_field()
    if sfield is not None:
        f = sfield(t, x, u)
        h = _fd_step(u)
        d = f.rights[slot_b]
        fp = sfield(t, x, u + h * d)
        fm = sfield(t, x, u - h * d)
    else:
        f = base if base is not None else m.base(t, x, u)
        h = _fd_step(u)
        fp, fm = m.sweep(t, x, u, f, slot_b, h)
        d = f.rights[slot_b]
    gp = sys_.eval_source(t, x, u + h * d)
    gm = sys_.eval_source(t, x, u - h * d)
    phi_p = float(fp.lefts[slot_a] @ gp)
    phi_m = float(fm.lefts[slot_a] @ gm)
    return (phi_p - phi_m) / (2.0 * h)


# ---------------------------------------------------------------------------
# sweep evaluation
# ---------------------------------------------------------------------------

@dataclass
class FamilyStats:
    max_abs: float = 0.0
    mean_abs: float = 0.0
    count: int = 0
    argmax: dict = None
    per_tuple: dict = field(default_factory=dict)
    vacuous: bool = False

    def to_dict(self):
        return {
            "maxAbs": self.max_abs if self.count else None,
            "meanAbs": self.mean_abs if self.count else None,
            "count": self.count,
            "argmax": self.argmax,
            "perTuple": {k: {"maxAbs": v[0], "meanAbs": v[1] / v[2], "count": v[2]}
                         for k, v in sorted(self.per_tuple.items())},
            "vacuous": self.vacuous,
        }


@dataclass
class ConditionReport:
    mode: str
    blocks: list
    tolerance: float
    frame_provenance: str
    gradient_path: str
    total_samples: int = 0
    evaluated: int = 0
    excluded: int = 0
    degenerate: int = 0
    families: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    @property
    def max_residual(self):
        vals = [s.max_abs for s in self.families.values() if s.count]
        return max(vals) if vals else None

    @property
    def verdict(self):
        if self.evaluated == 0:
            return "fail"
        if self.total_samples and \
                (self.excluded + self.degenerate) / self.total_samples > EXCLUDED_FRACTION_LIMIT:
            return "fail"
        for stats in self.families.values():
            if stats.count and stats.max_abs > self.tolerance:
                return "fail"
        return "pass"

    def to_dict(self):
        return {
            "mode": self.mode,
            "blocks": self.blocks,
            "tolerance": self.tolerance,
            "frameProvenance": self.frame_provenance,
            "gradientPath": self.gradient_path,
            "samples": {
                "total": self.total_samples,
                "evaluated": self.evaluated,
                "excluded": self.excluded,
                "degenerate": self.degenerate,
            },
            "families": {k: v.to_dict() for k, v in sorted(self.families.items())},
            "maxResidual": self.max_residual,
            "verdict": self.verdict,
            "flags": sorted(self.flags),
            "diagnostics": self.diagnostics,
        }

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), sort_keys=True, **kw)


class _SweepEvaluator:
    """Per-sample residual evaluation for one partition."""

    def __init__(self, sys_, partition, frame="auto", gradient_path="auto",
                 cluster_tol=None, separation_tolerance=1e-3,
                 families=("gradient", "interaction", "source")):
        partition.validate_for(sys_.n)
        self.sys = sys_
        self.partition = partition
        self.machine = FrameMachine(sys_, frame, cluster_tol)
        self.gradient_path = gradient_path
        self.separation_tolerance = separation_tolerance
        self.requested_families = tuple(families)
        self.homogeneous = sys_.homogeneous
        self.grad_tuples = list(gradient_tuples(partition)) if "gradient" in families else []
        self.int_tuples = list(interaction_tuples(partition)) if "interaction" in families else []
        self.src_tuples = (list(source_tuples(partition))
                           if "source" in families and not self.homogeneous else [])
        self.source_frame_field = self.machine.source_field() if self.src_tuples else None

    def tuple_labels(self):
        p = self.partition
        labels = [("gradient", f"{p.label(a)}->{p.label(b)}") for a, b in self.grad_tuples]
        labels += [("interaction", f"{p.label(a)}|{p.label(b)}->{p.label(c)}")
                   for a, b, c in self.int_tuples]
        labels += [("source", f"{p.label(a)}->{p.label(b)}") for a, b in self.src_tuples]
        return labels

    def _separation_excluded(self, f: eigen.Frame):
        if self.machine.field is not None:
            # hinted frames may split a multiple eigenvalue deliberately
            return False
        rho = float(np.max(np.abs(f.values))) if f.n else 0.0
        gap = self.separation_tolerance * (1.0 + rho)
        for i, bi in enumerate(self.partition.blocks):
            for bj in self.partition.blocks[i + 1:]:
                for a in bi:
                    for b in bj:
                        if abs(f.values[a] - f.values[b]) <= gap:
                            return True
        return False

    def _split_cluster(self, f: eigen.Frame):
        for c in f.clusters:
            blocks = {self.partition.block_of(s) for s in c.slots}
            if len(blocks) > 1:
                return True
        return False

    def evaluate(self, t, x, u):
        """Returns (status, rows); rows are (family, label, value)."""
        sys_ = self.sys
        u = np.asarray(u, dtype=float)
        if sys_.is_excluded(t, x, u):
            return "excluded", []
        try:
            base = self.machine.base(t, x, u)
        except (IllConditioned, HintInconsistent, DomainError, MismatchedSignature):
            return "degenerate", []
        if self._separation_excluded(base):
            return "excluded", []
        if self.machine.field is None and self._split_cluster(base):
            return "degenerate", []

        h = _fd_step(u)
        need = set()
        if self.gradient_path == "fd":
            need.update(b for _, b in self.grad_tuples)
        elif self.machine.field is None:
            need.update(b for a, b in self.grad_tuples
                        if base.cluster_of_slot(a).alg_mult > 1)
        for _, b, c in self.int_tuples:
            need.add(b)
            need.add(c)
        if self.source_frame_field is None:
            need.update(b for _, b in self.src_tuples)

        sweeps = {}
        try:
            for d in sorted(need):
                sweeps[d] = self.machine.sweep(t, x, u, base, d, h)
        except (IllConditioned, MismatchedSignature, DomainError, HintInconsistent):
            return "degenerate", []

        p = self.partition
        rows = []
        try:
            for a, b in self.grad_tuples:
                if self.gradient_path != "fd":
                    if self.machine.field is not None:
                        grads = np.array([fn(t, x, *u)
                                          for fn in self.machine.field.value_gradient_fns(a)])
                        val = float(grads @ base.rights[b])
                        rows.append(("gradient", f"{p.label(a)}->{p.label(b)}", val))
                        continue
                    if base.cluster_of_slot(a).alg_mult == 1:
                        val = eigen.eigenvalue_directional_derivative(
                            sys_, base, a, base.rights[b], t, x)
                        rows.append(("gradient", f"{p.label(a)}->{p.label(b)}", val))
                        continue
                fp, fm = sweeps[b]
                dv = (fp.values[a] - fm.values[a]) / (2.0 * h)
                val = float(abs(dv)) if base.cluster_of_slot(a).is_complex else float(dv.real)
                rows.append(("gradient", f"{p.label(a)}->{p.label(b)}", val))

            for a, b, c in self.int_tuples:
                fpc, fmc = sweeps[c]
                fpb, fmb = sweeps[b]
                d_b_along_c = (fpc.rights[b] - fmc.rights[b]) / (2.0 * h)
                d_c_along_b = (fpb.rights[c] - fmb.rights[c]) / (2.0 * h)
                val = float(base.lefts[a] @ (d_b_along_c - d_c_along_b))
                rows.append(("interaction", f"{p.label(a)}|{p.label(b)}->{p.label(c)}", val))

            if self.src_tuples:
                if self.source_frame_field is not None:
                    sbase = self.source_frame_field(t, x, u)
                    ssweep = {}
                    for b in {b for _, b in self.src_tuples}:
                        d = sbase.rights[b]
                        ssweep[b] = (self.source_frame_field(t, x, u + h * d),
                                     self.source_frame_field(t, x, u - h * d), d)
                else:
                    ssweep = {b: (*sweeps[b], base.rights[b])
                              for b in {b for _, b in self.src_tuples}}
                for a, b in self.src_tuples:
                    fp, fm, d = ssweep[b]
                    gp = sys_.eval_source(t, x, u + h * d)
                    gm = sys_.eval_source(t, x, u - h * d)
                    val = (float(fp.lefts[a] @ gp) - float(fm.lefts[a] @ gm)) / (2.0 * h)
                    rows.append(("source", f"{p.label(a)}->{p.label(b)}", val))
        except (IllConditioned, MismatchedSignature, DomainError, HintInconsistent,
                DegenerateSample):
            return "degenerate", []
        return "ok", rows


# worker-process state for parallel sweeps
_WORKER = {}


def _worker_init(doc_json, options):
    sys_ = load_system(json.loads(doc_json))
    partition = PartitionScheme(options["blocks"], options["mode"])
    _WORKER["eval"] = _SweepEvaluator(
        sys_, partition, frame=options["frame"], gradient_path=options["gradient_path"],
        cluster_tol=options["cluster_tol"],
        separation_tolerance=options["separation_tolerance"],
        families=tuple(options["families"]))


def _worker_eval(chunk):
    out = []
    for idx, t, x, *u in chunk:
        status, rows = _WORKER["eval"].evaluate(t, x, np.array(u))
        out.append((int(idx), status, rows))
    return out


def check_partition(sys_: QuasilinearSystem, partition: PartitionScheme,
                    plan: SamplePlan = None, tol: float = DEFAULT_TOL,
                    frame="auto", gradient_path="auto", workers=1,
                    families=("gradient", "interaction", "source"),
                    csv_path=None) -> ConditionReport:
    """Evaluate every condition tuple of the partition mode at every
    admissible sample and aggregate the residual statistics."""
    plan = plan or SamplePlan()
    evaluator = _SweepEvaluator(sys_, partition, frame=frame,
                                gradient_path=gradient_path,
                                separation_tolerance=plan.separation_tolerance,
                                families=families)
    report = ConditionReport(
        mode=partition.mode, blocks=[list(b) for b in partition.blocks],
        tolerance=tol, frame_provenance=evaluator.machine.provenance,
        gradient_path=gradient_path)
    samples = sys_.sample_points(plan)
    report.total_samples = len(samples)
    for fam in ("gradient", "interaction", "source"):
        st = FamilyStats()
        if fam == "gradient":
            st.vacuous = not evaluator.grad_tuples
        elif fam == "interaction":
            st.vacuous = not evaluator.int_tuples
        else:
            st.vacuous = not evaluator.src_tuples
        report.families[fam] = st

    labels = evaluator.tuple_labels()
    residual_matrix = [] if len(labels) <= 64 else None
    csv_rows = [] if csv_path else None

    results = _run_sweep(sys_, evaluator, samples, workers)

    for idx, status, rows in results:
        if status == "excluded":
            report.excluded += 1
            continue
        if status == "degenerate":
            report.degenerate += 1
            continue
        report.evaluated += 1
        t, x = samples[idx][0], samples[idx][1]
        u = samples[idx][2:]
        if residual_matrix is not None:
            residual_matrix.append([v for _, _, v in rows])
        for fam, label, value in rows:
            st = report.families[fam]
            a = abs(value)
            st.count += 1
            st.mean_abs += a
            key = label
            mx, sm, ct = st.per_tuple.get(key, (0.0, 0.0, 0))
            st.per_tuple[key] = (max(mx, a), sm + a, ct + 1)
            if a > st.max_abs or st.argmax is None:
                st.max_abs = max(st.max_abs, a)
                st.argmax = {"sampleIndex": int(idx), "t": float(t), "x": float(x),
                             "u": [float(z) for z in u], "tuple": label,
                             "residual": float(value)}
            if csv_rows is not None:
                parts = label.replace("|", "->").split("->")
                ia = parts[0]
                lb = parts[1] if len(parts) == 3 else ""
                jg = parts[-1]
                csv_rows.append([int(idx), float(t), float(x), *[float(z) for z in u],
                                 fam, ia, lb, jg, float(value)])

    for st in report.families.values():
        if st.count:
            st.mean_abs /= st.count

    if report.evaluated == 0:
        report.flags.append("allExcluded" if report.excluded else "allDegenerate")
    if evaluator.machine.field is None:
        # flag nontrivial Jordan structure for manual review
        try:
            probe = next((s for s in samples if not sys_.is_excluded(s[0], s[1], s[2:])), None)
            if probe is not None:
                f = evaluator.machine.base(probe[0], probe[1], probe[2:])
                if any(k.startswith("generalized") for k in f.kinds):
                    report.flags.append("jordanBlocks")
        except (IllConditioned, DomainError, MismatchedSignature):
            pass

    report.diagnostics["constraintCountFormula"] = partition.constraint_count()
    report.diagnostics["tupleCount"] = len(labels)
    if residual_matrix:
        M = np.array(residual_matrix)
        scale = float(np.abs(M).max()) if M.size else 0.0
        if scale > 0:
            report.diagnostics["residualMatrixRank"] = int(
                np.linalg.matrix_rank(M, tol=1e-8 * scale))
        else:
            report.diagnostics["residualMatrixRank"] = 0

    if csv_path:
        state_cols = list(sys_.states)
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sampleIndex", "t", "x", *state_cols,
                        "family", "ia", "lb", "jg", "residual"])
            w.writerows(csv_rows)
    return report


def _run_sweep(sys_, evaluator, samples, workers):
    indexed = [(i, *row) for i, row in enumerate(samples)]
    if workers and workers > 1 and sys_.document is not None:
        options = {
            "blocks": [list(b) for b in evaluator.partition.blocks],
            "mode": evaluator.partition.mode,
            "frame": evaluator.machine.mode,
            "gradient_path": evaluator.gradient_path,
            "cluster_tol": evaluator.machine.cluster_tol,
            "separation_tolerance": evaluator.separation_tolerance,
            "families": list(evaluator.requested_families),
        }
        chunk = max(1, len(indexed) // (workers * 4))
        chunks = [indexed[i:i + chunk] for i in range(0, len(indexed), chunk)]
        try:
            with ProcessPoolExecutor(max_workers=workers, initializer=_worker_init,
                                     initargs=(json.dumps(sys_.document), options)) as pool:
                results = []
                for part in pool.map(_worker_eval, chunks):
                    results.extend(part)
            results.sort(key=lambda r: r[0])
            return results
        except (OSError, ValueError):
            pass  # pool unavailable in this environment; fall through
    out = []
    for idx, t, x, *u in indexed:
        status, rows = evaluator.evaluate(t, x, np.array(u))
        out.append((idx, status, rows))
    return out


# ---------------------------------------------------------------------------
# partition search
# ---------------------------------------------------------------------------

def _assignment_units(sys_, frame, plan):
    """Indivisible slot groups: single slots for hinted frames, whole
    clusters for numeric frames (multiplicity-respecting assignments)."""
    machine = FrameMachine(sys_, frame)
    if machine.field is not None:
        return [[s] for s in range(sys_.n)], machine
    for row in sys_.sample_points(plan):
        if sys_.is_excluded(row[0], row[1], row[2:]):
            continue
        try:
            f = machine.base(row[0], row[1], row[2:])
        except (IllConditioned, DomainError):
            continue
        return [list(c.slots) for c in f.clusters], machine
    raise DegenerateSample("no admissible sample to determine the cluster structure")


def search_partitions(sys_: QuasilinearSystem, plan: SamplePlan = None,
                      tol: float = DEFAULT_TOL, max_k: int = None,
                      mode="partial", frame="auto", workers=1,
                      pilot_count=10):
    """Enumerate block assignments (k = 2..max_k), prune with a gradient
    pilot over the sample-sequence prefix, fully check survivors.

    Returns passing (PartitionScheme, ConditionReport) pairs sorted by
    k descending then max residual ascending.
    """
    n = sys_.n
    if n > 8:
        raise TooLarge("partition search is limited to n <= 8")
    plan = plan or SamplePlan()
    max_k = max_k or n
    units, _ = _assignment_units(sys_, frame, plan)
    m = len(units)

    seen = set()
    schemes = []
    for k in range(2, min(max_k, m) + 1):
        for assign in _surjections(m, k):
            blocks = [[] for _ in range(k)]
            for unit_idx, blk in enumerate(assign):
                blocks[blk].extend(units[unit_idx])
            key = tuple(tuple(sorted(b)) for b in blocks)
            if mode == "full":
                # non-interacting blocks carry no order
                key = tuple(sorted(key))
            if key in seen:
                continue
            seen.add(key)
            schemes.append(PartitionScheme([sorted(b) for b in blocks], mode))

    pilot_plan = SamplePlan(count=min(pilot_count, plan.count), strategy=plan.strategy,
                            seed=plan.seed, separation_tolerance=plan.separation_tolerance)
    passing = []
    for scheme in schemes:
        pilot = check_partition(sys_, scheme, pilot_plan, tol, frame=frame,
                                families=("gradient",))
        if pilot.verdict != "pass":
            continue
        full = check_partition(sys_, scheme, plan, tol, frame=frame, workers=workers)
        if full.verdict == "pass":
            passing.append((scheme, full))
    passing.sort(key=lambda sr: (-sr[0].k, sr[1].max_residual or 0.0,
                                 tuple(map(tuple, sr[0].blocks))))
    return passing


def _surjections(m, k):
    """All maps {0..m-1} -> {0..k-1} hitting every block, lexicographic."""
    assign = [0] * m

    def rec(i):
        if i == m:
            if len(set(assign)) == k:
                yield tuple(assign)
            return
        for b in range(k):
            assign[i] = b
            yield from rec(i + 1)

    yield from rec(0)


# ---------------------------------------------------------------------------
# Nijenhuis tensor cross-check
# ---------------------------------------------------------------------------

def nijenhuis_residual(sys_: QuasilinearSystem, t, x, u) -> float:
    """max |N_jik| of the coefficient matrix at one state.

    N_jik = A_ai dA_jk/du_a - A_ak dA_ji/du_a
          + A_ja dA_ai/du_k - A_ja dA_ak/du_i   (sum over a)

    Defined for autonomous homogeneous systems only.
    """
    if not sys_.homogeneous:
        raise NotApplicable("Nijenhuis check requires a homogeneous system")
    if not sys_.autonomous:
        raise NotApplicable("Nijenhuis check requires an autonomous system")
    u = np.asarray(u, dtype=float)
    n = sys_.n
    A = sys_.eval_matrix(t, x, u)
    D = np.empty((n, n, n))
    ident = np.eye(n)
    for mcoord in range(n):
        D[mcoord] = sys_.directional_matrix_derivative(t, x, u, ident[mcoord])
    N = (np.einsum("ai,ajk->jik", A, D)
         - np.einsum("ak,aji->jik", A, D)
         + np.einsum("ja,kai->jik", A, D)
         - np.einsum("ja,iak->jik", A, D))
    return float(np.max(np.abs(N)))


def nijenhuis_max(sys_: QuasilinearSystem, plan: SamplePlan = None):
    """Max Nijenhuis residual over admissible samples; (value, count)."""
    plan = plan or SamplePlan()
    best, used = 0.0, 0
    for row in sys_.sample_points(plan):
        t, x, u = row[0], row[1], row[2:]
        if sys_.is_excluded(t, x, u):
            continue
        try:
            best = max(best, nijenhuis_residual(sys_, t, x, u))
        except DomainError:
            continue
        used += 1
    if used == 0:
        raise DegenerateSample("no admissible samples for the Nijenhuis sweep")
    return best, used
