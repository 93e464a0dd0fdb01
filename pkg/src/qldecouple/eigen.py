"""Pointwise eigenstructure with clustering, Jordan chains and complex pairs.

The condition checker differentiates eigenvector FIELDS by finite
differences, so vectors computed at nearby points must belong to one smooth
field.  That is what `align_frames` provides: it maps a freshly computed
frame onto the normalization of a reference frame (orthogonal Procrustes
inside each eigenspace, then a rescale anchored at the reference pivot
component).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import exprlang as ex
from .errors import HintInconsistent, IllConditioned, MismatchedSignature

COND_LIMIT = 1e8
RANK_TOL = 1e-8

KIND_EIGEN = "eigen"
KIND_COMPLEX_RE = "complexRe"
KIND_COMPLEX_IM = "complexIm"


def generalized_kind(order):
    return f"generalized-rank-{order}"


@dataclass
class Cluster:
    value: complex
    alg_mult: int
    slots: list
    is_complex: bool = False


@dataclass
class Frame:
    """Ordered autovector slots spanning R^n."""

    values: np.ndarray          # complex (n,)
    rights: np.ndarray          # (n, n), row per slot
    lefts: np.ndarray           # (n, n), row per slot
    kinds: list
    clusters: list              # list of Cluster over slot indices
    point: tuple = None
    provenance: str = "numeric"
    condition_number: float = 1.0

    @property
    def n(self):
        return self.rights.shape[0]

    def signature(self):
        return tuple((c.alg_mult, c.is_complex) for c in self.clusters)

    def cluster_of_slot(self, slot):
        for c in self.clusters:
            if slot in c.slots:
                return c
        raise KeyError(slot)


@dataclass
class Spectrum:
    """Clustered eigenstructure at one admissible point."""

    point: tuple
    frame: Frame

    @property
    def clusters(self):
        return self.frame.clusters


def _pivot_index(v):
    return int(np.argmax(np.abs(v)))


def _pivot_normalize(v):
    p = v[_pivot_index(v)]
    if p == 0:
        raise IllConditioned("zero autovector")
    return v / p


def _null_basis(B, scale):
    """Rows spanning the numerical null space of B."""
    _, s, vh = np.linalg.svd(B)
    tol = RANK_TOL * max(1.0, scale)
    return vh[s <= tol] if s.size else vh


def _cluster_eigenvalues(w, ctol):
    """Union-find clustering of eigenvalues by pairwise distance <= ctol."""
    n = len(w)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if abs(w[i] - w[j]) <= ctol:
                pi, pj = find(i), find(j)
                if pi != pj:
                    parent[pi] = pj
    groups = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return list(groups.values())


def spectrum_at(sys_, t, x, u, cluster_tol=None) -> Spectrum:
    """Eigenvalues clustered with right/left autovectors at one point.

    Jordan chains are appended when the geometric multiplicity falls short;
    complex-conjugate pairs contribute real/imaginary part vectors.
    """
    A = sys_.eval_matrix(t, x, u)
    n = sys_.n
    w, V = np.linalg.eig(A)
    rho = float(np.max(np.abs(w))) if n else 0.0
    ctol = cluster_tol if cluster_tol is not None else 1e-6 * (1.0 + rho)
    scale = max(1.0, float(np.linalg.norm(A)))

    # cluster on (Re, |Im|) so conjugate pairs always share a group
    w_half = w.real + 1j * np.abs(w.imag)
    groups = _cluster_eigenvalues(w_half, ctol)
    # deterministic cluster order: ascending (Re, |Im|)
    reps = [complex(np.mean(w_half[g])) for g in groups]
    order = sorted(range(len(groups)), key=lambda k: (reps[k].real, abs(reps[k].imag)))

    values, rights, kinds, clusters = [], [], [], []
    for k in order:
        g = sorted(groups[k], key=lambda i: (w[i].real, w[i].imag))
        rep = reps[k]
        mult = len(g)
        start = len(values)
        if abs(rep.imag) <= ctol:
            lam = rep.real
            B = A - lam * np.eye(n)
            if mult == 1:
                vec = V[:, g[0]]
                if np.max(np.abs(vec.imag)) > 1e-8 * np.max(np.abs(vec)):
                    raise IllConditioned("complex eigenvector for a real eigenvalue")
                vecs = [_pivot_normalize(vec.real)]
                slot_kinds = [KIND_EIGEN]
            else:
                basis = _null_basis(B, scale)
                if basis.shape[0] == 0:
                    raise IllConditioned(f"no eigenvector found for eigenvalue {lam:.6g}")
                heads = [_pivot_normalize(b) for b in basis[:mult]]
                vecs = list(heads)
                slot_kinds = [KIND_EIGEN] * len(vecs)
                # raise chains by successive least-squares solves (A - lam I) w' = w
                for head in heads:
                    prev = head
                    chain_order = 2
                    while len(vecs) < mult and chain_order <= n:
                        wv, *_ = np.linalg.lstsq(B, prev, rcond=None)
                        if np.linalg.norm(B @ wv - prev) > 1e-6 * (1.0 + np.linalg.norm(prev)):
                            break
                        vecs.append(wv)
                        slot_kinds.append(generalized_kind(chain_order))
                        prev = wv
                        chain_order += 1
                    if len(vecs) >= mult:
                        break
                if len(vecs) < mult:
                    raise IllConditioned(
                        f"could not complete a Jordan basis for eigenvalue {lam:.6g}")
            for vec, kd in zip(vecs, slot_kinds):
                values.append(complex(lam))
                rights.append(np.asarray(vec, dtype=float))
                kinds.append(kd)
            clusters.append(Cluster(complex(lam), mult, list(range(start, start + mult))))
        else:
            # complex group: members come in conjugate pairs
            pos = [i for i in g if w[i].imag > 0]
            if 2 * len(pos) != mult:
                raise IllConditioned("unpaired complex eigenvalues")
            lam = complex(np.mean([w[i] for i in pos]))
            for i in pos:
                vec = _pivot_normalize(V[:, i])
                values.extend([lam, lam])
                rights.append(vec.real.astype(float))
                rights.append(vec.imag.astype(float))
                kinds.extend([KIND_COMPLEX_RE, KIND_COMPLEX_IM])
            clusters.append(Cluster(lam, mult, list(range(start, start + mult)),
                                    is_complex=True))

    R = np.column_stack(rights)
    cond = float(np.linalg.cond(R))
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise IllConditioned(f"autovector matrix condition number {cond:.3g}")
    L = np.linalg.inv(R)

    frame = Frame(values=np.array(values), rights=np.array(rights), lefts=L,
                  kinds=kinds, clusters=clusters, point=(t, x, tuple(u)),
                  provenance="numeric", condition_number=cond)
    return Spectrum(point=(t, x, tuple(u)), frame=frame)


def align_frames(reference: Frame, raw) -> Frame:
    """Express a freshly computed frame in the reference's normalization.

    Clusters are matched by multiplicity pattern and nearest value.  Within a
    matched eigenspace of dimension d the raw basis is rotated onto the
    reference (orthogonal Procrustes; a sign flip when d = 1) and each vector
    is rescaled so its component at the reference pivot index matches the
    reference.  Left vectors are re-solved for biorthogonality.
    """
    if isinstance(raw, Spectrum):
        raw = raw.frame
    if len(reference.clusters) != len(raw.clusters):
        raise MismatchedSignature(
            f"cluster count changed: {len(reference.clusters)} vs {len(raw.clusters)}")
    used = set()
    pairs = []
    for rc in reference.clusters:
        best, best_d = None, None
        for idx, cc in enumerate(raw.clusters):
            if idx in used or cc.alg_mult != rc.alg_mult or cc.is_complex != rc.is_complex:
                continue
            d = abs(cc.value - rc.value)
            if best is None or d < best_d:
                best, best_d = idx, d
        if best is None:
            raise MismatchedSignature("multiplicity pattern changed between nearby points")
        used.add(best)
        pairs.append((rc, raw.clusters[best]))

    n = reference.n
    rights = np.empty((n, n))
    values = np.empty(n, dtype=complex)
    kinds = [None] * n
    clusters = []
    for rc, cc in pairs:
        Xref = reference.rights[rc.slots]
        Xraw = raw.rights[cc.slots]
        d = len(rc.slots)
        if d > 1:
            M = Xref @ Xraw.T
            U, _, Vt = np.linalg.svd(M)
            Xraw = (U @ Vt) @ Xraw
        for rslot, row in zip(rc.slots, Xraw):
            i_ref = _pivot_index(reference.rights[rslot])
            denom = row[i_ref]
            if abs(denom) < 1e-12 * (1.0 + np.abs(row).max()):
                raise MismatchedSignature("aligned vector lost its pivot component")
            rights[rslot] = row * (reference.rights[rslot][i_ref] / denom)
            kinds[rslot] = reference.kinds[rslot]
        for rslot, cslot in zip(rc.slots, cc.slots):
            values[rslot] = raw.values[cslot]
        clusters.append(Cluster(cc.value, rc.alg_mult, list(rc.slots), rc.is_complex))

    R = rights.T
    cond = float(np.linalg.cond(R))
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise IllConditioned(f"aligned frame condition number {cond:.3g}")
    lefts = np.linalg.inv(R)
    return Frame(values=values, rights=rights, lefts=lefts, kinds=kinds,
                 clusters=clusters, point=raw.point, provenance=raw.provenance,
                 condition_number=cond)


class AnalyticFrameField:
    """Frame field evaluated from model-file autovector hint expressions."""

    def __init__(self, sys_, residual_tol=1e-8):
        hints = sys_.hints.get("autovectors")
        if not hints:
            raise HintInconsistent("model supplies no autovector hints")
        self.sys = sys_
        self.n = sys_.n
        self.residual_tol = residual_tol
        order = sys_.arg_order
        self.value_fns = [ex.compile_expression(e, order) for e in hints["eigenvalues"]]
        self.right_fns = [[ex.compile_expression(c, order) for c in vec]
                          for vec in hints["right"]]
        self.left_fns = None
        if "left" in hints:
            self.left_fns = [[ex.compile_expression(c, order) for c in vec]
                             for vec in hints["left"]]
        self.value_exprs = hints["eigenvalues"]
        self.right_exprs = hints["right"]
        self.left_exprs = hints.get("left")
        self._grad_cache = {}

    def value_gradient_fns(self, slot):
        """Compiled exact state-gradient of the hinted eigenvalue field."""
        key = ("lam", slot)
        if key not in self._grad_cache:
            order = self.sys.arg_order
            grads = [ex.differentiate(self.value_exprs[slot], nm) for nm in self.sys.states]
            self._grad_cache[key] = [ex.compile_expression(g, order) for g in grads]
        return self._grad_cache[key]

    def right_jacobian_fns(self, slot):
        """Compiled exact Jacobian (d component / d state) of a hinted right field."""
        key = ("jac", slot)
        if key not in self._grad_cache:
            order = self.sys.arg_order
            rows = []
            for comp in self.right_exprs[slot]:
                rows.append([ex.compile_expression(ex.differentiate(comp, nm), order)
                             for nm in self.sys.states])
            self._grad_cache[key] = rows
        return self._grad_cache[key]

    def frame_at(self, t, x, u, check=True) -> Frame:
        args = (t, x, *u)
        vals = np.array([fn(*args) for fn in self.value_fns], dtype=float)
        rights = np.array([[fn(*args) for fn in row] for row in self.right_fns], dtype=float)
        if not (np.all(np.isfinite(vals)) and np.all(np.isfinite(rights))):
            raise HintInconsistent("hint expressions evaluate non-finite")
        A = self.sys.eval_matrix(t, x, u)
        nrmA = max(1.0, float(np.linalg.norm(A)))
        if check:
            for slot in range(self.n):
                r = rights[slot]
                res = np.linalg.norm(A @ r - vals[slot] * r)
                if res > self.residual_tol * nrmA * (1.0 + np.linalg.norm(r)):
                    raise HintInconsistent(
                        f"hinted right vector {slot} has residual {res:.3e}")
        R = rights.T
        cond = float(np.linalg.cond(R))
        if not np.isfinite(cond) or cond > COND_LIMIT:
            raise IllConditioned(f"hinted frame condition number {cond:.3g}")
        if self.left_fns is not None:
            lefts = np.array([[fn(*args) for fn in row] for row in self.left_fns], dtype=float)
            if check:
                for slot in range(self.n):
                    l = lefts[slot]
                    res = np.linalg.norm(l @ A - vals[slot] * l)
                    if res > self.residual_tol * nrmA * (1.0 + np.linalg.norm(l)):
                        raise HintInconsistent(
                            f"hinted left vector {slot} has residual {res:.3e}")
        else:
            lefts = np.linalg.inv(R)

        # group equal hinted values into clusters (slot order preserved)
        clusters = []
        assigned = set()
        ctol = 1e-6 * (1.0 + float(np.max(np.abs(vals))))
        for slot in range(self.n):
            if slot in assigned:
                continue
            members = [s for s in range(self.n) if abs(vals[s] - vals[slot]) <= ctol]
            assigned.update(members)
            clusters.append(Cluster(complex(vals[slot]), len(members), members))
        return Frame(values=vals.astype(complex), rights=rights, lefts=lefts,
                     kinds=[KIND_EIGEN] * self.n, clusters=clusters,
                     point=(t, x, tuple(u)), provenance="analyticHint",
                     condition_number=cond)


def analytic_frame(sys_, t, x, u, residual_tol=1e-8) -> Frame:
    """Frame built from the model's autovector hints, residual-gated."""
    return AnalyticFrameField(sys_, residual_tol).frame_at(t, x, u)


def eigenvalue_directional_derivative(sys_, frame: Frame, slot, w, t=0.0, x=0.0):
    """Perturbation formula l (D_w A) r / (l r) for a simple eigenvalue."""
    u = np.array(frame.point[2])
    DA = sys_.directional_matrix_derivative(t, x, u, w)
    l = frame.lefts[slot]
    r = frame.rights[slot]
    return float(l @ DA @ r) / float(l @ r)
