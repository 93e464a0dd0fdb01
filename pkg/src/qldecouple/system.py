"""Quasilinear system model u_t + A(t,x,u) u_x = g(t,x,u).

Holds the coefficient matrix and source as expression trees, performs
validated loading from JSON documents, pointwise evaluation, exact
directional derivatives of A, deterministic state-space sampling, and the
conjugation construction used as the property-test oracle.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import exprlang as ex
from .errors import (
    DomainError,
    NotInverse,
    ParseError,
    SchemaError,
    SingularJacobian,
    TooLarge,
    UnknownSymbol,
)

INDEPENDENT = ("t", "x")


@dataclass
class SamplePlan:
    """Deterministic sampling plan over the domain box."""

    count: int = 200
    strategy: str = "lowDiscrepancy"
    seed: int = 42
    separation_tolerance: float = 1e-3

    def __post_init__(self):
        if self.count < 1:
            raise SchemaError("sample count must be >= 1")
        if self.strategy not in ("tensorGrid", "lowDiscrepancy"):
            raise SchemaError(f"unknown strategy '{self.strategy}'")


def _golden_alphas(d):
    x = 2.0
    for _ in range(40):
        x = (1.0 + x) ** (1.0 / (d + 1))
    return np.array([(1.0 / x) ** (j + 1) % 1.0 for j in range(d)])


def unit_samples(plan: SamplePlan, dim: int) -> np.ndarray:
    """Points in [0,1)^dim; bit-reproducible for a fixed plan."""
    if plan.strategy == "tensorGrid":
        m = max(1, math.ceil(plan.count ** (1.0 / dim)))
        axes = [(np.arange(m) + 0.5) / m for _ in range(dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([g.ravel() for g in mesh], axis=1)
        return pts[: plan.count]
    alphas = _golden_alphas(dim)
    offset = plan.seed * 9973
    idx = np.arange(1 + offset, plan.count + 1 + offset, dtype=float)
    return (0.5 + np.outer(idx, alphas)) % 1.0


class QuasilinearSystem:
    """Immutable-by-convention system model.

    Entries are expression trees over {t, x} + state names (parameters are
    substituted at load time).  A conjugated backend may replace the entry
    trees by callables built from a block-triangular parent system.
    """

    def __init__(self, n, states, a_entries, g_entries=None, parameters=None,
                 domain=None, exclude=None, hints=None, a0_entries=None,
                 document=None, name="system"):
        self.n = int(n)
        self.states = list(states)
        self.parameters = dict(parameters or {})
        self.a = a_entries
        self.g = g_entries if g_entries is not None else [ex.Const(0.0)] * self.n
        self.a0 = a0_entries
        self.domain = dict(domain or {})
        for nm in INDEPENDENT:
            self.domain.setdefault(nm, (0.0, 1.0))
        self.exclude = list(exclude or [])
        self.hints = dict(hints or {})
        self.document = document
        self.name = name
        self._conjugated = None
        self._cache = {}
        self._validate()

    # -- construction helpers -------------------------------------------------

    def _validate(self):
        if len(self.states) != self.n:
            raise SchemaError(f"expected {self.n} state names, got {len(self.states)}")
        if len(self.a) != self.n or any(len(row) != self.n for row in self.a):
            raise SchemaError("coefficient matrix must be square of size n")
        if len(self.g) != self.n:
            raise SchemaError("source must have length n")
        allowed = set(INDEPENDENT) | set(self.states)
        for i, row in enumerate(self.a):
            for j, e in enumerate(row):
                bad = ex.free_symbols(e) - allowed
                if bad:
                    raise SchemaError(f"A[{i}][{j}] uses undeclared symbol '{sorted(bad)[0]}'")
        for i, e in enumerate(self.g):
            bad = ex.free_symbols(e) - allowed
            if bad:
                raise SchemaError(f"g[{i}] uses undeclared symbol '{sorted(bad)[0]}'")
        for nm, (lo, hi) in self.domain.items():
            if not lo < hi:
                raise SchemaError(f"degenerate domain interval for '{nm}'")
        for nm in self.states:
            if nm not in self.domain:
                raise SchemaError(f"missing domain interval for state '{nm}'")

    @property
    def arg_order(self):
        return list(INDEPENDENT) + self.states

    def _compiled(self, key, exprs):
        fns = self._cache.get(key)
        if fns is None:
            order = self.arg_order
            fns = [ex.compile_expression(e, order) for e in exprs]
            self._cache[key] = fns
        return fns

    def _a_fns(self):
        return self._compiled("A", [e for row in self.a for e in row])

    def _g_fns(self):
        return self._compiled("g", self.g)

    def _da_fns(self, k):
        var = self.states[k]
        key = f"dA/{var}"
        if key not in self._cache:
            d = [ex.differentiate(e, var) for row in self.a for e in row]
            self._cache[key] = [ex.compile_expression(e, self.arg_order) for e in d]
        return self._cache[key]

    # -- admissibility ---------------------------------------------------------

    def in_domain(self, t, x, u, states_only=True):
        for nm, val in zip(self.states, u):
            lo, hi = self.domain[nm]
            if not (lo <= val <= hi):
                return False
        if not states_only:
            for nm, val in (("t", t), ("x", x)):
                lo, hi = self.domain[nm]
                if not (lo <= val <= hi):
                    return False
        return True

    def is_excluded(self, t, x, u):
        """True when any exclusion predicate evaluates > 0."""
        bind = dict(zip(self.arg_order, (t, x, *u)))
        for pred in self.exclude:
            try:
                if ex.evaluate(pred, bind) > 0.0:
                    return True
            except DomainError:
                return True
        return False

    # -- evaluation ------------------------------------------------------------

    def _eval_grid(self, fns, t, x, u, shape):
        args = (t, x, *u)
        with np.errstate(all="ignore"):
            vals = np.array([fn(*args) for fn in fns], dtype=float)
        if not np.all(np.isfinite(vals)):
            flat_idx = int(np.argmin(np.isfinite(vals)))
            exprs = [e for row in self.a for e in row] if shape == (self.n, self.n) else self.g
            bind = dict(zip(self.arg_order, args))
            try:
                ex.evaluate(exprs[flat_idx], bind)
            except DomainError as err:
                i, j = divmod(flat_idx, shape[-1])
                where = f"A[{i}][{j}]" if len(shape) == 2 else f"g[{flat_idx}]"
                raise DomainError(f"{where}: {err}") from None
            raise DomainError(f"non-finite value in entry {flat_idx}")
        return vals.reshape(shape)

    def eval_matrix(self, t, x, u) -> np.ndarray:
        if self._conjugated is not None:
            return self._conjugated.eval_matrix(t, x, u)
        A = self._eval_grid(self._a_fns(), t, x, u, (self.n, self.n))
        if self.a0 is not None:
            A0 = np.array([[ex.evaluate(e, dict(zip(self.arg_order, (t, x, *u))))
                            for e in row] for row in self.a0])
            A = np.linalg.solve(A0, A)
        return A

    def eval_source(self, t, x, u) -> np.ndarray:
        if self._conjugated is not None:
            return self._conjugated.eval_source(t, x, u)
        gv = self._eval_grid(self._g_fns(), t, x, u, (self.n,))
        if self.a0 is not None:
            A0 = np.array([[ex.evaluate(e, dict(zip(self.arg_order, (t, x, *u))))
                            for e in row] for row in self.a0])
            gv = np.linalg.solve(A0, gv)
        return gv

    def eval_matrix_batch(self, t, x, U) -> np.ndarray:
        """Entrywise evaluation over arrays; returns (n, n, N)."""
        if self._conjugated is not None:
            return self._conjugated.eval_matrix_batch(t, x, U)
        if self.a0 is not None:
            return np.stack([self.eval_matrix(t, x, U[:, i])
                             for i in range(U.shape[1])], axis=2)
        fns = self._a_fns()
        N = U.shape[1]
        out = np.empty((self.n, self.n, N))
        args = (np.broadcast_to(t, (N,)), np.broadcast_to(x, (N,)), *U)
        for idx, fn in enumerate(fns):
            i, j = divmod(idx, self.n)
            out[i, j] = fn(*args)
        return out

    def eval_source_batch(self, t, x, U) -> np.ndarray:
        if self._conjugated is not None:
            return self._conjugated.eval_source_batch(t, x, U)
        fns = self._g_fns()
        N = U.shape[1]
        args = (np.broadcast_to(t, (N,)), np.broadcast_to(x, (N,)), *U)
        return np.stack([np.broadcast_to(fn(*args), (N,)) for fn in fns])

    def directional_matrix_derivative(self, t, x, u, w) -> np.ndarray:
        """Sum_k w_k dA/du_k, exact via symbolic differentiation."""
        if self._conjugated is not None:
            return self._conjugated.directional_derivative(t, x, u, w)
        args = (t, x, *u)
        out = np.zeros((self.n, self.n))
        for k, wk in enumerate(w):
            if wk == 0.0:
                continue
            vals = np.array([fn(*args) for fn in self._da_fns(k)], dtype=float)
            if not np.all(np.isfinite(vals)):
                raise DomainError(f"non-finite derivative of A along u_{k}")
            out += wk * vals.reshape(self.n, self.n)
        if self.a0 is not None:
            bind = dict(zip(self.arg_order, args))
            A0 = np.array([[ex.evaluate(e, bind) for e in row] for row in self.a0])
            A1 = np.array([[ex.evaluate(e, bind) for e in row] for row in self.a])
            dA0 = np.zeros((self.n, self.n))
            for k, wk in enumerate(w):
                if wk == 0.0:
                    continue
                dA0 += wk * np.array([[ex.evaluate(ex.differentiate(e, self.states[k]), bind)
                                       for e in row] for row in self.a0])
            A0inv_A1 = np.linalg.solve(A0, A1)
            out = np.linalg.solve(A0, out - dA0 @ A0inv_A1)
        return out

    @property
    def homogeneous(self):
        return all(isinstance(e, ex.Const) and e.value == 0.0 for e in self.g) \
            and self._conjugated_source_zero()

    def _conjugated_source_zero(self):
        if self._conjugated is None:
            return True
        return self._conjugated.source_zero

    @property
    def autonomous(self):
        syms = set()
        for row in self.a:
            for e in row:
                syms |= ex.free_symbols(e)
        for e in self.g:
            syms |= ex.free_symbols(e)
        if self.a0 is not None:
            for row in self.a0:
                for e in row:
                    syms |= ex.free_symbols(e)
        return not (syms & set(INDEPENDENT))

    # -- sampling --------------------------------------------------------------

    def sample_points(self, plan: SamplePlan) -> np.ndarray:
        """Rows (t, x, u_1..u_n) inside the domain box."""
        names = self.arg_order
        lows = np.array([self.domain[nm][0] for nm in names])
        highs = np.array([self.domain[nm][1] for nm in names])
        pts = unit_samples(plan, len(names))
        return lows + pts * (highs - lows)


class _ConjugatedBackend:
    """A(u) = J(u)^-1 T(H(u)) J(u) with J = grad H, evaluated numerically."""

    def __init__(self, parent, tri_system, forward_map, j_entries, dj_entries, u_names,
                 blocks=None):
        self.parent = parent
        self.tri = tri_system
        self.n = tri_system.n
        self.blocks = [list(b) for b in blocks] if blocks else None
        order = list(INDEPENDENT) + list(u_names)
        self.h_fns = [ex.compile_expression(e, order) for e in forward_map]
        self.j_fns = [ex.compile_expression(e, order) for row in j_entries for e in row]
        self.dj_fns = [[ex.compile_expression(e, order) for row in dj_k for e in row]
                       for dj_k in dj_entries]
        self.source_zero = all(isinstance(e, ex.Const) and e.value == 0.0 for e in tri_system.g)

    def _jh(self, t, x, u):
        args = (t, x, *u)
        J = np.array([fn(*args) for fn in self.j_fns]).reshape(self.n, self.n)
        H = np.array([fn(*args) for fn in self.h_fns])
        return J, H

    def eval_matrix(self, t, x, u):
        J, H = self._jh(t, x, u)
        T = self.tri.eval_matrix(t, x, H)
        return np.linalg.solve(J, T @ J)

    def eval_matrix_batch(self, t, x, U):
        N = U.shape[1]
        out = np.empty((self.n, self.n, N))
        for i in range(N):
            out[:, :, i] = self.eval_matrix(t, x, U[:, i])
        return out

    def eval_source(self, t, x, u):
        J, H = self._jh(t, x, u)
        G = self.tri.eval_source(t, x, H)
        return np.linalg.solve(J, G)

    def eval_source_batch(self, t, x, U):
        return np.stack([self.eval_source(t, x, U[:, i]) for i in range(U.shape[1])], axis=1)

    def directional_derivative(self, t, x, u, w):
        args = (t, x, *u)
        J, H = self._jh(t, x, u)
        T = self.tri.eval_matrix(t, x, H)
        dJ = np.zeros((self.n, self.n))
        for k, wk in enumerate(w):
            if wk == 0.0:
                continue
            dJ += wk * np.array([fn(*args) for fn in self.dj_fns[k]]).reshape(self.n, self.n)
        dH = J @ np.asarray(w, dtype=float)
        dT = self.tri.directional_matrix_derivative(t, x, H, dH)
        Jinv = np.linalg.inv(J)
        A = Jinv @ T @ J
        return Jinv @ (dT @ J + T @ dJ) - Jinv @ dJ @ A

    def adapted_components(self, t, x, u):
        """Block-adapted autovector frame transported from the parent system.

        Rights are eigenvectors of the trailing submatrix (zero head), lefts of
        the leading submatrix (zero tail); both normalized inside their own
        block so the scalings depend only on the leading variable groups, which
        is the normalization the source conditions are stated for.  Requires
        the block structure and simple eigenvalues inside each trailing
        submatrix.
        """
        if self.blocks is None:
            return None
        J, H = self._jh(t, x, u)
        T = self.tri.eval_matrix(t, x, H)
        n = self.n
        bounds = []
        start = 0
        for b in self.blocks:
            bounds.append((start, start + len(b)))
            start += len(b)
        values = np.empty(n)
        rights_u = np.empty((n, n))
        lefts_u = np.empty((n, n))
        for (lo, hi) in bounds:
            diag = T[lo:hi, lo:hi]
            lam_block = np.sort(np.linalg.eigvals(diag).real)
            trail = T[lo:, lo:]
            lead = T[:hi, :hi]
            wt, Vt = np.linalg.eig(trail)
            wl, Vl = np.linalg.eig(lead.T)
            for pos, lam in enumerate(lam_block):
                slot = lo + pos
                rt = Vt[:, int(np.argmin(np.abs(wt - lam)))].real
                R = np.zeros(n)
                R[lo:] = rt
                seg = R[lo:hi]
                piv = lo + int(np.argmax(np.abs(seg)))
                if R[piv] == 0.0:
                    return None
                R = R / R[piv]
                lt = Vl[:, int(np.argmin(np.abs(wl - lam)))].real
                L = np.zeros(n)
                L[:hi] = lt
                denom = float(L @ R)
                if abs(denom) < 1e-10 * (np.linalg.norm(L) * np.linalg.norm(R) + 1.0):
                    return None
                L = L / denom
                values[slot] = lam
                rights_u[slot] = np.linalg.solve(J, R)
                lefts_u[slot] = L @ J
        return values, rights_u, lefts_u


# ---------------------------------------------------------------------------
# JSON loading
# ---------------------------------------------------------------------------

def _parse_entry(text, symbols, where):
    try:
        return ex.parse(str(text), symbols)
    except ParseError as err:
        raise ParseError(f"{where}: {err}") from None
    except UnknownSymbol as err:
        raise UnknownSymbol(err.name, where=where) from None


def _require(cond, msg):
    if not cond:
        raise SchemaError(msg)


def load_system(document: str | dict, name="model") -> QuasilinearSystem:
    """Validate and build a system from a model JSON document."""
    doc = json.loads(document) if isinstance(document, str) else document
    _require(isinstance(doc, dict), "model document must be a JSON object")
    _require("n" in doc and "states" in doc and "A" in doc, "keys n, states, A are required")
    n = doc["n"]
    _require(isinstance(n, int) and n >= 1, "n must be a positive integer")
    states = doc["states"]
    _require(isinstance(states, list) and len(states) == n, "states must list n names")
    _require(len(set(states)) == n, "state names must be distinct")
    _require(not (set(states) & set(INDEPENDENT)), "state names t, x are reserved")
    params = doc.get("parameters", {})
    _require(isinstance(params, dict), "parameters must be an object")
    indep = doc.get("independent", list(INDEPENDENT))
    _require(list(indep) == list(INDEPENDENT), "independent variables must be [t, x]")

    symbols = set(INDEPENDENT) | set(states) | set(params)
    subs = {k: float(v) for k, v in params.items()}

    rows = doc["A"]
    _require(isinstance(rows, list) and len(rows) == n, f"A must have {n} rows")
    a_entries = []
    for i, row in enumerate(rows):
        _require(isinstance(row, list) and len(row) == n, f"A row {i} must have {n} entries")
        a_entries.append([ex.substitute(_parse_entry(v, symbols, f"A[{i}][{j}]"), subs)
                          for j, v in enumerate(row)])

    g_doc = doc.get("g")
    if g_doc is None:
        g_entries = [ex.Const(0.0)] * n
    else:
        _require(isinstance(g_doc, list) and len(g_doc) == n, f"g must have {n} entries")
        g_entries = [ex.substitute(_parse_entry(v, symbols, f"g[{i}]"), subs)
                     for i, v in enumerate(g_doc)]

    a0_entries = None
    if doc.get("normalize"):
        a0_doc = doc.get("A0")
        _require(a0_doc is not None, "normalize: true requires A0")
        _require(len(a0_doc) == n and all(len(r) == n for r in a0_doc), "A0 must be n x n")
        a0 = [[ex.substitute(_parse_entry(v, symbols, f"A0[{i}][{j}]"), subs)
               for j, v in enumerate(row)] for i, row in enumerate(a0_doc)]
        diagonal = all(isinstance(a0[i][j], ex.Const) and a0[i][j].value == 0.0
                       for i in range(n) for j in range(n) if i != j)
        if diagonal:
            # symbolic row scaling by the diagonal entries
            a_entries = [[ex.fold_div(a_entries[i][j], a0[i][i]) for j in range(n)]
                         for i in range(n)]
            g_entries = [ex.fold_div(g_entries[i], a0[i][i]) for i in range(n)]
        else:
            a0_entries = a0

    domain = {}
    for nm, iv in doc.get("domain", {}).items():
        _require(nm in symbols, f"domain names unknown coordinate '{nm}'")
        _require(isinstance(iv, list) and len(iv) == 2, f"domain['{nm}'] must be [lo, hi]")
        domain[nm] = (float(iv[0]), float(iv[1]))
    for nm in states:
        domain.setdefault(nm, (-1.0, 1.0))

    exclude = [ex.substitute(_parse_entry(v, symbols, f"exclude[{i}]"), subs)
               for i, v in enumerate(doc.get("exclude", []))]

    hints = {}
    if "partitionHint" in doc:
        ph = doc["partitionHint"]
        _require(isinstance(ph, dict) and "blocks" in ph, "partitionHint needs 'blocks'")
        hints["partition"] = {"blocks": [list(map(int, b)) for b in ph["blocks"]],
                              "mode": ph.get("mode", "partial")}
    if "transformHint" in doc:
        th = doc["transformHint"]
        _require(len(th) == n, "transformHint must have n components")
        hints["transform"] = [ex.substitute(_parse_entry(v, set(states) | set(params), "transformHint"), subs)
                              for v in th]
    if "inverseHint" in doc:
        u_names = doc.get("decoupledHint", {}).get("states") or [f"U{i+1}" for i in range(n)]
        hints["inverse"] = [ex.substitute(_parse_entry(v, set(u_names) | set(params), "inverseHint"), subs)
                            for v in doc["inverseHint"]]
        hints["inverse_states"] = list(u_names)
    if "autovectorHint" in doc:
        av = doc["autovectorHint"]
        _require("right" in av and "eigenvalues" in av, "autovectorHint needs right, eigenvalues")
        _require(len(av["right"]) == n, "autovectorHint.right must have n vectors")
        _require(len(av["eigenvalues"]) == n, "autovectorHint.eigenvalues must have n entries")
        hints["autovectors"] = {
            "eigenvalues": [ex.substitute(_parse_entry(v, symbols, "autovectorHint.eigenvalues"), subs)
                            for v in av["eigenvalues"]],
            "right": [[ex.substitute(_parse_entry(v, symbols, "autovectorHint.right"), subs)
                       for v in vec] for vec in av["right"]],
        }
        if av.get("left"):
            _require(len(av["left"]) == n, "autovectorHint.left must have n vectors")
            hints["autovectors"]["left"] = [
                [ex.substitute(_parse_entry(v, symbols, "autovectorHint.left"), subs) for v in vec]
                for vec in av["left"]]
    if "decoupledHint" in doc:
        dh = doc["decoupledHint"]
        _require("states" in dh and "A" in dh, "decoupledHint needs states, A")
        hints["decoupled"] = dh

    return QuasilinearSystem(n, states, a_entries, g_entries, params, domain,
                             exclude, hints, a0_entries, document=doc, name=name)


# ---------------------------------------------------------------------------
# symbolic linear algebra (small n) and conjugation
# ---------------------------------------------------------------------------

def symbolic_det(m):
    n = len(m)
    if n == 1:
        return m[0][0]
    total = ex.Const(0.0)
    for j in range(n):
        minor = [row[:j] + row[j + 1:] for row in m[1:]]
        term = ex.fold_mul(m[0][j], symbolic_det(minor))
        total = ex.fold_add(total, term) if j % 2 == 0 else ex.fold_sub(total, term)
    return total


def symbolic_adjugate(m):
    n = len(m)
    if n == 1:
        return [[ex.Const(1.0)]]
    adj = [[None] * n for _ in range(n)]
    for i in range(n):
        for j in range(n):
            minor = [[m[r][c] for c in range(n) if c != j] for r in range(n) if r != i]
            cof = symbolic_det(minor)
            if (i + j) % 2 == 1:
                cof = ex.fold_neg(cof)
            adj[j][i] = cof
    return adj


def symbolic_matmul(a, b):
    n, m, p = len(a), len(b), len(b[0])
    out = [[ex.Const(0.0)] * p for _ in range(n)]
    for i in range(n):
        for j in range(p):
            acc = ex.Const(0.0)
            for k in range(m):
                acc = ex.fold_add(acc, ex.fold_mul(a[i][k], b[k][j]))
            out[i][j] = acc
    return out


def conjugate_system(triangular: QuasilinearSystem, h_map, inverse_map,
                     u_names, u_domain, check_count=64, tol=1e-9,
                     symbolic=False, blocks=None, name="conjugated") -> QuasilinearSystem:
    """Change variables u = h(U), U = H(u) on a system written in U.

    Returns the system satisfied by u; its analysis with the known partition
    is the oracle for the condition checker.  `h_map` entries are expressions
    in the triangular system's states, `inverse_map` entries in `u_names`.
    """
    n = triangular.n
    if n > 6:
        raise TooLarge("conjugation supported up to n = 6")
    u_names = list(u_names)
    U_names = triangular.states

    j_entries = [[ex.differentiate(H, nm) for nm in u_names] for H in inverse_map]
    det_expr = symbolic_det(j_entries)

    order = list(INDEPENDENT) + u_names
    h_fns = [ex.compile_expression(e, list(INDEPENDENT) + U_names) for e in h_map]
    H_fns = [ex.compile_expression(e, order) for e in inverse_map]
    det_fn = ex.compile_expression(det_expr, order)

    lows = np.array([u_domain[nm][0] for nm in u_names])
    highs = np.array([u_domain[nm][1] for nm in u_names])
    pts = lows + unit_samples(SamplePlan(count=check_count, seed=7), n) * (highs - lows)
    for row in pts:
        args = (0.0, 0.0, *row)
        U = np.array([fn(*args) for fn in H_fns])
        back = np.array([fn(0.0, 0.0, *U) for fn in h_fns])
        if not np.all(np.isfinite(back)) or np.max(np.abs(back - row)) > tol:
            raise NotInverse(f"h(H(u)) differs from u by {np.max(np.abs(back - row)):.3e}")
        if abs(det_fn(*args)) < 1e-8:
            raise SingularJacobian("det grad H vanishes on the sampled domain")

    domain = {nm: u_domain[nm] for nm in u_names}
    domain.setdefault("t", triangular.domain.get("t", (0.0, 1.0)))
    domain.setdefault("x", triangular.domain.get("x", (0.0, 1.0)))

    if symbolic:
        sub_map = dict(zip(U_names, inverse_map))
        t_sub = [[ex.substitute(e, sub_map) for e in row] for row in triangular.a]
        adj = symbolic_adjugate(j_entries)
        num = symbolic_matmul(symbolic_matmul(adj, t_sub), j_entries)
        a_entries = [[ex.fold_div(num[i][j], det_expr) for j in range(n)] for i in range(n)]
        if triangular.homogeneous:
            g_entries = None
        else:
            g_sub = [ex.substitute(e, sub_map) for e in triangular.g]
            gnum = symbolic_matmul(adj, [[e] for e in g_sub])
            g_entries = [ex.fold_div(gnum[i][0], det_expr) for i in range(n)]
        return QuasilinearSystem(n, u_names, a_entries, g_entries, {}, domain, name=name)

    dj_entries = [[[ex.differentiate(e, nm) for e in row] for row in j_entries]
                  for nm in u_names]
    zero = ex.Const(0.0)
    sys_out = QuasilinearSystem(n, u_names, [[zero] * n for _ in range(n)],
                                None, {}, domain, name=name)
    sys_out._conjugated = _ConjugatedBackend(sys_out, triangular, inverse_map,
                                             j_entries, dj_entries, u_names,
                                             blocks=blocks)
    return sys_out
