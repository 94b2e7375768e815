"""Dense-tensor reverse-mode differentiation on an explicit tape.

All numerics are float64. A :class:`Tape` records an append-only sequence of
nodes; node inputs always reference earlier nodes, so the recorded order is
already a topological order. Evaluation replays the forward rules, the
gradient pass replays the exact adjoints in reverse. Parameters keep their
current values on the tape, so an optimization loop builds the graph once and
re-evaluates it after every in-place parameter update.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tape",
    "Node",
    "ShapeMismatchError",
    "AdamState",
    "adam_step",
]


class ShapeMismatchError(ValueError):
    """Operand shapes violate an op's shape rule; names the offending node."""

    def __init__(self, node_id: int, op: str, detail: str):
        self.node_id = node_id
        self.op = op
        super().__init__(f"node {node_id} ({op}): {detail}")


def _as_array(value) -> np.ndarray:
    # np.ascontiguousarray promotes 0-d scalars to 1-d; keep scalars 0-d
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim > 0:
        arr = np.ascontiguousarray(arr)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor values must be finite")
    return arr


class Node:
    """One tape entry: op kind, input node ids, and op-specific payload."""

    __slots__ = ("id", "op", "inputs", "shape", "extra")

    def __init__(self, id, op, inputs, shape, extra=None):
        self.id = id
        self.op = op
        self.inputs = inputs
        self.shape = shape
        self.extra = extra

    def __repr__(self):
        return f"Node({self.id}, {self.op}, in={self.inputs}, shape={self.shape})"


class Tape:
    """Append-only computation record with exact reverse-mode adjoints."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[int, np.ndarray] = {}
        self._consts: dict[int, np.ndarray] = {}
        self._input_shapes: dict[int, tuple] = {}
        self._needs: list[bool] | None = None

    # ------------------------------------------------------------------
    # node constructors
    # ------------------------------------------------------------------

    def _append(self, op, inputs, shape, extra=None) -> int:
        node = Node(len(self.nodes), op, tuple(inputs), tuple(shape), extra)
        self.nodes.append(node)
        self._needs = None
        return node.id

    def _needs_grad(self) -> list[bool]:
        """Per node: does any parameter feed into it? Skips dead adjoint work."""
        if self._needs is None or len(self._needs) != len(self.nodes):
            needs = []
            for node in self.nodes:
                needs.append(
                    node.op == "param" or any(needs[i] for i in node.inputs)
                )
            self._needs = needs
        return self._needs

    def _shape(self, nid: int) -> tuple:
        return self.nodes[nid].shape

    def _fail(self, op, detail):
        raise ShapeMismatchError(len(self.nodes), op, detail)

    def input(self, shape) -> int:
        """Free input placeholder, bound at evaluate time."""
        nid = self._append("input", (), tuple(shape))
        self._input_shapes[nid] = tuple(shape)
        return nid

    def constant(self, value) -> int:
        arr = _as_array(value)
        nid = self._append("const", (), arr.shape)
        self._consts[nid] = arr
        return nid

    def parameter(self, value) -> int:
        """Trainable leaf. The array is stored by reference and may be
        updated in place between evaluations."""
        arr = _as_array(value)
        nid = self._append("param", (), arr.shape)
        self.params[nid] = arr
        return nid

    def add(self, a: int, b: int) -> int:
        sa, sb = self._shape(a), self._shape(b)
        if sa == sb:
            return self._append("add", (a, b), sa)
        if len(sa) == 2 and sb == (sa[1],):
            return self._append("add_bias", (a, b), sa)
        self._fail("add", f"incompatible shapes {sa} and {sb}")

    def sub(self, a: int, b: int) -> int:
        sa, sb = self._shape(a), self._shape(b)
        if sa != sb:
            self._fail("sub", f"incompatible shapes {sa} and {sb}")
        return self._append("sub", (a, b), sa)

    def mul(self, a: int, b: int) -> int:
        sa, sb = self._shape(a), self._shape(b)
        if sa != sb:
            self._fail("mul", f"incompatible shapes {sa} and {sb}")
        return self._append("mul", (a, b), sa)

    def smul(self, a: int, c: float) -> int:
        return self._append("smul", (a,), self._shape(a), float(c))

    def matmul(self, a: int, b: int) -> int:
        sa, sb = self._shape(a), self._shape(b)
        if len(sa) != 2 or len(sb) != 2 or sa[1] != sb[0]:
            self._fail("matmul", f"cannot multiply {sa} by {sb}")
        return self._append("matmul", (a, b), (sa[0], sb[1]))

    def relu(self, a: int) -> int:
        return self._append("relu", (a,), self._shape(a))

    # (x)^+ hinge and ReLU share one rule: max(x, 0), subgradient 0 at 0.
    hinge = relu

    def softmax(self, a: int) -> int:
        sa = self._shape(a)
        if len(sa) not in (1, 2):
            self._fail("softmax", f"expected 1D or 2D input, got {sa}")
        return self._append("softmax", (a,), sa)

    def square(self, a: int) -> int:
        return self._append("square", (a,), self._shape(a))

    def sqrt_eps(self, a: int, eps: float = 1e-12) -> int:
        return self._append("sqrt_eps", (a,), self._shape(a), float(eps))

    def l2_norm(self, a: int, eps: float = 1e-12) -> int:
        """Frobenius norm of the whole tensor, guarded as sqrt(x + eps)."""
        return self._append("l2norm", (a,), (), float(eps))

    def sum_reduce(self, a: int) -> int:
        return self._append("sum", (a,), ())

    def mean_reduce(self, a: int) -> int:
        return self._append("mean", (a,), ())

    def max_reduce(self, a: int, axis: int = 0) -> int:
        return self._reduce("max_r", a, axis)

    def min_reduce(self, a: int, axis: int = 0) -> int:
        return self._reduce("min_r", a, axis)

    def _reduce(self, op, a, axis):
        sa = self._shape(a)
        if len(sa) == 1:
            if axis != 0:
                self._fail(op, f"axis {axis} invalid for shape {sa}")
            return self._append(op, (a,), (), 0)
        if len(sa) == 2:
            if axis not in (0, 1):
                self._fail(op, f"axis {axis} invalid for shape {sa}")
            out = (sa[1],) if axis == 0 else (sa[0],)
            return self._append(op, (a,), out, axis)
        self._fail(op, f"expected 1D or 2D input, got {sa}")

    def group_max(self, a: int, group_size: int) -> int:
        """Max-reduce over contiguous row groups: (G*g, F) -> (G, F)."""
        sa = self._shape(a)
        if len(sa) != 2 or sa[0] % group_size != 0:
            self._fail("group_max", f"shape {sa} not divisible into groups of {group_size}")
        return self._append("group_max", (a,), (sa[0] // group_size, sa[1]), int(group_size))

    def softmax_xent(self, logits: int, labels) -> int:
        """Softmax cross-entropy with integer labels.

        (C,) with a scalar label -> scalar loss; (B, C) with a (B,) label
        array -> per-example losses of shape (B,).
        """
        sl = self._shape(logits)
        if len(sl) == 1:
            lab = int(labels)
            if not 0 <= lab < sl[0]:
                self._fail("xent", f"label {lab} out of range for {sl[0]} classes")
            return self._append("xent", (logits,), (), lab)
        if len(sl) == 2:
            lab = np.asarray(labels, dtype=np.int64)
            if lab.shape != (sl[0],):
                self._fail("xent", f"labels shape {lab.shape} does not match batch {sl[0]}")
            if lab.min() < 0 or lab.max() >= sl[1]:
                self._fail("xent", f"label out of range for {sl[1]} classes")
            return self._append("xent", (logits,), (sl[0],), lab)
        self._fail("xent", f"expected 1D or 2D logits, got {sl}")

    def gather(self, a: int, indices) -> int:
        """Select rows (2D) or elements (1D) by index; adjoint scatter-adds."""
        idx = np.asarray(indices, dtype=np.int64)
        if idx.ndim != 1:
            self._fail("gather", "indices must be 1D")
        sa = self._shape(a)
        if len(sa) == 0 or idx.size and (idx.min() < 0 or idx.max() >= sa[0]):
            self._fail("gather", f"index out of range for shape {sa}")
        return self._append("gather", (a,), (idx.size,) + sa[1:], idx)

    def concat_rows(self, parts: list[int]) -> int:
        shapes = [self._shape(p) for p in parts]
        if not parts or any(s[1:] != shapes[0][1:] for s in shapes):
            self._fail("concat0", f"trailing dims differ: {shapes}")
        total = sum(s[0] for s in shapes)
        return self._append("concat0", tuple(parts), (total,) + shapes[0][1:])

    def concat_cols(self, parts: list[int]) -> int:
        shapes = [self._shape(p) for p in parts]
        if not parts or any(len(s) != 2 or s[0] != shapes[0][0] for s in shapes):
            self._fail("concat1", f"row counts differ: {shapes}")
        total = sum(s[1] for s in shapes)
        return self._append("concat1", tuple(parts), (shapes[0][0], total))

    def pairwise_sqdist(self, a: int, b: int) -> int:
        """All squared distances between two point sets: (N,d),(M,d) -> (N,M)."""
        sa, sb = self._shape(a), self._shape(b)
        if len(sa) != 2 or len(sb) != 2 or sa[1] != sb[1]:
            self._fail("pairsq", f"incompatible point sets {sa} and {sb}")
        return self._append("pairsq", (a, b), (sa[0], sb[0]))

    def reshape(self, a: int, shape) -> int:
        sa = self._shape(a)
        shape = tuple(int(s) for s in shape)
        if int(np.prod(sa, dtype=np.int64)) != int(np.prod(shape, dtype=np.int64)):
            self._fail("reshape", f"cannot reshape {sa} to {shape}")
        return self._append("reshape", (a,), shape)

    def affine(self, x: int, w: int, b: int) -> int:
        """x @ w + b with the bias broadcast over rows."""
        return self.add(self.matmul(x, w), b)

    # ------------------------------------------------------------------
    # evaluation
    # ------------------------------------------------------------------

    def evaluate(self, inputs: dict[int, np.ndarray] | None = None) -> list[np.ndarray]:
        """Forward pass. Returns the value of every node, indexed by node id.

        Deterministic: identical tape, bindings and parameter values yield
        bitwise identical outputs.
        """
        inputs = inputs or {}
        for nid, shape in self._input_shapes.items():
            if nid not in inputs:
                raise ShapeMismatchError(nid, "input", "free input not bound")
            bound = np.asarray(inputs[nid])
            if bound.shape != shape:
                raise ShapeMismatchError(
                    nid, "input", f"bound shape {bound.shape} != declared {shape}"
                )
        vals: list = [None] * len(self.nodes)
        for node in self.nodes:
            vals[node.id] = _FORWARD[node.op](node, vals, self, inputs)
        return vals

    def gradient(
        self, loss: int, values: list[np.ndarray] | None = None
    ) -> dict[int, np.ndarray]:
        """Exact reverse-mode adjoints of a scalar loss for every parameter."""
        if self._shape(loss) != ():
            raise ValueError(f"loss node {loss} is not scalar: shape {self._shape(loss)}")
        vals = values if values is not None else self.evaluate()
        needs = self._needs_grad()
        adj: list = [None] * len(self.nodes)
        adj[loss] = np.ones((), dtype=np.float64)
        for node in reversed(self.nodes[: loss + 1]):
            g = adj[node.id]
            if g is None or not needs[node.id]:
                continue
            back = _BACKWARD.get(node.op)
            if back is not None:
                back(node, vals, adj, g, needs)
        out = {}
        for pid in self.params:
            out[pid] = adj[pid] if adj[pid] is not None else np.zeros(self._shape(pid))
        return out

    def finite_difference_check(
        self,
        loss: int,
        inputs: dict[int, np.ndarray] | None = None,
        epsilon: float = 1e-6,
    ) -> float:
        """Compare analytic parameter gradients against central differences.

        Returns the max relative error |a-n| / (|a|+|n|) over coordinates
        where |a|+|n| > 1e-8; 0.0 if no coordinate passes the threshold.
        """
        if epsilon <= 0:
            raise ValueError("epsilon must be positive")
        vals = self.evaluate(inputs)
        analytic = self.gradient(loss, vals)
        worst = 0.0
        for pid, arr in self.params.items():
            grad = analytic[pid]
            flat = arr.reshape(-1)
            gflat = np.asarray(grad).reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + epsilon
                f_plus = float(self.evaluate(inputs)[loss])
                flat[j] = orig - epsilon
                f_minus = float(self.evaluate(inputs)[loss])
                flat[j] = orig
                numeric = (f_plus - f_minus) / (2.0 * epsilon)
                denom = abs(gflat[j]) + abs(numeric)
                if denom > 1e-8:
                    worst = max(worst, abs(gflat[j] - numeric) / denom)
        return worst


# ----------------------------------------------------------------------
# forward rules
# ----------------------------------------------------------------------


def _softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _logsumexp(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True)))[..., 0]


def _fwd_xent(node, vals, tape, inputs):
    logits = vals[node.inputs[0]]
    lab = node.extra
    lse = _logsumexp(logits)
    if logits.ndim == 1:
        return np.asarray(lse - logits[lab])
    return lse - logits[np.arange(logits.shape[0]), lab]


def _fwd_pairsq(node, vals, tape, inputs):
    a, b = vals[node.inputs[0]], vals[node.inputs[1]]
    d = (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * (a @ b.T)
    return np.maximum(d, 0.0, out=d)


_FORWARD = {
    "input": lambda n, v, t, inp: _as_array(inp[n.id]),
    "const": lambda n, v, t, inp: t._consts[n.id],
    "param": lambda n, v, t, inp: t.params[n.id],
    "add": lambda n, v, t, inp: v[n.inputs[0]] + v[n.inputs[1]],
    "add_bias": lambda n, v, t, inp: v[n.inputs[0]] + v[n.inputs[1]],
    "sub": lambda n, v, t, inp: v[n.inputs[0]] - v[n.inputs[1]],
    "mul": lambda n, v, t, inp: v[n.inputs[0]] * v[n.inputs[1]],
    "smul": lambda n, v, t, inp: v[n.inputs[0]] * n.extra,
    "matmul": lambda n, v, t, inp: v[n.inputs[0]] @ v[n.inputs[1]],
    "relu": lambda n, v, t, inp: np.maximum(v[n.inputs[0]], 0.0),
    "softmax": lambda n, v, t, inp: _softmax(v[n.inputs[0]]),
    "square": lambda n, v, t, inp: np.square(v[n.inputs[0]]),
    "sqrt_eps": lambda n, v, t, inp: np.sqrt(v[n.inputs[0]] + n.extra),
    "l2norm": lambda n, v, t, inp: np.sqrt(np.square(v[n.inputs[0]]).sum() + n.extra),
    "sum": lambda n, v, t, inp: np.asarray(v[n.inputs[0]].sum()),
    "mean": lambda n, v, t, inp: np.asarray(v[n.inputs[0]].mean()),
    "max_r": lambda n, v, t, inp: np.asarray(v[n.inputs[0]].max(axis=n.extra)),
    "min_r": lambda n, v, t, inp: np.asarray(v[n.inputs[0]].min(axis=n.extra)),
    "group_max": lambda n, v, t, inp: v[n.inputs[0]]
    .reshape(n.shape[0], n.extra, n.shape[1])
    .max(axis=1),
    "xent": _fwd_xent,
    "gather": lambda n, v, t, inp: v[n.inputs[0]][n.extra],
    "concat0": lambda n, v, t, inp: np.concatenate([v[i] for i in n.inputs], axis=0),
    "concat1": lambda n, v, t, inp: np.concatenate([v[i] for i in n.inputs], axis=1),
    "pairsq": _fwd_pairsq,
    "reshape": lambda n, v, t, inp: v[n.inputs[0]].reshape(n.shape),
}


# ----------------------------------------------------------------------
# adjoint rules
# ----------------------------------------------------------------------


def _acc(adj, nid, g):
    if adj[nid] is None:
        adj[nid] = g.copy() if isinstance(g, np.ndarray) else np.asarray(g, dtype=np.float64)
    else:
        adj[nid] = adj[nid] + g


def _bwd_add(n, v, adj, g, needs):
    if needs[n.inputs[0]]:
        _acc(adj, n.inputs[0], g)
    if needs[n.inputs[1]]:
        _acc(adj, n.inputs[1], g)


def _bwd_add_bias(n, v, adj, g, needs):
    if needs[n.inputs[0]]:
        _acc(adj, n.inputs[0], g)
    if needs[n.inputs[1]]:
        _acc(adj, n.inputs[1], g.sum(axis=0))


def _bwd_sub(n, v, adj, g, needs):
    if needs[n.inputs[0]]:
        _acc(adj, n.inputs[0], g)
    if needs[n.inputs[1]]:
        _acc(adj, n.inputs[1], -g)


def _bwd_mul(n, v, adj, g, needs):
    a, b = n.inputs
    if needs[a]:
        _acc(adj, a, g * v[b])
    if needs[b]:
        _acc(adj, b, g * v[a])


def _bwd_matmul(n, v, adj, g, needs):
    a, b = n.inputs
    if needs[a]:
        _acc(adj, a, g @ v[b].T)
    if needs[b]:
        _acc(adj, b, v[a].T @ g)


def _bwd_relu(n, v, adj, g, needs):
    _acc(adj, n.inputs[0], g * (v[n.inputs[0]] > 0.0))


def _bwd_softmax(n, v, adj, g, needs):
    y = v[n.id]
    dot = (g * y).sum(axis=-1, keepdims=True)
    _acc(adj, n.inputs[0], y * (g - dot))


def _bwd_square(n, v, adj, g, needs):
    _acc(adj, n.inputs[0], 2.0 * g * v[n.inputs[0]])


def _bwd_sqrt_eps(n, v, adj, g, needs):
    _acc(adj, n.inputs[0], 0.5 * g / v[n.id])


def _bwd_l2norm(n, v, adj, g, needs):
    _acc(adj, n.inputs[0], (float(g) / float(v[n.id])) * v[n.inputs[0]])


def _bwd_sum(n, v, adj, g, needs):
    _acc(adj, n.inputs[0], np.full(v[n.inputs[0]].shape, float(g)))


def _bwd_mean(n, v, adj, g, needs):
    x = v[n.inputs[0]]
    _acc(adj, n.inputs[0], np.full(x.shape, float(g) / x.size))


def _bwd_extreme(n, v, adj, g, needs):
    """max/min adjoint: all mass routed to the lowest-index extremum."""
    x = v[n.inputs[0]]
    arg = x.argmax(axis=n.extra) if n.op == "max_r" else x.argmin(axis=n.extra)
    dx = np.zeros_like(x)
    if x.ndim == 1:
        dx[arg] = float(g)
    elif n.extra == 0:
        dx[arg, np.arange(x.shape[1])] = g
    else:
        dx[np.arange(x.shape[0]), arg] = g
    _acc(adj, n.inputs[0], dx)


def _bwd_group_max(n, v, adj, g, needs):
    x = v[n.inputs[0]]
    grouped = x.reshape(n.shape[0], n.extra, n.shape[1])
    arg = grouped.argmax(axis=1)
    dx = np.zeros_like(grouped)
    np.put_along_axis(dx, arg[:, None, :], np.asarray(g)[:, None, :], axis=1)
    _acc(adj, n.inputs[0], dx.reshape(x.shape))


def _bwd_xent(n, v, adj, g, needs):
    logits = v[n.inputs[0]]
    soft = _softmax(logits)
    if logits.ndim == 1:
        soft[n.extra] -= 1.0
        _acc(adj, n.inputs[0], float(g) * soft)
    else:
        soft[np.arange(logits.shape[0]), n.extra] -= 1.0
        _acc(adj, n.inputs[0], np.asarray(g)[:, None] * soft)


def _bwd_gather(n, v, adj, g, needs):
    dx = np.zeros_like(v[n.inputs[0]])
    np.add.at(dx, n.extra, g)
    _acc(adj, n.inputs[0], dx)


def _bwd_concat(axis):
    def rule(n, v, adj, g, needs):
        offset = 0
        for nid in n.inputs:
            size = v[nid].shape[axis]
            if needs[nid]:
                sl = (slice(None),) * axis + (slice(offset, offset + size),)
                _acc(adj, nid, g[sl])
            offset += size

    return rule


def _bwd_pairsq(n, v, adj, g, needs):
    a, b = v[n.inputs[0]], v[n.inputs[1]]
    if needs[n.inputs[0]]:
        rs = g.sum(axis=1)
        _acc(adj, n.inputs[0], 2.0 * (rs[:, None] * a - g @ b))
    if needs[n.inputs[1]]:
        cs = g.sum(axis=0)
        _acc(adj, n.inputs[1], 2.0 * (cs[:, None] * b - g.T @ a))


def _bwd_reshape(n, v, adj, g, needs):
    _acc(adj, n.inputs[0], np.asarray(g).reshape(v[n.inputs[0]].shape))


def _bwd_smul(n, v, adj, g, needs):
    _acc(adj, n.inputs[0], g * n.extra)


_BACKWARD = {
    "add": _bwd_add,
    "add_bias": _bwd_add_bias,
    "sub": _bwd_sub,
    "mul": _bwd_mul,
    "smul": _bwd_smul,
    "matmul": _bwd_matmul,
    "relu": _bwd_relu,
    "softmax": _bwd_softmax,
    "square": _bwd_square,
    "sqrt_eps": _bwd_sqrt_eps,
    "l2norm": _bwd_l2norm,
    "sum": _bwd_sum,
    "mean": _bwd_mean,
    "max_r": _bwd_extreme,
    "min_r": _bwd_extreme,
    "group_max": _bwd_group_max,
    "xent": _bwd_xent,
    "gather": _bwd_gather,
    "concat0": _bwd_concat(0),
    "concat1": _bwd_concat(1),
    "pairsq": _bwd_pairsq,
    "reshape": _bwd_reshape,
}


# ----------------------------------------------------------------------
# Adam
# ----------------------------------------------------------------------


@dataclass
class AdamState:
    """Bias-corrected Adam accumulators, keyed like the parameter map."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict) -> None:
    """One in-place Adam update on every parameter present in ``grads``."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for key, p in params.items():
        g = np.asarray(grads[key])
        if g.shape != p.shape:
            raise ShapeMismatchError(
                key if isinstance(key, int) else -1,
                "adam_step",
                f"gradient shape {g.shape} != parameter shape {p.shape}",
            )
        if key not in state.m:
            state.m[key] = np.zeros_like(p)
            state.v[key] = np.zeros_like(p)
        m = state.m[key]
        v = state.v[key]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
