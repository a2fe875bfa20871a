"""Reverse-mode automatic differentiation on a flat operation tape.

A :class:`Graph` records operations as they execute (define-by-run), so node
indices are already in topological order: every parent index precedes its
child. One backward sweep walks the tape once in reverse and accumulates
gradients for the registered parameter leaves into a single flat vector.

The op registry mixes elementary operations (add, matmul, tanh, ...) with a
few fused ops (a full recurrent sweep, attention scoring/pooling, dense
layers) whose hand-derived backward rules keep the tape short. Everything is
float64.
"""

from __future__ import annotations

import numpy as np

from .errors import GraphContractError, NonFiniteError


class Node:
    """One tape entry: operation tag, parent indices, cached forward value."""

    __slots__ = ("op", "parents", "value", "ctx")

    def __init__(self, op, parents, value, ctx=None):
        self.op = op
        self.parents = parents
        self.value = value
        self.ctx = ctx

    def __repr__(self):
        return f"Node(op={self.op!r}, parents={self.parents}, shape={np.shape(self.value)})"


class Graph:
    """Operation tape with parameter-leaf bookkeeping.

    Parameter leaves are registered with their slice into the owner's flat
    parameter vector; ``backward`` returns a gradient of that full length.
    Graphs are single-writer values: build one per forward pass and share it
    read-only afterwards.
    """

    def __init__(self, n_params=0, check_finite=True):
        self.nodes: list[Node] = []
        self.n_params = n_params
        self.param_slices: dict[int, tuple[int, int]] = {}
        self.check_finite = check_finite

    def __len__(self):
        return len(self.nodes)

    def value(self, node_id):
        return self.nodes[node_id].value

    def _push(self, node):
        for p in node.parents:
            if not 0 <= p < len(self.nodes):
                raise GraphContractError(f"parent index {p} out of range")
        self.nodes.append(node)
        return len(self.nodes) - 1

    def const(self, value):
        """Add a constant leaf (no gradient flows out of it)."""
        return self._push(Node("const", (), np.asarray(value, dtype=np.float64)))

    def param(self, value, start, stop):
        """Add a trainable leaf covering ``[start, stop)`` of the flat vector."""
        value = np.asarray(value, dtype=np.float64)
        if stop - start != value.size:
            raise GraphContractError(
                f"param slice [{start}, {stop}) does not match value size {value.size}"
            )
        node_id = self._push(Node("param", (), value))
        self.param_slices[node_id] = (start, stop)
        return node_id

    def apply(self, op, *parents, **kwargs):
        """Execute ``op`` on parent node values and append the result node."""
        fwd, _ = OPS[op]
        ctx = dict(kwargs)
        values = [self.nodes[p].value for p in parents]
        out = fwd(ctx, *values)
        if self.check_finite and not np.all(np.isfinite(out)):
            raise NonFiniteError(f"non-finite value produced by op {op!r}")
        return self._push(Node(op, tuple(parents), out, ctx))

    def backward(self, loss_id):
        """Accumulate d(loss)/d(param) for every parameter leaf.

        Returns a flat vector of length ``n_params``. Parameters the loss
        does not depend on receive exactly 0. The sweep visits each tape
        node at most once, children before parents.
        """
        loss = self.nodes[loss_id]
        if np.ndim(loss.value) != 0:
            raise GraphContractError(
                f"backward requires a scalar loss node, got shape {np.shape(loss.value)}"
            )
        flat = np.zeros(self.n_params, dtype=np.float64)
        grads: dict[int, np.ndarray] = {loss_id: np.array(1.0)}
        for nid in range(loss_id, -1, -1):
            g = grads.pop(nid, None)
            if g is None:
                continue
            node = self.nodes[nid]
            if node.op == "const":
                continue
            if node.op == "param":
                start, stop = self.param_slices[nid]
                flat[start:stop] += np.asarray(g, dtype=np.float64).ravel()
                continue
            _, bwd = OPS[node.op]
            parent_values = [self.nodes[p].value for p in node.parents]
            pgrads = bwd(node.ctx, g, node.value, *parent_values)
            for p, pg in zip(node.parents, pgrads):
                if pg is None:
                    continue
                if p in grads:
                    grads[p] = grads[p] + pg
                else:
                    grads[p] = pg
        if self.check_finite and not np.all(np.isfinite(flat)):
            raise NonFiniteError("non-finite gradient after backward sweep")
        return flat


def _unbroadcast(grad, shape):
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    grad = np.asarray(grad)
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# --- elementary ops ---------------------------------------------------------

def _add_fwd(ctx, a, b):
    return a + b


def _add_bwd(ctx, g, out, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _sub_fwd(ctx, a, b):
    return a - b


def _sub_bwd(ctx, g, out, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def _mul_fwd(ctx, a, b):
    return a * b


def _mul_bwd(ctx, g, out, a, b):
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _neg_fwd(ctx, a):
    return -a


def _neg_bwd(ctx, g, out, a):
    return (-g,)


def _matmul_fwd(ctx, a, b):
    return a @ b


def _matmul_bwd(ctx, g, out, a, b):
    return g @ b.T, a.T @ g


def _tanh_fwd(ctx, a):
    return np.tanh(a)


def _tanh_bwd(ctx, g, out, a):
    return (g * (1.0 - out * out),)


def _sigmoid_fwd(ctx, a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def _sigmoid_bwd(ctx, g, out, a):
    return (g * out * (1.0 - out),)


def _square_fwd(ctx, a):
    return a * a


def _square_bwd(ctx, g, out, a):
    return (2.0 * g * a,)


def _sum_fwd(ctx, a):
    return np.asarray(np.sum(a))


def _sum_bwd(ctx, g, out, a):
    return (np.full(a.shape, float(g)),)


def _mean_fwd(ctx, a):
    return np.asarray(np.mean(a))


def _mean_bwd(ctx, g, out, a):
    return (np.full(a.shape, float(g) / a.size),)


def _mse_fwd(ctx, pred, target):
    diff = pred.ravel() - target.ravel()
    ctx["diff"] = diff
    return np.asarray(np.mean(diff * diff))


def _mse_bwd(ctx, g, out, pred, target):
    diff = ctx["diff"]
    d = (2.0 * float(g) / diff.size) * diff
    return d.reshape(pred.shape), -d.reshape(target.shape)


def _softmax_rows_fwd(ctx, s):
    z = s - s.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _softmax_rows_bwd(ctx, g, out, s):
    return (out * (g - np.sum(g * out, axis=1, keepdims=True)),)


# --- fused network ops ------------------------------------------------------

def _dense_fwd(ctx, x, w, b):
    return x @ w + b[None, :]


def _dense_bwd(ctx, g, out, x, w, b):
    return g @ w.T, x.T @ g, g.sum(axis=0)


def _attn_scores_fwd(ctx, hs, w, b):
    # hs: B x T x H, w: H x 1, b: (1,) -> scores B x T
    return hs @ w[:, 0] + b[0]


def _attn_scores_bwd(ctx, g, out, hs, w, b):
    dhs = g[:, :, None] * w[None, None, :, 0]
    dw = np.einsum("bt,bth->h", g, hs)[:, None]
    db = np.array([g.sum()])
    return dhs, dw, db


def _attn_mix_fwd(ctx, alpha, hs):
    # alpha: B x T, hs: B x T x H -> context B x H
    return np.einsum("bt,bth->bh", alpha, hs)


def _attn_mix_bwd(ctx, g, out, alpha, hs):
    dalpha = np.einsum("bh,bth->bt", g, hs)
    dhs = alpha[:, :, None] * g[:, None, :]
    return dalpha, dhs


def _sigm(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def _lstm_seq_fwd(ctx, x, w_xi, w_hi, w_ci, b_i, w_xf, w_hf, w_cf, b_f,
                  w_xc, w_hc, b_c, w_xo, w_ho, w_co, b_o):
    """Run the full recurrent sweep; hidden states for all steps come back.

    x is B x T x F; peephole weights are length-H vectors applied elementwise
    to the cell state. Gate activations and cell states are cached for the
    backward sweep.
    """
    batch, steps, _ = x.shape
    hidden = w_hi.shape[0]
    h = np.zeros((batch, hidden))
    c = np.zeros((batch, hidden))
    i_s = np.empty((batch, steps, hidden))
    f_s = np.empty((batch, steps, hidden))
    g_s = np.empty((batch, steps, hidden))
    o_s = np.empty((batch, steps, hidden))
    c_s = np.empty((batch, steps, hidden))
    h_s = np.empty((batch, steps, hidden))
    for t in range(steps):
        xt = x[:, t, :]
        i_t = _sigm(xt @ w_xi + h @ w_hi + c * w_ci + b_i)
        f_t = _sigm(xt @ w_xf + h @ w_hf + c * w_cf + b_f)
        g_t = np.tanh(xt @ w_xc + h @ w_hc + b_c)
        c_new = f_t * c + i_t * g_t
        o_t = _sigm(xt @ w_xo + h @ w_ho + c_new * w_co + b_o)
        h = o_t * np.tanh(c_new)
        i_s[:, t] = i_t
        f_s[:, t] = f_t
        g_s[:, t] = g_t
        o_s[:, t] = o_t
        c_s[:, t] = c_new
        h_s[:, t] = h
        c = c_new
    ctx["cache"] = (i_s, f_s, g_s, o_s, c_s)
    return h_s


def _lstm_seq_bwd(ctx, g_out, h_s, x, w_xi, w_hi, w_ci, b_i, w_xf, w_hf,
                  w_cf, b_f, w_xc, w_hc, b_c, w_xo, w_ho, w_co, b_o):
    """Backpropagation through time for the fused recurrent sweep."""
    i_s, f_s, g_s, o_s, c_s = ctx["cache"]
    batch, steps, hidden = h_s.shape
    dx = np.empty_like(x)
    d_wxi = np.zeros_like(w_xi)
    d_whi = np.zeros_like(w_hi)
    d_wci = np.zeros_like(w_ci)
    d_bi = np.zeros_like(b_i)
    d_wxf = np.zeros_like(w_xf)
    d_whf = np.zeros_like(w_hf)
    d_wcf = np.zeros_like(w_cf)
    d_bf = np.zeros_like(b_f)
    d_wxc = np.zeros_like(w_xc)
    d_whc = np.zeros_like(w_hc)
    d_bc = np.zeros_like(b_c)
    d_wxo = np.zeros_like(w_xo)
    d_who = np.zeros_like(w_ho)
    d_wco = np.zeros_like(w_co)
    d_bo = np.zeros_like(b_o)
    dh_next = np.zeros((batch, hidden))
    dc_next = np.zeros((batch, hidden))
    zeros = np.zeros((batch, hidden))
    for t in range(steps - 1, -1, -1):
        xt = x[:, t, :]
        h_prev = h_s[:, t - 1] if t > 0 else zeros
        c_prev = c_s[:, t - 1] if t > 0 else zeros
        i_t, f_t, g_t, o_t, c_t = (
            i_s[:, t], f_s[:, t], g_s[:, t], o_s[:, t], c_s[:, t],
        )
        tanh_c = np.tanh(c_t)
        dh = g_out[:, t] + dh_next
        dz_o = dh * tanh_c * o_t * (1.0 - o_t)
        dc = dh * o_t * (1.0 - tanh_c * tanh_c) + dc_next + dz_o * w_co
        dz_i = dc * g_t * i_t * (1.0 - i_t)
        dz_g = dc * i_t * (1.0 - g_t * g_t)
        dz_f = dc * c_prev * f_t * (1.0 - f_t)
        dc_next = dc * f_t + dz_i * w_ci + dz_f * w_cf
        dh_next = dz_i @ w_hi.T + dz_f @ w_hf.T + dz_g @ w_hc.T + dz_o @ w_ho.T
        d_wxi += xt.T @ dz_i
        d_whi += h_prev.T @ dz_i
        d_wci += (dz_i * c_prev).sum(axis=0)
        d_bi += dz_i.sum(axis=0)
        d_wxf += xt.T @ dz_f
        d_whf += h_prev.T @ dz_f
        d_wcf += (dz_f * c_prev).sum(axis=0)
        d_bf += dz_f.sum(axis=0)
        d_wxc += xt.T @ dz_g
        d_whc += h_prev.T @ dz_g
        d_bc += dz_g.sum(axis=0)
        d_wxo += xt.T @ dz_o
        d_who += h_prev.T @ dz_o
        d_wco += (dz_o * c_t).sum(axis=0)
        d_bo += dz_o.sum(axis=0)
        dx[:, t, :] = dz_i @ w_xi.T + dz_f @ w_xf.T + dz_g @ w_xc.T + dz_o @ w_xo.T
    return (dx, d_wxi, d_whi, d_wci, d_bi, d_wxf, d_whf, d_wcf, d_bf,
            d_wxc, d_whc, d_bc, d_wxo, d_who, d_wco, d_bo)


OPS = {
    "add": (_add_fwd, _add_bwd),
    "sub": (_sub_fwd, _sub_bwd),
    "mul": (_mul_fwd, _mul_bwd),
    "neg": (_neg_fwd, _neg_bwd),
    "matmul": (_matmul_fwd, _matmul_bwd),
    "tanh": (_tanh_fwd, _tanh_bwd),
    "sigmoid": (_sigmoid_fwd, _sigmoid_bwd),
    "square": (_square_fwd, _square_bwd),
    "sum": (_sum_fwd, _sum_bwd),
    "mean": (_mean_fwd, _mean_bwd),
    "mse": (_mse_fwd, _mse_bwd),
    "softmax_rows": (_softmax_rows_fwd, _softmax_rows_bwd),
    "dense": (_dense_fwd, _dense_bwd),
    "attn_scores": (_attn_scores_fwd, _attn_scores_bwd),
    "attn_mix": (_attn_mix_fwd, _attn_mix_bwd),
    "lstm_seq": (_lstm_seq_fwd, _lstm_seq_bwd),
}
