"""Dense float64 tensors with a reverse-mode tape.

Every model component runs on these primitives, so the rules are strict:
64-bit floats only, fixed (row-major, sequential) accumulation order, and a
tape that replays adjoints in exact reverse construction order. A tape may
be consumed by backward() exactly once.
"""

import warnings

import numpy as np

from .errors import NumericError

_ACTIVE_TAPE = None

COSINE_NORM_EPS = 1e-12


class Tape:
    """Ordered record of op outputs, replayed in reverse by backward()."""

    def __init__(self):
        self._nodes = []
        self._used = False

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise NumericError("nested tapes are not supported")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def backward(self, loss):
        """Seed d(loss)/d(loss)=1 and accumulate adjoints into every
        requires_grad leaf reachable from the tape."""
        if self._used:
            raise NumericError("tape already consumed by backward()")
        if loss.data.ndim != 0 and loss.data.size != 1:
            raise NumericError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._backward is None and not loss.requires_grad:
            raise NumericError("loss was not recorded on this tape")
        self._used = True
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self._nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)


def active_tape():
    return _ACTIVE_TAPE


class Tensor:
    """Immutable-by-convention dense array participating in the tape."""

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter:
    """Learnable value with its gradient slot and a freeze flag.

    Freezing removes the parameter from the differentiated graph, so its
    gradient stays identically zero. `use()` also counts reads, which the
    inference-parity check relies on.
    """

    def __init__(self, value, frozen=False, name=""):
        self.tensor = Tensor(np.array(value, dtype=np.float64), requires_grad=not frozen)
        self.name = name
        self.reads = 0

    @property
    def value(self):
        return self.tensor.data

    @property
    def frozen(self):
        return not self.tensor.requires_grad

    @frozen.setter
    def frozen(self, flag):
        self.tensor.requires_grad = not flag

    @property
    def grad(self):
        if self.tensor.grad is None:
            return np.zeros_like(self.tensor.data)
        return self.tensor.grad

    def zero_grad(self):
        self.tensor.grad = None

    def use(self):
        self.reads += 1
        return self.tensor


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out, parents, backward_fn):
    tape = _ACTIVE_TAPE
    if tape is None:
        return out
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        tape._nodes.append(out)
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad = t.grad + g


def add(a, b):
    """Elementwise add; also supports matrix + row-vector bias and scalars."""
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)

    def backward(g):
        if a.data.shape == g.shape:
            _accum(a, g)
        else:
            _accum(a, _reduce_to(g, a.data.shape))
        if b.data.shape == g.shape:
            _accum(b, g)
        else:
            _accum(b, _reduce_to(g, b.data.shape))

    return _record(out, (a, b), backward)


def _reduce_to(g, shape):
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)

    def backward(g):
        _accum(a, _reduce_to(g * b.data, a.data.shape))
        _accum(b, _reduce_to(g * a.data, b.data.shape))

    return _record(out, (a, b), backward)


def scale(a, c):
    a = _as_tensor(a)
    c = float(c)
    out = Tensor(a.data * c)

    def backward(g):
        _accum(a, g * c)

    return _record(out, (a,), backward)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise NumericError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)

    def backward(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _record(out, (a, b), backward)


def transpose(a):
    a = _as_tensor(a)
    out = Tensor(a.data.T.copy())

    def backward(g):
        _accum(a, g.T)

    return _record(out, (a,), backward)


def relu(a):
    a = _as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))

    def backward(g):
        _accum(a, g * (a.data > 0.0))

    return _record(out, (a,), backward)


def softmax_rows(a):
    """Row-wise softmax with max-subtraction for stability."""
    a = _as_tensor(a)
    x = np.atleast_2d(a.data)
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    y = y.reshape(a.data.shape)
    out = Tensor(y)

    def backward(g):
        g2 = np.atleast_2d(g)
        y2 = np.atleast_2d(y)
        inner = (g2 * y2).sum(axis=1, keepdims=True)
        _accum(a, (y2 * (g2 - inner)).reshape(a.data.shape))

    return _record(out, (a,), backward)


def log_softmax_rows(a):
    a = _as_tensor(a)
    x = np.atleast_2d(a.data)
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    y = (shifted - lse).reshape(a.data.shape)
    out = Tensor(y)

    def backward(g):
        g2 = np.atleast_2d(g)
        sm = np.exp(np.atleast_2d(y))
        _accum(a, (g2 - sm * g2.sum(axis=1, keepdims=True)).reshape(a.data.shape))

    return _record(out, (a,), backward)


def layer_norm(x, gain, bias, eps=1e-5):
    """Per-row zero mean / unit variance, then affine with gain and bias."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    x2 = np.atleast_2d(x.data)
    d = x2.shape[1]
    mu = x2.mean(axis=1, keepdims=True)
    var = x2.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x2 - mu) * inv
    y = (xhat * gain.data + bias.data).reshape(x.data.shape)
    out = Tensor(y)

    def backward(g):
        g2 = np.atleast_2d(g)
        gxhat = g2 * gain.data
        gx = inv * (
            gxhat
            - gxhat.mean(axis=1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=1, keepdims=True)
        )
        _accum(x, gx.reshape(x.data.shape))
        _accum(gain, (g2 * xhat).sum(axis=0))
        _accum(bias, g2.sum(axis=0))

    return _record(out, (x, gain, bias), backward)


def logsumexp(a):
    """Max-shifted log-sum-exp of a vector; exact for a single element."""
    a = _as_tensor(a)
    v = a.data.ravel()
    if v.size == 0:
        raise NumericError("logsumexp of empty input")
    m = v.max()
    y = m + np.log(np.exp(v - m).sum())
    out = Tensor(y)

    def backward(g):
        _accum(a, (np.exp(v - y) * g).reshape(a.data.shape))

    return _record(out, (a,), backward)


def conv1d_strided(x, kernel, stride):
    """Valid (no-padding) 1-D convolution over time.

    x is [T, f_in], kernel is [w, f_in, f_out]; output is [T', f_out] with
    T' = floor((T - w) / stride) + 1.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    T = x.shape[0]
    w = kernel.shape[0]
    if T < w:
        raise NumericError(f"input length {T} shorter than kernel width {w}")
    if stride < 1:
        raise NumericError("stride must be >= 1")
    t_out = (T - w) // stride + 1
    out_v = np.zeros((t_out, kernel.shape[2]))
    for i in range(w):
        rows = np.arange(t_out) * stride + i
        out_v += x.data[rows] @ kernel.data[i]
    out = Tensor(out_v)

    def backward(g):
        gx = np.zeros_like(x.data)
        gk = np.zeros_like(kernel.data)
        for i in range(w):
            rows = np.arange(t_out) * stride + i
            np.add.at(gx, rows, g @ kernel.data[i].T)
            gk[i] = x.data[rows].T @ g
        _accum(x, gx)
        _accum(kernel, gk)

    return _record(out, (x, kernel), backward)


def sum_all(a):
    a = _as_tensor(a)
    out = Tensor(a.data.sum())

    def backward(g):
        _accum(a, np.full_like(a.data, float(g)))

    return _record(out, (a,), backward)


def slice_rows(a, start, stop):
    a = _as_tensor(a)
    out = Tensor(a.data[start:stop].copy())

    def backward(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        _accum(a, full)

    return _record(out, (a,), backward)


def slice_cols(a, start, stop):
    a = _as_tensor(a)
    out = Tensor(a.data[:, start:stop].copy())

    def backward(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        _accum(a, full)

    return _record(out, (a,), backward)


def concat_cols(parts):
    parts = [_as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    widths = [p.shape[1] for p in parts]

    def backward(g):
        ofs = 0
        for p, w in zip(parts, widths):
            _accum(p, g[:, ofs:ofs + w])
            ofs += w

    return _record(out, tuple(parts), backward)


def gather_rows(table, indices):
    """Row lookup (embedding); adjoint scatter-adds back into the table."""
    table = _as_tensor(table)
    idx = np.asarray(indices, dtype=np.intp)
    out = Tensor(table.data[idx].copy())

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        _accum(table, gt)

    return _record(out, (table,), backward)


def cosine_to_const(o, h, eps=COSINE_NORM_EPS):
    """Cosine similarity between a tape row `o` and a constant vector `h`.

    Norm denominators are floored at eps; a degenerate (near-zero-norm)
    side yields cosine 0 with zero gradient and a warning.
    """
    o = _as_tensor(o)
    ov = o.data.ravel()
    hv = np.asarray(h, dtype=np.float64).ravel()
    if ov.shape != hv.shape:
        raise NumericError(f"cosine shape mismatch: {ov.shape} vs {hv.shape}")
    no = float(np.linalg.norm(ov))
    nh = float(np.linalg.norm(hv))
    degenerate = no < eps or nh < eps
    if degenerate:
        warnings.warn("cosine against (near) zero-norm vector; treating as 0")
        c = 0.0
    else:
        c = float(ov @ hv / (no * nh))
    out = Tensor(c)

    def backward(g):
        if degenerate:
            _accum(o, np.zeros_like(o.data))
            return
        go = hv / (no * nh) - c * ov / (no * no)
        _accum(o, (float(g) * go).reshape(o.data.shape))

    return _record(out, (o,), backward)


def check_finite(t, what="tensor"):
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values in {what}")
    return t


def finite_difference_check(loss_fn, groups, eps=1e-5, tol=1e-4,
                            max_coords=None, seed=0):
    """Compare tape gradients against central differences, per coordinate.

    loss_fn must be a deterministic zero-argument callable returning a
    scalar Tensor; it is re-evaluated after in-place perturbations of the
    parameter values. `groups` maps group name -> list of Parameters.
    Returns {group: {"status", "max_rel_err", "checked"}} where fully
    frozen groups are reported as "skipped (frozen)".
    """
    rng = np.random.default_rng(seed)
    for ps in groups.values():
        for p in ps:
            p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
        tape.backward(loss)
    analytic = {}
    for name, ps in groups.items():
        analytic[name] = [p.grad.copy() for p in ps]

    report = {}
    for name, ps in groups.items():
        if ps and all(p.frozen for p in ps):
            report[name] = {"status": "skipped (frozen)", "max_rel_err": 0.0,
                            "checked": 0}
            continue
        worst = 0.0
        checked = 0
        live = [ag for p, ag in zip(ps, analytic[name]) if not p.frozen]
        # coordinates with negligible gradient are judged against the
        # group's scale, not the FD rounding noise on a near-zero number
        group_rms = float(np.sqrt(np.mean([float((a ** 2).mean()) for a in live])))
        floor = max(group_rms, 1e-6)
        for p, ag in zip(ps, analytic[name]):
            if p.frozen:
                continue
            flat = p.tensor.data.ravel()
            agf = ag.ravel()
            n = flat.size
            if max_coords is not None and n > max_coords:
                coords = rng.choice(n, size=max_coords, replace=False)
            else:
                coords = range(n)
            for j in coords:
                orig = flat[j]
                flat[j] = orig + eps
                fp = float(loss_fn().data)
                flat[j] = orig - eps
                fm = float(loss_fn().data)
                flat[j] = orig
                fd = (fp - fm) / (2.0 * eps)
                denom = max(abs(fd), abs(agf[j]), floor)
                worst = max(worst, abs(fd - agf[j]) / denom)
                checked += 1
        report[name] = {
            "status": "ok" if worst < tol else "fail",
            "max_rel_err": worst,
            "checked": checked,
        }
    return report
