import numpy as np

from prrrn import diffcore as dc


def numeric_grad(f, x, h=1e-6):
    """Central finite differences of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def analytic_grad(build, x):
    """Gradient of ``build(Node) -> scalar Node`` at ``x`` via the tape."""
    leaf = dc.Node(np.array(x, dtype=np.float64), requires_grad=True)
    with dc.Tape() as tape:
        out = build(leaf)
    dc.backward(tape, out)
    return leaf.grad


def rel_err(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def check_grad(build, x, h=1e-6):
    an = analytic_grad(build, x)
    nu = numeric_grad(lambda v: build(dc.Node(v)).item(), x, h)
    return rel_err(an, nu)
