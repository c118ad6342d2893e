"""Central finite-difference checks for functions of Parameters."""
import numpy as np

from tuberf.autodiff import Parameter, Tape


def numeric_grad(f, params, h=1e-5):
    out = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = float(f().data)
            flat[i] = old - h
            fm = float(f().data)
            flat[i] = old
            gf[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def analytic_grad(f, params):
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f()
        tape.backward(loss)
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def relative_error(a, n) -> float:
    a = np.concatenate([x.ravel() for x in a])
    n = np.concatenate([x.ravel() for x in n])
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a) + np.linalg.norm(n), 1e-12))


def check(f, params, h=1e-5) -> float:
    """Relative error between tape gradients and central differences of the scalar ``f()``."""
    params = [p if isinstance(p, Parameter) else Parameter(p) for p in params]
    return relative_error(analytic_grad(f, params), numeric_grad(f, params, h))
