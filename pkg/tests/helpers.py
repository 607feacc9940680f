"""Shared oracles for the test suite: finite differences, relative error, layer gradient checks."""
import numpy as np

from weakseg.nn import RoiPool

# criterion number -> list of (ok, detail); printed by conftest at the end of the session
CRITERIA = {}


def record(num, ok, detail=""):
    CRITERIA.setdefault(num, []).append((bool(ok), detail))


def numeric_grad(f, x, eps=1e-5):
    """Central finite differences of scalar f() with respect to array x (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_error(a, b):
    """Max elementwise |a - b| / max(|a|, |b|), floored at 1e-3 so exact zeros compare absolutely."""
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(1e-3, np.maximum(np.abs(a), np.abs(b)))))


def layer_grad_error(layer, x, rng, rois=None):
    """Worst relative error of the input and parameter gradients of ``layer`` under loss sum(y * r)."""
    def run():
        return layer.forward(x, rois) if isinstance(layer, RoiPool) else layer.forward(x)

    r = rng.standard_normal(run().shape)

    def f():
        return float(np.sum(run() * r))

    layer.zero_grad()
    f()
    dx = layer.backward(r)
    errs = [rel_error(dx, numeric_grad(f, x))]
    analytic = {k: layer.grads[k].copy() for k in layer.params}
    for k, p in layer.params.items():
        errs.append(rel_error(analytic[k], numeric_grad(f, p)))
    return max(errs)


def loss_grad_error(fn, args, rng=None):
    """``fn(*args) -> (loss, grad_0, grad_1, ...)``; checks each returned grad against its argument."""
    out = fn(*args)
    grads = out[1:]
    errs = []
    for k, g in enumerate(grads):
        if g is None:
            continue
        x = args[k]

        def f():
            return fn(*args)[0]

        errs.append(rel_error(g, numeric_grad(f, x)))
    return max(errs)
