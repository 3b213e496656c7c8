"""Shared test oracles: central finite differences and a direct convolution."""

import numpy as np

EPS = 1e-3


def rel_err(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-8))


def numeric_grad(f, x, eps=EPS, coords=None):
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (modified in
    place and restored). ``coords`` limits the flat indices evaluated."""
    flat = x.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    out = []
    for i in coords:
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        out.append((hi - lo) / (2 * eps))
    return np.array(out)


def naive_conv2d(x, w, b, stride, pad):
    """Nested-loop cross-correlation on NCHW input."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(n):
        for f in range(o):
            for y in range(ho):
                for z in range(wo):
                    win = xp[i, :, y * stride:y * stride + kh, z * stride:z * stride + kw]
                    out[i, f, y, z] = (win * w[f]).sum() + (b[f] if b is not None else 0.0)
    return out


def relu_masks(model) -> np.ndarray:
    return np.concatenate([v.ravel() for k, v in model._tape.items() if k.endswith(("relu", "relu1", "relu2"))])


def network_objective(model, x, rs) -> float:
    out = model.forward(x, train=True)
    total = 0.0
    for name in ("features", "embedding", "projection", "logits"):
        v = getattr(out, name)
        if v is not None:
            total += float((v * rs[name]).sum())
    return total


def network_gradcheck(model, x, rng, eps=EPS):
    """Check every parameter of ``model`` against central differences of a
    random linear functional of all outputs (train-mode forward).

    Coordinates whose +-eps evaluations leave every ReLU pattern unchanged
    are compared directly. Where a perturbation straddles a kink the
    difference quotient is not a derivative estimate, so those coordinates
    are compared on the same network with its ReLU masks frozen at the base
    pattern: the function backward actually differentiates.
    Returns ``{name: (rel_err, direct, frozen)}``.
    """
    out = model.forward(x, train=True)
    tape = model._tape
    frozen = {k: v for k, v in tape.items() if k.endswith(("relu", "relu1", "relu2"))}
    base_masks = relu_masks(model)
    rs = {k: rng.normal(size=getattr(out, k).shape) for k in ("features", "embedding", "projection", "logits")
          if getattr(out, k) is not None}
    grads = model.backward(rs.get("features"), rs.get("embedding"), rs.get("projection"), rs.get("logits"))
    report = {}
    for name, p in model.params.items():
        flat, g = p.reshape(-1), grads[name].reshape(-1)
        num = np.empty(flat.size)
        direct = 0
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            hi = network_objective(model, x, rs)
            smooth = np.array_equal(relu_masks(model), base_masks)
            flat[i] = old - eps
            lo = network_objective(model, x, rs)
            smooth &= np.array_equal(relu_masks(model), base_masks)
            if not smooth:
                model.relu_override = frozen
                flat[i] = old + eps
                hi = network_objective(model, x, rs)
                flat[i] = old - eps
                lo = network_objective(model, x, rs)
                model.relu_override = None
            flat[i] = old
            num[i] = (hi - lo) / (2 * eps)
            direct += smooth
        report[name] = (rel_err(g, num), direct, flat.size - direct)
    return report
