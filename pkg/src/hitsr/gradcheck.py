"""Finite-difference verification of analytic gradients.

:func:`grad_check` compares tape gradients against central differences on
a scalar-valued function of tensors. :data:`OP_SUITE` enumerates one or
more cases per differentiable op exposed by :mod:`hitsr.tensor`, with
inputs kept away from non-smooth points (relu kinks, abs ties), so the
whole public op surface can be swept in float64.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ContractError
from .rng import RngState


def grad_check(fn, inputs, eps: float = 1e-5, max_coords: int | None = None,
               rng: RngState | None = None, eps_ladder: tuple | None = None,
               early_stop: float = 1e-7, denom_floor: float = 1e-8):
    """Compare analytic and central-difference gradients of a scalar fn.

    Args:
        fn: callable mapping the input tensors to a scalar Tensor.
        inputs: list of Tensors; those with requires_grad are checked.
        eps: half-width of the central difference.
        max_coords: if set, check at most this many coordinates per input,
            sampled without replacement (for end-to-end sweeps).
        rng: required when max_coords is set.
        eps_ladder: optional extra step widths tried per coordinate; the
            smallest relative error over the ladder is kept. Central
            differences trade roundoff (small eps) against truncation
            (large eps), and coordinates with tiny gradients need a wider
            step to rise above roundoff. The minimum can only certify real
            agreement: FD converges to the true derivative at every width,
            so a wrong analytic gradient fails the whole ladder.
        early_stop: skip the rest of the ladder once a coordinate's
            relative error falls below this.
        denom_floor: absolute scale below which a difference is measured
            against the floor rather than the values themselves. Central
            differences carry roundoff noise of about machine_eps*|f|/eps,
            so gradients under that floor cannot be certified relatively;
            raise the floor for 32-bit checks accordingly.

    Returns:
        dict with "max_rel_err" and per-input lists of (coord, analytic,
        numeric, rel_err) for the worst coordinate of each input.
    """
    out = fn(*inputs)
    if out.size != 1:
        raise ContractError(f"grad_check needs a scalar objective, got {out.shape}")
    for t in inputs:
        t.grad = None
    T.backward(out)
    analytic = [t.grad.copy() if t.grad is not None else None for t in inputs]

    worst = 0.0
    per_input = []
    for t, an in zip(inputs, analytic):
        if not t.requires_grad:
            per_input.append(None)
            continue
        if an is None:
            an = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        n = flat.size
        coords = range(n)
        if max_coords is not None and n > max_coords:
            if rng is None:
                raise ContractError("sampled grad_check needs an rng")
            coords = sorted(rng.permutation(n)[:max_coords].tolist())
        widths = (eps,) + tuple(eps_ladder or ())
        rows = []
        for c in coords:
            a = float(an.reshape(-1)[c])
            best = None
            for h in widths:
                keep = flat[c]
                flat[c] = keep + h
                with T.no_grad():
                    fp = fn(*inputs).item()
                flat[c] = keep - h
                with T.no_grad():
                    fm = fn(*inputs).item()
                flat[c] = keep
                fd = (fp - fm) / (2 * h)
                rel = abs(a - fd) / max(abs(a), abs(fd), denom_floor)
                if best is None or rel < best[1]:
                    best = (fd, rel)
                if best[1] < early_stop:
                    break
            rows.append((c, a, best[0], best[1]))
            worst = max(worst, best[1])
        rows.sort(key=lambda r: -r[3])
        per_input.append(rows[:3])
    return {"max_rel_err": worst, "per_input": per_input}


def _t(rng, shape, dtype=np.float64, lo=-1.0, hi=1.0, away_from=None, margin=0.2):
    """Random test tensor; optionally pushed away from a non-smooth point."""
    d = rng.uniform(shape, lo, hi).astype(dtype)
    if away_from is not None:
        near = np.abs(d - away_from) < margin
        d = d + np.where(near, np.sign(d - away_from + 1e-12) * margin, 0.0)
    return T.Tensor(d, requires_grad=True, dtype=dtype)


def _case_add(rng, dt):
    a, b = _t(rng, (3, 4), dt), _t(rng, (3, 4), dt)
    return lambda a, b: T.sum_(T.add(a, b)), [a, b]


def _case_add_broadcast(rng, dt):
    a, b = _t(rng, (2, 3, 4), dt), _t(rng, (4,), dt)
    return lambda a, b: T.sum_(T.mul(T.add(a, b), T.add(a, b))), [a, b]


def _case_sub(rng, dt):
    a, b = _t(rng, (3, 4), dt), _t(rng, (3, 4), dt)
    return lambda a, b: T.sum_(T.mul(T.sub(a, b), T.sub(a, b))), [a, b]


def _case_mul(rng, dt):
    a, b = _t(rng, (5,), dt), _t(rng, (5,), dt)
    return lambda a, b: T.sum_(T.mul(a, b)), [a, b]


def _case_neg(rng, dt):
    a = _t(rng, (3, 3), dt)
    return lambda a: T.sum_(T.mul(T.neg(a), T.neg(a))), [a]


def _case_scale(rng, dt):
    a = _t(rng, (6,), dt)
    return lambda a: T.sum_(T.scale(a, -2.5)), [a]


def _case_sqrt(rng, dt):
    a = _t(rng, (4, 4), dt, lo=0.5, hi=2.0)
    return lambda a: T.sum_(T.sqrt(a)), [a]


def _case_abs(rng, dt):
    a = _t(rng, (4, 4), dt, away_from=0.0)
    return lambda a: T.sum_(T.absval(a)), [a]


def _case_relu(rng, dt):
    a = _t(rng, (4, 5), dt, away_from=0.0)
    return lambda a: T.sum_(T.relu(a)), [a]


def _case_leaky_relu(rng, dt):
    a = _t(rng, (4, 5), dt, away_from=0.0)
    return lambda a: T.sum_(T.mul(T.leaky_relu(a, 0.2), a)), [a]


def _case_sigmoid(rng, dt):
    a = _t(rng, (3, 4), dt, lo=-3.0, hi=3.0)
    return lambda a: T.sum_(T.sigmoid(a)), [a]


def _case_gelu(rng, dt):
    a = _t(rng, (3, 4), dt, lo=-2.0, hi=2.0)
    return lambda a: T.sum_(T.gelu(a)), [a]


def _case_matmul(rng, dt):
    a, b = _t(rng, (3, 4), dt), _t(rng, (4, 2), dt)
    return lambda a, b: T.sum_(T.matmul(a, b)), [a, b]


def _case_matmul_batched(rng, dt):
    a, b = _t(rng, (2, 3, 4), dt), _t(rng, (4, 5), dt)
    return lambda a, b: T.sum_(T.mul(T.matmul(a, b), T.matmul(a, b))), [a, b]


def _case_conv2d(rng, dt):
    x = _t(rng, (2, 3, 6, 6), dt)
    w = _t(rng, (4, 3, 3, 3), dt)
    b = _t(rng, (4,), dt)
    return lambda x, w, b: T.sum_(T.conv2d(x, w, b, stride=1, padding=1)), [x, w, b]


def _case_conv2d_strided(rng, dt):
    x = _t(rng, (1, 2, 7, 7), dt)
    w = _t(rng, (3, 2, 3, 3), dt)
    return lambda x, w: T.sum_(T.mul(T.conv2d(x, w, stride=2, padding=1),
                                     T.conv2d(x, w, stride=2, padding=1))), [x, w]


def _case_conv2d_transpose(rng, dt):
    x = _t(rng, (2, 4, 3, 3), dt)
    w = _t(rng, (4, 2, 3, 3), dt)
    b = _t(rng, (2,), dt)
    return lambda x, w, b: T.sum_(T.conv2d_transpose(x, w, b, stride=2, padding=1)), [x, w, b]


def _case_softmax(rng, dt):
    a = _t(rng, (3, 6), dt, lo=-2.0, hi=2.0)
    w = _t(rng, (3, 6), dt)
    return lambda a, w: T.sum_(T.mul(T.softmax(a, axis=-1), w)), [a, w]


def _case_layer_norm(rng, dt):
    x = _t(rng, (2, 5, 8), dt)
    g = _t(rng, (8,), dt, lo=0.5, hi=1.5)
    b = _t(rng, (8,), dt)
    return lambda x, g, b: T.sum_(T.mul(T.layer_norm(x, g, b), T.layer_norm(x, g, b))), [x, g, b]


def _case_sum(rng, dt):
    a = _t(rng, (3, 4, 5), dt)
    return lambda a: T.sum_(T.mul(T.sum_(a, axis=(0, 2)), T.sum_(a, axis=(0, 2)))), [a]


def _case_mean(rng, dt):
    a = _t(rng, (3, 4, 5), dt)
    return lambda a: T.sum_(T.mul(T.mean(a, axis=1, keepdims=True), a)), [a]


def _case_reshape(rng, dt):
    a = _t(rng, (3, 8), dt)
    return lambda a: T.sum_(T.mul(T.reshape(a, (3, 2, 4)), T.reshape(a, (3, 2, 4)))), [a]


def _case_transpose(rng, dt):
    a = _t(rng, (2, 3, 4), dt)
    w = _t(rng, (4, 3, 2), dt)
    return lambda a, w: T.sum_(T.mul(T.transpose(a, (2, 1, 0)), w)), [a, w]


def _case_concat(rng, dt):
    a, b = _t(rng, (2, 3), dt), _t(rng, (2, 5), dt)
    return lambda a, b: T.sum_(T.mul(T.concat([a, b], axis=1), T.concat([a, b], axis=1))), [a, b]


def _case_roll(rng, dt):
    a = _t(rng, (4, 6), dt)
    w = _t(rng, (4, 6), dt)
    return lambda a, w: T.sum_(T.mul(T.roll(a, (1, -2), (0, 1)), w)), [a, w]


def _case_gather_rows(rng, dt):
    tab = _t(rng, (7, 3), dt)
    idx = np.array([0, 3, 3, 6, 1], dtype=np.int64)
    return lambda tab: T.sum_(T.mul(T.gather_rows(tab, idx), T.gather_rows(tab, idx))), [tab]


def _case_pixel_shuffle(rng, dt):
    x = _t(rng, (2, 8, 3, 3), dt)
    w = _t(rng, (2, 2, 6, 6), dt)
    return lambda x, w: T.sum_(T.mul(T.pixel_shuffle(x, 2), w)), [x, w]


def _case_pixel_unshuffle(rng, dt):
    x = _t(rng, (2, 2, 6, 6), dt)
    w = _t(rng, (2, 8, 3, 3), dt)
    return lambda x, w: T.sum_(T.mul(T.pixel_unshuffle(x, 2), w)), [x, w]


def _case_global_avg_pool(rng, dt):
    x = _t(rng, (2, 3, 4, 4), dt)
    return lambda x: T.sum_(T.mul(T.global_avg_pool(x), T.global_avg_pool(x))), [x]


OP_SUITE = {
    "add": _case_add,
    "add_broadcast": _case_add_broadcast,
    "sub": _case_sub,
    "mul": _case_mul,
    "neg": _case_neg,
    "scale": _case_scale,
    "sqrt": _case_sqrt,
    "abs": _case_abs,
    "relu": _case_relu,
    "leaky_relu": _case_leaky_relu,
    "sigmoid": _case_sigmoid,
    "gelu": _case_gelu,
    "matmul": _case_matmul,
    "matmul_batched": _case_matmul_batched,
    "conv2d": _case_conv2d,
    "conv2d_strided": _case_conv2d_strided,
    "conv2d_transpose": _case_conv2d_transpose,
    "softmax": _case_softmax,
    "layer_norm": _case_layer_norm,
    "sum": _case_sum,
    "mean": _case_mean,
    "reshape": _case_reshape,
    "transpose": _case_transpose,
    "concat": _case_concat,
    "roll": _case_roll,
    "gather_rows": _case_gather_rows,
    "pixel_shuffle": _case_pixel_shuffle,
    "pixel_unshuffle": _case_pixel_unshuffle,
    "global_avg_pool": _case_global_avg_pool,
}


def run_op_suite(seed: int = 0, eps: float = 1e-5):
    """Run every op case in float64; yields (name, max_rel_err)."""
    results = {}
    for name, builder in OP_SUITE.items():
        rng = RngState(seed)
        fn, inputs = builder(rng, np.float64)
        results[name] = grad_check(fn, inputs, eps=eps)["max_rel_err"]
    return results


def run_model_check(seed: int = 0, n_params: int = 20, max_coords: int = 2):
    """Finite-difference check of the full network in float64.

    Builds a window-4, two-head, single-pair model, perturbs every weight
    around its seeded init (a generic point that stays in the network's
    operating regime: replacing weights wholesale sends activations to
    O(1e2) scales where central differences lose every significant digit),
    feeds a 16x16 LR / 64x64 ref pair, and checks ``n_params`` randomly
    chosen trainable tensors at ``max_coords`` coordinates each.

    Returns the max relative error over all checked coordinates.
    """
    from . import model as M

    prev = T.precision()
    T.set_precision("f64")
    try:
        cfg = M.ModelConfig(window=4, num_heads=2, depth=1, pairs=1,
                            base_size=8)
        m = M.build(cfg, seed=seed)
        g = np.random.default_rng(seed + 1)
        for _, t in m.registry.trainable_items():
            t.data[...] += 0.05 * g.normal(size=t.shape)
        lr = T.Tensor(g.uniform(0.1, 0.9, size=(1, 3, 16, 16)))
        ref = T.Tensor(g.uniform(0.1, 0.9, size=(1, 3, 64, 64)))

        names = [n for n, _ in m.registry.trainable_items()]
        order = np.random.default_rng(seed + 2).permutation(len(names))
        picked = [m.registry.get(names[i]) for i in order[:n_params]]

        def fn(*args):
            out = m.forward(lr, ref)
            return T.mean(T.mul(out, out))

        # the ladder spans both directions: wide steps rescue coordinates
        # with tiny gradients from roundoff, narrow ones step inside relu
        # kinks that sit within ~1e-5 of the evaluation point. The floor
        # is raised above the per-op default because a forward through
        # hundreds of ops carries ~1e-13 of accumulated roundoff; sub-1e-7
        # gradients are certified absolutely at that scale instead.
        res = grad_check(fn, picked, eps=1e-5,
                         eps_ladder=(3e-6, 1e-4, 1e-3, 1e-6),
                         max_coords=max_coords, rng=RngState(seed + 3),
                         denom_floor=1e-7)
        return res["max_rel_err"]
    finally:
        T.set_precision(prev)
