"""Central finite-difference verification of every backward pass.

Each check builds random instances, computes the analytic gradient of a
scalar probe objective, and compares it against central differences of the
matching frozen-selection forward (pooling masks, argmax indices, and
rectifier gates held at the base point), elementwise over every input and
parameter entry. All arithmetic is f64.

The relative error reported for a pair of gradients is
``max|a - b| / max(max|a|, max|b|, 1e-12)``, a max-norm ratio that stays
meaningful when individual entries are legitimately zero.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .layers import (
    conv_backward,
    conv_forward,
    dense_backward,
    dense_forward,
    relu_backward,
    relu_forward,
    softmax_xent,
)
from .model import (
    ModelInputs,
    ModelSpec,
    cross_crop_backward,
    cross_crop_pool,
    cross_crop_pool_fixed,
    init_params,
    model_backward,
    model_forward,
    model_forward_fixed,
)
from .pooling import PoolMode, Schedule, pool_backward, pool_forward, pool_forward_fixed

POOL_TOLERANCE = 1e-6
DEFAULT_TRIALS = 20


def fd_gradient(objective, x, h):
    """Central differences of a scalar objective with respect to ``x``.

    ``objective`` is a zero-argument callable that reads ``x`` by
    reference; entries are perturbed in place and restored.
    """
    if not x.flags["C_CONTIGUOUS"]:
        raise ValueError("fd_gradient needs a C-contiguous array to perturb in place")
    flat = x.reshape(-1)
    grad = np.zeros(flat.size, dtype=np.float64)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + h
        up = objective()
        flat[i] = saved - h
        down = objective()
        flat[i] = saved
        grad[i] = (up - down) / (2.0 * h)
    return grad.reshape(x.shape)


def rel_error(a, b):
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), 1e-12)
    return float(np.max(np.abs(a - b))) / scale


@dataclass(frozen=True)
class GradCheckResult:
    name: str
    trials: int
    max_rel_err: float
    tolerance: float

    @property
    def passed(self):
        return self.max_rel_err < self.tolerance

    def as_dict(self):
        record = asdict(self)
        record["passed"] = self.passed
        return record


def _mode_schedule(kind, lam, rng):
    mode = PoolMode(kind, lam=lam)
    if kind != "dynamic":
        return mode, None
    total = 20
    return mode, Schedule(int(rng.integers(0, total + 1)), total)


def check_pool(kind, trials=DEFAULT_TRIALS, seed=0, h=1e-6, tol=POOL_TOLERANCE):
    """Pooling gradients against FD of the fixed-mask forward."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        n, c = rng.integers(1, 3, size=2)
        hh, ww = rng.integers(2, 7, size=2)
        lam = float(rng.choice([0.5, 1.0, 2.0]))
        mode, schedule = _mode_schedule(kind, lam, rng)
        x = rng.normal(size=(n, c, hh, ww))
        _, ctx = pool_forward(x, mode, schedule)
        u = rng.normal(size=(n, c))
        analytic = pool_backward(u, ctx)
        fd = fd_gradient(lambda: float(np.sum(u * pool_forward_fixed(x, ctx))), x, h)
        worst = max(worst, rel_error(analytic, fd))
    return GradCheckResult(f"pool.{kind}", trials, worst, tol)


def check_cross_crop(kind, trials=DEFAULT_TRIALS, seed=0, h=1e-6, tol=POOL_TOLERANCE):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        n, c = rng.integers(1, 3, size=2)
        hh, ww = rng.integers(2, 5, size=2)
        lam = float(rng.choice([0.5, 1.0, 2.0]))
        mode, schedule = _mode_schedule(kind, lam, rng)
        maps = [rng.normal(size=(n, c, hh, ww)) for _ in range(4)]
        _, ctx = cross_crop_pool(maps, mode, schedule)
        u = rng.normal(size=(n, c))
        analytic = cross_crop_backward(u, ctx)
        for i in range(4):
            fd = fd_gradient(
                lambda: float(np.sum(u * cross_crop_pool_fixed(maps, ctx))), maps[i], h
            )
            worst = max(worst, rel_error(analytic[i], fd))
    return GradCheckResult(f"cross_crop.{kind}", trials, worst, tol)


def check_conv(trials=DEFAULT_TRIALS, seed=0, h=1e-5, tol=POOL_TOLERANCE):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        n, cin, cout = rng.integers(1, 4, size=3)
        size = int(rng.integers(3, 7))
        stride = int(rng.integers(1, 3))
        padding = int(rng.integers(0, 2))
        x = rng.normal(size=(n, cin, size, size))
        w = rng.normal(size=(cout, cin, 3, 3))
        b = rng.normal(size=cout)
        y, ctx = conv_forward(x, w, b, stride=stride, padding=padding)
        u = rng.normal(size=y.shape)

        def objective():
            out, _ = conv_forward(x, w, b, stride=stride, padding=padding)
            return float(np.sum(u * out))

        gx, gw, gb = conv_backward(u, ctx)
        for analytic, arr in ((gx, x), (gw, w), (gb, b)):
            worst = max(worst, rel_error(analytic, fd_gradient(objective, arr, h)))
    return GradCheckResult("conv", trials, worst, tol)


def check_relu(trials=DEFAULT_TRIALS, seed=0, h=1e-5, tol=POOL_TOLERANCE):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        shape = tuple(rng.integers(2, 6, size=2))
        x = rng.normal(size=shape)
        # Keep every entry away from the kink so FD never straddles it.
        x = np.where(np.abs(x) < 0.1, x + 0.2 * np.sign(x + 0.5), x)
        _, ctx = relu_forward(x)
        u = rng.normal(size=shape)
        analytic = relu_backward(u, ctx)
        fd = fd_gradient(lambda: float(np.sum(u * relu_forward(x)[0])), x, h)
        worst = max(worst, rel_error(analytic, fd))
    return GradCheckResult("relu", trials, worst, tol)


def check_dense(trials=DEFAULT_TRIALS, seed=0, h=1e-5, tol=POOL_TOLERANCE):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        n, din, dout = rng.integers(1, 6, size=3)
        x = rng.normal(size=(n, din))
        w = rng.normal(size=(dout, din))
        b = rng.normal(size=dout)
        _, ctx = dense_forward(x, w, b)
        u = rng.normal(size=(n, dout))

        def objective():
            return float(np.sum(u * dense_forward(x, w, b)[0]))

        gx, gw, gb = dense_backward(u, ctx)
        for analytic, arr in ((gx, x), (gw, w), (gb, b)):
            worst = max(worst, rel_error(analytic, fd_gradient(objective, arr, h)))
    return GradCheckResult("dense", trials, worst, tol)


def check_softmax_xent(trials=DEFAULT_TRIALS, seed=0, h=1e-6, tol=POOL_TOLERANCE):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        n, k = int(rng.integers(1, 6)), int(rng.integers(2, 8))
        logits = rng.normal(size=(n, k)) * 2.0
        labels = rng.integers(0, k, size=n)
        _, analytic = softmax_xent(logits, labels)
        fd = fd_gradient(lambda: softmax_xent(logits, labels)[0], logits, h)
        worst = max(worst, rel_error(analytic, fd))
    return GradCheckResult("softmax_xent", trials, worst, tol)


def check_model(trials=DEFAULT_TRIALS, seed=0, h=1e-5, tol=POOL_TOLERANCE):
    """FD over every parameter of a tiny two-branch model.

    The objective is the cross-entropy of the gate- and mask-frozen replay
    forward, so the comparison stays on the smooth piece the analytic
    backward differentiates.
    """
    rng = np.random.default_rng(seed)
    kinds = ("avg", "max", "outlier", "dynamic")
    worst = 0.0
    for trial in range(trials):
        pool_kind = kinds[trial % len(kinds)]
        mode, schedule = _mode_schedule(pool_kind, 2.0, rng)
        spec = ModelSpec(
            kind="multires", num_classes=3, global_input_size=8,
            local_crop_size=8, pool_mode=mode, trunk_widths=(2, 2),
        )
        params = {
            key: value.astype(np.float64)
            for key, value in init_params(spec, int(rng.integers(0, 2**32))).items()
        }
        inputs = ModelInputs(
            global_view=rng.normal(size=(2, 3, 8, 8)),
            crops=rng.normal(size=(4, 2, 3, 8, 8)),
        )
        labels = rng.integers(0, 3, size=2)
        logits, ctx = model_forward(inputs, spec, params, schedule)
        _, grad_logits = softmax_xent(logits, labels)
        grads = model_backward(grad_logits, ctx)

        def objective():
            replay = model_forward_fixed(inputs, spec, params, ctx)
            return softmax_xent(replay, labels)[0]

        for key in params:
            fd = fd_gradient(objective, params[key], h)
            worst = max(worst, rel_error(grads[key], fd))
    return GradCheckResult("model.multires", trials, worst, tol)


SCOPES = ("all", "pooling", "layers", "model")


def run_suite(scope="all", trials=DEFAULT_TRIALS, seed=0):
    """Run the selected checks and return a JSON-friendly report."""
    if scope not in SCOPES:
        raise ValueError(f"scope must be one of {SCOPES}, got {scope!r}")
    results = []
    if scope in ("all", "pooling"):
        for kind in ("avg", "max", "outlier", "dynamic"):
            results.append(check_pool(kind, trials=trials, seed=seed))
            results.append(check_cross_crop(kind, trials=trials, seed=seed + 1))
    if scope in ("all", "layers"):
        results.append(check_conv(trials=trials, seed=seed))
        results.append(check_relu(trials=trials, seed=seed))
        results.append(check_dense(trials=trials, seed=seed))
        results.append(check_softmax_xent(trials=trials, seed=seed))
    if scope in ("all", "model"):
        results.append(check_model(trials=trials, seed=seed))
    return {
        "scope": scope,
        "trials": trials,
        "seed": seed,
        "results": [r.as_dict() for r in results],
        "passed": all(r.passed for r in results),
    }
