"""Oracle checks bundled for the ``verify`` subcommand.

Each check returns a :class:`CheckResult`; ``run_all`` runs the whole suite.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import datastore as dsm
from . import flcore as fl
from . import neuralnet as nn
from . import signal as sg

GRADIENT_STEP = 1e-4
GRADIENT_TOLERANCE = 1e-4

# Small architectures covering every layer kind; input is a 2 x 12 frame.
GRADIENT_INPUT = (2, 12, 1)
GRADIENT_ARCHS: dict[str, list[nn.LayerSpec]] = {
    "conv_same": [nn.conv2d(3, (1, 3), "same"), nn.flatten(), nn.dense(4)],
    "conv_valid": [nn.conv2d(3, (2, 3), "valid"), nn.relu(), nn.flatten(), nn.dense(4)],
    "dense_relu": [nn.flatten(), nn.dense(6), nn.relu(), nn.dense(4)],
    "full": nn.default_architecture(4, channels=(3, 4), hidden=6, dropout_rate=0.5),
    "softmax_head": [nn.flatten(), nn.dense(4), nn.softmax()],
}


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    seconds: float = 0.0

    def __post_init__(self):
        self.passed = bool(self.passed)


def _kink_margin(model: nn.ModelParams, x: np.ndarray, seed: int) -> float:
    """Smallest |pre-activation| feeding any ReLU, under the dropout masks of ``seed``."""
    margin = np.inf
    for i, spec in enumerate(model.specs):
        if spec.kind is nn.LayerKind.RELU:
            prefix = nn.ModelParams(model.specs[:i], model.input_shape, model.layers[:i])
            rng = np.random.default_rng(seed)
            z = nn._forward(prefix, nn._as_input(prefix, x), True, rng)[0]
            margin = min(margin, float(np.abs(z).min()))
    return margin


def numeric_gradient(model: nn.ModelParams, x, y, seed: int, step: float = GRADIENT_STEP) -> list[np.ndarray]:
    """Central differences of the mean cross-entropy, dropout masks frozen by ``seed``."""

    def loss(m):
        return nn.cross_entropy(nn.forward(m, x, True, np.random.default_rng(seed)), y)[0]

    tensors = [t.copy() for t in model.tensors()]
    out = []
    for t in tensors:
        g = np.zeros_like(t)
        for idx in np.ndindex(t.shape):
            orig = t[idx]
            t[idx] = orig + step
            up = loss(model.with_tensors(tensors))
            t[idx] = orig - step
            down = loss(model.with_tensors(tensors))
            t[idx] = orig
            g[idx] = (up - down) / (2 * step)
        out.append(g)
    return out


def gradient_relative_error(specs, seed: int, step: float = GRADIENT_STEP, batch: int = 4) -> float:
    """Relative L2 error between backprop and finite differences for one seed.

    The model is float64 with small random biases.  Inputs are redrawn until
    every ReLU pre-activation is at least ``10 * step`` from zero, since a
    finite difference straddling the kink measures a one-sided slope.
    """
    model = nn.init_model(specs, seed, GRADIENT_INPUT, dtype=np.float64)
    rng = np.random.default_rng(seed + 7919)
    for layer in model.layers:
        if "b" in layer:
            layer["b"][:] = rng.uniform(-0.2, 0.2, layer["b"].shape)
    num_classes = model.num_classes
    for _ in range(100):
        x = rng.standard_normal((batch,) + GRADIENT_INPUT[:2])
        if _kink_margin(model, x, seed) > 10 * step:
            break
    else:
        raise RuntimeError("could not draw an input away from ReLU kinks")
    y = rng.integers(0, num_classes, batch)
    analytic = [g[k] for g in nn.backward(model, x, y, np.random.default_rng(seed)) for k in ("W", "b") if k in g]
    numeric = numeric_gradient(model, x, y, seed, step)
    a = np.concatenate([t.ravel() for t in analytic])
    b = np.concatenate([t.ravel() for t in numeric])
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-30))


def check_gradients(seeds: int = 10) -> CheckResult:
    worst = 0.0
    for specs in GRADIENT_ARCHS.values():
        for seed in range(seeds):
            worst = max(worst, gradient_relative_error(specs, seed))
    return CheckResult("gradient", worst < GRADIENT_TOLERANCE, f"max relative error {worst:.2e}")


def check_snr_calibration(frames: int = 100, tolerance_db: float = 0.5) -> CheckResult:
    """Realized SNR of every synthesized frame against its grid target."""
    worst = 0.0
    for scheme in sg.ModulationScheme:
        for snr in sg.SNR_GRID:
            for i in range(frames):
                f = sg.synthesize_frame(scheme, snr, sg.ImpairmentSpec(), sg.frame_rng(0, scheme, snr, i))
                worst = max(worst, abs(sg.measure_snr(f.clean, f.iq - f.clean) - snr))
    return CheckResult("snr_calibration", worst <= tolerance_db, f"max deviation {worst:.2e} dB")


# JS([1/2, 1/2], [1/4, 3/4]) in nats, from the entropy form H(m) - (H(p) + H(q)) / 2
JS_REFERENCE = float(
    -(0.375 * np.log(0.375) + 0.625 * np.log(0.625))
    - 0.5 * (np.log(2.0) - (0.25 * np.log(0.25) + 0.75 * np.log(0.75)))
)


def check_divergence(trials: int = 1000, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    problems = []
    for _ in range(trials):
        k = int(rng.integers(2, 9))
        p, q = rng.dirichlet(np.ones(k)), rng.dirichlet(np.ones(k))
        a, b = dsm.js_divergence(p, q), dsm.js_divergence(q, p)
        if abs(a - b) >= 1e-12:
            problems.append("asymmetric")
        if not -1e-15 <= a <= np.log(2) + 1e-12:
            problems.append("out of bounds")
        if dsm.js_divergence(p, p) > 1e-15 or a <= 0:
            problems.append("zero iff equal")
    # disjoint supports reach the upper bound
    if abs(dsm.js_divergence([1, 0], [0, 1]) - np.log(2)) > 1e-12:
        problems.append("max not ln 2")
    value = dsm.js_divergence([0.5, 0.5], [0.25, 0.75])
    if abs(value - 0.033824) > 1e-5 or abs(value - JS_REFERENCE) > 1e-12:
        problems.append(f"reference value {value}")
    detail = ", ".join(sorted(set(problems))) or f"JS reference {value:.7f} nats"
    return CheckResult("divergence", not problems, detail)


def _random_models(rng, count: int) -> list[nn.ModelParams]:
    specs = nn.default_architecture(3, channels=(2, 3), hidden=5)
    base = nn.init_model(specs, 0, GRADIENT_INPUT, dtype=np.float64)
    return [base.with_tensors([rng.standard_normal(t.shape) for t in base.tensors()]) for _ in range(count)]


def check_aggregation(sets: int = 100, seed: int = 0) -> CheckResult:
    """FedVaccine blend against its expanded closed form and FedAvg against an element-wise loop."""
    rng = np.random.default_rng(seed)
    worst_fv = worst_avg = 0.0
    for _ in range(sets):
        n = int(rng.integers(1, 6))
        prev, *members = _random_models(rng, n + 1)
        deltas = rng.integers(1, 500, n)
        got = fl.aggregate_fedvaccine(prev, list(zip(members, deltas)))
        rho = deltas / deltas.sum()
        for g, w, *ms in zip(got.tensors(), prev.tensors(), *[m.tensors() for m in members]):
            # (1 - 1/n) W + (1/n) sum rho_i w_i
            expect = (1 - 1 / n) * w + sum(r * m for r, m in zip(rho, ms)) / n
            worst_fv = max(worst_fv, float(np.abs(g - expect).max()))
        weights = rng.uniform(0.1, 1.0, n)
        avg = fl.aggregate_fedavg(members, weights)
        for j, g in enumerate(avg.tensors()):
            ref = np.zeros_like(g)
            for idx in np.ndindex(g.shape):
                ref[idx] = sum(wt * m.tensors()[j][idx] for wt, m in zip(weights, members)) / weights.sum()
            worst_avg = max(worst_avg, float(np.abs(g - ref).max()))
    ok = worst_fv < 1e-6 and worst_avg < 1e-6
    return CheckResult("aggregation", ok, f"fedvaccine {worst_fv:.1e}, fedavg {worst_avg:.1e}")


def check_queue(steps: int = 10_000, seed: int = 0) -> CheckResult:
    """Random insert/evict interleavings: capacity holds and eviction never raises JS to uniform."""
    rng = np.random.default_rng(seed)
    classes, length = 4, 2
    q = dsm.ReplayQueue(int(rng.integers(1, 40)), classes, length)
    violations = 0
    for step in range(steps):
        if step % 500 == 0:
            q = dsm.ReplayQueue(int(rng.integers(0, 40)), classes, length)
        m = int(rng.integers(1, 15))
        probs = rng.dirichlet(np.full(classes, 0.5))
        labels = rng.choice(classes, m, p=probs)
        batch = dsm.Dataset(np.zeros((m, 2, length), np.float32), labels, np.zeros(m, np.int64), classes)
        q.insert(batch, step)
        before = q.divergence()
        q.evict()
        if len(q) > q.capacity or q.divergence() > before + 1e-12:
            violations += 1
    return CheckResult("queue", violations == 0, f"{violations} violations in {steps} evictions")


CHECKS: dict[str, Callable[[], CheckResult]] = {
    "gradient": check_gradients,
    "snr_calibration": check_snr_calibration,
    "divergence": check_divergence,
    "aggregation": check_aggregation,
    "queue": check_queue,
}


def run_all(names=None) -> list[CheckResult]:
    results = []
    for name in names or CHECKS:
        t0 = time.perf_counter()
        try:
            res = CHECKS[name]()
        except Exception as exc:  # a crashing check is a failing check
            res = CheckResult(name, False, f"{type(exc).__name__}: {exc}")
        res.seconds = time.perf_counter() - t0
        results.append(res)
    return results
