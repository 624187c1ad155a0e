"""Finite-difference gradient suite shared by unit and acceptance tests.

Every case builds a small instance from a seed and reduces its output to a
scalar with fixed random weights. Coordinates are checked with
``tensor.grad_check`` at the requested step.

ReLU kinks: if the +/- step flips any ReLU input across zero, the central
difference straddles a non-differentiable point and is not an oracle for
the gradient. Such coordinates are re-checked with a step small enough not
to flip (down to 1e-7); ones that still flip are counted and skipped.
"""

from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass, field

import numpy as np

from evalnet import tensor as T
from evalnet.model import (
    CrossResolutionAttention,
    DualFeatureRefiner,
    EvalNet,
    HFDStage,
    ModelConfig,
    MultiScaleAggregator,
    StructureResidualFusion,
)

FALLBACK_EPS = (1e-5, 1e-6, 1e-7)


@dataclass
class SuiteResult:
    name: str
    max_error: float = 0.0
    checked: int = 0
    kink_rechecked: int = 0
    skipped: int = 0
    seconds: float = 0.0
    worst_seed: int = -1
    per_seed: list = field(default_factory=list)


class ReluRecorder:
    """Records the sign pattern of every ReLU input while active."""

    def __init__(self):
        self.calls: list[list[np.ndarray]] = []
        self._current: list[np.ndarray] | None = None

    def start_call(self):
        self._current = []
        self.calls.append(self._current)

    @contextlib.contextmanager
    def patch(self):
        original = T.relu

        def recording(a):
            if self._current is not None:
                self._current.append(a.data > 0)
            return original(a)

        T.relu = recording
        try:
            yield self
        finally:
            T.relu = original


def _flipped(base, other) -> bool:
    return any((a != b).any() for a, b in zip(base, other))


def check_point(f, point: T.Tensor, coords, eps: float, recorder: ReluRecorder):
    """Per-coordinate errors plus kink bookkeeping for one tensor."""

    def g(p):
        recorder.start_call()
        return f(p)

    recorder.calls.clear()
    errors = T.grad_check(g, point, eps, list(coords), return_all=True)
    calls = list(recorder.calls)
    base = calls[0]
    kept, rechecked, skipped = [], 0, 0
    for k, c in enumerate(coords):
        if not (_flipped(base, calls[1 + 2 * k]) or _flipped(base, calls[2 + 2 * k])):
            kept.append(errors[k])
            continue
        rechecked += 1
        for small in FALLBACK_EPS:
            recorder.calls.clear()
            err = T.grad_check(g, point, small, [c], return_all=True)[0]
            sub = recorder.calls
            if not (_flipped(sub[0], sub[1]) or _flipped(sub[0], sub[2])):
                kept.append(err)
                break
        else:
            skipped += 1
    return kept, rechecked, skipped


def weighted_sum(out: T.Tensor, seed: int, baseline=None) -> T.Tensor:
    """Scalar probe ``sum(w * (out - baseline))``.

    Subtracting the unperturbed output leaves the gradient unchanged but keeps
    the probe near zero, which shrinks float64 cancellation in the central
    difference for coordinates whose gradient is tiny.
    """
    w = np.random.default_rng(seed + 10_000).standard_normal(out.shape)
    if baseline is not None:
        out = out - T.Tensor(baseline)
    return T.sum_all(out * T.Tensor(w))


# builders return (module or None, inputs, forward(inputs) -> Tensor)


def build_srf(rng):
    m = StructureResidualFusion(4, 8, 4, rng)
    xs = [T.Tensor(rng.standard_normal((1, 4, 8, 8))), T.Tensor(rng.standard_normal((1, 8, 4, 4)))]
    return m, xs, lambda a, b: m(a, b)


def build_ma(rng):
    m = MultiScaleAggregator(4, [1, 4, 9], rng)
    xs = [T.Tensor(rng.standard_normal((1, 4, 8, 8)))]
    return m, xs, lambda a: m(a)


def build_hfd(rng):
    cfg = ModelConfig(encoder_channels=[4, 4, 4, 4, 4], decoder_channels=[4, 4, 4, 4, 4])
    m = HFDStage(4, 8, 4, cfg, rng)
    xs = [T.Tensor(rng.standard_normal((1, 8, 4, 4))), T.Tensor(rng.standard_normal((1, 4, 8, 8)))]
    return m, xs, lambda prev, skip: m(prev, skip)


def build_cla(rng):
    m = CrossResolutionAttention(2, 5, 5, rng)
    xs = [T.Tensor(rng.standard_normal((1, 2, 3, 3))), T.Tensor(rng.standard_normal((1, 2, 15, 15)))]
    return m, xs, lambda low, high: m(low, high)


def _randomize_head(head, rng):
    # the head starts at zero, which would hide every upstream gradient
    head.weight.data = 0.1 * rng.standard_normal(head.weight.shape)
    head.bias.data = 0.1 * rng.standard_normal(head.bias.shape)


def micro_config(**overrides) -> ModelConfig:
    base = dict(
        in_channels=4,
        encoder_channels=[4, 4, 4, 4, 4],
        decoder_channels=[4, 4, 4, 4, 4],
        dfr_channels=4,
        dfr_blocks_low=1,
        dfr_blocks_high=1,
        dfr_blocks_fused=1,
        scale_ratio=2,
    )
    base.update(overrides)
    return ModelConfig(**base)


def build_dfr(rng):
    cfg = micro_config(scale_ratio=5, seed=int(rng.integers(2**31)))
    m = DualFeatureRefiner(cfg, rng)
    _randomize_head(m.head, rng)
    xs = [T.Tensor(rng.standard_normal((1, 1, 4, 4))), T.Tensor(rng.random((1, 1, 20, 20)))]
    return m, xs, lambda low, mask: m(low, mask)


def build_full(rng):
    m = EvalNet(micro_config(seed=int(rng.integers(2**31))))
    _randomize_head(m.dfr.head, rng)
    xs = [T.Tensor(rng.random((1, 4, 32, 32))), T.Tensor(rng.random((1, 1, 64, 64)))]
    return m, xs, lambda x, mask: m(x, mask)[1]


BLOCKS = {
    "srf": (build_srf, 6),
    "ma": (build_ma, 6),
    "hfd": (build_hfd, 4),
    "cla": (build_cla, 8),
    "dfr": (build_dfr, 3),
    "full": (build_full, 2),
}
FULL_TENSORS_PER_SEED = 16


def _points(name, module, inputs, seed, rng):
    """(tensor, coords) pairs to check for one seed."""
    pts = []
    for x in inputs:
        pts.append((x, rng.choice(x.data.size, min(12, x.data.size), replace=False)))
    params = module.parameters()
    per = BLOCKS[name][1]
    if name == "full":
        order = np.random.default_rng(1234).permutation(len(params))
        start = (seed * FULL_TENSORS_PER_SEED) % len(params)
        chosen = [params[order[(start + i) % len(params)]] for i in range(FULL_TENSORS_PER_SEED)]
    else:
        chosen = params
    for p in chosen:
        pts.append((p, rng.choice(p.data.size, min(per, p.data.size), replace=False)))
    return pts


def run_block(name: str, seeds, eps: float = 1e-3) -> SuiteResult:
    build = BLOCKS[name][0]
    res = SuiteResult(name)
    start = time.perf_counter()
    recorder = ReluRecorder()
    with T.precision(np.float64), recorder.patch():
        for seed in seeds:
            rng = np.random.default_rng(seed)
            module, inputs, forward = build(rng)
            with T.no_grad():
                baseline = forward(*inputs).data.copy()

            def f(_):
                return weighted_sum(forward(*inputs), seed, baseline)

            seed_worst = 0.0
            for point, coords in _points(name, module, inputs, seed, rng):
                kept, rechecked, skipped = check_point(f, point, coords, eps, recorder)
                res.checked += len(kept)
                res.kink_rechecked += rechecked
                res.skipped += skipped
                if kept:
                    seed_worst = max(seed_worst, max(kept))
            res.per_seed.append(seed_worst)
            if seed_worst > res.max_error:
                res.max_error, res.worst_seed = seed_worst, seed
    res.seconds = time.perf_counter() - start
    return res


# op-level cases: (name, make(rng) -> (inputs, forward))


def _op_cases():
    def conv(stride, padding, dilation):
        def make(rng):
            xs = [
                T.Tensor(rng.standard_normal((2, 3, 7, 6))),
                T.Tensor(rng.standard_normal((4, 3, 3, 3))),
                T.Tensor(rng.standard_normal(4)),
            ]
            return xs, lambda x, k, b: T.conv2d(x, k, b, stride, padding, dilation)

        return make

    def attention(rng):
        valid = rng.random((3, 3, 9)) > 0.3
        valid[..., 0] = True
        xs = [
            T.Tensor(rng.standard_normal((1, 2, 3, 3))),
            T.Tensor(rng.standard_normal((1, 2, 3, 3, 9))),
            T.Tensor(rng.standard_normal((1, 2, 3, 3, 9))),
        ]
        return xs, lambda q, k, v: T.local_dot_attention(q, k, v, valid)

    def gather(rng):
        xs = [T.Tensor(rng.standard_normal((1, 2, 6, 6)))]
        rows = cols = np.array([1, 4])
        return xs, lambda x: T.gather_windows(x, rows, cols, 5)[0]

    def away_from_zero(rng, shape):
        v = rng.uniform(0.1, 2.0, shape) * rng.choice([-1.0, 1.0], shape)
        return T.Tensor(v)

    target = np.random.default_rng(99).standard_normal((2, 3))
    return {
        "add": lambda r: ([T.Tensor(r.standard_normal((2, 3, 4))), T.Tensor(r.standard_normal((3, 1)))], T.add),
        "sub": lambda r: ([T.Tensor(r.standard_normal((2, 3))), T.Tensor(r.standard_normal((2, 3)))], T.sub),
        "mul": lambda r: ([T.Tensor(r.standard_normal((2, 3, 4))), T.Tensor(r.standard_normal((1, 3, 1)))], T.mul),
        "scale": lambda r: ([T.Tensor(r.standard_normal((3, 4)))], lambda a: T.scale(a, -1.7)),
        "relu": lambda r: ([away_from_zero(r, (3, 4))], T.relu),
        "sigmoid": lambda r: ([T.Tensor(3 * r.standard_normal((3, 4)))], T.sigmoid),
        "concat": lambda r: (
            [T.Tensor(r.standard_normal((1, 2, 3, 3))), T.Tensor(r.standard_normal((1, 1, 3, 3)))],
            lambda a, b: T.concat_channels([a, b]),
        ),
        "reshape": lambda r: ([T.Tensor(r.standard_normal((2, 6)))], lambda a: T.reshape(a, (3, 4))),
        "take_last": lambda r: ([T.Tensor(r.standard_normal((2, 3, 4)))], lambda a: T.take_last(a, 2)),
        "mean_all": lambda r: ([T.Tensor(r.standard_normal((2, 3)))], T.mean_all),
        "conv2d": conv(1, 1, 1),
        "conv2d_stride2": conv(2, 1, 1),
        "conv2d_dilated": conv(1, 2, 2),
        "pixel_shuffle": lambda r: ([T.Tensor(r.standard_normal((1, 8, 2, 3)))], lambda a: T.pixel_shuffle(a, 2)),
        "pixel_unshuffle": lambda r: ([T.Tensor(r.standard_normal((1, 2, 4, 6)))], lambda a: T.pixel_unshuffle(a, 2)),
        "avg_pool": lambda r: ([T.Tensor(r.standard_normal((1, 2, 6, 6)))], lambda a: T.avg_pool(a, 3)),
        "global_avg_pool": lambda r: ([T.Tensor(r.standard_normal((2, 3, 4, 5)))], T.global_avg_pool),
        "softmax": lambda r: ([T.Tensor(2 * r.standard_normal((3, 5)))], T.softmax),
        "gather_windows": gather,
        "local_dot_attention": attention,
        "mse_loss": lambda r: ([T.Tensor(r.standard_normal((2, 3)))], lambda a: T.mse_loss(a, target)),
        "l1_loss": lambda r: ([T.Tensor(target + r.uniform(0.1, 1, (2, 3)) * r.choice([-1, 1], (2, 3)))],
                              lambda a: T.l1_loss(a, target)),
    }


OPS = _op_cases()


def run_op(name: str, seeds, eps: float = 1e-3) -> SuiteResult:
    make = OPS[name]
    res = SuiteResult(name)
    start = time.perf_counter()
    with T.precision(np.float64):
        for seed in seeds:
            rng = np.random.default_rng(seed)
            inputs, forward = make(rng)

            def f(_):
                out = forward(*inputs)
                return out if out.data.size == 1 else weighted_sum(out, seed)

            worst = max(T.grad_check(f, x, eps) for x in inputs)
            res.checked += sum(x.data.size for x in inputs)
            res.per_seed.append(worst)
            if worst > res.max_error:
                res.max_error, res.worst_seed = worst, seed
    res.seconds = time.perf_counter() - start
    return res
