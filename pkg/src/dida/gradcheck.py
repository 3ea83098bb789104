"""Finite-difference audits of every differentiable path.

Each suite compares analytic gradients from :func:`dida.tensor.backward`
against central differences and reports the worst normwise relative error
(the attention-map suite reports max absolute error instead, against an oracle
that never touches the autodiff engine).
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import (attention_map, contrastive_loss, dida_forward, dida_loss,
                        dominant_difference, mask_salient_region, soften, vda_signal)
from .encoder import Encoder, EncoderConfig
from .scenes import DataConfig, generate_scene
from .tensor import Tensor

EPS = 1e-5


@dataclass
class SuiteResult:
    name: str
    worst: float
    checks: int
    seconds: float
    metric: str = "max rel error"

    def passed(self, tol: float) -> bool:
        return self.worst <= tol


def _away_from_kinks(x, margin=1e-3):
    # keep |x| >= margin so central differences never straddle a ReLU kink
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin, x)


def check_grad(fn, inputs, eps=EPS) -> float:
    """Worst error over all inputs of the scalar map ``fn(*inputs)``."""
    leaves = [Tensor(x, requires_grad=True) for x in inputs]
    grads = T.backward(fn(*leaves), leaves)
    worst = 0.0
    for i, x in enumerate(inputs):
        def partial(v, i=i):
            args = [Tensor(a, requires_grad=True) for a in inputs]
            args[i] = Tensor(v.data, requires_grad=True)
            return fn(*args)
        worst = max(worst, T.max_rel_error(grads[i], T.finite_diff_gradient(partial, x, eps)))
    return worst


def check_second_order(fn, inputs, rng, eps=EPS) -> float:
    """Grad of <grad fn, v> against finite differences of the first gradient contracted with v."""
    vs = [rng.normal(size=np.shape(x)) for x in inputs]

    def contracted(*args):
        (g_all) = T.backward(fn(*args), list(args), build_higher=True)
        total = Tensor(0.0)
        for g, v in zip(g_all, vs):
            total = T.add(total, T.sum(T.mul(g, Tensor(v))))
        return total

    def contracted_fd(*args):
        leaves = [Tensor(a.data, requires_grad=True) for a in args]
        return contracted(*leaves)

    leaves = [Tensor(x, requires_grad=True) for x in inputs]
    grads = T.backward(contracted(*leaves), leaves)
    worst = 0.0
    for i, x in enumerate(inputs):
        def partial(v, i=i):
            args = [Tensor(a) for a in inputs]
            args[i] = v
            return contracted_fd(*args)
        worst = max(worst, T.max_rel_error(grads[i], T.finite_diff_gradient(partial, x, eps)))
    return worst


def _weighted(rng, shape):
    w = Tensor(rng.normal(size=shape))
    return lambda t: T.sum(T.mul(t, w))


def op_cases(rng):
    """(name, scalar fn, input sampler) for every differentiable operation."""
    u = lambda *s: rng.uniform(-2, 2, size=s)  # noqa: E731
    pos = lambda *s: rng.uniform(0.2, 2, size=s)  # noqa: E731
    cases = []

    def case(name, make):
        cases.append((name, make))

    def binary(op):
        def make():
            w = _weighted(rng, (3, 4))
            return (lambda a, b: w(op(a, b))), [u(3, 4), u(3, 4)]
        return make

    case("add", binary(T.add))
    case("sub", binary(T.sub))
    case("mul", binary(T.mul))

    def make_div():
        w = _weighted(rng, (3, 4))
        return (lambda a, b: w(T.div(a, b))), [u(3, 4), pos(3, 4) * rng.choice([-1, 1], (3, 4))]
    case("div", make_div)

    def make_scalar_mul():
        w = _weighted(rng, (5,))
        return (lambda a, c: w(T.mul(a, c))), [u(5), np.array(rng.uniform(-2, 2))]
    case("mul_scalar_broadcast", make_scalar_mul)

    def make_scalar_div():
        w = _weighted(rng, (5,))
        return (lambda a, c: w(T.div(a, c))), [u(5), np.array(rng.uniform(0.5, 2))]
    case("div_scalar_broadcast", make_scalar_div)

    def unary(op, sampler=None):
        def make():
            w = _weighted(rng, (6,))
            x = sampler(6) if sampler else u(6)
            return (lambda a: w(op(a))), [x]
        return make

    case("neg", unary(T.neg))
    case("relu", unary(T.relu, lambda n: _away_from_kinks(u(n))))
    case("sigmoid", unary(T.sigmoid))
    case("exp", unary(T.exp))
    case("log", unary(T.log, lambda n: pos(n)))
    case("dot", lambda: (lambda a, b: T.dot(a, b), [u(7), u(7)]))
    case("l2_norm", lambda: (T.l2_norm, [u(7)]))
    case("gap", lambda: (lambda a: T.gap(T.mul(a, a)), [u(3, 3)]))

    def make_sum_axis():
        w = _weighted(rng, (2, 4))
        return (lambda a: w(T.sum(a, axis=1))), [u(2, 3, 4)]
    case("sum_axis", make_sum_axis)

    def make_mean_axis():
        w = _weighted(rng, (2,))
        return (lambda a: w(T.mean(a, axis=(1, 2)))), [u(2, 3, 4)]
    case("mean_axis", make_mean_axis)

    def make_expand():
        w = _weighted(rng, (3, 2, 2))
        return (lambda a: w(T.expand(a, (3, 2, 2), (1, 2)))), [u(3)]
    case("expand", make_expand)

    case("amax", lambda: (lambda a: T.amax(a), [u(4, 4)]))

    def make_reshape():
        w = _weighted(rng, (6, 2))
        return (lambda a: w(T.reshape(a, (6, 2)))), [u(3, 4)]
    case("reshape", make_reshape)

    def make_transpose():
        w = _weighted(rng, (4, 3))
        return (lambda a: w(T.transpose(a))), [u(3, 4)]
    case("transpose", make_transpose)

    def make_mm():
        w = _weighted(rng, (3, 2))
        return (lambda a, b: w(T.matmul(a, b))), [u(3, 4), u(4, 2)]
    case("matmul", make_mm)

    def make_mv():
        w = _weighted(rng, (3,))
        return (lambda a, b: w(T.matmul(a, b))), [u(3, 4), u(4)]
    case("matvec", make_mv)

    def make_outer():
        w = _weighted(rng, (3, 4))
        return (lambda a, b: w(T.outer(a, b))), [u(3), u(4)]
    case("outer", make_outer)

    def make_stack():
        w = _weighted(rng, (3, 4))
        return (lambda a, b, c: w(T.stack([a, b, c]))), [u(4), u(4), u(4)]
    case("stack", make_stack)

    def make_take():
        w = _weighted(rng, (4,))
        return (lambda a: w(T.take(a, 1))), [u(3, 4)]
    case("take", make_take)

    def make_lse():
        w = _weighted(rng, (3,))
        return (lambda a: w(T.logsumexp(a, axis=1))), [u(3, 5)]
    case("logsumexp", make_lse)

    def make_conv(stride, pad):
        def make():
            x, k, b = u(2, 5, 5), u(3, 2, 3, 3), u(3)
            shape = T.conv2d(Tensor(x), Tensor(k), Tensor(b), stride, pad).shape
            w = _weighted(rng, shape)
            return (lambda x_, k_, b_: w(T.relu(T.conv2d(x_, k_, b_, stride, pad)))), [x, k, b]
        return make
    case("conv2d_s1p0", make_conv(1, 0))
    case("conv2d_s2p1", make_conv(2, 1))

    def make_conv_adjoints():
        # the input- and kernel-adjoints appear as vjps; exercise them through a first gradient
        x, k = u(2, 5, 5), u(3, 2, 3, 3)
        gout = rng.normal(size=(3, 3, 3))

        def fn(x_, k_):
            y = T.sum(T.mul(T.conv2d(x_, k_, Tensor(np.zeros(3)), 2, 1), Tensor(gout)))
            gx, gk = T.backward(y, [x_, k_], build_higher=True)
            return T.add(T.sum(T.mul(gx, gx)), T.sum(T.mul(gk, T.sigmoid(gk))))
        return fn, [x, k]
    case("conv2d_adjoints", make_conv_adjoints)

    def make_soften():
        weights = Tensor(rng.normal(size=(3, 3)))
        return (lambda m: T.sum(T.mul(soften(m), weights))), [rng.uniform(0, 1, (3, 3))]
    case("soften", make_soften)
    case("dida_loss", lambda: (lambda m, s: dida_loss(m, s),
                               [rng.uniform(0.05, 1, (3, 3)), rng.uniform(0.05, 1, (3, 3))]))
    case("difference_signal_dot", lambda: (lambda f, fm: vda_signal(f, fm, "dot"),
                                           [rng.uniform(0, 1, 8), rng.uniform(0, 1, 8)]))

    def make_threshold():
        f, fm = rng.uniform(0, 1, 8), rng.uniform(0, 1, 8)
        return (lambda a, b: vda_signal(a, b, "threshold")), [f, fm]
    case("difference_signal_threshold", make_threshold)

    def make_dominant():
        w = _weighted(rng, (8,))
        return (lambda a: w(dominant_difference(a, 0.5))), [u(8)]
    case("dominant_difference", make_dominant)

    def make_contrastive():
        feats = [rng.uniform(0.05, 1, 5) for _ in range(6)]
        return (lambda *fs: contrastive_loss(list(fs[:3]), list(fs[3:]), 0.5)), feats
    case("contrastive_loss", make_contrastive)
    return cases


def run_op_suite(trials=20, seed=0, second_order=False) -> list:
    rng = np.random.default_rng(seed)
    results = []
    for name, make in op_cases(rng):
        t0 = time.perf_counter()
        worst = 0.0
        for _ in range(trials):
            fn, inputs = make()
            err = check_second_order(fn, inputs, rng) if second_order else check_grad(fn, inputs)
            worst = max(worst, err)
        prefix = "op2" if second_order else "op"
        results.append(SuiteResult(f"{prefix}:{name}", worst, trials, time.perf_counter() - t0))
    return results


def random_scene(size, seed, index=0):
    return generate_scene(DataConfig(size=size, min_size=max(2, size // 4),
                                     max_size=max(2, size // 2), seed=seed), index)


def run_encoder_suite(config: EncoderConfig, trials=2, seed=0) -> SuiteResult:
    """Gradient of a random scalar function of f with respect to every encoder parameter."""
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(trials):
        enc = Encoder(config)
        image = rng.uniform(0, 1, (config.input_channels, config.input_size, config.input_size))
        w = Tensor(rng.normal(size=config.feature_dim))
        worst = max(worst, _param_check(enc, lambda e: T.dot(e(image).features, w)))
    return SuiteResult("encoder_params", worst, trials, time.perf_counter() - t0)


def _param_check(enc: Encoder, objective, eps=EPS) -> float:
    grads = T.backward(objective(enc), enc.params)
    worst = 0.0
    for p, g in zip(enc.params, grads):
        base = p.data.copy()

        def at(v, p=p):
            p.data = v.data
            try:
                return objective(enc)
            finally:
                p.data = base
        num = T.finite_diff_gradient(at, base, eps)
        p.data = base
        worst = max(worst, T.max_rel_error(g, num))
    return worst


def run_pipeline_suite(widths=(4, 8), size=8, feature_dim=8, trials=1, seed=0,
                       name="dida_forward_double_backprop") -> SuiteResult:
    """Gradient of the full difference-attention loss (double backprop) against finite differences."""
    t0 = time.perf_counter()
    worst = 0.0
    for t in range(trials):
        enc = Encoder(EncoderConfig(3, size, tuple(widths), feature_dim, seed + t))
        scene = random_scene(size, seed + t)
        worst = max(worst, _param_check(enc, lambda e: dida_forward(e, scene)[0]))
    return SuiteResult(name, worst, trials, time.perf_counter() - t0)


def oracle_attention_map(enc: Encoder, image, masked, mode="dot", keep_fraction=0.25, eps=EPS):
    """Attention map with each G_i from finite differences; numpy only, no autodiff."""
    W, b = enc.params[-2].data, enc.params[-1].data
    with T.no_grad():
        A = enc(image).activations.data
        f_m = enc(masked).features.data

    def head(acts):
        z = W @ acts.mean(axis=(1, 2)) + b
        return 1.0 / (1.0 + np.exp(-z))

    f0 = head(A)
    sel = None
    if mode == "threshold":
        d = f0 - f_m
        order = np.argsort(-np.abs(d), kind="stable")
        sel = np.zeros_like(d)
        sel[order[:int(np.ceil(keep_fraction * d.size))]] = 1.0

    def signal(acts):
        f = head(acts)
        return float(f @ (f - f_m)) if mode == "dot" else float(np.sum((f - f_m) * sel))

    G = np.zeros_like(A)
    flat, gflat = A.reshape(-1), G.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = signal(A)
        flat[i] = orig - eps
        lo = signal(A)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    alpha = G.mean(axis=(1, 2))
    M = np.maximum(np.tensordot(alpha, A, axes=(0, 0)), 0.0)
    return M / M.max() if M.max() > 0 else M


def engine_attention_map(enc: Encoder, image, masked, mode="dot"):
    out = enc(image)
    with T.no_grad():
        f_m = enc(masked).features
    s = vda_signal(out.features, f_m, mode)
    return attention_map(s, out.activations, retain_graph=False).raw.data


def run_attention_map_suite(trials=6, seed=0) -> SuiteResult:
    """Attention map vs the finite-difference-G oracle on random tiny encoders (n <= 8, p = q <= 4)."""
    shapes = [((4, 8), 8), ((4, 8), 16), ((6,), 8), ((3, 5), 16), ((8,), 8), ((2, 4, 8), 16)]
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst = 0.0
    for t in range(trials):
        widths, size = shapes[t % len(shapes)]
        enc = Encoder(EncoderConfig(3, size, widths, 8, seed + t))
        scene = random_scene(size, seed + t)
        image = rng.uniform(0, 1, scene.image.shape) if t % 2 else scene.image
        masked, _ = mask_salient_region(image, scene.saliency)
        for mode in ("dot", "threshold"):
            diff = np.abs(engine_attention_map(enc, image, masked, mode)
                          - oracle_attention_map(enc, image, masked, mode))
            worst = max(worst, float(diff.max()))
    return SuiteResult("attention_map_oracle", worst, 2 * trials, time.perf_counter() - t0, "max abs error")


def run_all(size: str = "tiny") -> list:
    """Every suite; ``tiny`` is the fast CI setting, ``small`` uses more trials and bigger encoders."""
    if size not in ("tiny", "small"):
        raise ValueError("size must be 'tiny' or 'small'")
    big = size == "small"
    results = run_op_suite(trials=40 if big else 20)
    results += run_op_suite(trials=5 if big else 2, seed=1, second_order=True)
    results.append(run_encoder_suite(EncoderConfig(3, 16 if big else 8, (4, 8), 8, 3)))
    results.append(run_pipeline_suite(trials=3 if big else 1))
    if big:
        results.append(run_pipeline_suite(widths=(4, 8, 8), size=16, trials=1, seed=7,
                                          name="dida_forward_double_backprop_3layer"))
    results.append(run_attention_map_suite(trials=12 if big else 6))
    return results
