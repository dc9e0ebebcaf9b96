"""Central finite-difference verification of analytic gradients.

Every differentiable operator and network block registers a check here; the
suite runs in float64 and reports the worst relative error per operator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, no_grad

DEFAULT_H = 1e-3
DEFAULT_TOL = 1e-4


@dataclass
class CheckReport:
    """Outcome of one finite-difference comparison."""

    name: str
    max_rel_err: float
    checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.name:<28s} max_rel_err={self.max_rel_err:.3e}  n={self.checked:<5d} {status}"


def relative_error(a: float, n: float) -> float:
    return abs(a - n) / max(1e-8, abs(a) + abs(n))


def finite_diff_check(
    f,
    wrt,
    name: str = "check",
    h: float = DEFAULT_H,
    tol: float = DEFAULT_TOL,
    max_per_tensor: int | None = None,
    rng: np.random.Generator | None = None,
) -> CheckReport:
    """Compare analytic gradients of the scalar function `f` against central
    differences (f(x+h)-f(x-h))/2h at every (or a sampled subset of) coordinate
    of each tensor in `wrt`.

    `f` takes no arguments and must recompute the loss from the current tensor
    contents; `wrt` tensors must be float64 with requires_grad set.

    The central difference estimates a derivative only where f is smooth on
    [x-h, x+h]. Coordinates whose probe interval straddles a kink (a
    leaky_relu/abs branch change, detected exactly from the recorded branch
    patterns of the two evaluations) are re-probed with h/100, twice at most.
    """
    wrt = list(wrt)
    for t in wrt:
        if t.data.dtype != np.float64:
            raise ValueError(f"finite_diff_check requires float64 tensors ({t.name or 'input'})")
        t.zero_grad()
    loss = f()
    if loss.data.size != 1:
        raise T.ShapeError(f"finite_diff_check requires a scalar function, got {loss.shape}")
    T.backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in wrt]

    rng = rng or np.random.default_rng(0)
    worst = 0.0
    checked = 0

    def probe(flat, k, orig, hh):
        flat[k] = orig + hh
        with T.record_kinks([]) as up_trace:
            up = f().item()
        flat[k] = orig - hh
        with T.record_kinks([]) as dn_trace:
            dn = f().item()
        flat[k] = orig
        smooth = len(up_trace) == len(dn_trace) and all(
            np.array_equal(a, b) for a, b in zip(up_trace, dn_trace)
        )
        return (up - dn) / (2.0 * hh), smooth

    with no_grad():
        for t, gt in zip(wrt, analytic):
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_per_tensor is not None and flat.size > max_per_tensor:
                idx = rng.choice(flat.size, size=max_per_tensor, replace=False)
            for k in idx:
                orig = flat[k]
                hh = h
                numeric, smooth = probe(flat, k, orig, hh)
                refines = 0
                while not smooth and refines < 2:
                    hh /= 100.0
                    numeric, smooth = probe(flat, k, orig, hh)
                    refines += 1
                worst = max(worst, relative_error(gt.reshape(-1)[k], numeric))
                checked += 1
    for t in wrt:
        t.zero_grad()
    return CheckReport(name=name, max_rel_err=worst, checked=checked, tol=tol)


# ---------------------------------------------------------------------------
# operator suite
#
# Registry maps a check name to (group, runner). Runner(tol, h, rng) returns a
# list of CheckReports. Groups mirror the selectable gradcheck targets; "core"
# entries run only under "all".

REGISTRY: dict = {}


def register(name: str, group: str):
    def deco(fn):
        REGISTRY[name] = (group, fn)
        return fn

    return deco


def _rand(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True, dtype=np.float64)


def _away_from_zero(t: Tensor, margin: float):
    # Kinked ops (leaky_relu, abs) get inputs bounded away from the kink so the
    # two-sided difference stays on one branch.
    d = t.data
    d += np.sign(d) * margin
    return t


def _conv_params(rng, c_in, c_out, k, stride=1, padding=0):
    w = _rand(rng, c_out, c_in, k, k)
    b = _rand(rng, c_out)
    return T.ConvParams(weight=w, bias=b, stride=stride, padding=padding)


def _weighted_loss(rng, forward):
    """Mean of the output under one frozen random weighting.

    A plain mean is a degenerate functional through batch-norm (the output
    mean is exactly the shift parameter, so upstream gradients vanish); a
    generic positive weighting keeps every path's gradient well above the
    comparison's noise floor.
    """
    cache = {}

    def fn():
        out = forward()
        if "w" not in cache:
            cache["w"] = Tensor(rng.uniform(0.5, 1.5, out.shape), dtype=np.float64)
        return T.mean_all(T.mul(out, cache["w"]))

    return fn


@register("conv2d", "conv")
def _check_conv(tol, h, rng):
    reports = []
    shapes = [(1, 2, 5, 5), (2, 3, 6, 7), (1, 1, 5, 6)]
    for stride in (1, 2):
        for padding in (0, 1):
            for n, c, hh, ww in shapes:
                x = _rand(rng, n, c, hh, ww)
                p = _conv_params(rng, c, 2, 3, stride=stride, padding=padding)
                rep = finite_diff_check(
                    lambda: T.mean_all(T.conv2d(x, p)),
                    [x, p.weight, p.bias],
                    name=f"conv2d s{stride} p{padding}",
                    h=h,
                    tol=tol,
                    rng=rng,
                )
                reports.append(rep)
    return reports


@register("avg_pool", "core")
def _check_pool(tol, h, rng):
    reports = []
    for r, shape in [(2, (1, 2, 4, 4)), (2, (2, 1, 6, 4)), (3, (1, 3, 6, 6))]:
        x = _rand(rng, *shape)
        reports.append(
            finite_diff_check(
                lambda: T.mean_all(T.avg_pool(x, r)), [x], name=f"avg_pool r{r}", h=h, tol=tol
            )
        )
    return reports


@register("upsample_bilinear", "core")
def _check_upsample(tol, h, rng):
    reports = []
    for shape, out in [((1, 2, 3, 3), (6, 6)), ((2, 1, 4, 5), (7, 9)), ((1, 3, 2, 2), (2, 2))]:
        x = _rand(rng, *shape)
        reports.append(
            finite_diff_check(
                lambda: T.mean_all(T.upsample_bilinear(x, *out)),
                [x],
                name=f"upsample {shape[2]}x{shape[3]}->{out[0]}x{out[1]}",
                h=h,
                tol=tol,
            )
        )
    return reports


@register("leaky_relu", "core")
def _check_lrelu(tol, h, rng):
    reports = []
    for shape in [(1, 2, 3, 3), (2, 3, 2, 4), (1, 1, 5, 5)]:
        x = _away_from_zero(_rand(rng, *shape), 10 * h)
        reports.append(
            finite_diff_check(
                lambda: T.mean_all(T.leaky_relu(x, 0.2)), [x], name="leaky_relu", h=h, tol=tol
            )
        )
    return reports


@register("sigmoid", "core")
def _check_sigmoid(tol, h, rng):
    reports = []
    for shape in [(1, 2, 3, 3), (2, 3, 2, 4), (1, 1, 5, 5)]:
        x = _rand(rng, *shape)
        reports.append(
            finite_diff_check(lambda: T.mean_all(T.sigmoid(x)), [x], name="sigmoid", h=h, tol=tol)
        )
    return reports


def _bn_params(rng, c):
    return T.BatchNormParams(
        scale=_rand(rng, c),
        shift=_rand(rng, c),
        running_mean=np.zeros(c),
        running_var=np.ones(c),
    )


@register("batch_norm", "core")
def _check_bn(tol, h, rng):
    reports = []
    for shape in [(2, 3, 4, 4), (3, 2, 3, 5), (2, 1, 4, 6)]:
        x = _rand(rng, *shape)
        p = _bn_params(rng, shape[1])
        reports.append(
            finite_diff_check(
                _weighted_loss(rng, lambda: T.batch_norm(x, p, training=True)),
                [x, p.scale, p.shift],
                name="batch_norm train",
                h=h,
                tol=tol,
            )
        )
    x = _rand(rng, 2, 3, 4, 4)
    p = _bn_params(rng, 3)
    reports.append(
        finite_diff_check(
            _weighted_loss(rng, lambda: T.batch_norm(x, p, training=False)),
            [x, p.scale, p.shift],
            name="batch_norm eval",
            h=h,
            tol=tol,
        )
    )
    return reports


@register("concat_channels", "core")
def _check_concat(tol, h, rng):
    reports = []
    for shapes in [((1, 1, 3, 3), (1, 2, 3, 3)), ((2, 2, 2, 4), (2, 3, 2, 4), (2, 1, 2, 4)), ((1, 4, 2, 2),)]:
        xs = [_rand(rng, *s) for s in shapes]
        # weight the pieces unevenly so routing errors surface
        reports.append(
            finite_diff_check(
                lambda: T.mean_all(
                    T.mul(T.concat_channels(xs), Tensor(
                        np.arange(1, 1 + sum(s[1] for s in shapes)).reshape(1, -1, 1, 1)
                        * np.ones((shapes[0][0], 1, shapes[0][2], shapes[0][3])),
                        dtype=np.float64,
                    ))
                ),
                xs,
                name=f"concat x{len(shapes)}",
                h=h,
                tol=tol,
            )
        )
    return reports


@register("elementwise", "core")
def _check_elementwise(tol, h, rng):
    reports = []
    for op, name in [(T.add, "add"), (T.sub, "sub"), (T.mul, "hadamard"), (T.div, "div")]:
        for shape in [(1, 2, 3, 3), (2, 1, 4, 2), (1, 3, 2, 5)]:
            a = _rand(rng, *shape)
            b = _rand(rng, *shape)
            if op is T.div:
                b.data += np.sign(b.data) * 0.5
            reports.append(
                finite_diff_check(
                    lambda: T.mean_all(op(a, b)), [a, b], name=f"elementwise {name}", h=h, tol=tol
                )
            )
    return reports


@register("softmax_over_positions", "attention")
def _check_softmax(tol, h, rng):
    reports = []
    for groups, positions, hh, ww in [(2, 49, 2, 2), (1, 9, 3, 3), (3, 4, 2, 3)]:
        x = _rand(rng, 1, groups * positions, hh, ww)
        # non-uniform weighting of outputs to exercise the full Jacobian
        wgt = Tensor(rng.standard_normal(x.shape), dtype=np.float64)
        reports.append(
            finite_diff_check(
                lambda: T.mean_all(T.mul(T.softmax_over_positions(x, groups, positions), wgt)),
                [x],
                name=f"softmax g{groups} p{positions}",
                h=h,
                tol=tol,
            )
        )
    return reports


@register("neighbor_stack", "attention")
def _check_neighbor_stack(tol, h, rng):
    reports = []
    for f, shape in [(3, (1, 2, 4, 4)), (5, (1, 1, 5, 3)), (3, (2, 2, 3, 5))]:
        x = _rand(rng, *shape)
        wgt = Tensor(
            rng.standard_normal((shape[0], shape[1] * f * f, shape[2], shape[3])),
            dtype=np.float64,
        )
        reports.append(
            finite_diff_check(
                lambda: T.mean_all(T.mul(T.neighbor_stack(x, f), wgt)),
                [x],
                name=f"neighbor_stack f{f}",
                h=h,
                tol=tol,
            )
        )
    return reports


@register("channel_movement", "core")
def _check_channel_movement(tol, h, rng):
    # reshape / permute / tile / repeat / group-sum composed into one scalar
    reports = []
    for c, reps, block in [(3, 2, 1), (2, 3, 2), (4, 2, 2)]:
        x = _rand(rng, 1, c, 2, 3)
        perm = rng.permutation(c * reps)

        def fn():
            t = T.tile_channels(x, reps)
            t = T.permute_channels(t, perm)
            t = T.repeat_channel_blocks(t, 2, block=block)
            t = T.reshape(t, (2, c * reps, 2, 3))
            t = T.sum_channel_groups(t, group=c)
            return T.mean_all(T.mul(t, t))

        reports.append(finite_diff_check(fn, [x], name="channel_movement", h=h, tol=tol))
    return reports


def _attention_params(rng, c, footprint=3, red=2, share=1):
    from .network import init_self_attention

    return init_self_attention(
        rng, c, footprint=footprint, red=red, share=share, dtype=np.float64
    )


@register("self_attention", "attention")
def _check_attention(tol, h, rng):
    from .network import self_attention_forward

    reports = []
    for c, hh, ww, f in [(4, 5, 5, 3), (2, 4, 6, 3), (4, 4, 4, 7)]:
        x = _rand(rng, 1, c, hh, ww)
        p = _attention_params(rng, c, footprint=f, red=2, share=1)
        params = [x] + [t for _, t in p.named_params()]
        reports.append(
            finite_diff_check(
                _weighted_loss(rng, lambda: self_attention_forward(x, p, training=True)),
                params,
                name=f"self_attention c{c} f{f}",
                h=h,
                tol=tol,
                max_per_tensor=6,
                rng=rng,
            )
        )
    return reports


@register("scale_agg", "scaleagg")
def _check_scale_agg(tol, h, rng):
    from .network import init_scale_agg, scale_agg_forward

    reports = []
    for c, hh, ww, n in [(2, 4, 4, 1), (3, 8, 8, 2), (2, 4, 8, 2)]:
        x = _rand(rng, 1, c, hh, ww)
        p = init_scale_agg(rng, c, scales=n, dtype=np.float64)
        params = [x] + [t for _, t in p.named_params()]
        reports.append(
            finite_diff_check(
                _weighted_loss(rng, lambda: scale_agg_forward(x, p)),
                params,
                name=f"scale_agg n{n}",
                h=h,
                tol=tol,
                max_per_tensor=6,
                rng=rng,
            )
        )
    return reports


@register("sc_conv", "scconv")
def _check_sc_conv(tol, h, rng):
    from .network import init_sc_conv, sc_conv_forward

    reports = []
    for c, hh, ww, r in [(4, 4, 4, 2), (2, 6, 6, 3), (4, 8, 4, 4)]:
        x = _rand(rng, 1, c, hh, ww)
        p = init_sc_conv(rng, c, pool_r=r, dtype=np.float64)
        params = [x] + [t for _, t in p.named_params()]
        reports.append(
            finite_diff_check(
                _weighted_loss(rng, lambda: sc_conv_forward(x, p)),
                params,
                name=f"sc_conv r{r}",
                h=h,
                tol=tol,
                max_per_tensor=6,
                rng=rng,
            )
        )
    return reports


@register("ssim", "ssim")
def _check_ssim(tol, h, rng):
    from .losses import SsimConfig, ssim

    reports = []
    cfg = SsimConfig()
    for shape in [(1, 3, 12, 12), (1, 1, 11, 14), (2, 3, 11, 11)]:
        a = Tensor(rng.uniform(0.1, 0.9, shape), requires_grad=True, dtype=np.float64)
        b = Tensor(rng.uniform(0.1, 0.9, shape), requires_grad=True, dtype=np.float64)
        reports.append(
            finite_diff_check(
                lambda: ssim(a, b, cfg),
                [a, b],
                name=f"ssim {shape[2]}x{shape[3]}",
                h=h,
                tol=tol,
                max_per_tensor=12,
                rng=rng,
            )
        )
    return reports


@register("pointwise_losses", "ssim")
def _check_pointwise_losses(tol, h, rng):
    from .losses import mae_loss, mse_loss

    reports = []
    for shape in [(1, 3, 4, 4), (2, 1, 3, 5), (1, 2, 2, 2)]:
        a = _away_from_zero(_rand(rng, *shape), 10 * h)
        b = Tensor(np.zeros(shape), requires_grad=True, dtype=np.float64)
        reports.append(
            finite_diff_check(lambda: mse_loss(a, b), [a, b], name="mse_loss", h=h, tol=tol)
        )
        reports.append(
            finite_diff_check(lambda: mae_loss(a, b), [a, b], name="mae_loss", h=h, tol=tol)
        )
    return reports


@register("network", "network")
def _check_network(tol, h, rng):
    from .losses import neg_ssim_loss
    from .network import build_jdnet, jdnet_forward

    net = build_jdnet(
        channels=4,
        units=2,
        scales=2,
        pool_r=2,
        footprint=7,
        red=4,
        share=1,
        ablation="R3",
        rng=rng,
        dtype=np.float64,
    )
    o = Tensor(rng.uniform(0.1, 0.9, (1, 3, 16, 16)), requires_grad=True, dtype=np.float64)
    b = Tensor(rng.uniform(0.1, 0.9, (1, 3, 16, 16)), dtype=np.float64)

    def fn():
        b_hat, _ = jdnet_forward(o, net, training=True)
        return neg_ssim_loss(b_hat, b)

    params = [o] + [t for _, t in net.named_params()]
    rep = finite_diff_check(
        fn, params, name="jdnet U2 C4 16x16", h=h, tol=tol, max_per_tensor=3, rng=rng
    )
    return [rep]


GROUPS = ("all", "conv", "attention", "scaleagg", "scconv", "ssim", "network")


def run_suite(module: str = "all", tol: float = DEFAULT_TOL, h: float = DEFAULT_H, seed: int = 0):
    """Run the registered checks for one module group (or everything)."""
    if module not in GROUPS:
        raise ValueError(f"unknown gradcheck module {module!r}; choose from {GROUPS}")
    reports = []
    for name, (group, runner) in REGISTRY.items():
        if module != "all" and group != module:
            continue
        # the full-network composition is held to a 10x looser bar than
        # individual operators (error compounds through ~100 ops)
        net_tol = tol * 10 if group == "network" else tol
        rng = np.random.default_rng(seed)
        reports.extend(runner(net_tol, h, rng))
    return reports
