"""Registry of central-difference gradient checks over every differentiable op.

Each check reduces the op's output to a scalar with a fixed random weight
map (a plain sum would hide errors in ops whose outputs sum to a constant,
softmax being the obvious one) and compares against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import attention as A
from . import tensor as T
from .errors import VerificationError
from .model import ParamStore, ResidualBlock, TransformerDecoderBlock, TransformerEncoderBlock, UTNetConfig, build
from .tensor import Tensor
from .train import combined_loss, dice_loss

OP_TOLERANCE = 1e-5
MODEL_TOLERANCE = 1e-4
# the whole network holds thousands of ReLU kinks; a 1e-5 central step
# straddles some of them, a 1e-6 step does not (rounding error stays ~1e-10)
MODEL_EPS = 1e-6


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float
    coordinate: str

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


@dataclass
class Check:
    name: str
    run: Callable[[int], tuple[float, str]]  # seed -> (worst error, "input[index]")
    tolerance: float = OP_TOLERANCE
    kind: str = "op"


def _weighted(out: Tensor, seed: int) -> Tensor:
    r = np.random.default_rng(seed + 7919).standard_normal(out.shape)
    return T.sum_(T.mul(out, r))


def _where(name: str, i: int, shape: tuple) -> str:
    return f"{name}{tuple(int(v) for v in np.unravel_index(max(i, 0), shape))}"


def _check_inputs(fn, inputs: dict[str, np.ndarray], seed: int, coords: int | None = None, eps: float = 1e-5) -> tuple[float, str]:
    """Check ``fn(**tensors)`` against each input in turn."""
    tensors = {k: Tensor(v.copy()) for k, v in inputs.items()}
    worst, where = 0.0, ""
    rng = np.random.default_rng(seed + 1)
    for name, x in tensors.items():
        idx = None
        if coords is not None and x.size > coords:
            idx = sorted(rng.choice(x.size, size=coords, replace=False).tolist())

        def f(t, name=name):
            args = dict(tensors)
            args[name] = t
            return _weighted(fn(**args), seed)

        err, i = T.grad_check_worst(f, x, eps=eps, coords=idx)
        for t in tensors.values():
            t.requires_grad = False
        if err >= worst:
            worst, where = err, _where(name, i, x.shape)
    return worst, where


def _r(seed: int, *shape, low=None):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape)
    if low is not None:
        x = np.abs(x) + low
    return x


def _nudge_ties(x: np.ndarray) -> np.ndarray:
    # keep kinks (relu at 0, max ties) further than eps from every coordinate
    return x + np.sign(x) * 0.05


REGISTRY: dict[str, Check] = {}


def register(name: str, tolerance: float = OP_TOLERANCE, kind: str = "op"):
    def deco(fn):
        REGISTRY[name] = Check(name, fn, tolerance, kind)
        return fn
    return deco


@register("add")
def _(s):
    return _check_inputs(T.add, {"a": _r(s, 3, 4), "b": _r(s + 1, 4)}, s)


@register("mul")
def _(s):
    return _check_inputs(T.mul, {"a": _r(s, 3, 4), "b": _r(s + 1, 3, 1)}, s)


@register("div")
def _(s):
    return _check_inputs(T.div, {"a": _r(s, 3, 4), "b": _r(s + 1, 3, 4, low=0.5)}, s)


@register("relu")
def _(s):
    return _check_inputs(T.relu, {"x": _nudge_ties(_r(s, 4, 5))}, s)


@register("gelu")
def _(s):
    return _check_inputs(T.gelu, {"x": _r(s, 4, 5)}, s)


@register("sum_mean")
def _(s):
    return _check_inputs(lambda x: T.add(T.sum_(x, axis=1), T.mean(x, axis=0)), {"x": _r(s, 4, 4)}, s)


@register("matmul")
def _(s):
    return _check_inputs(T.matmul, {"a": _r(s, 2, 3, 4), "b": _r(s + 1, 4, 5)}, s)


@register("softmax")
def _(s):
    return _check_inputs(lambda x: T.softmax(x, axis=-1), {"x": _r(s, 3, 6)}, s)


@register("reshape_transpose_concat")
def _(s):
    def f(a, b):
        return T.concat([T.transpose(T.reshape(a, (3, 4)), (1, 0)), b], axis=1)
    return _check_inputs(f, {"a": _r(s, 2, 6), "b": _r(s + 1, 4, 2)}, s)


@register("take")
def _(s):
    idx = np.array([[0, 2, 2], [1, 0, 3]])
    return _check_inputs(lambda t: T.take(t, idx, axis=1), {"t": _r(s, 2, 4, 3)}, s)


@register("conv2d_3x3")
def _(s):
    return _check_inputs(lambda x, w, b: T.conv2d(x, w, b, pad=1), {"x": _r(s, 2, 3, 5, 5), "w": _r(s + 1, 4, 3, 3, 3), "b": _r(s + 2, 4)}, s)


@register("conv2d_stride2")
def _(s):
    return _check_inputs(lambda x, w: T.conv2d(x, w, stride=2, pad=(1, 0)), {"x": _r(s, 1, 2, 6, 6), "w": _r(s + 1, 3, 2, 3, 3)}, s)


@register("conv2d_1x1")
def _(s):
    return _check_inputs(lambda x, w: T.conv2d(x, w), {"x": _r(s, 2, 3, 4, 4), "w": _r(s + 1, 5, 3, 1, 1)}, s)


@register("bilinear_resize")
def _(s):
    return _check_inputs(lambda x: T.bilinear_resize(x, 3, 7), {"x": _r(s, 1, 2, 5, 4)}, s)


@register("max_pool_2d")
def _(s):
    x = np.random.default_rng(s).permutation(64).reshape(1, 1, 8, 8) * 0.1
    return _check_inputs(T.max_pool_2d, {"x": x}, s)


@register("adaptive_max_pool_2d")
def _(s):
    x = np.random.default_rng(s).permutation(2 * 49).reshape(1, 2, 7, 7) * 0.1
    return _check_inputs(lambda x: T.adaptive_max_pool_2d(x, 3, 3), {"x": x}, s)


@register("batch_norm_2d_train")
def _(s):
    C = 3

    def f(x, gamma, beta):
        return T.batch_norm_2d(x, gamma, beta, np.zeros(C), np.ones(C), training=True)
    return _check_inputs(f, {"x": _r(s, 2, C, 3, 3), "gamma": _r(s + 1, C), "beta": _r(s + 2, C)}, s)


@register("batch_norm_2d_eval")
def _(s):
    C = 3
    rm, rv = _r(s + 3, C), _r(s + 4, C, low=0.5)

    def f(x, gamma, beta):
        return T.batch_norm_2d(x, gamma, beta, rm.copy(), rv.copy(), training=False)
    return _check_inputs(f, {"x": _r(s, 2, C, 3, 3), "gamma": _r(s + 1, C), "beta": _r(s + 2, C)}, s)


@register("layer_norm_channels")
def _(s):
    return _check_inputs(T.layer_norm_channels, {"x": _r(s, 2, 4, 3, 3), "gamma": _r(s + 1, 4), "beta": _r(s + 2, 4)}, s)


@register("cross_entropy_with_logits")
def _(s):
    lab = np.random.default_rng(s).integers(0, 4, size=(2, 3, 3))
    return _check_inputs(lambda z: T.cross_entropy_with_logits(z, lab), {"z": _r(s, 2, 4, 3, 3)}, s)


@register("dice_loss")
def _(s):
    lab = np.random.default_rng(s).integers(0, 4, size=(2, 3, 3))
    return _check_inputs(lambda z: dice_loss(z, lab), {"z": _r(s, 2, 4, 3, 3)}, s)


@register("combined_loss")
def _(s):
    lab = np.random.default_rng(s).integers(0, 4, size=(2, 4, 4))
    return _check_inputs(lambda z: combined_loss(z, lab), {"z": _r(s, 2, 4, 4, 4)}, s)


# --------------------------------------------------------------------------
# attention variants


def _attn(seed: int, channels=8, relpos=True, reduced=4, projection="bilinear"):
    cfg = A.AttentionConfig(heads=4, reduced_size=reduced, use_relpos=relpos, projection=projection).with_channels(channels)
    rng = np.random.default_rng(seed + 11)
    w = A.AttentionWeights.init(cfg, rng)
    if w.relpos is not None:
        w.relpos.rel_h.data = rng.standard_normal(w.relpos.rel_h.shape) * 0.5
        w.relpos.rel_w.data = rng.standard_normal(w.relpos.rel_w.shape) * 0.5
    return cfg, w


def _attn_check(seed, variant, x, hi=None, **kw):
    cfg, w = _attn(seed, **kw)
    named = w.named()

    def fn(x, **params):
        for role, t in params.items():
            setattr_role(w, role, t)
        if variant == "decoder":
            return A.decoder_cross_mhsa(hi_t, x, w, cfg)
        return {"standard": A.standard_mhsa, "efficient": A.efficient_mhsa, "relpos": A.efficient_mhsa_relpos}[variant](x, w, cfg)

    hi_t = Tensor(hi) if hi is not None else None
    inputs = {"x": x, **{role: t.data for role, t in named.items()}}
    return _check_inputs(fn, inputs, seed, coords=24)


def setattr_role(w: A.AttentionWeights, role: str, t: Tensor) -> None:
    if role in ("rel_h", "rel_w"):
        setattr(w.relpos, role, t)
    else:
        setattr(w, f"w_{role}", t)


@register("standard_mhsa", kind="attention")
def _(s):
    return _attn_check(s, "standard", _r(s, 1, 8, 4, 4), relpos=False)


@register("efficient_mhsa", kind="attention")
def _(s):
    return _attn_check(s, "efficient", _r(s, 1, 8, 8, 8), relpos=False)


@register("efficient_mhsa_maxpool", kind="attention")
def _(s):
    x = np.random.default_rng(s).permutation(8 * 64).reshape(1, 8, 8, 8) / 64.0
    return _attn_check(s, "efficient", x, relpos=False, projection="maxpool")


@register("efficient_mhsa_relpos", kind="attention")
def _(s):
    return _attn_check(s, "relpos", _r(s, 1, 8, 8, 8))


@register("decoder_cross_mhsa", kind="attention")
def _(s):
    return _attn_check(s, "decoder", _r(s, 1, 8, 4, 4), hi=_r(s + 5, 1, 8, 8, 8))


# --------------------------------------------------------------------------
# blocks and the full network


def _block_params_check(seed, build_block, call, inputs, coords=16):
    store = ParamStore(np.random.default_rng(seed + 3))
    block = build_block(store)
    for p in store.params.values():
        p.data = p.data + 0.1 * np.random.default_rng(seed + 5).standard_normal(p.shape)
    params = dict(store.params)

    def fn(**kw):
        for name, t in kw.items():
            if name in params:
                _swap(block, params[name], t)
                params[name] = t
        return call(block, **{k: v for k, v in kw.items() if k not in params})

    all_inputs = {**inputs, **{k: v.data.copy() for k, v in params.items()}}
    return _check_inputs(fn, all_inputs, seed, coords=coords)


def _swap(obj, old: Tensor, new: Tensor, depth: int = 0) -> None:
    """Replace attribute references to ``old`` by ``new`` inside a block tree."""
    if depth > 4:
        return
    for key, val in vars(obj).items():
        if val is old:
            setattr(obj, key, new)
        elif hasattr(val, "__dict__") and not isinstance(val, (Tensor, np.ndarray)):
            _swap(val, old, new, depth + 1)


@register("residual_block", kind="block")
def _(s):
    return _block_params_check(
        s, lambda st: ResidualBlock(st, "b", 4, 6, stride=2), lambda b, x: b(x, True), {"x": _r(s, 2, 4, 6, 6)}
    )


@register("transformer_encoder_block", kind="block")
def _(s):
    cfg = A.AttentionConfig(heads=4, reduced_size=4)
    return _block_params_check(
        s, lambda st: TransformerEncoderBlock(st, "t", 16, cfg, "enc"), lambda b, x: b(x), {"x": _r(s, 1, 16, 8, 8)}
    )


@register("transformer_decoder_block", kind="block")
def _(s):
    cfg = A.AttentionConfig(heads=4, reduced_size=4)
    return _block_params_check(
        s,
        lambda st: TransformerDecoderBlock(st, "d", 8, 16, cfg, "dec"),
        lambda b, hi, lo: b(hi, lo),
        {"hi": _r(s, 1, 8, 8, 8), "lo": _r(s + 1, 1, 16, 4, 4)},
    )


@register("utnet_32x32", tolerance=MODEL_TOLERANCE, kind="model")
def _(s):
    model = build(UTNetConfig(base_channels=4, attention_levels="1234"), seed=s)
    rng = np.random.default_rng(s)
    for name, p in model.params.items():
        if name.startswith("attn.") and ("rel_" in name):
            p.data = 0.3 * rng.standard_normal(p.shape)
    image = rng.random((1, 1, 32, 32))
    label = rng.integers(0, 4, size=(1, 32, 32))
    worst, where = _check_inputs(
        lambda x: combined_loss(model.forward(x, training=True), label), {"x": image}, s, coords=24, eps=MODEL_EPS
    )
    picks = ["stem.conv", "attn.enc2.q", "attn.enc1.rel_w", "attn.dec1.rel_h", "head.conv"]
    for name in picks:
        p = model.params[name]
        idx = sorted(rng.choice(p.size, size=min(6, p.size), replace=False).tolist())
        probe = Tensor(p.data.copy())
        err, i = T.grad_check_worst(lambda t, name=name: _model_loss(model, name, t, image, label), probe, eps=MODEL_EPS, coords=idx)
        if err >= worst:
            worst, where = err, _where(name, i, p.shape)
    return worst, where


def _model_loss(model, name, t, image, label):
    p = model.params[name]
    saved = p
    model.store.params[name] = t
    _swap_model(model, saved, t)
    try:
        return combined_loss(model.forward(Tensor(image), training=True), label)
    finally:
        _swap_model(model, t, saved)
        model.store.params[name] = saved


def _swap_model(model, old: Tensor, new: Tensor) -> None:
    _swap(model, old, new)
    for stage in model.encoder:
        for block in stage:
            _swap(block, old, new)
    for block in model.decoder.values():
        _swap(block, old, new)


# --------------------------------------------------------------------------
# negative control


def _broken_relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        return (g * mask * 1.5,)  # deliberately wrong

    return T._make("broken_relu", np.where(mask, x.data, 0.0), (x,), bw)


NEGATIVE_CONTROL = Check(
    "negative_control_broken_relu",
    lambda s: _check_inputs(_broken_relu, {"x": _nudge_ties(_r(s, 4, 5))}, s),
)


def run_all(
    names: list[str] | None = None,
    seeds: tuple[int, ...] = (0,),
    include_negative_control: bool = False,
) -> list[CheckResult]:
    checks = [REGISTRY[n] for n in names] if names else list(REGISTRY.values())
    if include_negative_control:
        checks.append(NEGATIVE_CONTROL)
    results = []
    for c in checks:
        worst, where = 0.0, ""
        for s in seeds:
            err, loc = c.run(s)
            if err >= worst:
                worst, where = err, f"seed {s} {loc}"
        results.append(CheckResult(c.name, worst, c.tolerance, where))
    return results


def format_results(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'op':<{width}}  {'max rel err':>12}  {'tol':>7}  status  worst coordinate"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.error:12.3e}  {r.tolerance:7.0e}  {'PASS' if r.passed else 'FAIL':<6}  {r.coordinate}")
    return "\n".join(lines)


def require_all_pass(results: list[CheckResult]) -> None:
    failed = [r for r in results if not r.passed]
    if failed:
        names = ", ".join(f"{r.name} ({r.coordinate}, err {r.error:.2e})" for r in failed)
        raise VerificationError(f"gradient check failed: {names}")
