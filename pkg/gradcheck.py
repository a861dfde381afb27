# gradcheck.py
"""Central-difference gradient checking for the autodiff substrate."""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from errors import DomainError
from layers import GRULayer, LSTMLayer
from tensor import (
    Parameter,
    RngStream,
    Tensor,
    concat,
    conv2d,
    conv3d,
    default_dtype,
    dropout,
    max_pool2d,
    no_grad,
    stack,
)

logger = logging.getLogger(__name__)

ParamsLike = Union[Sequence[Parameter], Sequence[Tuple[str, Parameter]], Dict[str, Parameter]]


@dataclass
class ParamCheck:
    name: str
    checked: int
    max_rel_error: float
    max_abs_error: float
    passed: bool


@dataclass
class GradCheckReport:
    tolerance: float
    entries: List[ParamCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    def extend(self, other: "GradCheckReport") -> "GradCheckReport":
        self.entries.extend(other.entries)
        return self

    def failures(self) -> List[ParamCheck]:
        return [e for e in self.entries if not e.passed]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([e.__dict__ for e in self.entries], columns=["name", "checked", "max_rel_error", "max_abs_error", "passed"])


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """|a − n| / max(1e-8, |a| + |n|), element-wise."""
    analytic, numeric = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))


def _named(params: ParamsLike) -> List[Tuple[str, Parameter]]:
    if isinstance(params, dict):
        return list(params.items())
    out = []
    for i, item in enumerate(params):
        if isinstance(item, tuple):
            out.append(item)
        else:
            out.append((item.name or f"param{i}", item))
    return out


def grad_check(
    f: Callable[[], Tensor],
    params: ParamsLike,
    step: float = 1e-5,
    tolerance: float = 1e-3,
    atol: float = 1e-9,
    max_elements: Optional[int] = None,
    rng: Optional[RngStream] = None,
) -> GradCheckReport:
    """
    Compare backward() gradients of the scalar f() against central differences.

    f is re-evaluated at the perturbed parameter values, so it must be a pure
    function of them (rebuild any RngStream it uses on every call). With
    `max_elements` set, that many entries per parameter are sampled.
    An element passes when its relative error is within `tolerance` or its
    absolute error within `atol`.
    """
    named = _named(params)
    for name, p in named:
        if p.dtype != np.float64:
            raise DomainError(f"grad_check needs 64-bit parameters, '{name}' is {p.dtype}")

    for _, p in named:
        p.data = np.ascontiguousarray(p.data)
        p.zero_grad()
    f().backward()
    analytic = {id(p): p.gradient.copy() for _, p in named}

    pick = rng or RngStream(0, 0)
    report = GradCheckReport(tolerance=tolerance)
    for name, p in named:
        size = p.data.size
        if max_elements is not None and size > max_elements:
            idx = np.sort(pick.generator.choice(size, size=max_elements, replace=False))
        else:
            idx = np.arange(size)
        flat = p.data.reshape(-1)
        numeric = np.empty(len(idx))
        with no_grad():
            for k, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + step
                plus = float(f().data)
                flat[i] = orig - step
                minus = float(f().data)
                flat[i] = orig
                numeric[k] = (plus - minus) / (2 * step)
        a = analytic[id(p)].reshape(-1)[idx]
        rel = relative_error(a, numeric)
        err = np.abs(a - numeric)
        ok = bool(np.all((rel <= tolerance) | (err <= atol)))
        report.entries.append(
            ParamCheck(name, len(idx), float(rel.max(initial=0.0)), float(err.max(initial=0.0)), ok)
        )
        if not ok:
            logger.warning("[gradcheck] %s failed: max rel error %.3g", name, rel.max())
    return report


def check_callable(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    extra: Sequence[Tuple[str, Parameter]] = (),
    label: str = "fn",
    seed: int = 0,
    step: float = 1e-5,
    tolerance: float = 1e-4,
) -> GradCheckReport:
    """Grad-check a tensor function by projecting its output on fixed random weights."""
    gen = np.random.default_rng(seed)
    ps = [Parameter(np.asarray(a, dtype=np.float64), f"{label}.x{i}") for i, a in enumerate(inputs)]
    with no_grad():
        out_shape = fn(*ps).shape
    proj = Tensor(gen.standard_normal(out_shape))
    named = [(p.name, p) for p in ps] + [(f"{label}.{n}", p) for n, p in extra]
    return grad_check(lambda: (fn(*ps) * proj).sum(), named, step=step, tolerance=tolerance)


# -----------------------------
# Primitive catalogue
# -----------------------------
def _dims(gen, lo=1, hi=4, n=2):
    return tuple(int(v) for v in gen.integers(lo, hi + 1, size=n))


def _case_add(gen):
    s = _dims(gen)
    return (lambda a, b: a + b), [gen.standard_normal(s), gen.standard_normal((1, s[1]))], []


def _case_mul(gen):
    s = _dims(gen)
    return (lambda a, b: a * b), [gen.standard_normal(s), gen.standard_normal(s)], []


def _case_div(gen):
    s = _dims(gen)
    return (lambda a, b: a / b), [gen.standard_normal(s), gen.uniform(0.5, 2.0, s)], []


def _case_matmul(gen):
    m, k, n = _dims(gen, n=3)
    return (lambda a, b: a @ b), [gen.standard_normal((m, k)), gen.standard_normal((k, n))], []


def _unary(method):
    def case(gen):
        return (lambda a: getattr(a, method)()), [gen.standard_normal(_dims(gen, n=3))], []

    return case


def _case_log(gen):
    return (lambda a: a.log()), [gen.uniform(0.5, 2.0, _dims(gen))], []


def _case_mean(gen):
    s = _dims(gen, n=3)
    axis = int(gen.integers(0, 3))
    return (lambda a: a.mean(axis=axis)), [gen.standard_normal(s)], []


def _case_sum(gen):
    return (lambda a: a.sum(axis=(0, 2), keepdims=True)), [gen.standard_normal(_dims(gen, n=3))], []


def _case_concat(gen):
    r, c1, c2 = _dims(gen, n=3)
    return (lambda a, b: concat([a, b], axis=1)), [gen.standard_normal((r, c1)), gen.standard_normal((r, c2))], []


def _case_stack(gen):
    s = _dims(gen)
    return (lambda a, b: stack([a, b], axis=1)), [gen.standard_normal(s), gen.standard_normal(s)], []


def _case_slice(gen):
    s = _dims(gen, lo=2, hi=5)
    return (lambda a: a[1:, : s[1] - 1]), [gen.standard_normal(s)], []


def _case_flip(gen):
    return (lambda a: a.flip(1)), [gen.standard_normal(_dims(gen, n=3))], []


def _case_transpose(gen):
    s = _dims(gen, n=3)
    return (lambda a: a.transpose(2, 0, 1).reshape(s[2], -1)), [gen.standard_normal(s)], []


def _case_conv2d(gen):
    n, c, o = _dims(gen, hi=3, n=3)
    k = int(gen.choice([1, 3]))
    stride, pad = int(gen.integers(1, 3)), int(gen.integers(0, 2))
    h = int(gen.integers(k + 1, 7))
    inputs = [gen.standard_normal((n, c, h, h)), gen.standard_normal((o, c, k, k)), gen.standard_normal(o)]
    return (lambda x, w, b: conv2d(x, w, b, stride=stride, padding=pad)), inputs, []


def _case_conv3d(gen):
    c, o = _dims(gen, hi=2)
    t, h = int(gen.integers(2, 5)), int(gen.integers(3, 6))
    inputs = [gen.standard_normal((1, c, t, h, h)), gen.standard_normal((o, c, 3, 3, 3)), gen.standard_normal(o)]
    return (lambda x, w, b: conv3d(x, w, b, stride=(1, 2, 2), padding=(1, 1, 1))), inputs, []


def _case_max_pool(gen):
    n, c = _dims(gen)
    h = int(gen.integers(2, 7))
    return (lambda x: max_pool2d(x, 2, 2)), [gen.standard_normal((n, c, h, h))], []


def _case_dropout(gen):
    s = _dims(gen, n=3)
    seed = int(gen.integers(0, 2**31))
    return (lambda x: dropout(x, 0.7, RngStream(seed, 9), training=True)), [gen.standard_normal(s)], []


def _case_gru(gen):
    b, t, d = _dims(gen, hi=3, n=3)
    layer = GRULayer(d, int(gen.integers(1, 4)), RngStream(int(gen.integers(0, 2**31)), 1))
    return layer, [gen.standard_normal((b, t, d))], list(layer.named_parameters())


def _case_lstm(gen):
    b, t, d = _dims(gen, hi=3, n=3)
    layer = LSTMLayer(d, int(gen.integers(1, 4)), RngStream(int(gen.integers(0, 2**31)), 2))
    return layer, [gen.standard_normal((b, t, d))], list(layer.named_parameters())


PRIMITIVE_CASES: Dict[str, Callable] = {
    "add": _case_add,
    "mul": _case_mul,
    "div": _case_div,
    "matmul": _case_matmul,
    "relu": _unary("relu"),
    "sigmoid": _unary("sigmoid"),
    "tanh": _unary("tanh"),
    "softplus": _unary("softplus"),
    "exp": _unary("exp"),
    "log": _case_log,
    "softmax": _unary("softmax"),
    "log_softmax": _unary("log_softmax"),
    "mean": _case_mean,
    "sum": _case_sum,
    "concat": _case_concat,
    "stack": _case_stack,
    "slice": _case_slice,
    "flip": _case_flip,
    "transpose": _case_transpose,
    "conv2d": _case_conv2d,
    "conv3d": _case_conv3d,
    "max_pool2d": _case_max_pool,
    "dropout": _case_dropout,
    "gru": _case_gru,
    "lstm": _case_lstm,
}


def check_primitive(name: str, instances: int = 10, seed: int = 0, tolerance: float = 1e-4) -> GradCheckReport:
    gen = np.random.default_rng([seed, sum(map(ord, name))])
    report = GradCheckReport(tolerance=tolerance)
    with default_dtype(np.float64):
        for i in range(instances):
            fn, inputs, extra = PRIMITIVE_CASES[name](gen)
            report.extend(check_callable(fn, inputs, extra, label=f"{name}[{i}]", seed=seed + i, tolerance=tolerance))
    return report


def primitive_suite(instances: int = 10, seed: int = 0, tolerance: float = 1e-4) -> GradCheckReport:
    report = GradCheckReport(tolerance=tolerance)
    for name in PRIMITIVE_CASES:
        sub = check_primitive(name, instances=instances, seed=seed, tolerance=tolerance)
        logger.info("[gradcheck] %-12s max rel error %.2e %s", name, sub.max_rel_error, "ok" if sub.passed else "FAIL")
        report.extend(sub)
    return report
