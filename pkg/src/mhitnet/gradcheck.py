"""Central finite differences as an independent check on backward rules."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .tensor import Tensor, no_grad, record_branches


def _scalar(value) -> float:
    if isinstance(value, Tensor):
        return float(np.asarray(value.data, dtype=np.float64).sum())
    return float(value)


def _probe(f, x: Tensor, eps: float, positions, track: bool):
    """Central differences at ``positions``; also flags probes whose two
    evaluations took different branches of a piecewise op."""
    flat = x.data.reshape(-1)
    out = np.zeros(flat.size, dtype=np.float64)
    kinked = np.zeros(flat.size, dtype=bool)
    for i in positions:
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(flat[i])
        with record_branches() as up:
            fp = _scalar(f(x))
        flat[i] = orig - eps
        lo = float(flat[i])
        with record_branches() as down:
            fm = _scalar(f(x))
        flat[i] = orig
        out[i] = (fp - fm) / (hi - lo)
        if track:
            kinked[i] = len(up.records) != len(down.records) or any(
                not np.array_equal(a, b) for a, b in zip(up.records, down.records))
    return out, kinked


def finite_diff_grad(f: Callable, x: Tensor, eps: float = 1e-3, indices: Iterable | None = None) -> Tensor:
    """Central-difference gradient of scalar ``f`` with respect to ``x``.

    ``x.data`` is perturbed in place and restored afterwards. The quotient is
    formed in float64 using the perturbations actually stored, so float32
    rounding of ``x +/- eps`` does not bias the estimate. When ``indices`` is
    given only those flat positions are evaluated; the rest stay zero.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    positions = range(x.size) if indices is None else indices
    out, _ = _probe(f, x, eps, positions, track=False)
    return Tensor(out.reshape(x.shape), dtype=np.float64)


def relative_error(analytic, numeric) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)``.

    Falls back to the absolute difference when both norms are below 1e-12
    (a gradient that is legitimately zero).
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    diff = np.linalg.norm(a - n)
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom < 1e-12:
        return float(diff)
    return float(diff / denom)


@dataclass
class ProbeResult:
    analytic: np.ndarray  # probed coordinates only
    numeric: np.ndarray
    skipped: int  # probes that straddled a kink

    @property
    def error(self) -> float:
        return relative_error(self.analytic, self.numeric)


def probe_gradients(loss_fn: Callable[[], Tensor], tensors: dict, eps: float = 1e-3,
                    max_entries: int | None = None, seed: int = 0,
                    skip_kinks: bool = True) -> dict:
    """Compare backward() against finite differences for named leaf tensors.

    ``loss_fn`` takes no arguments and rebuilds the graph from the current
    values of ``tensors``. ``max_entries`` caps how many coordinates of each
    tensor are probed (chosen at random under ``seed``). With ``skip_kinks``
    a probe whose +eps and -eps evaluations cross a ReLU, clip or max-pool
    boundary is left out, since no difference quotient is valid there.
    Returns ``{name: ProbeResult}``.
    """
    for t in tensors.values():
        t.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for name, t in tensors.items()}

    rng = np.random.default_rng(seed)
    results = {}
    for name, t in tensors.items():
        idx = np.arange(t.size)
        if max_entries is not None and t.size > max_entries:
            idx = np.sort(rng.choice(t.size, size=max_entries, replace=False))
        with no_grad():
            numeric, kinked = _probe(lambda _x: loss_fn(), t, eps, idx, skip_kinks)
        keep = idx[~kinked[idx]]
        results[name] = ProbeResult(analytic[name].reshape(-1)[keep].astype(np.float64),
                                    numeric[keep], int(idx.size - keep.size))
    return results


def check_gradients(loss_fn: Callable[[], Tensor], tensors: dict, eps: float = 1e-3,
                    max_entries: int | None = None, seed: int = 0, skip_kinks: bool = True) -> dict:
    """:func:`probe_gradients` reduced to ``{name: relative_error}``."""
    res = probe_gradients(loss_fn, tensors, eps, max_entries, seed, skip_kinks)
    return {name: r.error for name, r in res.items()}
