"""Central-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad, record_kinks


class NonDeterministicError(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    per_input: list[float] = field(default_factory=list)
    n_checked: int = 0
    max_abs_error: float = 0.0
    atol: float = 0.0
    # stencils whose relu/clamp pattern differs from the base point; there the
    # central difference straddles a kink and is not a valid reference
    kinks_crossed: int = 0

    @property
    def passed(self) -> bool:
        # atol covers gradients that are exactly zero, where both sides are rounding noise
        return self.max_rel_error <= self.tol or self.max_abs_error <= self.atol

    def __bool__(self) -> bool:
        return self.passed


def relative_error(analytic: np.ndarray, numeric: np.ndarray, scale: float | None = None) -> float:
    """Largest entrywise gap, divided by the largest gradient magnitude.

    Scaling by the gradient's overall magnitude (rather than per entry) keeps
    near-zero entries, where central differences carry only rounding noise,
    from dominating the figure. ``scale`` overrides the magnitude, e.g. with
    one shared across several inputs.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    gap = float(np.max(np.abs(analytic - numeric), initial=0.0))
    if gap == 0.0:
        return 0.0
    if scale is None:
        scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)))
    return gap / max(scale, 1e-12)


def _scalar(f, inputs) -> float:
    out = f(*inputs)
    if out.data.size != 1:
        raise ValueError(f"grad_check: function must be scalar-valued, got shape {out.shape}")
    return float(out.data.reshape(()))


def _pattern(f, inputs) -> tuple[float, list[np.ndarray]]:
    with record_kinks() as masks:
        value = _scalar(f, inputs)
    return value, masks


def _same_side(a: list, base: list) -> bool:
    # entries sitting exactly on the kink at the base point are ignored: they come
    # from structurally zero rows (padding); a live one still shows as a gradient gap
    if len(a) != len(base):
        return False
    for (side, _), (side0, at0) in zip(a, base):
        if side.shape != side0.shape or np.any((side != side0) & ~at0):
            return False
    return True


def grad_check(
    f: Callable[..., Tensor],
    inputs: Tensor | Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    *,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    atol: float = 0.0,
) -> GradCheckReport:
    """Compare backprop gradients of scalar ``f(*inputs)`` against central differences.

    With ``max_coords`` set, only that many randomly chosen entries of each
    input are perturbed (useful for large parameter tensors).
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None

    out = f(*inputs)
    if out.data.size != 1:
        raise ValueError(f"grad_check: function must be scalar-valued, got shape {out.shape}")
    backward(out)
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]

    with no_grad():
        base0, base_masks = _pattern(f, inputs)
        base1 = _scalar(f, inputs)
    if base0 != base1 or base0 != float(out.data.reshape(())):
        raise NonDeterministicError("grad_check: function returned different values on repeated evaluation")

    rng = rng or np.random.default_rng(0)
    pairs = []
    n_checked = kinks = 0
    with no_grad():
        for t, ga in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            if max_coords is not None and flat.size > max_coords:
                coords = rng.choice(flat.size, size=max_coords, replace=False)
            else:
                coords = np.arange(flat.size)
            gn = np.empty(len(coords))
            for n, c in enumerate(coords):
                orig = flat[c]
                flat[c] = orig + h
                fp, mp = _pattern(f, inputs)
                flat[c] = orig - h
                fm, mm = _pattern(f, inputs)
                flat[c] = orig
                kinks += not (_same_side(mp, base_masks) and _same_side(mm, base_masks))
                gn[n] = (fp - fm) / (2.0 * h)
            pairs.append((ga.reshape(-1)[coords], gn))
            n_checked += len(coords)
    for t in inputs:
        t.grad = None
    scale = max((max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0)) for a, n in pairs), default=0.0)
    per_input = [relative_error(a, n, scale) for a, n in pairs]
    gap = max((float(np.max(np.abs(a - n), initial=0.0)) for a, n in pairs), default=0.0)
    return GradCheckReport(max(per_input, default=0.0), tol, per_input, n_checked, gap, atol, kinks)


def directional_grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    *,
    rng: np.random.Generator | None = None,
    atol: float = 0.0,
) -> GradCheckReport:
    """Check the full gradient at once along a random unit direction.

    Compares the analytic directional derivative g.d with
    (f(p + h d) - f(p - h d)) / 2h. Every parameter entry contributes.
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.grad = None
    out = f()
    backward(out)
    dirs = [rng.standard_normal(p.shape) for p in params]
    norm = np.sqrt(sum(float((d * d).sum()) for d in dirs))
    dirs = [d / norm for d in dirs]
    analytic = sum(float((p.grad * d).sum()) for p, d in zip(params, dirs) if p.grad is not None)
    with no_grad():
        _, base_masks = _pattern(f, ())
        for p, d in zip(params, dirs):
            p.data += h * d
        fp, mp = _pattern(f, ())
        for p, d in zip(params, dirs):
            p.data -= 2 * h * d
        fm, mm = _pattern(f, ())
        for p, d in zip(params, dirs):
            p.data += h * d
    kinks = int(not (_same_side(mp, base_masks) and _same_side(mm, base_masks)))
    numeric = (fp - fm) / (2 * h)
    for p in params:
        p.grad = None
    err = relative_error(np.array([analytic]), np.array([numeric]))
    return GradCheckReport(err, tol, [err], len(params), abs(analytic - numeric), atol, kinks)
