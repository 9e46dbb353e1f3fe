"""Central finite-difference verification of recorded gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import NumericalError, Tensor, no_grad

STEP = 1e-5


@dataclass
class LeafReport:
    name: str
    max_rel_err: float
    max_abs_err: float
    checked: int


@dataclass
class GradCheckReport:
    tol: float
    leaves: list[LeafReport] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((leaf.max_rel_err for leaf in self.leaves), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    @property
    def worst(self) -> LeafReport | None:
        return max(self.leaves, key=lambda leaf: leaf.max_rel_err, default=None)

    def __str__(self) -> str:
        lines = [f"{'PASS' if self.passed else 'FAIL'} (tol {self.tol:g})"]
        for leaf in self.leaves:
            lines.append(f"  {leaf.name}: rel {leaf.max_rel_err:.3e} abs {leaf.max_abs_err:.3e} ({leaf.checked} entries)")
        return "\n".join(lines)


def _evaluate(f: Callable[[], Tensor]) -> float:
    with no_grad():
        return float(np.sum(f().data))


def grad_check(
    f: Callable[[], Tensor],
    leaves: Sequence[Tensor],
    tol: float = 1e-4,
    names: Sequence[str] | None = None,
    step: float = STEP,
    floor: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare backprop gradients of the scalar ``f()`` with central differences.

    Per entry the error is ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``;
    ``floor`` keeps entries whose true gradient is ~0 from dividing noise by noise.
    When ``max_entries`` is set, a random subset of each leaf is probed.
    """
    names = list(names) if names is not None else [leaf.name or f"leaf{i}" for i, leaf in enumerate(leaves)]
    for name, leaf in zip(names, leaves):
        if leaf.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 leaves; {name} is {leaf.dtype}")
        if not leaf.requires_grad:
            raise ValueError(f"leaf {name} does not require grad")
        leaf.zero_grad()
        # perturbations write through a flat view, so the buffer must own contiguous memory
        leaf.data = np.array(leaf.data, dtype=np.float64, order="C")

    out = f()
    if out.size != 1:
        raise ValueError("grad_check needs a scalar function")
    if not np.isfinite(out.data).all():
        raise NumericalError("function value is not finite")
    out.backward()

    rng = rng or np.random.default_rng(0)
    report = GradCheckReport(tol=tol)
    for name, leaf in zip(names, leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        if not np.isfinite(analytic).all():
            raise NumericalError(f"non-finite analytic gradient for {name}")
        flat = leaf.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        worst_rel = worst_abs = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            plus = _evaluate(f)
            flat[i] = orig - step
            minus = _evaluate(f)
            flat[i] = orig
            if not (np.isfinite(plus) and np.isfinite(minus)):
                raise NumericalError(f"non-finite function value while perturbing {name}[{i}]")
            numeric = (plus - minus) / (2 * step)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric)
            worst_abs = max(worst_abs, err)
            worst_rel = max(worst_rel, err / max(abs(a), abs(numeric), floor))
        report.leaves.append(LeafReport(name, worst_rel, worst_abs, len(idx)))
    return report
