"""Central-finite-difference validation of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from capsight.errors import ConfigError, NumericsError
from capsight.nn.tensor import Parameter, Tensor, no_grad, watch_kinks

KINK_MARGIN = 1e-3


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Parameter],
    h: float = 1e-5,
) -> float:
    """Compare reverse-mode gradients of a scalar loss against central differences.

    Every element of every parameter is perturbed by ±h. Returns the maximum
    relative error max(|fd - ad|) / max(1, |fd|, |ad|) over all elements.
    ``loss_fn`` must be deterministic and is re-evaluated under ``no_grad``.
    """
    if not 1e-6 <= h <= 1e-4:
        raise ConfigError(f"grad_check: step h={h} outside [1e-6, 1e-4]")
    for p in params:
        if p.data.dtype != np.float64:
            raise ConfigError("grad_check requires 64-bit parameters")
        p.zero_grad()

    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise NumericsError("grad_check: loss is not finite")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    with no_grad():
        for p, ad in zip(params, analytic):
            flat = p.data.reshape(-1)
            ad_flat = ad.reshape(-1)
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + h
                f_plus = float(loss_fn().data)
                flat[i] = original - h
                f_minus = float(loss_fn().data)
                flat[i] = original
                if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                    raise NumericsError(
                        f"grad_check: non-finite loss while perturbing {p.name or 'parameter'}"
                    )
                fd = (f_plus - f_minus) / (2.0 * h)
                err = abs(fd - ad_flat[i]) / max(1.0, abs(fd), abs(ad_flat[i]))
                worst = max(worst, err)
    return worst


def build_safe_case(make_case: Callable[[np.random.Generator], tuple],
                    rng: np.random.Generator,
                    margin: float = KINK_MARGIN,
                    max_tries: int = 64) -> tuple:
    """Draw random cases until no rectifier input sits within ``margin`` of zero.

    ``make_case`` returns ``(loss_fn, params)``; the loss is evaluated once per
    draw to observe the pre-activations.
    """
    for _ in range(max_tries):
        loss_fn, params = make_case(rng)
        with no_grad(), watch_kinks() as watch:
            loss_fn()
        if watch.min_abs >= margin:
            return loss_fn, params
    raise NumericsError(
        f"could not sample a case with rectifier inputs clear of ±{margin} "
        f"after {max_tries} tries"
    )
