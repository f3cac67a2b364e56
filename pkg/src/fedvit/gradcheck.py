"""Sampled finite-difference verification of reverse-mode gradients.

For each parameter tensor a number of flat coordinates are sampled and the
analytic gradient there is compared against a central difference of the
loss. The comparison is relative with a small denominator floor::

    rel_err = |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)

Two float64 realities shape the harness:

* A piecewise-linear activation can put a kink inside the two-point
  stencil, where the central difference measures no derivative at all.
  Each coordinate is therefore probed at ``h`` and ``h/2``; coordinates
  whose two estimates disagree are discarded and redrawn from the same
  tensor (bounded budget, counted in the report).
* Central differences carry roundoff noise around
  ``ulp(|loss|) / (2h)``, so a relative threshold of 1e-6 is only
  meaningful where the gradient is large against that noise. The
  well-conditioned model check in :mod:`fedvit.cli` achieves this by
  checking the full proximal training objective against an anchor offset
  a fixed distance from the check point, which bounds every gradient
  coordinate away from zero; see ``cli_gradcheck``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from collections.abc import Callable, Sequence

import numpy as np

from .autodiff import ParamSet, Tensor, cross_entropy, finite_diff_coordinate

__all__ = [
    "CoordinateCheck",
    "GradCheckReport",
    "relative_error",
    "check_gradients",
    "check_model_gradients",
]

REL_FLOOR = 1e-8

# Conditioning for the whole-model check: the proximal pull toward an anchor
# offset CHECK_OFFSET from the check point bounds every gradient coordinate
# near MU_CHECK * CHECK_OFFSET = 10, far above central-difference noise, and
# the quadratic term itself is differenced exactly.
MU_CHECK = 2000.0
CHECK_OFFSET = 0.005


@dataclass(frozen=True)
class CoordinateCheck:
    name: str
    index: int
    analytic: float
    numeric: float
    rel_error: float


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    worst: CoordinateCheck
    coordinates_checked: int
    coordinates_resampled: int
    elapsed: float

    def passed(self, threshold: float = 1e-6) -> bool:
        return self.max_rel_error <= threshold


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), REL_FLOOR)


def _stencil_clean(fd_h: float, fd_half: float) -> bool:
    # A kink inside the stencil moves the estimate by O(1) when h halves;
    # smooth coordinates agree to truncation + roundoff.
    return abs(fd_h - fd_half) <= max(1e-6 * max(abs(fd_h), abs(fd_half)), 1e-6)


def check_gradients(
    loss_fn: Callable[[ParamSet], float],
    params: ParamSet,
    analytic: ParamSet,
    *,
    h: float = 1e-5,
    coords_per_tensor: int = 100,
    rng: np.random.Generator,
    probe_stencil: bool = True,
) -> GradCheckReport:
    """Compare analytic gradients against central differences of ``loss_fn``.

    Samples ``coords_per_tensor`` coordinates of every tensor (all of them
    for small tensors) and reports the worst relative disagreement. With
    ``probe_stencil`` each coordinate is validated at two step sizes and
    kink-contaminated draws are replaced (up to 4x extra draws per tensor).
    """
    params.require_congruent(analytic, "check_gradients")
    started = time.perf_counter()
    worst: CoordinateCheck | None = None
    checked = 0
    resampled = 0
    for name, tensor in params.items():
        size = tensor.size
        want = min(coords_per_tensor, size)
        pool = list(rng.permutation(size))
        budget = 4 * want
        flat_analytic = analytic[name].data
        done = 0
        while done < want and pool and budget:
            index = int(pool.pop())
            budget -= 1
            numeric = finite_diff_coordinate(loss_fn, params, name, index, h)
            if probe_stencil:
                half = finite_diff_coordinate(loss_fn, params, name, index, h / 2)
                if not _stencil_clean(numeric, half):
                    resampled += 1
                    continue
            a = float(flat_analytic[index])
            err = relative_error(a, numeric)
            checked += 1
            done += 1
            if worst is None or err > worst.rel_error:
                worst = CoordinateCheck(name, index, a, numeric, err)
    if worst is None:
        raise ValueError("no checkable coordinates")
    return GradCheckReport(
        max_rel_error=worst.rel_error,
        worst=worst,
        coordinates_checked=checked,
        coordinates_resampled=resampled,
        elapsed=time.perf_counter() - started,
    )


def check_model_gradients(
    model_config,
    params: ParamSet,
    images: Sequence[Tensor],
    labels: Sequence[int],
    *,
    h: float = 1e-5,
    coords_per_tensor: int = 100,
    rng: np.random.Generator,
    corrupt: str | None = None,
) -> GradCheckReport:
    """Whole-model gradient check of the proximal training objective.

    The objective is the batch cross-entropy plus a strong proximal pull
    toward an anchor a fixed offset away from the check point (see module
    docstring); the analytic side runs through the same code path training
    uses, the numeric side through central differences of the scalar
    objective. ``corrupt`` perturbs one analytic entry of the named tensor,
    the hook for exercising the failure path.
    """
    from .federation import StrategyConfig, StrategyKind, alignment_penalty, local_objective_grad
    from .model import forward_batch

    anchor = ParamSet.from_arrays({
        name: params[name].array
        - CHECK_OFFSET * np.where(rng.random(params[name].shape) < 0.5, -1.0, 1.0)
        for name in params.names()
    })
    strategy = StrategyConfig(kind=StrategyKind.FEDPROX, mu=MU_CHECK)
    _, grads = local_objective_grad(params, anchor, list(images), list(labels), strategy, model_config)
    if corrupt is not None:
        if corrupt not in grads.names():
            raise ValueError(f"no parameter named {corrupt!r} to corrupt")
        arrays = {name: g.array.copy() for name, g in grads.items()}
        arrays[corrupt].flat[0] += 1e-3
        grads = ParamSet.from_arrays(arrays)

    def objective(p: ParamSet) -> float:
        ce = cross_entropy(forward_batch(p, list(images), model_config), list(labels)).item()
        return ce + 0.5 * MU_CHECK * alignment_penalty(p, anchor, ("*",))

    return check_gradients(
        objective, params, grads,
        h=h, coords_per_tensor=coords_per_tensor, rng=rng,
    )
