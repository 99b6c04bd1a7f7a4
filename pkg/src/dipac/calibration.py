"""Fit Young's modulus and friction to demonstrations.

Gradient descent in log space on the summed one-step prediction Chamfer loss.
The loss is divided by its value at the starting point, so the learning rate
is independent of the scene's length scale.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .autodiff import GradientError, PredictionChamfer, grad_rollout
from .chamfer import chamfer
from .core import DipacError, SimulationError, ValidationError
from .mpm import engine
from .planner import thread_count
from .tasks import Demonstration

log = logging.getLogger(__name__)


@dataclass
class CalibrationResult:
    params: object
    loss_history: list
    iterations: int
    param_history: list = field(default_factory=list, repr=False)
    diverged: bool = False

    @property
    def final_loss(self):
        return min(self.loss_history)


class CalibrationDiverged(DipacError):
    def __init__(self, result):
        self.result = result
        super().__init__(f"calibration diverged after {result.iterations} iterations")


class TransitionError(DipacError):
    def __init__(self, demo, t, cause):
        self.demo = demo
        self.t = t
        super().__init__(f"demo {demo}, transition {t}: {cause}")


def _transitions(demos):
    out = []
    for d, demo in enumerate(demos):
        if not isinstance(demo, Demonstration):
            raise ValidationError("calibration needs Demonstration objects")
        for t in range(demo.transitions):
            out.append((d, t, demo.states[t], demo.actions[t], demo.effectors[t],
                        demo.states[t + 1]))
    if not out:
        raise ValidationError("no transitions to fit")
    return out


def prediction_loss(demos, params):
    """Sum over all transitions of chamfer(step(x_t, u_t), x_{t+1})."""
    total = 0.0
    for d, t, s, a, e, nxt in _transitions(demos):
        try:
            pred, _, _ = engine.step(s, a, e, params, record=False, step_index=t)
        except SimulationError as ex:
            raise TransitionError(d, t, ex) from ex
        total += chamfer(pred, nxt)
    return total


def _value_and_grad(items, params, threads):
    def one(item):
        d, t, s, a, e, nxt = item
        try:
            rep = grad_rollout(s, [a], params, PredictionChamfer([nxt]), e)
        except (SimulationError, GradientError) as ex:
            raise TransitionError(d, t, ex) from ex
        return rep.loss, rep.d_params

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            res = list(pool.map(one, items))
    else:
        res = [one(it) for it in items]
    loss = 0.0
    grad = np.zeros(2)
    for v, g in res:  # fixed order: deterministic for any thread count
        loss += v
        grad += g
    return loss, grad


def calibrate(demos, params0, lr=0.05, iters=100, threads=None):
    """Log-space gradient descent on (log E, log mu).

    Returns the best parameters seen and the loss at every iterate (the
    starting point included).  A non-finite loss stops the run and raises
    CalibrationDiverged carrying the partial result.
    """
    if lr < 0:
        raise ValidationError("learning rate must be >= 0")
    if iters < 1:
        raise ValidationError("need at least one iteration")
    items = _transitions(demos)
    workers = min(thread_count(threads), len(items))
    theta = np.log([params0.E, params0.mu])
    params = params0
    history = []
    p_hist = []
    best = (math.inf, params0)
    scale = None
    for it in range(iters + 1):
        try:
            loss, grad = _value_and_grad(items, params, workers)
        except TransitionError as ex:
            log.warning("calibration stopped: %s", ex)
            loss, grad = math.nan, None
        if not math.isfinite(loss):
            res = CalibrationResult(best[1], history or [math.nan], it, p_hist, True)
            raise CalibrationDiverged(res)
        history.append(loss)
        p_hist.append((params.E, params.mu))
        if loss < best[0]:
            best = (loss, params)
        if it == iters:
            break
        if scale is None:
            scale = loss if loss > 0 else 1.0
        step = lr * grad / scale
        if np.any(step != 0.0):
            theta = theta - step
            try:
                params = params0.with_(E=float(math.exp(theta[0])),
                                       mu=float(math.exp(theta[1])))
            except (OverflowError, ValidationError):
                raise CalibrationDiverged(
                    CalibrationResult(best[1], history, it + 1, p_hist, True)) from None
    return CalibrationResult(best[1], history, iters, p_hist)
