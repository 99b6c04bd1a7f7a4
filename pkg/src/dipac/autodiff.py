"""Reverse-mode gradients of rollout losses w.r.t. actions and {E, mu}.

The adjoint replays every substep from its checkpoint (see
:class:`dipac.mpm.engine.SubstepTrace`), so memory grows linearly with the
number of substeps.  Parameter gradients are reported in log space,
``(E dL/dE, mu dL/dmu)``.
"""
from dataclasses import dataclass, field

import numpy as np

from .chamfer import chamfer, chamfer_grad, nearest
from .core import DipacError, Effector, ValidationError
from .kinematics import path_jacobian, start_midpoint
from .mpm import engine
from .mpm import kernels as K


class GradientError(DipacError):
    """Non-finite adjoint."""

    def __init__(self, step, substep):
        self.step = step
        self.substep = substep
        super().__init__(f"non-finite gradient at action {step}, substep {substep}")


@dataclass
class GradientReport:
    d_actions: list
    d_params: np.ndarray  # (d/dlogE, d/dlogmu)
    loss: float
    states: list = field(default=None, repr=False)
    effectors: list = field(default=None, repr=False)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------
#
# A loss maps a rollout to a scalar.  ``evaluate`` returns the value and, when
# asked, the adjoint seeds: d/dx_t for every state t (None when zero) and
# d/du_t for every action (from terms that read actions directly).


class Loss:
    def evaluate(self, states, effectors, actions, params, grad=False):
        raise NotImplementedError

    def __mul__(self, w):
        return Weighted([(float(w), self)])

    __rmul__ = __mul__

    def __add__(self, other):
        a = self.terms if isinstance(self, Weighted) else [(1.0, self)]
        b = other.terms if isinstance(other, Weighted) else [(1.0, other)]
        return Weighted(a + b)


class TerminalChamfer(Loss):
    def __init__(self, goal):
        self.goal = goal

    def evaluate(self, states, effectors, actions, params, grad=False):
        T = len(actions)
        if not grad:
            return chamfer(states[-1], self.goal), None, None
        val, g = chamfer_grad(states[-1], self.goal)
        xb = [None] * (T + 1)
        xb[T] = g
        return val, xb, [None] * T


class PredictionChamfer(Loss):
    """Sum over t of chamfer(x_{t+1}, targets[t])."""

    def __init__(self, targets):
        self.targets = list(targets)

    def evaluate(self, states, effectors, actions, params, grad=False):
        T = len(actions)
        if len(self.targets) != T:
            raise ValidationError("need one target per action")
        total = 0.0
        xb = [None] * (T + 1)
        for t in range(T):
            if grad:
                v, g = chamfer_grad(states[t + 1], self.targets[t])
                xb[t + 1] = g
            else:
                v = chamfer(states[t + 1], self.targets[t])
            total += v
        return total, (xb if grad else None), ([None] * T if grad else None)


def gripper_midpoint(action, effector, params):
    """Moving-box midpoint at the start pose of ``action``."""
    return start_midpoint(action, effector, params)[0]


class TrajectoryCost(Loss):
    """Sum of step costs: Chamfer change per action plus weighted contact."""

    def __init__(self, goal, contact_weight=1.0):
        self.goal = goal
        self.contact_weight = float(contact_weight)

    def evaluate(self, states, effectors, actions, params, grad=False):
        T = len(actions)
        xb = [None] * (T + 1)
        ab = [None] * T
        c = []
        for t in range(T + 1):
            if grad:
                v, g = chamfer_grad(states[t], self.goal)
            else:
                v, g = chamfer(states[t], self.goal), None
            c.append((v, g))
        total = 0.0
        for t in range(T):
            total += c[t + 1][0] - c[t][0]
            if grad:
                xb[t + 1] = c[t + 1][1] if xb[t + 1] is None else xb[t + 1] + c[t + 1][1]
                xb[t] = -c[t][1] if xb[t] is None else xb[t] - c[t][1]
            if self.contact_weight == 0.0:
                continue
            m, Jm = start_midpoint(actions[t], effectors[t], params)
            if m is None:
                continue
            x = np.ascontiguousarray(states[t].x)
            d2, idx = nearest(m.reshape(1, 3), x)
            d = float(np.sqrt(d2[0]))
            if d <= params.dx:
                continue
            total += self.contact_weight * d
            if grad:
                j = int(idx[0])
                u = self.contact_weight * (m - x[j]) / d
                ab[t] = u @ Jm
                gx = np.zeros_like(x)
                gx[j] = -u
                xb[t] = gx if xb[t] is None else xb[t] + gx
        return total, (xb if grad else None), (ab if grad else None)


class Weighted(Loss):
    def __init__(self, terms):
        self.terms = list(terms)

    def evaluate(self, states, effectors, actions, params, grad=False):
        T = len(actions)
        total = 0.0
        xb = [None] * (T + 1)
        ab = [None] * T
        for w, term in self.terms:
            v, txb, tab = term.evaluate(states, effectors, actions, params, grad)
            total += w * v
            if grad:
                for t in range(T + 1):
                    if txb[t] is not None:
                        xb[t] = w * txb[t] if xb[t] is None else xb[t] + w * txb[t]
                for t in range(T):
                    if tab[t] is not None:
                        ab[t] = w * tab[t] if ab[t] is None else ab[t] + w * tab[t]
        return total, (xb if grad else None), (ab if grad else None)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def loss_value(state, actions, params, loss, effector=None):
    states, effectors, _ = engine.rollout(state, actions, params, effector, record=False)
    return loss.evaluate(states, effectors, actions, params, grad=False)[0]


def _box_grad(bars, action, effector, params):
    """Chain per-substep box adjoints through the action kinematics."""
    if bars[0].shape[1] == 0:
        return np.zeros(action.values.size)
    J = path_jacobian(action, effector, params)
    bc, bR, bv, bw, bp = bars
    g = np.einsum("snk,snkj->j", bc, J["centers"])
    g += np.einsum("snkl,snklj->j", bR, J["rotations"])
    g += np.einsum("snk,snkj->j", bv, J["vel"])
    g += np.einsum("snk,snkj->j", bw, J["omega"])
    g += np.einsum("snk,snkj->j", bp, J["pivot"])
    return g


def backward(states, effectors, traces, actions, params, xb_seed, ab_seed):
    """Adjoint sweep over a recorded rollout.  Returns (d_actions, d_params)."""
    T = len(actions)
    n = states[0].n
    prm, iprm = engine.pack_params(params)
    g = engine.workspace(params)
    gv_bar, gmv_bar, gm_bar = g.adjoint_buffers
    xbar = np.zeros((n, 3)) if xb_seed[T] is None else np.array(xb_seed[T], dtype=np.float64)
    vbar = np.zeros((n, 3))
    Cbar = np.zeros((n, 3, 3))
    Fbar = np.zeros((n, 3, 3))
    pbar = np.zeros(3)
    d_actions = [None] * T
    for t in range(T - 1, -1, -1):
        tr = traces[t]
        S = tr.path.substeps
        nb = tr.path.half.shape[0]
        bars = (np.zeros((S, nb, 3)), np.zeros((S, nb, 3, 3)), np.zeros((S, nb, 3)),
                np.zeros((S, nb, 3)), np.zeros((S, nb, 3)))
        st = tr.state
        bad = K.reverse(tr.x, tr.v, tr.C, tr.F, st.mass, st.vol, st.material, prm, iprm,
                        *engine._box_args(tr.path), g.mass, g.momentum, g.velocity, g.mark,
                        g.active, gv_bar, gmv_bar, gm_bar, xbar, vbar, Cbar, Fbar, pbar,
                        *bars)
        if bad >= 0:
            raise GradientError(t, bad)
        da = _box_grad(bars, actions[t], effectors[t], params)
        if ab_seed[t] is not None:
            da = da + ab_seed[t]
        if not np.isfinite(da).all():
            raise GradientError(t, -1)
        d_actions[t] = da
        if xb_seed[t] is not None:
            xbar += xb_seed[t]
    mu_l, lam_l = params.lame
    d_params = np.array([pbar[0] * mu_l + pbar[1] * lam_l, pbar[2] * params.mu])
    if not np.isfinite(d_params).all():
        raise GradientError(0, -1)
    return d_actions, d_params


def grad_rollout(state, actions, params, loss, effector=None):
    """Loss value with exact reverse-mode gradients (see GradientReport)."""
    actions = list(actions)
    states, effectors, traces = engine.rollout(state, actions, params, effector, record=True)
    val, xb, ab = loss.evaluate(states, effectors, actions, params, grad=True)
    d_actions, d_params = backward(states, effectors, traces, actions, params, xb, ab)
    return GradientReport(d_actions, d_params, val, states, effectors)


def finite_diff(state, actions, params, loss, h=1e-5, effector=None, params_h=None,
                with_params=True):
    """Central differences for every action coordinate and for (log E, log mu)."""
    actions = list(actions)
    d_actions = []
    for t, a in enumerate(actions):
        g = np.zeros(a.values.size)
        for k in range(a.values.size):
            vals = [None, None]
            for i, sgn in enumerate((1.0, -1.0)):
                u = np.array(a.values)
                u[k] += sgn * h
                trial = actions[:t] + [a.with_values(u)] + actions[t + 1:]
                vals[i] = loss_value(state, trial, params, loss, effector)
            g[k] = (vals[0] - vals[1]) / (2.0 * h)
        d_actions.append(g)
    d_params = np.zeros(2)
    if with_params:
        hp = h if params_h is None else params_h
        for i, name in enumerate(("E", "mu")):
            base = getattr(params, name)
            if base == 0.0:
                continue
            vp = loss_value(state, actions, params.with_(**{name: base * np.exp(hp)}), loss,
                            effector)
            vm = loss_value(state, actions, params.with_(**{name: base * np.exp(-hp)}), loss,
                            effector)
            d_params[i] = (vp - vm) / (2.0 * hp)
    base = loss_value(state, actions, params, loss, effector)
    return GradientReport(d_actions, d_params, base)


@dataclass
class GradCheck:
    rows: list  # (name, adjoint, finite difference, abs err, rel err, ok)
    passed: bool
    max_rel: float
    max_abs: float


def gradient_check(state, actions, params, loss, effector=None, h=1e-5, rtol=1e-3, atol=1e-7,
                   with_params=True):
    """Compare adjoint gradients with central differences coordinate by coordinate.

    A coordinate passes when its relative error is <= rtol or its absolute
    error is <= atol.  ``max_rel`` is taken over the coordinates that fail the
    absolute test (0 when all pass it).
    """
    rep = grad_rollout(state, actions, params, loss, effector)
    fd = finite_diff(state, actions, params, loss, h=h, effector=effector,
                     with_params=with_params)
    rows = []
    pairs = [(f"u[{t}][{k}]", rep.d_actions[t][k], fd.d_actions[t][k])
             for t in range(len(actions)) for k in range(actions[t].values.size)]
    if with_params:
        pairs += [("dlogE", rep.d_params[0], fd.d_params[0]),
                  ("dlogmu", rep.d_params[1], fd.d_params[1])]
    max_rel = 0.0
    max_abs = 0.0
    for name, a, f in pairs:
        err = abs(a - f)
        rel = err / abs(f) if f != 0 else (0.0 if err == 0 else float("inf"))
        ok = rel <= rtol or err <= atol
        max_abs = max(max_abs, err)
        if err > atol:
            max_rel = max(max_rel, rel)
        rows.append((name, float(a), float(f), float(err), float(rel), bool(ok)))
    return GradCheck(rows, all(r[5] for r in rows), max_rel, max_abs)
