"""The historical state layer: loss-weighted blending and error truncation.

A running "historical" summary vector l_t rides on top of the per-step
response states h_1..h_t. At each step the layer compares the
classification loss of the incoming response (eps_h) against the loss of
the current historical state (eps_l):

* response no better (eps_h >= eps_l): blend, l_t = a*h_t + (1-a)*l_{t-1},
  with the weight a derived from the loss ratio;
* response strictly better (eps_h < eps_l): the accumulated state is
  considered stale, so l_t is re-initialized from a truncation window of
  recent responses.

The layer is a value type: every update returns a fresh trace, so
independent sequence evaluations never share mutable state.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .cells import HeadParams, head_predict
from .numerics import EPS_LOSS_FLOOR, ShapeError, cross_entropy

ALPHA_POLICIES = ("literal", "clamped", "inverse_loss")
WINDOW_MODES = ("sliding", "literal")
INFERENCE_POLICIES = ("pseudo_label", "fixed_blend")

# Scores a candidate historical state against the episode's label.
LossFn = Callable[[np.ndarray], float]


class DegenerateWindowError(ValueError):
    """Literal truncation window is undefined for t <= tau."""


@dataclass(frozen=True)
class HistoricalConfig:
    tau: int = 3
    window_mode: str = "sliding"
    alpha_policy: str = "clamped"
    inference_policy: str = "pseudo_label"

    def __post_init__(self):
        if self.tau < 1:
            raise ValueError(f"tau must be >= 1, got {self.tau}")
        if self.window_mode not in WINDOW_MODES:
            raise ValueError(f"unknown window_mode {self.window_mode!r}")
        if self.alpha_policy not in ALPHA_POLICIES:
            raise ValueError(f"unknown alpha_policy {self.alpha_policy!r}")
        if self.inference_policy not in INFERENCE_POLICIES:
            raise ValueError(f"unknown inference_policy {self.inference_policy!r}")


@dataclass(frozen=True)
class StepRecord:
    """What happened at one update: branch taken and the frozen coefficients.

    The coefficients (alpha or window weights) are treated as constants by
    backpropagation, so recording them is enough to replay the step.
    """

    branch: str  # "init" | "blend" | "trunc"
    eps_h: float
    eps_l_prev: float
    eps_l_new: float
    alpha: Optional[float] = None
    weights: Optional[np.ndarray] = None


@dataclass
class HistoricalTrace:
    l: np.ndarray
    h_buffer: list  # responses h_1..h_t
    eps_l: float
    records: list = field(default_factory=list)  # one StepRecord per step
    l_history: list = field(default_factory=list)  # l_1..l_t

    @property
    def t(self) -> int:
        return len(self.h_buffer)


def compute_alpha(eps_l_prev: float, eps_h: float, policy: str) -> float:
    """Blend weight put on the incoming response.

    literal:      0.5 * ln(eps_l_prev / eps_h), which is <= 0 whenever the
                  historical state is the better scorer;
    clamped:      the literal value clipped into [0, 1];
    inverse_loss: eps_l_prev / (eps_l_prev + eps_h), a bounded monotone
                  variant that favors whichever state has the lower loss.
    """
    if eps_l_prev <= 0 or eps_h <= 0:
        raise ValueError(
            f"losses must be >= {EPS_LOSS_FLOOR} (floored), got "
            f"eps_l_prev={eps_l_prev} eps_h={eps_h}"
        )
    if policy == "inverse_loss":
        return eps_l_prev / (eps_l_prev + eps_h)
    alpha = 0.5 * float(np.log(eps_l_prev / eps_h))
    if policy == "clamped":
        alpha = min(max(alpha, 0.0), 1.0)
    elif policy != "literal":
        raise ValueError(f"unknown alpha policy {policy!r}")
    return alpha


def truncation_weights(t: int, tau: int, mode: str) -> np.ndarray:
    """Weights w_1..w_t used to re-initialize the historical state.

    literal: zero up to absolute index tau, then uniform 1/(t-tau); only
    defined for t > tau. sliding: uniform over the most recent min(tau, t)
    responses. Both modes return nonnegative weights summing to 1.
    """
    if t < 1:
        raise ValueError(f"t must be >= 1, got {t}")
    if tau < 1:
        raise ValueError(f"tau must be >= 1, got {tau}")
    w = np.zeros(t)
    if mode == "literal":
        if t <= tau:
            raise DegenerateWindowError(
                f"literal window undefined for t={t} <= tau={tau}"
            )
        w[tau:] = 1.0 / (t - tau)
    elif mode == "sliding":
        n = min(tau, t)
        w[t - n:] = 1.0 / n
    else:
        raise ValueError(f"unknown window mode {mode!r}")
    return w


def step_loss(head: HeadParams, state: np.ndarray, label: int) -> float:
    """Floored cross-entropy of the head's prediction from a state vector."""
    return cross_entropy(head_predict(head, state), label)


def initial_trace(h1: np.ndarray, loss_fn: LossFn) -> HistoricalTrace:
    """First step: the historical state is the first response, l_1 = h_1."""
    eps_l = loss_fn(h1)
    rec = StepRecord(branch="init", eps_h=eps_l, eps_l_prev=eps_l, eps_l_new=eps_l)
    return HistoricalTrace(
        l=h1, h_buffer=[h1], eps_l=eps_l, records=[rec], l_history=[h1]
    )


def historical_update(
    trace: HistoricalTrace,
    h_t: np.ndarray,
    eps_h: float,
    cfg: HistoricalConfig,
    loss_fn: LossFn,
) -> HistoricalTrace:
    """Advance the historical state by one response.

    Appends h_t to the buffer, takes the blend or truncation branch on the
    loss comparison, re-scores the new state through loss_fn, and returns a
    new trace. A literal window that is still degenerate (t <= tau) falls
    back to the sliding rule for that step.
    """
    if h_t.shape != trace.l.shape:
        raise ShapeError(f"response {h_t.shape} does not match state {trace.l.shape}")
    if eps_h <= 0:
        raise ValueError(f"eps_h must be positive (floored), got {eps_h}")
    buffer = trace.h_buffer + [h_t]
    t = len(buffer)
    if eps_h >= trace.eps_l:
        alpha = compute_alpha(trace.eps_l, eps_h, cfg.alpha_policy)
        l_new = alpha * h_t + (1.0 - alpha) * trace.l
        eps_l_new = loss_fn(l_new)
        rec = StepRecord(
            branch="blend",
            eps_h=eps_h,
            eps_l_prev=trace.eps_l,
            eps_l_new=eps_l_new,
            alpha=alpha,
        )
    else:
        try:
            w = truncation_weights(t, cfg.tau, cfg.window_mode)
        except DegenerateWindowError:
            w = truncation_weights(t, cfg.tau, "sliding")
        l_new = np.zeros_like(trace.l)
        for k in range(t):
            l_new += w[k] * buffer[k]
        eps_l_new = loss_fn(l_new)
        rec = StepRecord(
            branch="trunc",
            eps_h=eps_h,
            eps_l_prev=trace.eps_l,
            eps_l_new=eps_l_new,
            weights=w,
        )
    return HistoricalTrace(
        l=l_new,
        h_buffer=buffer,
        eps_l=eps_l_new,
        records=trace.records + [rec],
        l_history=trace.l_history + [l_new],
    )


def replay_update(
    trace: HistoricalTrace, h_t: np.ndarray, record: StepRecord, cfg: HistoricalConfig
) -> HistoricalTrace:
    """Advance the state reusing a recorded branch and its frozen coefficients.

    Used to evaluate the loss with the branch schedule pinned, which is the
    function the stop-gradient backward pass actually differentiates.
    """
    buffer = trace.h_buffer + [h_t]
    if record.branch == "blend":
        l_new = record.alpha * h_t + (1.0 - record.alpha) * trace.l
    elif record.branch == "trunc":
        w = record.weights
        l_new = np.zeros_like(trace.l)
        for k in range(len(buffer)):
            l_new += w[k] * buffer[k]
    else:
        raise ValueError(f"cannot replay branch {record.branch!r} mid-sequence")
    return HistoricalTrace(
        l=l_new,
        h_buffer=buffer,
        eps_l=record.eps_l_new,
        records=trace.records + [record],
        l_history=trace.l_history + [l_new],
    )


def inference_losses(
    per_step_head: HeadParams,
    final_head: HeadParams,
    h_t: np.ndarray,
    l_prev: np.ndarray,
    policy: str,
) -> tuple[float, float]:
    """Label-free stand-ins for (eps_h, eps_l) at evaluation time.

    pseudo_label scores both states against the per-step head's argmax;
    fixed_blend returns equal unit losses so the blend branch always fires.
    """
    if policy == "fixed_blend":
        return 1.0, 1.0
    if policy != "pseudo_label":
        raise ValueError(f"unknown inference policy {policy!r}")
    probs_h = head_predict(per_step_head, h_t)
    pseudo = int(np.argmax(probs_h))
    eps_h = cross_entropy(probs_h, pseudo)
    eps_l = step_loss(final_head, l_prev, pseudo)
    return eps_h, eps_l
