"""Moment functions, orthogonalized scores and closed-form trimmed means.

Everything here is a pure, vectorized function of per-unit data
``(y, s, d)`` and plug-in nuisance values; no estimation happens in this
module.  Outcomes of non-responders may be NaN: every term that touches
``y`` is multiplied by ``s`` only after NaNs have been zeroed.

Naming follows the trimming construction: ``y_lo`` is the conditional
q(x)-quantile of the treated responders' outcomes and ``y_hi`` the
(1 - q(x))-quantile, where ``q = q0 / q1`` is the always-responder share
among treated responders.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateConditional, InvalidTrim, NotTreatedResponder

PROB_FLOOR = 0.01


@dataclass(frozen=True)
class NuisanceAt:
    """Nuisance values at one point (or arrays of them, one per unit)."""

    q0: np.ndarray | float
    q1: np.ndarray | float
    y_lo: np.ndarray | float
    y_hi: np.ndarray | float
    p: np.ndarray | float
    xi: np.ndarray | float | None = None

    @property
    def q(self):
        return np.asarray(self.q0) / np.asarray(self.q1)


@dataclass(frozen=True)
class TargetAt:
    theta0: np.ndarray | float
    theta1L: np.ndarray | float
    theta1U: np.ndarray | float


def _clean(y, s):
    s = np.asarray(s, dtype=float)
    y = np.where(s == 1, np.nan_to_num(np.asarray(y, dtype=float)), 0.0)
    return y, s


def score_lower(y, s, d, y_lo, p):
    """Orthogonalized lower-bound score; its mean over q0 weights is the lower bound."""
    y, s = _clean(y, s)
    d = np.asarray(d, dtype=float)
    r = y - y_lo
    return s * d * r * (y <= y_lo) / p - s * (1 - d) * r / (1 - p)


def score_upper(y, s, d, y_hi, p):
    y, s = _clean(y, s)
    d = np.asarray(d, dtype=float)
    r = y - y_hi
    return s * d * r * (y >= y_hi) / p - s * (1 - d) * r / (1 - p)


def score_lower_reverse(y, s, d, y_hi, p):
    """Lower-bound score when treatment lowers response (trim the control arm).

    ``y_hi`` is the (1 - q~)-quantile of control responders, q~ = q1 / q0.
    """
    y, s = _clean(y, s)
    d = np.asarray(d, dtype=float)
    r = y - y_hi
    return s * d * r / p - s * (1 - d) * r * (y >= y_hi) / (1 - p)


def score_upper_reverse(y, s, d, y_lo, p):
    """Upper-bound score under reversed monotonicity; ``y_lo`` is the q~-quantile of controls."""
    y, s = _clean(y, s)
    d = np.asarray(d, dtype=float)
    r = y - y_lo
    return s * d * r / p - s * (1 - d) * r * (y <= y_lo) / (1 - p)


def q0_weight(s, d, p):
    """Per-unit term whose mean estimates the always-responder share q0."""
    return np.asarray(s, dtype=float) * (1 - np.asarray(d, dtype=float)) / (1 - p)


def q1_weight(s, d, p):
    """Role-swapped ``q0_weight``: always-responder share when S(0) >= S(1)."""
    return np.asarray(s, dtype=float) * np.asarray(d, dtype=float) / p


def trimmed_pseudo_outcomes(y, y_lo, y_hi):
    """(Y - y_lo) 1{Y <= y_lo} and (Y - y_hi) 1{Y >= y_hi}."""
    y = np.asarray(y, dtype=float)
    return (y - y_lo) * (y <= y_lo), (y - y_hi) * (y >= y_hi)


def theta1_targets(y, s, d, y_lo, y_hi):
    """Pseudo-outcomes (A_L, A_U) of treated responders.

    Regressing ``A_L`` on covariates, dividing by q(x) and adding ``y_lo``
    gives the lower trimmed mean of treated outcomes at x.
    """
    if np.any(np.asarray(s) != 1) or np.any(np.asarray(d) != 1):
        raise NotTreatedResponder("pseudo-outcomes are defined for treated responders only")
    return trimmed_pseudo_outcomes(y, y_lo, y_hi)


def psi2(y, s, d, y_lo, p, theta_tilde_1L):
    """Plain (non-orthogonal) moment for the q0-scaled lower treated mean."""
    y, s = _clean(y, s)
    return s * np.asarray(d, dtype=float) * y * (y <= y_lo) - p * theta_tilde_1L


def psi2_orthogonal(y, s, d, y_lo, p, theta_tilde_1L):
    """``psi2`` minus y_lo times the orthogonalized quantile moment."""
    y, s = _clean(y, s)
    d = np.asarray(d, dtype=float)
    return (s * d * (y - y_lo) * (y <= y_lo) - p * theta_tilde_1L
            + y_lo * p * s * (1 - d) / (1 - p))


def propensity_correction_lower(d, p, q0, y_lo, theta_tilde_1L):
    """Extra term for the lower local moment when p(x) is estimated."""
    d = np.asarray(d, dtype=float)
    return y_lo * q0 * (d / p - (1 - d) / (1 - p)) - theta_tilde_1L * (d - p)


def propensity_correction_upper(d, p, q0, y_hi, theta_tilde_1U):
    d = np.asarray(d, dtype=float)
    return y_hi * q0 * (d / p - (1 - d) / (1 - p)) - theta_tilde_1U * (d - p)


def propensity_correction_control(d, p, theta_tilde_0):
    return theta_tilde_0 * (np.asarray(d, dtype=float) - p)


def aipw_correction(d, p, m_treated, m_control):
    """Augmentation that makes ``D*A/p - (1-D)*B/(1-p)`` insensitive to errors in p.

    ``m_treated = E[A | D=1, x]`` and ``m_control = E[B | D=0, x]``.
    """
    d = np.asarray(d, dtype=float)
    return -(d - p) / p * m_treated - (d - p) / (1 - p) * m_control


def binary_bounds(q, xi):
    """Lower and upper trimmed means of a {0,1} outcome keeping mass q.

    ``xi`` is Pr[Y = 0] among treated responders.
    """
    q = np.asarray(q, dtype=float)
    xi = np.asarray(xi, dtype=float)
    if np.any(q <= 0) or np.any(q > 1) or np.any(np.isnan(q)):
        raise InvalidTrim("trimming share q must lie in (0, 1]")
    lower = (q - xi) * (xi <= q) / q
    upper = (q + (1 - q - xi) * (xi >= 1 - q)) / q
    lower = np.clip(lower, 0.0, 1.0)
    upper = np.clip(upper, 0.0, 1.0)
    if lower.ndim == 0:
        return float(lower), float(upper)
    return lower, upper


def q_from_selected_only(p, pr_d0_given_s1, form: str = "bayes"):
    """Trimming share q(x) from the responders-only treatment probability.

    ``form="bayes"`` uses 1 - (1 - p - r) / ((1 - r)(1 - p)); ``form="ratio"``
    uses p r / ((1 - p)(1 - r)), with r = Pr[D=0 | S=1, x].  The two are
    algebraically equal.
    """
    p = np.asarray(p, dtype=float)
    r = np.asarray(pr_d0_given_s1, dtype=float)
    if np.any(r <= 0) or np.any(r >= 1):
        raise DegenerateConditional("Pr[D=0 | S=1, x] must lie strictly inside (0, 1)")
    if form == "bayes":
        out = 1 - (1 - p - r) / ((1 - r) * (1 - p))
    elif form == "ratio":
        out = p * r / ((1 - p) * (1 - r))
    else:
        raise ValueError(f"unknown form {form!r}")
    return float(out) if out.ndim == 0 else out


def trimming_share(q0, q1, floor: float = PROB_FLOOR):
    """Unclipped q = q0 / q1 after flooring both rates; also reports where the floor bound."""
    q0 = np.asarray(q0, dtype=float)
    q1 = np.asarray(q1, dtype=float)
    floored = (q0 < floor) | (q1 < floor)
    return np.maximum(q0, floor) / np.maximum(q1, floor), floored
