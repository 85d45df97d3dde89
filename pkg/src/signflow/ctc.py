"""Gloss recognition head: per-step posteriors, CTC probability/loss, decoding.

The alignment-free sequence probability P(target | posterior) is the sum over
every per-step labelling that collapses to the target once consecutive
repeats and blanks are removed.  The forward dynamic program runs in log
space over the blank-interleaved target; its gradient with respect to the
posterior is recovered from the forward/backward lattices, so the loss plugs
straight into the recorded-tape engine.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

BLANK_ID = 0

_NEG_INF = -np.inf


def required_steps(target):
    """Minimum number of posterior steps able to emit ``target``."""
    target = list(target)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _validate(posterior, target):
    if posterior.ndim != 2:
        raise ValueError(f"ctc: posterior must be 2-D (steps x classes), got {posterior.shape}")
    steps, classes = posterior.shape
    target = np.asarray(target, dtype=np.int64)
    if target.ndim != 1 or target.size == 0:
        raise ValueError("ctc: target must be a non-empty 1-D id sequence")
    if np.any(target == BLANK_ID):
        raise ValueError(f"ctc: target may not contain the blank id ({BLANK_ID})")
    if np.any(target < 0) or np.any(target >= classes):
        raise ValueError(f"ctc: target id out of range for {classes} classes")
    need = required_steps(target)
    if need > steps:
        raise ValueError(f"ctc: target needs at least {need} steps "
                         f"(length plus blanks between repeats) but only {steps} are available")
    return target


def _logsumexp(*vals):
    m = max(vals)
    if m == _NEG_INF:
        return _NEG_INF
    return m + np.log(sum(np.exp(v - m) for v in vals))


def _lattices(logp, labels):
    """Forward/backward lattices over the blank-interleaved target."""
    steps = logp.shape[0]
    s = len(labels)
    skip_ok = np.zeros(s, dtype=bool)
    skip_ok[2:] = (labels[2:] != BLANK_ID) & (labels[2:] != labels[:-2])

    alpha = np.full((steps, s), _NEG_INF)
    alpha[0, 0] = logp[0, labels[0]]
    if s > 1:
        alpha[0, 1] = logp[0, labels[1]]
    for t in range(1, steps):
        for k in range(s):
            best = alpha[t - 1, k]
            if k >= 1:
                best = _logsumexp(best, alpha[t - 1, k - 1])
            if k >= 2 and skip_ok[k]:
                best = _logsumexp(best, alpha[t - 1, k - 2])
            alpha[t, k] = best + logp[t, labels[k]]

    # beta[t, k]: log-probability of completing the target from step t+1 on,
    # given state k at step t (the emission at t itself is inside alpha).
    beta = np.full((steps, s), _NEG_INF)
    beta[-1, s - 1] = 0.0
    if s > 1:
        beta[-1, s - 2] = 0.0
    for t in range(steps - 2, -1, -1):
        for k in range(s - 1, -1, -1):
            best = beta[t + 1, k] + logp[t + 1, labels[k]]
            if k + 1 < s:
                best = _logsumexp(best, beta[t + 1, k + 1] + logp[t + 1, labels[k + 1]])
            if k + 2 < s and skip_ok[k + 2]:
                best = _logsumexp(best, beta[t + 1, k + 2] + logp[t + 1, labels[k + 2]])
            beta[t, k] = best
    return alpha, beta


def ctc_log_probability(posterior, target):
    """log P(target | posterior) as a differentiable scalar."""
    posterior = posterior if isinstance(posterior, Tensor) else Tensor(posterior)
    target = _validate(posterior, target)
    labels = np.empty(2 * target.size + 1, dtype=np.int64)
    labels[0::2] = BLANK_ID
    labels[1::2] = target

    with np.errstate(divide="ignore"):
        logp = np.log(posterior.data)
    alpha, beta = _lattices(logp, labels)
    s = labels.size
    log_total = _logsumexp(alpha[-1, s - 1], alpha[-1, s - 2] if s > 1 else _NEG_INF)

    steps, classes = posterior.shape
    pd = posterior.data

    def grad_fn(g):
        # d log P / d p[t, c] = exp(gamma[t, c] - log P - log p[t, c]);
        # gamma aggregates alpha+beta over lattice states carrying label c.
        gamma = np.full((steps, classes), _NEG_INF)
        ab = alpha + beta
        for k in range(s):
            c = labels[k]
            col = gamma[:, c]
            gamma[:, c] = np.logaddexp(col, ab[:, k])
        with np.errstate(divide="ignore", invalid="ignore"):
            dlogp = np.exp(gamma - log_total - logp)
        dlogp[~np.isfinite(dlogp)] = 0.0
        return (float(g) * dlogp,)

    out = T._record(np.asarray(log_total), (posterior,), grad_fn, "ctc_log_prob")
    return out


def ctc_probability(posterior, target):
    """Exact path-sum probability P(target | posterior), as a plain float."""
    with T.no_grad():
        return float(np.exp(ctc_log_probability(posterior, target).data))


def ctc_loss(posterior, target, mode="nll"):
    """Sequence loss: "nll" is -log P (default); "paper" is 1 - P."""
    logp = ctc_log_probability(posterior, target)
    if mode == "nll":
        return T.neg(logp)
    if mode == "paper":
        return 1.0 - T.exp(logp)
    raise ValueError(f"ctc_loss: unknown mode {mode!r} (expected 'nll' or 'paper')")


def best_path_decode(posterior):
    """Per-step argmax, collapse consecutive repeats, drop blanks."""
    data = posterior.data if isinstance(posterior, Tensor) else np.asarray(posterior)
    path = data.argmax(axis=-1)
    out = []
    prev = None
    for c in path:
        if c != prev and c != BLANK_ID:
            out.append(int(c))
        prev = c
    return out


def gloss_logits(khat, weight, bias):
    """Project encoded features to a row-stochastic (L x classes) posterior."""
    return T.softmax(T.matmul(khat, weight) + bias)


class GlossHead:
    """Linear + softmax head over the encoded feature sequence."""

    def __init__(self, d_model, n_glosses, rng):
        scale = np.sqrt(2.0 / (d_model + n_glosses + 1))
        self.weight = Tensor(rng.normal(0.0, scale, size=(d_model, n_glosses + 1)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(n_glosses + 1), requires_grad=True)

    def __call__(self, khat):
        return gloss_logits(khat, self.weight, self.bias)

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}
