"""Autoregressive sentence decoding: greedy and length-normalized beam search.

Both operate on a step function mapping a token prefix (starting with
[start]) to a log-probability vector over the vocabulary; the model
supplies it once per encoded video.  Scores are cumulative log-probability
divided by emitted-token count raised to the length penalty, so finished
hypotheses of different lengths compare fairly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Hypothesis:
    tokens: list                    # emitted ids, [start] excluded
    log_prob: float
    finished: bool = False

    def score(self, length_penalty=1.0):
        n = max(len(self.tokens), 1)
        return self.log_prob / (n ** length_penalty)


def greedy_decode(step_fn, start_id, end_id, max_len):
    """Append the argmax token until [end] or the length cap."""
    tokens = []
    prefix = [start_id]
    for _ in range(max_len):
        log_probs = step_fn(prefix)
        nxt = int(np.argmax(log_probs))
        tokens.append(nxt)
        if nxt == end_id:
            break
        prefix.append(nxt)
    return tokens


def greedy_hypothesis(step_fn, start_id, end_id, max_len):
    """Greedy decode that also tracks the cumulative log-probability."""
    tokens = []
    log_prob = 0.0
    prefix = [start_id]
    finished = False
    for _ in range(max_len):
        log_probs = step_fn(prefix)
        nxt = int(np.argmax(log_probs))
        tokens.append(nxt)
        log_prob += float(log_probs[nxt])
        if nxt == end_id:
            finished = True
            break
        prefix.append(nxt)
    return Hypothesis(tokens=tokens, log_prob=log_prob, finished=finished)


def beam_search(step_fn, start_id, end_id, max_len, width=5, length_penalty=1.0):
    """Best finished hypothesis under length-normalized log-probability.

    Candidates that emit [end] move to the finished pool and never extend;
    anything still alive at max_len is force-finished.  Ties keep the
    earlier (greedy-ordered) candidate, so width 1 reproduces greedy
    decoding exactly.
    """
    if width < 1:
        raise ValueError(f"beam_search: width must be >= 1, got {width}")
    alive = [Hypothesis(tokens=[], log_prob=0.0)]
    finished = []
    for _ in range(max_len):
        candidates = []
        for hyp in alive:
            log_probs = step_fn([start_id] + hyp.tokens)
            order = np.argsort(-log_probs, kind="stable")
            for tok in order[:max(width, 1)]:
                candidates.append(Hypothesis(tokens=hyp.tokens + [int(tok)],
                                             log_prob=hyp.log_prob + float(log_probs[tok]),
                                             finished=int(tok) == end_id))
        candidates.sort(key=lambda h: -h.score(length_penalty))
        alive = []
        for hyp in candidates:
            if hyp.finished:
                finished.append(hyp)
            elif len(alive) < width:
                alive.append(hyp)
        if not alive:
            break
    finished.extend(alive)  # force-finish anything that ran out of length
    best = max(finished, key=lambda h: h.score(length_penalty))
    return best.tokens


def all_sequences(step_fn, start_id, end_id, max_len, vocab_size,
                  length_penalty=1.0):
    """Brute-force enumeration of every decode path (oracle for tiny models)."""
    results = []

    def walk(tokens, log_prob):
        if tokens and (tokens[-1] == end_id or len(tokens) == max_len):
            results.append(Hypothesis(tokens=list(tokens), log_prob=log_prob,
                                      finished=tokens[-1] == end_id))
            return
        log_probs = step_fn([start_id] + tokens)
        for tok in range(vocab_size):
            walk(tokens + [tok], log_prob + float(log_probs[tok]))

    walk([], 0.0)
    return max(results, key=lambda h: h.score(length_penalty)).tokens
