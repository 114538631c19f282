"""Greedy and beam-search decoding over a trained summarizer.

Both decoders drive a session object exposing ``start()`` and
``step(state, token) -> (log_probs, new_state, gate_mean)``, so tiny
hand-set models can stand in for the real one in enumeration tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .corpus import BOS_ID, EOS_ID, PAD_ID, SEP_ID


@dataclass
class Hypothesis:
    """A (possibly finished) decoded prefix.

    ``tokens`` start after BOS and include the terminating EOS when the
    hypothesis finished by emitting one; ``logprob`` is the sum of the
    per-step log-probabilities of every token in ``tokens``.
    """

    tokens: list = field(default_factory=list)
    logprob: float = 0.0
    state: object = None
    finished: bool = False
    gate_trace: list = field(default_factory=list)

    def summary_tokens(self, eos_id=EOS_ID):
        if self.tokens and self.tokens[-1] == eos_id:
            return self.tokens[:-1]
        return list(self.tokens)


class ModelSession:
    """Decoding session for one (source, facts) input at batch size 1."""

    def __init__(self, params, cfg, source_ids, fact_ids):
        source_ids = np.asarray(source_ids, dtype=np.int64).reshape(1, -1)
        fact_ids = np.asarray(fact_ids, dtype=np.int64).reshape(1, -1)
        if source_ids.shape[1] == 0:
            raise ValueError("cannot decode an empty source")
        self.params = params
        self.cfg = cfg
        src_mask = np.ones(source_ids.shape)
        fact_mask = np.ones(fact_ids.shape)
        gamma = (fact_ids != SEP_ID).astype(np.float64)
        self.enc_x = M.encode_sentence(params, cfg, source_ids, src_mask)
        self.enc_r = M.encode_facts(params, cfg, fact_ids, fact_mask, gamma)

    def start(self):
        s0, _ = M._init_state(self.params, self.enc_x)
        return s0

    def step(self, state, y_prev):
        out = M.decode_step(self.params, self.cfg, np.array([y_prev]), state,
                            self.enc_x, self.enc_r)
        log_probs = np.log(out.distribution[0])
        gate_mean = None if out.gate is None else float(out.gate.mean())
        return log_probs, out.state, gate_mean


def _extend(hyp, token, logp, state, gate_mean, eos_id, max_len):
    new = Hypothesis(
        tokens=hyp.tokens + [token],
        logprob=hyp.logprob + logp,
        state=state,
        gate_trace=hyp.gate_trace + ([gate_mean] if gate_mean is not None else []),
    )
    if token == eos_id:
        new.finished = True
    elif len(new.tokens) >= max_len:
        new.finished = True
    return new


def greedy_decode(session, max_len=20, bos_id=BOS_ID, eos_id=EOS_ID,
                  pad_id=PAD_ID):
    """Follow the argmax at every step; ties go to the lowest token id.

    PAD is never emitted.  Stops at EOS or after max_len tokens.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    hyp = Hypothesis(state=session.start())
    token = bos_id
    while not hyp.finished:
        log_probs, state, gate_mean = session.step(hyp.state, token)
        scores = np.array(log_probs, dtype=np.float64, copy=True)
        if pad_id is not None:
            scores[pad_id] = -np.inf
        token = int(np.argmax(scores))  # argmax takes the first (lowest) id
        hyp = _extend(hyp, token, float(scores[token]), state, gate_mean,
                      eos_id, max_len)
    return hyp


def beam_search(session, beam=6, max_len=20, bos_id=BOS_ID, eos_id=EOS_ID,
                pad_id=PAD_ID):
    """Length-capped beam search ranked by raw accumulated log-probability.

    Every live hypothesis is expanded over the full vocabulary, the top
    `beam` candidates survive, and hypotheses that emitted EOS (or hit
    max_len) retire to a pool; the pool maximum is returned.  Candidate
    ties break deterministically by score, then token id, then hypothesis
    order, so beam=1 reproduces greedy_decode exactly.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    live = [Hypothesis(state=session.start())]
    pool = []
    while live:
        candidates = []
        for order, hyp in enumerate(live):
            y_prev = hyp.tokens[-1] if hyp.tokens else bos_id
            log_probs, state, gate_mean = session.step(hyp.state, y_prev)
            scores = np.array(log_probs, dtype=np.float64, copy=True)
            if pad_id is not None:
                scores[pad_id] = -np.inf
            for token in range(scores.shape[0]):
                if not np.isfinite(scores[token]):
                    continue
                logp = float(scores[token])
                candidates.append((hyp.logprob + logp, token, order,
                                   state, gate_mean, logp))
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
        live_next = []
        for _total, token, order, state, gate_mean, logp in candidates[:beam]:
            new = _extend(live[order], token, logp, state, gate_mean,
                          eos_id, max_len)
            if new.finished:
                pool.append(new)
            else:
                live_next.append(new)
        live = live_next
    if not pool:
        raise RuntimeError("no finishable hypothesis: every token had zero probability")
    best = pool[0]
    for hyp in pool[1:]:
        if hyp.logprob > best.logprob:
            best = hyp
    return best


def decode_pair(params, cfg, source_ids, fact_ids, beam=6, max_len=20):
    """Decode one encoded (source, facts) pair; beam=1 uses the greedy path."""
    session = ModelSession(params, cfg, source_ids, fact_ids)
    if beam == 1:
        return greedy_decode(session, max_len=max_len)
    return beam_search(session, beam=beam, max_len=max_len)
