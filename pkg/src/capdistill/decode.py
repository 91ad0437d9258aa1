"""Autoregressive caption generation and teacher pseudo-labeling.

Beam search keeps raw summed log-probabilities (no length normalization) so
its result is directly comparable with exhaustive enumeration. A hypothesis
is finalized only when EOS ranks within the top `beam_size` expansions of its
step, which makes `beam_size=1` reproduce greedy decoding exactly. Ties are
broken by the lexicographically smaller token sequence, so decoding is fully
deterministic.

Decoding recomputes the whole prefix each step through the same forward used
for teacher forcing; there is no cache to drift out of sync.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nm
from .model import CaptionerModel
from .synthworld import BOS, EOS
from .utils import atomic_write_text


@dataclass
class Hypothesis:
    tokens: list          # BOS ... (EOS if finished)
    log_prob: float       # sum of per-step token log-probabilities
    finished: bool

    def sort_key(self):
        # higher score first; ties go to the smaller token sequence, and a
        # prefix sorts before its extensions (shorter wins)
        return (-self.log_prob, tuple(self.tokens))


def _step_logprobs(model, emb_rows, prefixes):
    """Log next-token distributions for equal-length prefixes (no grad)."""
    with nm.no_grad():
        probs = model.decoder_probs(emb_rows, np.asarray(prefixes))
    last = probs.data[:, -1, :] if probs.ndim == 3 else probs.data[None, -1, :]
    return np.log(np.maximum(last, 1e-30))


def greedy_decode(model: CaptionerModel, emb, max_len: int = 20) -> Hypothesis:
    """Argmax decoding; stops at EOS or after max_len generated tokens."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    return greedy_decode_batch(model, _as_batch(emb), max_len)[0]


def _as_batch(emb):
    data = emb.data if isinstance(emb, nm.Tensor) else np.asarray(emb)
    if data.ndim == 2:
        data = data[None]
    return nm.Tensor(data)


def greedy_decode_batch(model, emb_batch, max_len: int = 20) -> list:
    """Greedy decode a whole batch of clips in lock-step."""
    emb_batch = _as_batch(emb_batch)
    n = emb_batch.shape[0]
    prefixes = np.full((n, 1), BOS, dtype=np.int64)
    scores = np.zeros(n)
    alive = np.ones(n, dtype=bool)
    for _ in range(max_len):
        logp = _step_logprobs(model, emb_batch, prefixes)
        nxt = logp.argmax(axis=1)
        scores = np.where(alive, scores + logp[np.arange(n), nxt], scores)
        # finished rows keep padding with EOS; stripped when emitted
        nxt = np.where(alive, nxt, EOS)
        prefixes = np.concatenate([prefixes, nxt[:, None]], axis=1)
        alive &= nxt != EOS
        if not alive.any():
            break
    out = []
    for i in range(n):
        toks = list(map(int, prefixes[i]))
        if EOS in toks:
            toks = toks[: toks.index(EOS) + 1]
        out.append(Hypothesis(tokens=toks, log_prob=float(scores[i]),
                              finished=toks[-1] == EOS))
    return out


def beam_search(model: CaptionerModel, emb, beam_size: int = 3,
                max_len: int = 20, suppress_eos: bool = False) -> Hypothesis:
    """Best hypothesis under beam expansion with the top-beam EOS rule."""
    return beam_search_batch(model, _as_batch(emb), beam_size, max_len,
                             suppress_eos=suppress_eos)[0]


def beam_search_batch(model, emb_batch, beam_size: int = 3, max_len: int = 20,
                      suppress_eos: bool = False) -> list:
    """Beam-search a batch of clips; each clip's beam is exact and independent.

    All alive hypotheses of all clips share one decoder forward per step.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    emb_batch = _as_batch(emb_batch)
    n_clips = emb_batch.shape[0]

    alive = [[Hypothesis([BOS], 0.0, False)] for _ in range(n_clips)]
    best_done: list = [None] * n_clips

    for _ in range(max_len):
        rows, row_clip = [], []
        for ci in range(n_clips):
            for hyp in alive[ci]:
                rows.append(hyp.tokens)
                row_clip.append(ci)
        if not rows:
            break
        emb_rows = nm.Tensor(emb_batch.data[row_clip])
        logp = _step_logprobs(model, emb_rows, rows)
        if suppress_eos:
            logp[:, EOS] = -np.inf

        row = 0
        for ci in range(n_clips):
            n_alive = len(alive[ci])
            if n_alive == 0:
                continue
            parent_scores = np.array([h.log_prob for h in alive[ci]])
            cand_scores = parent_scores[:, None] + logp[row : row + n_alive]
            row += n_alive
            flat = cand_scores.ravel()
            vocab = cand_scores.shape[1]
            # exact pruning: keep the top 2*beam scores plus all ties at the
            # boundary; ranks among kept candidates equal their global ranks
            k = min(2 * beam_size, flat.size)
            threshold = np.partition(flat, flat.size - k)[flat.size - k]
            cand = []
            for fi in np.flatnonzero(flat >= threshold):
                lp = flat[fi]
                if not np.isfinite(lp):
                    continue
                pi, tok = divmod(int(fi), vocab)
                cand.append(Hypothesis(alive[ci][pi].tokens + [int(tok)],
                                       float(lp), tok == EOS))
            cand.sort(key=Hypothesis.sort_key)
            next_alive = []
            for rank, hyp in enumerate(cand):
                if hyp.finished:
                    # finalize only when EOS ranks inside the beam; this is
                    # what makes beam_size=1 coincide with greedy decoding
                    if rank < beam_size:
                        if best_done[ci] is None or hyp.sort_key() < best_done[ci].sort_key():
                            best_done[ci] = hyp
                elif len(next_alive) < beam_size:
                    next_alive.append(hyp)
            # alive hypotheses strictly below the best finished score can
            # never win, even on ties (ties prefer the finished prefix)
            if best_done[ci] is not None:
                next_alive = [h for h in next_alive
                              if h.log_prob >= best_done[ci].log_prob]
            alive[ci] = next_alive

    out = []
    for ci in range(n_clips):
        contenders = list(alive[ci])
        if best_done[ci] is not None:
            contenders.append(best_done[ci])
        contenders.sort(key=Hypothesis.sort_key)
        out.append(contenders[0])
    return out


# ---------------------------------------------------------------------------
# pseudo-labeling


def pseudo_label(teacher: CaptionerModel, clips, beam_size: int = 3,
                 max_len: int = 20, cache_path=None, chunk: int = 64) -> list:
    """Teacher captions for (possibly unannotated) clips, cached on disk.

    Cache records are keyed by (teacher checkpoint hash, clip seed); a stale
    or corrupt cache is regenerated with a warning. Returns one token list
    per clip, in input order.
    """
    teacher_hash = teacher.param_hash()
    cached = {}
    if cache_path is not None and Path(cache_path).exists():
        cached = _read_cache(cache_path, teacher_hash)

    missing = [c for c in clips if c.seed not in cached]
    if missing:
        fresh = {}
        for start in range(0, len(missing), chunk):
            batch = missing[start : start + chunk]
            feats = np.stack([c.features for c in batch])
            with nm.no_grad():
                emb = teacher.encode(feats)
            hyps = beam_search_batch(teacher, emb, beam_size=beam_size,
                                     max_len=max_len)
            for clip, hyp in zip(batch, hyps):
                fresh[clip.seed] = (hyp.tokens, hyp.log_prob)
        cached.update(fresh)
        if cache_path is not None:
            _write_cache(cache_path, teacher_hash, cached)
    return [list(cached[c.seed][0]) for c in clips]


def _read_cache(path, teacher_hash):
    out = {}
    try:
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                if rec["teacher_hash"] != teacher_hash:
                    return {}
                out[rec["clip_seed"]] = (rec["token_ids"], rec["log_prob"])
    except (json.JSONDecodeError, KeyError, OSError) as exc:
        warnings.warn(f"pseudo-label cache unreadable ({exc}); regenerating",
                      stacklevel=2)
        return {}
    return out


def _write_cache(path, teacher_hash, records):
    lines = []
    for clip_seed in sorted(records):
        tokens, log_prob = records[clip_seed]
        lines.append(json.dumps({
            "clip_seed": int(clip_seed),
            "teacher_hash": teacher_hash,
            "token_ids": [int(t) for t in tokens],
            "log_prob": float(log_prob),
        }, sort_keys=True))
    atomic_write_text(path, "\n".join(lines) + "\n")
