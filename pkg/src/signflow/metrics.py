"""Word error rate, corpus BLEU, and the evaluation report format."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field


def wer(reference, hypothesis):
    """100 * (substitutions + deletions + insertions) / reference length."""
    ref = list(reference)
    hyp = list(hypothesis)
    if not ref:
        raise ValueError("wer: empty reference")
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(prev[j] + 1,              # deletion
                         cur[j - 1] + 1,           # insertion
                         prev[j - 1] + (r != h))   # substitution / match
        prev = cur
    return 100.0 * prev[-1] / len(ref)


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


@dataclass
class BleuResult:
    scores: list                    # BLEU-1..max_n, percents
    precisions: list
    brevity_penalty: float
    smoothed: bool                  # any zero count patched by add-one

    def __getitem__(self, n):
        return self.scores[n - 1]


def bleu(references, hypotheses, max_n=4):
    """Corpus-level BLEU-1..max_n with brevity penalty.

    references/hypotheses: aligned lists of token sequences.  Modified
    n-gram precision is aggregated over the corpus; a zero count at n >= 2
    falls back to add-one smoothing and flags the result as smoothed.
    """
    if not hypotheses or len(references) != len(hypotheses):
        raise ValueError("bleu: need equally many non-empty reference and "
                         "hypothesis lists")
    matches = [0] * max_n
    totals = [0] * max_n
    ref_len = hyp_len = 0
    for ref, hyp in zip(references, hypotheses):
        ref, hyp = list(ref), list(hyp)
        ref_len += len(ref)
        hyp_len += len(hyp)
        for n in range(1, max_n + 1):
            hyp_counts = _ngrams(hyp, n)
            ref_counts = _ngrams(ref, n)
            totals[n - 1] += max(len(hyp) - n + 1, 0)
            matches[n - 1] += sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())

    smoothed = False
    precisions = []
    for n in range(1, max_n + 1):
        m, t = matches[n - 1], totals[n - 1]
        if t == 0:
            precisions.append(0.0)
        elif m == 0 and n >= 2:
            precisions.append((m + 1.0) / (t + 1.0))
            smoothed = True
        else:
            precisions.append(m / t)

    bp = 1.0 if hyp_len >= ref_len else (
        math.exp(1.0 - ref_len / hyp_len) if hyp_len > 0 else 0.0)
    scores = []
    for n in range(1, max_n + 1):
        ps = precisions[:n]
        if min(ps) <= 0.0:
            scores.append(0.0)
        else:
            geo = math.exp(sum(math.log(p) for p in ps) / n)
            scores.append(100.0 * bp * geo)
    return BleuResult(scores=scores, precisions=precisions,
                      brevity_penalty=bp, smoothed=smoothed)


@dataclass
class SentenceRecord:
    sample_id: str
    ref_glosses: tuple
    hyp_glosses: tuple
    ref_words: tuple
    hyp_words: tuple
    wer: float


@dataclass
class MetricReport:
    wer: float
    bleu: BleuResult
    sentences: list = field(default_factory=list)

    def format(self):
        """Stable key=value text, suitable for diff-based comparisons."""
        lines = [f"WER={self.wer:.4f}"]
        for n, score in enumerate(self.bleu.scores, start=1):
            lines.append(f"BLEU{n}={score:.4f}")
        lines.append(f"BREVITY={self.bleu.brevity_penalty:.6f}")
        lines.append(f"SMOOTHED={int(self.bleu.smoothed)}")
        lines.append(f"SENTENCES={len(self.sentences)}")
        for rec in sorted(self.sentences, key=lambda r: r.sample_id):
            lines.append(f"[sentence {rec.sample_id}]")
            lines.append(f"ref_glosses={' '.join(rec.ref_glosses)}")
            lines.append(f"hyp_glosses={' '.join(rec.hyp_glosses)}")
            lines.append(f"ref_words={' '.join(rec.ref_words)}")
            lines.append(f"hyp_words={' '.join(rec.hyp_words)}")
            lines.append(f"wer={rec.wer:.4f}")
        return "\n".join(lines) + "\n"

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.format())


def corpus_report(records, max_n=4):
    """Aggregate per-sentence decode records into one MetricReport.

    WER is corpus-level over gloss sequences (total edits / total reference
    length); BLEU is corpus-level over word sequences.
    """
    if not records:
        raise ValueError("corpus_report: no sentences")
    total_edits = 0.0
    total_len = 0
    for rec in records:
        total_edits += rec.wer * len(rec.ref_glosses) / 100.0
        total_len += len(rec.ref_glosses)
    overall_wer = 100.0 * total_edits / total_len
    b = bleu([r.ref_words for r in records], [r.hyp_words for r in records], max_n)
    return MetricReport(wer=overall_wer, bleu=b, sentences=list(records))
