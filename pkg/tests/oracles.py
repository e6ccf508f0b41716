"""Brute-force reference implementations shared across test modules.

These stay deliberately independent of the library code paths they check:
pairwise enumeration and trapezoidal integration for AUROC, a rank walk for
average precision, and a quadratic-table LCS.
"""

import numpy as np


def auroc_pairwise_oracle(scores):
    pos = [s.score for s in scores if s.label == 1]
    neg = [s.score for s in scores if s.label == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else (0.5 if p == n else 0.0)
    return total / (len(pos) * len(neg))


def auroc_trapezoid_oracle(scores):
    pos = np.array([s.score for s in scores if s.label == 1])
    neg = np.array([s.score for s in scores if s.label == 0])
    thresholds = np.unique(np.concatenate([pos, neg, [np.inf]]))[::-1]
    fpr = [np.mean(neg >= t) for t in thresholds] + [1.0]
    tpr = [np.mean(pos >= t) for t in thresholds] + [1.0]
    return float(np.trapezoid(tpr, fpr))


def auprc_rank_oracle(scores):
    order = sorted(range(len(scores)), key=lambda i: -scores[i].score)
    n_pos = sum(s.label for s in scores)
    ap, tp = 0.0, 0
    for rank, idx in enumerate(order, start=1):
        if scores[idx].label == 1:
            tp += 1
            ap += (1.0 / n_pos) * (tp / rank)
    return ap


def lcs_oracle(a, b):
    ta, tb = a.split(), b.split()
    table = [[0] * (len(tb) + 1) for _ in range(len(ta) + 1)]
    for i in range(1, len(ta) + 1):
        for j in range(1, len(tb) + 1):
            if ta[i - 1] == tb[j - 1]:
                table[i][j] = table[i - 1][j - 1] + 1
            else:
                table[i][j] = max(table[i - 1][j], table[i][j - 1])
    return table[-1][-1]
