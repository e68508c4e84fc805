"""Straight-loop reference implementations shared by the metric tests."""

import math


def loop_nll_acc(probs, labels):
    nll = acc = 0.0
    for row, y in zip(probs, labels):
        nll -= math.log(row[y])
        best = 0
        for k in range(1, len(row)):
            if row[k] > row[best]:
                best = k
        acc += best == y
    return nll / len(labels), acc / len(labels)


def loop_ece(probs, labels, m):
    n = len(labels)
    total = 0.0
    for i in range(1, m + 1):
        lo, hi = (i - 1) / m, i / m
        members = []
        for row, y in zip(probs, labels):
            conf = max(row)
            if lo < conf <= hi or (i == 1 and conf == 0.0):
                members.append((conf, list(row).index(conf) == y))
        if members:
            conf = sum(c for c, _ in members) / len(members)
            acc = sum(ok for _, ok in members) / len(members)
            total += len(members) / n * abs(acc - conf)
    return total


def threshold_sweep_auc(probs, labels):
    """Sweep every achievable threshold; assumes distinct scores."""
    n = len(labels)
    scores = [max(r) for r in probs]
    correct = [list(r).index(max(r)) == y for r, y in zip(probs, labels)]
    curve = {}
    for t in scores:
        kept = [j for j in range(n) if scores[j] >= t]
        curve[len(kept)] = sum(correct[j] for j in kept) / len(kept)
    return [curve[c] for c in range(1, n + 1)], sum(curve.values()) / n


def pairwise_auroc(ent_in, ent_out):
    wins = 0.0
    for b in ent_out:
        for a in ent_in:
            wins += 1.0 if b > a else 0.5 if b == a else 0.0
    return wins / (len(ent_in) * len(ent_out))


def loop_entropy(row):
    return -sum(p * math.log(p) for p in row if p > 0)
