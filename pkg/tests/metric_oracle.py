"""Per-sample brute-force evaluator: walks (true, predicted) pairs one by one with exact fractions."""

from fractions import Fraction


def expand(counts):
    """Confusion counts -> flat lists of true and predicted labels."""
    true, pred = [], []
    for i, row in enumerate(counts):
        for j, n in enumerate(row):
            true += [i] * int(n)
            pred += [j] * int(n)
    return true, pred


def brute_force(true, pred, k):
    n = len(true)
    correct = sum(1 for t, p in zip(true, pred) if t == p)
    precisions, recalls = [], []
    tp_all = fp_all = fn_all = 0
    for c in range(k):
        tp = sum(1 for t, p in zip(true, pred) if t == c and p == c)
        fp = sum(1 for t, p in zip(true, pred) if t != c and p == c)
        fn = sum(1 for t, p in zip(true, pred) if t == c and p != c)
        tp_all, fp_all, fn_all = tp_all + tp, fp_all + fp, fn_all + fn
        precisions.append(Fraction(tp, tp + fp) if tp + fp else Fraction(0))
        recalls.append(Fraction(tp, tp + fn) if tp + fn else Fraction(0))
    return {
        "accuracy": Fraction(correct, n),
        "precision_micro": Fraction(tp_all, tp_all + fp_all),
        "precision_macro": sum(precisions) / k,
        "recall_micro": Fraction(tp_all, tp_all + fn_all),
        "recall_macro": sum(recalls) / k,
        "precision": precisions,
        "recall": recalls,
    }
