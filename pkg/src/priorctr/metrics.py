"""Evaluation: rank-based AUC, LogLoss, long-tail splits, CTR-stability KL report.

The KL diagnostic contrasts how much per-period empirical CTR wanders from
its all-period average at two granularities: single feature values versus
full feature-conjunction instance groups.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .nn_core import EPS, bce


class DegenerateLabels(ValueError):
    """AUC needs at least one positive and one negative."""


class EmptySet(ValueError):
    pass


class NoItemField(ValueError):
    pass


def auc(scores, labels) -> float:
    """Mann-Whitney AUC with average ranks for ties; O(n log n)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels(f"{n_pos} positives, {n_neg} negatives")
    ranks = rankdata(scores, method="average")
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def logloss(scores, labels) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise EmptySet()
    return float(np.mean(bce(scores, np.asarray(labels, dtype=np.float64))))


def longtail_split(train_item_counts: Counter, test_items: np.ndarray,
                   head_fraction: float = 0.2):
    """Partition test instances by whether their item is short-hot or long-tail.

    Items are ranked by training frequency (descending, ties broken by item
    index ascending); the top ``head_fraction`` of distinct items form the
    short-hot class.  Items never seen in training count as long-tail.
    Returns (short_hot_mask, long_tail_mask) over test instances.
    """
    if len(train_item_counts) == 0:
        raise NoItemField("no item frequencies available")
    ranked = sorted(train_item_counts.items(), key=lambda kv: (-kv[1], kv[0]))
    k = int(len(ranked) * head_fraction)
    head = {item for item, _ in ranked[:k]}
    test_items = np.asarray(test_items)
    short_mask = np.fromiter((i in head for i in test_items),
                             dtype=bool, count=test_items.shape[0])
    return short_mask, ~short_mask


def kl_distance(q_ctr: float, p_ctr: float) -> float:
    """KL between two Bernoulli distributions given by their click rates."""
    q = np.clip([q_ctr, 1.0 - q_ctr], EPS, 1.0 - EPS)
    p = np.clip([p_ctr, 1.0 - p_ctr], EPS, 1.0 - EPS)
    return float(np.sum(q * np.log(q / p)))


@dataclass
class KlCell:
    period: int
    key: str
    granularity: str        # FEATURE or INSTANCE_GROUP
    kl: float
    impressions: int
    sparse: bool            # fewer than min_impressions in this period


def kl_report(stream, feature_values=None, min_impressions: int = 10,
              max_groups: int = 200) -> list[KlCell]:
    """Per-period KL-to-average CTR series at feature and instance-group level.

    ``feature_values`` selects global feature indices; by default the most
    frequent value of every field is used.  Instance groups key on the full
    conjunction of field values; the ``max_groups`` most frequent conjunctions
    are tracked.
    """
    periods = stream.periods
    n_values = stream.schema.total_values

    # feature-level tallies
    if feature_values is None:
        total = np.zeros(n_values, dtype=np.int64)
        for p in periods:
            for idx in p.field_indices:
                total += np.bincount(idx, minlength=n_values)
        feature_values = []
        for j, f in enumerate(stream.schema.fields):
            off = stream.schema.offsets[j]
            feature_values.append(off + int(np.argmax(total[off:off + f.vocab])))

    imp = np.zeros((len(periods), len(feature_values)), dtype=np.int64)
    clk = np.zeros_like(imp)
    for t, p in enumerate(periods):
        for j, idx in enumerate(p.field_indices):
            for c, gv in enumerate(feature_values):
                mask = idx == gv
                if mask.any():
                    imp[t, c] += int(mask.sum())
                    clk[t, c] += int(p.labels[mask].sum())

    cells = []
    for c, gv in enumerate(feature_values):
        total_imp = imp[:, c].sum()
        if total_imp == 0:
            continue
        avg_ctr = clk[:, c].sum() / total_imp
        for t, p in enumerate(periods):
            if imp[t, c] == 0:
                continue
            q = clk[t, c] / imp[t, c]
            cells.append(KlCell(p.index, f"value:{gv}", "FEATURE",
                                kl_distance(q, avg_ctr), int(imp[t, c]),
                                sparse=imp[t, c] < min_impressions))

    # instance-group tallies keyed on the full conjunction
    group_imp: dict = {}
    group_clk: dict = {}
    overall = Counter()
    keys_per_period = []
    for p in periods:
        key = np.stack([idx for idx in p.field_indices], axis=1)
        keys = [tuple(row) for row in key]
        keys_per_period.append(keys)
        overall.update(keys)
    tracked = [k for k, _ in overall.most_common(max_groups)]
    tracked_set = set(tracked)
    for t, p in enumerate(periods):
        for key, label in zip(keys_per_period[t], p.labels):
            if key in tracked_set:
                group_imp[(t, key)] = group_imp.get((t, key), 0) + 1
                group_clk[(t, key)] = group_clk.get((t, key), 0) + label
    for key in tracked:
        imps = [group_imp.get((t, key), 0) for t in range(len(periods))]
        tot = sum(imps)
        if tot == 0:
            continue
        avg_ctr = sum(group_clk.get((t, key), 0.0) for t in range(len(periods))) / tot
        for t, p in enumerate(periods):
            if imps[t] == 0:
                continue
            q = group_clk.get((t, key), 0.0) / imps[t]
            cells.append(KlCell(p.index, "group:" + "|".join(map(str, key)),
                                "INSTANCE_GROUP", kl_distance(q, avg_ctr),
                                imps[t], sparse=imps[t] < min_impressions))
    return cells


def mean_kl(cells: list[KlCell], granularity: str) -> float:
    vals = [c.kl for c in cells if c.granularity == granularity and not c.sparse]
    if not vals:
        return float("nan")
    return float(np.mean(vals))
