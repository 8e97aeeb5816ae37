"""Class-wise contrastive learning over bounded memory banks.

Queries matched to pseudo-labels contribute foreground features (fused
across decoder layers and L2-normalized); every unmatched query lands in
the background bank, which only ever serves as negatives.  Stored bank
entries are detached: gradients reach current-batch features alone.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .matching import Assignment

BACKGROUND = 0

# Large negative logit shift: exp() underflows to exactly 0, which removes
# the anchor's own key from its denominator without changing any other term.
_EXCLUDE = -1e30


class MemoryBankSet:
    """k+1 bounded queues of unit-norm feature rows (index 0 = background)."""

    def __init__(self, num_classes: int, capacity: int, feature_dim: int):
        if num_classes < 1 or capacity < 1:
            raise ValueError("memory banks need num_classes >= 1 and capacity >= 1")
        self.num_classes = num_classes
        self.capacity = capacity
        self.feature_dim = feature_dim
        self._features: list[list[np.ndarray]] = [[] for _ in range(num_classes + 1)]
        self._counters: list[list[int]] = [[] for _ in range(num_classes + 1)]
        self._next_counter = [0] * (num_classes + 1)

    def __len__(self) -> int:
        return sum(len(bank) for bank in self._features)

    def lengths(self) -> list[int]:
        return [len(bank) for bank in self._features]

    def features(self, class_id: int) -> np.ndarray:
        bank = self._features[class_id]
        if not bank:
            return np.zeros((0, self.feature_dim))
        return np.stack(bank)

    def counters(self, class_id: int) -> list[int]:
        return list(self._counters[class_id])

    def insert(self, class_id: int, vec: np.ndarray, strategy: str = "fifo",
               rng: np.random.Generator | None = None) -> None:
        if not 0 <= class_id <= self.num_classes:
            raise ValueError(f"bank class id {class_id} outside [0..{self.num_classes}]")
        vec = np.asarray(vec, dtype=np.float64).reshape(-1).copy()
        feats, counts = self._features[class_id], self._counters[class_id]
        stamp = self._next_counter[class_id]
        self._next_counter[class_id] += 1
        if len(feats) < self.capacity:
            feats.append(vec)
            counts.append(stamp)
            return
        if strategy == "fifo":
            feats.pop(0)
            counts.pop(0)
            feats.append(vec)
            counts.append(stamp)
            return
        if strategy == "random":
            if rng is None:
                raise ValueError("random replacement needs an rng")
            victim = int(rng.integers(len(feats)))
        elif strategy == "center":
            # evict the entry farthest from the current class center
            center = np.mean(np.stack(feats), axis=0)
            dists = [float(np.sum((f - center) ** 2)) for f in feats]
            victim = int(np.argmax(dists))
        else:
            raise ValueError(f"unknown bank strategy '{strategy}'")
        feats[victim] = vec
        counts[victim] = stamp

    def serialize(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for cid in range(self.num_classes + 1):
            prefix = f"membank/bank{cid}"
            out[f"{prefix}/features"] = self.features(cid)
            out[f"{prefix}/counters"] = np.asarray(self._counters[cid], dtype=np.float64)
            out[f"{prefix}/next"] = np.asarray(float(self._next_counter[cid]))
        return out

    @classmethod
    def restore(cls, num_classes: int, capacity: int, feature_dim: int,
                record: dict[str, np.ndarray]) -> "MemoryBankSet":
        banks = cls(num_classes, capacity, feature_dim)
        for cid in range(num_classes + 1):
            prefix = f"membank/bank{cid}"
            feats = record.get(f"{prefix}/features")
            counts = record.get(f"{prefix}/counters")
            if feats is None or counts is None:
                continue
            banks._features[cid] = [row.copy() for row in np.asarray(feats).reshape(-1, feature_dim)]
            banks._counters[cid] = [int(c) for c in np.asarray(counts).reshape(-1)]
            banks._next_counter[cid] = int(record.get(f"{prefix}/next", len(counts)))
        return banks


def fuse_query_features(query_feats_per_layer: list[Tensor]):
    """Scale-wise sum of decoder query features, then row L2 normalization.

    Returns (fused Tensor (n_q, C), valid bool mask); rows that cancel to
    an exactly zero vector are flagged invalid and skipped downstream.
    """
    if not query_feats_per_layer:
        raise ValueError("fuse_query_features: need at least one layer")
    summed = query_feats_per_layer[0]
    for layer in query_feats_per_layer[1:]:
        summed = ad.add(summed, layer)
    norms = np.sqrt(np.sum(summed.data ** 2, axis=1))
    valid = norms > 0
    safe = np.where(valid, norms, 1.0)
    fused = ad.div(summed, Tensor(safe.reshape(-1, 1)))
    return fused, valid


def assign_pairs(fused_valid: np.ndarray, assignment: Assignment,
                 pseudo_classes: np.ndarray) -> np.ndarray:
    """Per-query contrastive labels from the bipartite matching.

    Returns int labels of length n_q: class id for queries matched to a
    pseudo-label, 0 (background) for unmatched ones, -1 for queries whose
    fused feature was invalid.
    """
    n_q = fused_valid.shape[0]
    labels = np.zeros(n_q, dtype=np.intp)
    classes = np.asarray(pseudo_classes, dtype=np.intp).reshape(-1)
    for q, t in assignment.pairs:
        labels[q] = classes[t]
    labels[~fused_valid] = -1
    return labels


def update_banks(banks: MemoryBankSet, fused_data: np.ndarray, labels: np.ndarray,
                 strategy: str = "fifo", rng: np.random.Generator | None = None) -> MemoryBankSet:
    """Append one image's features (detached) in query order."""
    for q in range(labels.shape[0]):
        if labels[q] >= 0:
            banks.insert(int(labels[q]), fused_data[q], strategy=strategy, rng=rng)
    return banks


def contrastive_loss(banks: MemoryBankSet, batch: list[tuple[Tensor, np.ndarray]],
                     temperature: float = 0.07) -> Tensor:
    """Supervised contrastive loss over batch features and stored banks.

    Anchors are current-batch foreground features; positives are same-class
    members across batch and banks (anchor excluded); the denominator runs
    over every key (all banks plus the whole batch) except the anchor.
    Classes are averaged over those contributing at least one anchor with
    at least one positive.  Returns 0 when no such class exists.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")

    row_tensors: list[Tensor] = []
    label_chunks: list[np.ndarray] = []
    for fused, labels in batch:
        keep = np.nonzero(labels >= 0)[0]
        if keep.size:
            row_tensors.append(ad.take_rows(fused, keep))
            label_chunks.append(labels[keep])
    if not row_tensors:
        return Tensor(0.0)
    batch_labels = np.concatenate(label_chunks)
    batch_t = ad.concat(row_tensors, axis=0) if len(row_tensors) > 1 else row_tensors[0]

    bank_feats = [banks.features(cid) for cid in range(banks.num_classes + 1)]
    bank_labels = np.concatenate([np.full(f.shape[0], cid, dtype=np.intp)
                                  for cid, f in enumerate(bank_feats)])
    bank_matrix = np.concatenate([f for f in bank_feats], axis=0) \
        if bank_labels.size else np.zeros((0, banks.feature_dim))

    all_labels = np.concatenate([batch_labels, bank_labels])
    n_batch = batch_labels.shape[0]

    # anchor selection (background is never an anchor; needs >= 1 positive)
    anchor_rows, anchor_classes = [], []
    for i in range(n_batch):
        c = batch_labels[i]
        if c == BACKGROUND:
            continue
        same = np.sum(all_labels == c) - 1  # minus the anchor itself
        if same >= 1:
            anchor_rows.append(i)
            anchor_classes.append(c)
    if not anchor_rows:
        return Tensor(0.0)
    anchor_classes = np.asarray(anchor_classes)
    contributing = np.unique(anchor_classes)

    keys_t = ad.concat([batch_t, Tensor(bank_matrix)], axis=0) \
        if bank_matrix.shape[0] else batch_t
    anchors_t = ad.take_rows(batch_t, anchor_rows)
    logits = ad.div(ad.matmul(anchors_t, ad.transpose(keys_t)), temperature)

    n_keys = all_labels.shape[0]
    exclude = np.zeros((len(anchor_rows), n_keys))
    pos_mask = np.zeros((len(anchor_rows), n_keys))
    for a, (row, c) in enumerate(zip(anchor_rows, anchor_classes)):
        pos_mask[a] = (all_labels == c).astype(np.float64)
        pos_mask[a, row] = 0.0
        exclude[a, row] = _EXCLUDE
    lse = ad.logsumexp(ad.add(logits, Tensor(exclude)), axis=1)
    pos_counts = pos_mask.sum(axis=1)
    pos_mean = ad.div(ad.sum_(ad.mul(logits, Tensor(pos_mask)), axis=1),
                      Tensor(pos_counts))
    per_anchor = ad.sub(lse, pos_mean)

    coeff = np.zeros(len(anchor_rows))
    for c in contributing:
        members = anchor_classes == c
        coeff[members] = 1.0 / (contributing.size * members.sum())
    return ad.sum_(ad.mul(per_anchor, Tensor(coeff)))
