"""Similarity-based training losses for counterfactual sets.

Six losses over similarity matrices: a contrastive baseline (row-wise
log-softmax on the diagonal), a within-set pairwise sigmoid loss, an
across-set sigmoid loss on each set's real-pair representative, their sum,
a two-way word-order loss, and the overall total. All are pure functions
of (similarities, temperature, bias) built on the autodiff engine, so the
same code path serves evaluation and training.

Every loss reports how many similarity evaluations it consumed. The set
structure needs n*m^2 + n*(n-1) evaluations per batch instead of the
all-pairs (n*m)^2, which is the mechanism behind the training-time saving
claimed for this loss family.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .errors import InsufficientSetsError, LabelError, SetStructureError, ShapeError

log = logging.getLogger(__name__)

DEFAULT_TAU_INIT = 10.0
DEFAULT_BIAS_INIT = -10.0


class LossParams:
    """Learnable temperature and bias.

    tau is stored as a log so it stays positive under gradient steps;
    loss functions receive the exp'd tensor.
    """

    def __init__(self, init_tau=DEFAULT_TAU_INIT, init_bias=DEFAULT_BIAS_INIT):
        if init_tau <= 0:
            raise ValueError("tau must be positive")
        self.log_tau = ad.parameter(np.log(float(init_tau)))
        self.bias = ad.parameter(float(init_bias))

    def tau(self) -> ad.Tensor:
        return self.log_tau.exp()

    def named(self):
        return {"loss.log_tau": self.log_tau, "loss.bias": self.bias}

    def values(self):
        return {"tau": float(np.exp(self.log_tau.data)), "bias": float(self.bias.data)}


@dataclass
class LossReport:
    value: float
    similarity_eval_count: int
    components: dict = field(default_factory=dict)

    def to_json_dict(self):
        return {
            "value": self.value,
            "similarity_eval_count": self.similarity_eval_count,
            "components": dict(self.components),
        }


def _as_tensor(x) -> ad.Tensor:
    return x if isinstance(x, ad.Tensor) else ad.constant(np.asarray(x, dtype=np.float64))


def pair_labels(m: int) -> np.ndarray:
    """Canonical within-set label matrix: +1 on the diagonal (each image
    matches its own caption), -1 everywhere else."""
    return 2.0 * np.eye(m) - 1.0


def _check_labels(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.float64)
    if not np.all(np.isin(labels, (-1.0, 1.0))):
        raise LabelError("label entries must be +1 or -1")
    return labels


def contrastive_loss(sims, tau) -> tuple[ad.Tensor, LossReport]:
    """Row-wise log-softmax loss favoring the diagonal (the usual
    image-to-text contrastive objective)."""
    sims = _as_tensor(sims)
    tau = _as_tensor(tau)
    if sims.ndim != 2 or sims.shape[0] != sims.shape[1]:
        raise ShapeError(f"contrastive loss needs a square matrix, got {sims.shape}")
    b = sims.shape[0]
    logits = sims * (1.0 / tau)
    diag = logits[np.arange(b), np.arange(b)]
    loss = (ad.logsumexp(logits, axis=1) - diag).sum()
    report = LossReport(loss.item(), b * b, {"contrastive": loss.item()})
    return loss, report


def intra_set_loss(sims, labels, tau, bias) -> tuple[ad.Tensor, LossReport]:
    """Pairwise sigmoid loss over all m^2 image-caption pairs in one set."""
    sims = _as_tensor(sims)
    tau = _as_tensor(tau)
    bias = _as_tensor(bias)
    labels = _check_labels(labels)
    if sims.shape != labels.shape:
        raise ShapeError(f"similarities {sims.shape} vs labels {labels.shape}")
    m = sims.shape[0]
    z = ad.constant(labels) * (sims * (-1.0 * tau) + bias)
    loss = ad.softplus(z).sum()
    report = LossReport(loss.item(), m * m, {"intra": loss.item()})
    return loss, report


def inter_set_loss(rep_sims, tau, bias) -> tuple[ad.Tensor, LossReport]:
    """Sigmoid loss pushing apart real-pair representatives of different
    sets; the diagonal (each set against itself) is excluded."""
    rep_sims = _as_tensor(rep_sims)
    tau = _as_tensor(tau)
    bias = _as_tensor(bias)
    if rep_sims.ndim != 2 or rep_sims.shape[0] != rep_sims.shape[1]:
        raise ShapeError(f"inter-set loss needs a square matrix, got {rep_sims.shape}")
    n = rep_sims.shape[0]
    if n < 2:
        raise InsufficientSetsError("inter-set loss needs at least 2 sets")
    off_diag = ad.constant(1.0 - np.eye(n))
    loss = (ad.softplus(rep_sims * tau - bias) * off_diag).sum()
    report = LossReport(loss.item(), n * (n - 1), {"inter": loss.item()})
    return loss, report


def sets_loss(intra_sims: Sequence, rep_sims, tau, bias,
              labels: Optional[Sequence[np.ndarray]] = None) -> tuple[ad.Tensor, LossReport]:
    """Combined set loss: inter-set term plus one intra-set term per set.

    `intra_sims` is a sequence of n same-sized m x m similarity matrices
    (index 0 of each set is the real pair); `rep_sims` is the n x n matrix
    of real-pair similarities across sets (ignored when n == 1, where the
    inter term is defined as 0).
    """
    n = len(intra_sims)
    if n == 0:
        raise SetStructureError("sets loss needs at least one set")
    m = intra_sims[0].shape[0]
    for s in intra_sims:
        if s.shape != (m, m):
            raise SetStructureError("all sets must share the same size m")
    if labels is None:
        labels = [pair_labels(m)] * n

    total = None
    count = 0
    intra_value = 0.0
    for sims, lab in zip(intra_sims, labels):
        loss, rep = intra_set_loss(sims, lab, tau, bias)
        total = loss if total is None else total + loss
        count += rep.similarity_eval_count
        intra_value += rep.value
    inter_value = 0.0
    if n >= 2:
        if rep_sims is None:
            raise SetStructureError("rep_sims required for n >= 2 sets")
        inter, rep = inter_set_loss(rep_sims, tau, bias)
        total = total + inter
        count += rep.similarity_eval_count
        inter_value = rep.value
    else:
        log.warning("single-set batch: inter-set loss defined as 0")
    report = LossReport(total.item(), count, {"intra": intra_value, "inter": inter_value})
    return total, report


def neg_text_loss(pos_sims, neg_sims, tau) -> tuple[ad.Tensor, LossReport]:
    """Two-way softmax between each caption and its word-order permutation
    scored against the same image."""
    pos = _as_tensor(pos_sims)
    neg = _as_tensor(neg_sims)
    tau = _as_tensor(tau)
    if pos.shape != neg.shape or pos.ndim != 1:
        raise ShapeError(f"pos/neg similarity vectors must match, got {pos.shape} vs {neg.shape}")
    b = pos.shape[0]
    if b == 0:
        raise ShapeError("neg-text loss needs at least one item")
    loss = ad.softplus((neg - pos) * (1.0 / tau)).sum()
    report = LossReport(loss.item(), 2 * b, {"neg": loss.item()})
    return loss, report


def total_loss(intra_sims, rep_sims, tau, bias,
               pos_sims=None, neg_sims=None,
               labels=None, include_neg=True) -> tuple[ad.Tensor, LossReport]:
    """Overall fine-tuning loss: set loss plus (optionally) the word-order
    loss. With include_neg=False or absent permutation inputs it reduces
    to the set loss exactly (the ablation mode)."""
    loss, report = sets_loss(intra_sims, rep_sims, tau, bias, labels=labels)
    components = dict(report.components)
    count = report.similarity_eval_count
    if include_neg and pos_sims is not None:
        nloss, nrep = neg_text_loss(pos_sims, neg_sims, tau)
        loss = loss + nloss
        components.update(nrep.components)
        count += nrep.similarity_eval_count
    else:
        components["neg"] = 0.0
    return loss, LossReport(loss.item(), count, components)


def sets_eval_count(n: int, m: int) -> int:
    """Similarity evaluations consumed by the set loss on n sets of size m."""
    return n * m * m + n * (n - 1)


def all_pairs_eval_count(n: int, m: int) -> int:
    """Evaluations for the all-pairs alternative on the same batch."""
    return (n * m) ** 2
