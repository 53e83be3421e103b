"""Scoring a learned allocation against the planted ground truth.

Learned skills have no canonical order, so the score maximises cell
agreement over injective assignments of true columns into learned columns.
The exhaustive search doubles as the oracle for the assignment-solver path.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np
from scipy.optimize import linear_sum_assignment

from .allocation import BinaryAllocation
from .errors import ContractError

EXACT_SEARCH_LIMIT = 8


@dataclass
class RecoveryScore:
    best_permutation: tuple[int, ...]  # learned column index per true column
    cell_accuracy: float


def _as_binary(z) -> np.ndarray:
    if isinstance(z, BinaryAllocation):
        return z.b
    return BinaryAllocation(np.asarray(z)).b


def _agreement_matrix(learned: np.ndarray, true: np.ndarray) -> np.ndarray:
    """[true_cols, learned_cols] count of rows on which the columns agree."""
    num_tasks = learned.shape[0]
    eq = true.T[:, None, :] == learned.T[None, :, :]
    return eq.sum(axis=2).astype(np.int64).reshape(true.shape[1], learned.shape[1])


def recovery_exhaustive(learned, true) -> RecoveryScore:
    learned, true = _as_binary(learned), _as_binary(true)
    agreement = _agreement_matrix(learned, true)
    num_true = true.shape[1]
    best, best_perm = -1, None
    for perm in permutations(range(learned.shape[1]), num_true):
        score = int(sum(agreement[j, perm[j]] for j in range(num_true)))
        if score > best:
            best, best_perm = score, perm
    return RecoveryScore(tuple(best_perm), best / (learned.shape[0] * num_true))


def recovery_assignment(learned, true) -> RecoveryScore:
    """Hungarian assignment on the disagreement cost matrix; same optimum."""
    learned, true = _as_binary(learned), _as_binary(true)
    agreement = _agreement_matrix(learned, true)
    cost = learned.shape[0] - agreement  # disagreements
    rows, cols = linear_sum_assignment(cost)
    perm = tuple(int(cols[list(rows).index(j)]) for j in range(true.shape[1]))
    total = int(agreement[rows, cols].sum())
    return RecoveryScore(perm, total / (learned.shape[0] * true.shape[1]))


def skill_recovery_score(learned, true) -> RecoveryScore:
    """Best-permutation cell accuracy of a hardened learned matrix vs truth."""
    learned_b, true_b = _as_binary(learned), _as_binary(true)
    if learned_b.shape[0] != true_b.shape[0]:
        raise ContractError("learned and true matrices must cover the same tasks")
    if learned_b.shape[1] < true_b.shape[1]:
        raise ContractError("learned inventory must be at least as large as the true one")
    if true_b.shape[1] <= EXACT_SEARCH_LIMIT:
        return recovery_exhaustive(learned_b, true_b)
    return recovery_assignment(learned_b, true_b)
