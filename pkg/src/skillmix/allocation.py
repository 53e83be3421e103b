"""Task-skill allocation: logits, relaxed Bernoulli sampling, diagnostics.

A task selects skills through one logits matrix per layer. During training
each cell is sampled from a relaxed Bernoulli (Gumbel-sigmoid) so the binary
choice stays differentiable; at evaluation time the deterministic u=0.5 path
is used, which collapses to sigmoid(z / tau). Rows are normalised before
composition so the number of active skills does not change the norm of the
composed parameters.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import xlogy

from .autodiff import SeedLike, Tensor, as_rng, div, full, reduce_sum, sigmoid, tensor
from .errors import DegenerateMatrixError, DomainError, ShapeError

# Uniform draws are clamped away from {0,1} so logit(u) stays finite.
UNIFORM_EPS = 1e-7


@dataclass
class AllocationLogits:
    """Unconstrained real matrix [num_tasks, num_skills], one per layer."""

    z: Tensor
    layer_id: int = 0

    def __post_init__(self):
        if self.z.ndim != 2:
            raise ShapeError(f"allocation logits must be 2-D, got shape {self.z.shape}")
        if not np.all(np.isfinite(self.z.data)):
            raise DomainError("allocation logits must be finite")

    @property
    def num_tasks(self) -> int:
        return self.z.shape[0]

    @property
    def num_skills(self) -> int:
        return self.z.shape[1]


@dataclass
class RelaxedAllocation:
    """Sampled relaxed matrix with entries strictly inside (0, 1)."""

    z_hat: Tensor
    tau: float
    draws: np.ndarray = field(repr=False)


@dataclass
class BinaryAllocation:
    """Hardened 0/1 matrix."""

    b: np.ndarray

    def __post_init__(self):
        self.b = np.asarray(self.b)
        if not np.isin(self.b, (0, 1)).all():
            raise DomainError("binary allocation entries must be 0 or 1")
        self.b = self.b.astype(np.int64)


def init_logits(num_tasks: int, num_skills: int, init_value: float = 0.0, layer_id: int = 0) -> AllocationLogits:
    """Constant-filled logits; the 0.0 default puts every cell at probability 0.5."""
    if num_tasks < 1 or num_skills < 1:
        raise ShapeError("task and skill counts must be >= 1")
    return AllocationLogits(full((num_tasks, num_skills), init_value, requires_grad=True), layer_id)


def gumbel_sigmoid_sample(logits: AllocationLogits, tau: float, seed: SeedLike) -> RelaxedAllocation:
    """Relaxed Bernoulli sample: sigmoid((z + logit(u)) / tau), u ~ Uniform(0,1).

    Reparameterised, so gradients flow to the logits with u held fixed. The
    hardened sample exceeds 0.5 exactly when z + logit(u) > 0, hence
    P(sample > 0.5) = sigmoid(z) for every tau.
    """
    if tau <= 0:
        raise DomainError("temperature must be positive")
    u = as_rng(seed).uniform(size=logits.z.shape)
    u = np.clip(u, UNIFORM_EPS, 1.0 - UNIFORM_EPS)
    noise = np.log(u) - np.log1p(-u)
    z_hat = sigmoid((logits.z + tensor(noise)) * (1.0 / tau))
    return RelaxedAllocation(z_hat, float(tau), u)


def expected_allocation(logits: AllocationLogits, tau: float) -> RelaxedAllocation:
    """Deterministic u=0.5 path, sigmoid(z / tau); used at evaluation time."""
    if tau <= 0:
        raise DomainError("temperature must be positive")
    z_hat = sigmoid(logits.z * (1.0 / tau))
    draws = np.full(logits.z.shape, 0.5)
    return RelaxedAllocation(z_hat, float(tau), draws)


def normalize_rows(alloc: RelaxedAllocation | Tensor | np.ndarray) -> Tensor:
    """Scale every row to sum to one; invariant under positive row scaling."""
    t = alloc.z_hat if isinstance(alloc, RelaxedAllocation) else alloc
    if not isinstance(t, Tensor):
        t = tensor(t)
    if t.ndim != 2:
        raise ShapeError(f"row normalisation needs a 2-D matrix, got shape {t.shape}")
    sums = reduce_sum(t, axis=1, keepdims=True)
    if np.any(sums.data < 1e-12):
        raise DegenerateMatrixError("row sum below 1e-12; cannot normalise")
    return div(t, sums)


def _round_half_up(values: np.ndarray) -> np.ndarray:
    return np.floor(values + 0.5)


def harden(alloc: RelaxedAllocation | Tensor | np.ndarray) -> BinaryAllocation:
    """Round every cell at threshold 0.5 (0.5 rounds up)."""
    if isinstance(alloc, RelaxedAllocation):
        values = alloc.z_hat.data
    elif isinstance(alloc, Tensor):
        values = alloc.data
    else:
        values = np.asarray(alloc, dtype=np.float64)
    return BinaryAllocation(_round_half_up(values).astype(np.int64))


# ---------------------------------------------------------------------------
# diagnostics of an allocation matrix, all normalised into [0, 1]


def _checked_unit_matrix(z_hat) -> np.ndarray:
    m = np.asarray(z_hat, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    if np.any(m < 0.0) or np.any(m > 1.0):
        raise DomainError("matrix entries must lie in [0, 1]")
    return m


def metric_discreteness(z_hat) -> float:
    """Mean binary entropy per cell divided by log 2; 0 for a binary matrix."""
    m = _checked_unit_matrix(z_hat)
    cell_entropy = -(xlogy(m, m) + xlogy(1.0 - m, 1.0 - m))
    return float(cell_entropy.mean() / math.log(2.0))


def metric_sparsity(z_hat) -> float:
    """Fraction of cells that round to one."""
    m = _checked_unit_matrix(z_hat)
    return float(_round_half_up(m).mean())


def metric_usage(z_hat) -> float:
    """Normalised entropy of the column-sum distribution; 1 means balanced use."""
    m = _checked_unit_matrix(z_hat)
    column_mass = m.sum(axis=0)
    total = column_mass.sum()
    if total <= 0.0:
        raise DegenerateMatrixError("all-zero matrix has no usage distribution")
    if m.shape[1] == 1:
        return 1.0
    p = column_mass / total
    entropy = float(-xlogy(p, p).sum())
    return entropy / math.log(m.shape[1])


# ---------------------------------------------------------------------------
# serialisation


def logits_to_json(logits: AllocationLogits, task_names: list[str]) -> str:
    if len(task_names) != logits.num_tasks:
        raise ShapeError("one task name per row is required")
    doc = {
        "tasks": list(task_names),
        "skills": logits.num_skills,
        "layer": logits.layer_id,
        "logits": logits.z.data.tolist(),
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def logits_from_json(text: str) -> tuple[AllocationLogits, list[str]]:
    doc = json.loads(text)
    z = np.asarray(doc["logits"], dtype=np.float64)
    if z.ndim != 2 or z.shape != (len(doc["tasks"]), doc["skills"]):
        raise ShapeError("logits payload does not match declared tasks/skills")
    return AllocationLogits(tensor(z, requires_grad=True), int(doc["layer"])), list(doc["tasks"])


def hardened_to_csv(binary: BinaryAllocation, task_names: list[str]) -> str:
    if len(task_names) != binary.b.shape[0]:
        raise ShapeError("one task name per row is required")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["task"] + [f"skill_{j}" for j in range(binary.b.shape[1])])
    for name, row in zip(task_names, binary.b):
        writer.writerow([name] + [int(v) for v in row])
    return buf.getvalue()


def hardened_from_csv(text: str) -> tuple[BinaryAllocation, list[str]]:
    rows = list(csv.reader(io.StringIO(text)))
    names = [r[0] for r in rows[1:]]
    values = np.asarray([[int(v) for v in r[1:]] for r in rows[1:]], dtype=np.int64)
    return BinaryAllocation(values), names
