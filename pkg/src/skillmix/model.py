"""Per-task networks assembled from composed layer parameters.

A model is a stack of linear layers whose parameters are produced, per task,
by one of two mechanisms:

  * skill composition: a (learned or fixed) allocation row is normalised into
    simplex weights and mixed over a skill inventory on top of a shared base;
  * hypernetwork generation: low-rank adapters are generated from a task
    embedding and applied around the base map.

The layers are linear on purpose: the synthetic benchmark's targets are
linear, so a realisable world admits exactly zero loss while the two-layer
stack still exercises per-layer allocation.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from . import skills as sk
from .allocation import (
    AllocationLogits,
    expected_allocation,
    gumbel_sigmoid_sample,
    init_logits,
    normalize_rows,
)
from .autodiff import (
    Tensor,
    add,
    matmul,
    narrow,
    reshape,
    take_row,
    tensor,
    transpose,
    zeros,
)
from .baselines import FixedAllocation, HyperNet, hypernet_generate, new_hypernet
from .errors import ContractError, ShapeError, TaskLookupError

MODEL_KINDS = ("skilled", "private", "shared", "expert", "hypernet")


@dataclass(frozen=True)
class LayerShape:
    in_dim: int
    out_dim: int

    @property
    def flat_dim(self) -> int:
        return self.out_dim * self.in_dim + self.out_dim


def _affine(x: Tensor, theta: Tensor, shape: LayerShape) -> Tensor:
    """Unflatten theta into (weight, bias) and apply x @ W^T + b."""
    o, i = shape.out_dim, shape.in_dim
    weight = reshape(narrow(theta, 0, o * i), (o, i))
    bias = narrow(theta, o * i, o)
    return add(matmul(x, transpose(weight)), bias)


# ---------------------------------------------------------------------------
# layer stores


class DenseLayer:
    def __init__(self, shape: LayerShape, num_skills: int, rng):
        self.shape = shape
        self.skills = sk.new_dense_skills(num_skills, shape.flat_dim, rng)

    def forward(self, x: Tensor, w: Tensor) -> Tensor:
        return _affine(x, sk.compose_dense(self.skills, w), self.shape)

    def forward_fresh(self, x: Tensor, fresh: list[Tensor]) -> Tensor:
        return _affine(x, add(self.skills.base, fresh[0]), self.shape)

    def new_fresh_skill(self, rng) -> list[Tensor]:
        # A fresh skill starts at zero so the composed map starts at the base.
        return [zeros((self.shape.flat_dim,), requires_grad=True)]

    def phi_parameters(self) -> list[Tensor]:
        return [self.skills.phi]

    def base_parameters(self) -> list[Tensor]:
        return [self.skills.base]


class SparseLayer:
    """Dense during warm-up; composition is mask-restricted once frozen."""

    def __init__(self, shape: LayerShape, num_skills: int, sparsity: float, rng):
        self.shape = shape
        self.skills = sk.new_sparse_skills(num_skills, shape.flat_dim, sparsity, rng)
        self._phi_init = self.skills.phi.data.copy()

    def freeze(self) -> None:
        sk.freeze_mask(self.skills, self._phi_init)

    def forward(self, x: Tensor, w: Tensor) -> Tensor:
        if self.skills.mask is None:
            dense_view = sk.DenseSkills(self.skills.phi, self.skills.base)
            return _affine(x, sk.compose_dense(dense_view, w), self.shape)
        return _affine(x, sk.compose_sparse(self.skills, w), self.shape)

    def forward_fresh(self, x: Tensor, fresh: list[Tensor]) -> Tensor:
        return _affine(x, add(self.skills.base, fresh[0]), self.shape)

    def new_fresh_skill(self, rng) -> list[Tensor]:
        return [zeros((self.shape.flat_dim,), requires_grad=True)]

    def phi_parameters(self) -> list[Tensor]:
        return [self.skills.phi]

    def base_parameters(self) -> list[Tensor]:
        return [self.skills.base]


class LowRankLayer:
    def __init__(self, shape: LayerShape, num_skills: int, rank: int, rng):
        if rank > min(shape.in_dim, shape.out_dim):
            raise ShapeError(
                f"rank {rank} exceeds layer dims ({shape.out_dim}, {shape.in_dim})"
            )
        self.shape = shape
        self.skills = sk.new_lowrank_skills(num_skills, shape.out_dim, shape.in_dim, rank, rng)

    def forward(self, x: Tensor, w: Tensor) -> Tensor:
        return sk.lora_forward(x, self.skills, w)

    def forward_fresh(self, x: Tensor, fresh: list[Tensor]) -> Tensor:
        a, b = fresh
        y = matmul(x, transpose(self.skills.W0))
        y = add(y, matmul(matmul(x, transpose(b)), transpose(a)))
        return add(y, self.skills.b0)

    def new_fresh_skill(self, rng) -> list[Tensor]:
        from .autodiff import kaiming_uniform

        a = zeros((self.shape.out_dim, self.skills.rank), requires_grad=True)
        b = kaiming_uniform((self.skills.rank, self.shape.in_dim), rng, requires_grad=True)
        return [a, b]

    def phi_parameters(self) -> list[Tensor]:
        return [self.skills.A, self.skills.B]

    def base_parameters(self) -> list[Tensor]:
        return [self.skills.W0, self.skills.b0]


class HypernetLayer:
    def __init__(self, shape: LayerShape, embeddings: Tensor, rank: int, rng):
        from .autodiff import kaiming_uniform

        self.shape = shape
        rank = min(rank, shape.in_dim, shape.out_dim)
        self.hypernet: HyperNet = new_hypernet(
            embeddings.shape[0],
            embeddings.shape[1],
            shape.out_dim,
            shape.in_dim,
            rank,
            rng,
            shared_embeddings=embeddings,
        )
        self.W0 = kaiming_uniform((shape.out_dim, shape.in_dim), rng, requires_grad=True)
        self.b0 = kaiming_uniform((shape.out_dim,), rng, requires_grad=True)

    def forward(self, x: Tensor, task: int) -> Tensor:
        a, b = hypernet_generate(task, self.hypernet)
        y = matmul(x, transpose(self.W0))
        y = add(y, matmul(matmul(x, transpose(b)), transpose(a)))
        return add(y, self.b0)

    def phi_parameters(self) -> list[Tensor]:
        return self.hypernet.generator_parameters()

    def base_parameters(self) -> list[Tensor]:
        return [self.W0, self.b0]


# ---------------------------------------------------------------------------
# allocation state


class LearnedAllocationState:
    """Per-layer (or one global) logits matrices plus rows added for new tasks."""

    def __init__(
        self,
        num_tasks: int,
        num_layers: int,
        num_skills: int,
        tau: float = 1.0,
        mode: str = "per_layer",
        frozen: np.ndarray | None = None,
        init_value: float = 0.0,
    ):
        if mode not in ("per_layer", "global"):
            raise ContractError(f"unknown allocation mode '{mode}'")
        self.mode = mode
        self.tau = float(tau)
        self.num_layers = num_layers
        self.num_base_tasks = num_tasks
        self.frozen = None
        self.matrices: list[AllocationLogits] = []
        self.extra_rows: list[list[Tensor]] = []  # one [1, S] tensor per matrix per new task
        self._extra_bits: list[np.ndarray] = []
        if frozen is not None:
            frozen = np.asarray(frozen)
            if frozen.shape[0] != num_tasks or frozen.shape[1] != num_skills:
                raise ShapeError("frozen allocation shape disagrees with tasks/skills")
            self.frozen = frozen.astype(np.float64)
        else:
            count = num_layers if mode == "per_layer" else 1
            self.matrices = [
                init_logits(num_tasks, num_skills, init_value, layer_id=l) for l in range(count)
            ]
        self.num_skills = num_skills

    @property
    def num_tasks(self) -> int:
        return self.num_base_tasks + len(self.extra_rows) + len(self._extra_bits)

    def _matrix_index(self, layer: int) -> int:
        return layer if self.mode == "per_layer" else 0

    def add_task(self, init_value: float = 0.0) -> int:
        """Fresh learnable logits row(s) for a new task, initialised at init_value."""
        if self.frozen is not None:
            raise ContractError("cannot add a learnable row to a frozen allocation")
        rows = [
            tensor(np.full((1, self.num_skills), float(init_value)), requires_grad=True)
            for _ in self.matrices
        ]
        self.extra_rows.append(rows)
        return self.num_tasks - 1

    def new_task_parameters(self, task: int) -> list[Tensor]:
        return self.extra_rows[task - self.num_base_tasks]

    def rows_for_step(self, task: int, train: bool, rng, tau: float | None = None):
        """Per-layer simplex weight rows plus the sampled relaxed matrices.

        The relaxed matrices are returned only for base tasks of a learnable
        allocation (they feed the prior regulariser); one Gumbel draw is made
        per logits matrix per call.
        """
        tau = self.tau if tau is None else tau
        if self.frozen is not None:
            row = self.frozen[task]
            w = tensor(row / row.sum())
            return [w] * self.num_layers, []
        weights, relaxed_mats = [], []
        if task < self.num_base_tasks:
            per_matrix = []
            for logits in self.matrices:
                relaxed = (
                    gumbel_sigmoid_sample(logits, tau, rng)
                    if train
                    else expected_allocation(logits, tau)
                )
                relaxed_mats.append(relaxed)
                per_matrix.append(take_row(normalize_rows(relaxed), task))
            for layer in range(self.num_layers):
                weights.append(per_matrix[self._matrix_index(layer)])
            return weights, relaxed_mats
        extra = self.extra_rows[task - self.num_base_tasks]
        per_matrix = []
        for row_tensor in extra:
            logits = AllocationLogits(row_tensor)
            relaxed = (
                gumbel_sigmoid_sample(logits, tau, rng)
                if train
                else expected_allocation(logits, tau)
            )
            per_matrix.append(take_row(normalize_rows(relaxed), 0))
        for layer in range(self.num_layers):
            weights.append(per_matrix[self._matrix_index(layer)])
        return weights, []

    def eval_matrix(self, layer: int) -> np.ndarray:
        """Deterministic relaxed matrix for this layer, extra rows included."""
        if self.frozen is not None:
            return self.frozen.copy()
        logits = self.matrices[self._matrix_index(layer)]
        blocks = [expected_allocation(logits, self.tau).z_hat.data]
        for rows in self.extra_rows:
            row = rows[self._matrix_index(layer)]
            blocks.append(
                expected_allocation(AllocationLogits(row), self.tau).z_hat.data
            )
        return np.concatenate(blocks, axis=0)

    def z_parameters(self) -> list[Tensor]:
        params = [logits.z for logits in self.matrices]
        for rows in self.extra_rows:
            params.extend(rows)
        return params


class FixedAllocationState:
    """Constant binary allocation shared by all layers."""

    def __init__(self, fixed: FixedAllocation, num_layers: int):
        self.kind = fixed.kind
        self.num_layers = num_layers
        self.matrix = fixed.matrix.b.astype(np.float64)
        self.num_skills = fixed.num_skills
        self._extra_bits: list[np.ndarray] = []

    @property
    def num_base_tasks(self) -> int:
        return self.matrix.shape[0]

    @property
    def num_tasks(self) -> int:
        return self.matrix.shape[0] + len(self._extra_bits)

    def add_task(self, bits) -> int:
        row = np.asarray(bits, dtype=np.float64).reshape(-1)
        if row.shape[0] != self.num_skills:
            raise ShapeError(f"allocation row needs {self.num_skills} entries")
        if row.sum() < 1:
            raise ContractError("a task must activate at least one skill")
        self._extra_bits.append(row)
        return self.num_tasks - 1

    def rows_for_step(self, task: int, train: bool, rng, tau: float | None = None):
        if task < self.matrix.shape[0]:
            row = self.matrix[task]
        else:
            row = self._extra_bits[task - self.matrix.shape[0]]
        w = tensor(row / row.sum())
        return [w] * self.num_layers, []

    def eval_matrix(self, layer: int) -> np.ndarray:
        if self._extra_bits:
            return np.concatenate([self.matrix, np.stack(self._extra_bits)], axis=0)
        return self.matrix.copy()

    def z_parameters(self) -> list[Tensor]:
        return []


# ---------------------------------------------------------------------------
# models


class SkillModel:
    """Skill-composed network: skilled, private, shared and expert kinds."""

    def __init__(self, kind: str, layers: list, alloc):
        self.kind = kind
        self.layers = layers
        self.alloc = alloc
        self._fresh: dict[int, list[list[Tensor]]] = {}  # task -> per-layer fresh params

    @property
    def num_tasks(self) -> int:
        return self.alloc.num_tasks

    def forward(self, task: int, x: Tensor, train: bool = False, rng=None, tau: float | None = None):
        if not 0 <= task < self.num_tasks:
            raise TaskLookupError(f"unknown task index {task}")
        if task in self._fresh:
            h = x
            for layer, fresh in zip(self.layers, self._fresh[task]):
                h = layer.forward_fresh(h, fresh)
            return h, []
        rows, relaxed_mats = self.alloc.rows_for_step(task, train, rng, tau)
        h = x
        for layer, w in zip(self.layers, rows):
            h = layer.forward(h, w)
        return h, relaxed_mats

    # -- task registration for few-shot adaptation ------------------------
    def add_learned_task(self) -> int:
        return self.alloc.add_task()

    def add_fixed_task(self, bits) -> int:
        return self.alloc.add_task(bits)

    def add_fresh_task(self, rng) -> int:
        index = self.alloc.add_task(np.ones(self.alloc.num_skills))  # row is unused
        self._fresh[index] = [layer.new_fresh_skill(rng) for layer in self.layers]
        return index

    def fresh_parameters(self, task: int) -> list[Tensor]:
        return [p for group in self._fresh[task] for p in group]

    # -- parameter access --------------------------------------------------
    def z_parameters(self) -> list[Tensor]:
        return self.alloc.z_parameters()

    def phi_parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.phi_parameters()]

    def base_parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.base_parameters()]

    def named_parameters(self) -> dict[str, Tensor]:
        named: dict[str, Tensor] = {}
        for i, p in enumerate(self.z_parameters()):
            named[f"z.{i}"] = p
        for i, layer in enumerate(self.layers):
            for j, p in enumerate(layer.phi_parameters()):
                named[f"layer{i}.phi.{j}"] = p
            for j, p in enumerate(layer.base_parameters()):
                named[f"layer{i}.base.{j}"] = p
        for task, groups in self._fresh.items():
            for li, group in enumerate(groups):
                for j, p in enumerate(group):
                    named[f"fresh{task}.layer{li}.{j}"] = p
        return named

    def allocation_eval_matrices(self) -> list[np.ndarray]:
        return [self.alloc.eval_matrix(layer) for layer in range(len(self.layers))]

    def freeze_sparse_masks(self) -> None:
        for layer in self.layers:
            if isinstance(layer, SparseLayer):
                layer.freeze()

    def param_count(self) -> int:
        return int(sum(p.size for p in self.named_parameters().values()))

    def clone(self) -> "SkillModel":
        return copy.deepcopy(self)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        named = self.named_parameters()
        for name, data in snap.items():
            named[name].data[...] = data


class HypernetModel:
    """Task-embedding-conditioned generation of per-layer low-rank adapters."""

    def __init__(self, num_tasks: int, embed_dim: int, shapes: list[LayerShape], rank: int, rng):
        from .autodiff import kaiming_uniform

        self.kind = "hypernet"
        self.embeddings = kaiming_uniform((num_tasks, embed_dim), rng, requires_grad=True)
        self.layers = [HypernetLayer(shape, self.embeddings, rank, rng) for shape in shapes]
        self._num_base_tasks = num_tasks

    @property
    def num_tasks(self) -> int:
        return self.layers[0].hypernet.num_tasks

    def forward(self, task: int, x: Tensor, train: bool = False, rng=None, tau: float | None = None):
        if not 0 <= task < self.num_tasks:
            raise TaskLookupError(f"unknown task index {task}")
        h = x
        for layer in self.layers:
            h = layer.forward(h, task)
        return h, []

    def add_task_embedding(self) -> int:
        # Fresh tasks start from the mean trained embedding: a neutral point
        # that transfers and gives non-zero relu gradients.
        mean = self.embeddings.data.mean(axis=0, keepdims=True)
        fresh = tensor(mean.copy(), requires_grad=True)
        index = None
        for layer in self.layers:
            index = layer.hypernet.add_task_embedding(fresh)
        return index

    def new_task_parameters(self, task: int) -> list[Tensor]:
        base = self._num_base_tasks
        return [self.layers[0].hypernet.extra_embeddings[task - base]]

    def z_parameters(self) -> list[Tensor]:
        params = [self.embeddings]
        params.extend(self.layers[0].hypernet.extra_embeddings)
        return params

    def phi_parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.phi_parameters()]

    def base_parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.base_parameters()]

    def named_parameters(self) -> dict[str, Tensor]:
        named = {"embeddings": self.embeddings}
        for i, p in enumerate(self.layers[0].hypernet.extra_embeddings):
            named[f"embeddings.extra.{i}"] = p
        for i, layer in enumerate(self.layers):
            for j, p in enumerate(layer.phi_parameters()):
                named[f"layer{i}.gen.{j}"] = p
            for j, p in enumerate(layer.base_parameters()):
                named[f"layer{i}.base.{j}"] = p
        return named

    def allocation_eval_matrices(self) -> list[np.ndarray]:
        return []

    def freeze_sparse_masks(self) -> None:
        pass

    def param_count(self) -> int:
        return int(sum(p.size for p in self.named_parameters().values()))

    def clone(self) -> "HypernetModel":
        return copy.deepcopy(self)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        named = self.named_parameters()
        for name, data in snap.items():
            named[name].data[...] = data


# ---------------------------------------------------------------------------
# construction


def make_layer_shapes(input_dim: int, hidden_dim: int, output_dim: int = 1) -> list[LayerShape]:
    return [LayerShape(input_dim, hidden_dim), LayerShape(hidden_dim, output_dim)]


def _make_store(shape: LayerShape, num_skills: int, parameterisation: str, sparsity: float, rank: int, rng):
    if parameterisation == "dense":
        return DenseLayer(shape, num_skills, rng)
    if parameterisation == "sparse":
        return SparseLayer(shape, num_skills, sparsity, rng)
    if parameterisation == "lowrank":
        return LowRankLayer(shape, num_skills, min(rank, shape.in_dim, shape.out_dim), rng)
    raise ContractError(f"unknown parameterisation '{parameterisation}'")


def build_model(
    kind: str,
    num_tasks: int,
    num_skills: int,
    shapes: list[LayerShape],
    rng,
    parameterisation: str = "dense",
    sparsity: float = 0.9,
    rank: int = 4,
    tau: float = 1.0,
    allocation_mode: str = "per_layer",
    frozen_allocation: np.ndarray | None = None,
    embed_dim: int = 8,
    expert: FixedAllocation | None = None,
):
    """Construct a model of the requested kind with a fixed rng draw order.

    The skill inventories are created before any allocation state so that two
    kinds with the same inventory dimensions (e.g. private and a
    frozen-identity skilled model) consume the construction rng identically
    and start bit-identical.
    """
    if kind not in MODEL_KINDS:
        raise ContractError(f"unknown model kind '{kind}'; expected one of {MODEL_KINDS}")
    if kind == "hypernet":
        return HypernetModel(num_tasks, embed_dim, shapes, rank, rng)

    if kind == "private":
        inventory = num_tasks
    elif kind == "shared":
        inventory = 1
    elif kind == "expert":
        if expert is None:
            raise ContractError("expert kind requires a fixed expert allocation")
        inventory = expert.num_skills
    else:
        inventory = num_skills

    layers = [_make_store(shape, inventory, parameterisation, sparsity, rank, rng) for shape in shapes]

    if kind == "skilled":
        alloc = LearnedAllocationState(
            num_tasks,
            len(shapes),
            inventory,
            tau=tau,
            mode=allocation_mode,
            frozen=frozen_allocation,
        )
    elif kind == "private":
        from .baselines import allocation_private

        alloc = FixedAllocationState(allocation_private(num_tasks), len(shapes))
    elif kind == "shared":
        from .baselines import allocation_shared

        alloc = FixedAllocationState(allocation_shared(num_tasks), len(shapes))
    else:
        if expert.num_tasks != num_tasks:
            raise ContractError("expert allocation row count disagrees with task count")
        alloc = FixedAllocationState(expert, len(shapes))
    return SkillModel(kind, layers, alloc)
