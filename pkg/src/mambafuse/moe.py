"""Mixture-of-experts classification head.

The gate maps the fused feature vector to softmax affinities over the
routable experts; each input is dispatched to its top-k experts (ties
break toward the lower expert index) and their outputs are combined with
the *unnormalized* gate scores. Shared experts run unconditionally and
their sum is added to the routed output before the final class
projection. Routing statistics feed the auxiliary load-balancing penalty
scale * (M/B) * sum_i f_i * P_i, where f_i counts the inputs whose top-k
set contains expert i and P_i is the mean gate probability.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigurationError
from .layers import Linear, Module
from .tensor import Tensor


@dataclass
class RoutingReport:
    """Per-batch routing record: scores, selections, and balance statistics."""

    scores: np.ndarray          # [B, M] gate probabilities
    selected: np.ndarray        # [B, k] chosen expert indices
    counts: np.ndarray          # [M] inputs routed to each expert
    mean_probs: np.ndarray      # [M] column means of the scores
    aux_loss: float

    def to_json_dict(self) -> dict:
        return {
            "selected": self.selected.tolist(),
            "counts": self.counts.tolist(),
            "mean_probs": self.mean_probs.tolist(),
            "aux_loss": self.aux_loss,
        }


class ExpertMlp(Module):
    """Two-layer perceptron expert: d -> hidden -> d."""

    def __init__(self, dim: int, hidden: int, rng, dtype):
        self.fc1 = Linear(dim, hidden, rng, dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(self.fc1(x).relu())


def top_k_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Per-row top-k column indices; ties resolve toward the lower index."""
    order = np.argsort(-scores, axis=1, kind="stable")
    return order[:, :k]


class MoEHead(Module):
    def __init__(self, dim: int, num_classes: int, num_experts: int, top_k: int,
                 num_shared: int, aux_scale: float, hidden_ratio: int, rng, dtype):
        if not 1 <= top_k <= num_experts:
            raise ConfigurationError(f"top_k={top_k} outside [1, {num_experts}]")
        self.num_experts = num_experts
        self.top_k = top_k
        self.aux_scale = aux_scale
        hidden = hidden_ratio * dim
        self.gate = Linear(dim, num_experts, rng, dtype)
        self.experts = [ExpertMlp(dim, hidden, rng, dtype) for _ in range(num_experts)]
        self.shared_experts = [ExpertMlp(dim, hidden, rng, dtype) for _ in range(num_shared)]
        self.classifier = Linear(dim, num_classes, rng, dtype)
        # observable sparsity: rows processed per routable expert, cumulative
        self.expert_eval_counts = np.zeros(num_experts, dtype=np.int64)

    def gate_scores(self, v: Tensor) -> Tensor:
        return ops.softmax(self.gate(v), axis=1)

    def route(self, v: Tensor, scores: Tensor, selected: np.ndarray) -> Tensor:
        """Weighted sum of the selected experts, scores not renormalized."""
        batch = v.shape[0]
        routed = None
        for j, expert in enumerate(self.experts):
            rows = np.nonzero((selected == j).any(axis=1))[0]
            if rows.size == 0:
                continue
            self.expert_eval_counts[j] += rows.size
            out = expert(ops.select_rows(v, rows))
            weight = ops.select_rows(scores, rows)[:, j:j + 1]
            term = ops.scatter_rows(out * weight, rows, batch)
            routed = term if routed is None else routed + term
        return routed

    def shared_forward(self, v: Tensor) -> Tensor:
        out = None
        for expert in self.shared_experts:
            term = expert(v)
            out = term if out is None else out + term
        return out

    def aux_loss(self, scores: Tensor, counts: np.ndarray) -> Tensor:
        """Load-balance penalty; counts are constants, probabilities carry grad."""
        batch = scores.shape[0]
        mean_probs = scores.mean(axis=0)
        weighted = mean_probs * Tensor(counts.astype(scores.dtype))
        return weighted.sum() * (self.aux_scale * self.num_experts / batch)

    def forward(self, v: Tensor, forced_selection: np.ndarray | None = None):
        """Returns (logits, aux_loss Tensor, RoutingReport)."""
        scores = self.gate_scores(v)
        selected = (forced_selection if forced_selection is not None
                    else top_k_indices(scores.data, self.top_k))
        routed = self.route(v, scores, selected)
        shared = self.shared_forward(v)
        out = shared if routed is None else routed + shared
        logits = self.classifier(out)
        counts = np.bincount(selected.reshape(-1), minlength=self.num_experts)
        aux = self.aux_loss(scores, counts)
        report = RoutingReport(
            scores=scores.data.copy(),
            selected=selected,
            counts=counts,
            mean_probs=scores.data.mean(axis=0),
            aux_loss=float(aux.data),
        )
        return logits, aux, report


class MlpHead(Module):
    """Plain two-layer perceptron head used by the head=mlp ablation."""

    def __init__(self, dim: int, num_classes: int, hidden_ratio: int, rng, dtype):
        self.fc1 = Linear(dim, hidden_ratio * dim, rng, dtype)
        self.fc2 = Linear(hidden_ratio * dim, num_classes, rng, dtype)

    def forward(self, v: Tensor):
        return self.fc2(self.fc1(v).relu()), None, None
