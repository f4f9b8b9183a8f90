"""Permutation and integration of adapter stacks.

Server side: build a FedAvg anchor, permute every client stack onto it with
weight-based optimal transport, then average with per-client exponential
weights that shrink with distance from the anchor. Client side: permute the
incoming global stack onto the local one using activation-based costs, then
convex-merge the two.

Only the bottleneck dimension of each adapter is permutable. Both interface
dimensions exchange activations with the frozen backbone's coordinate
system, so their plans are pinned to the identity: permuting them would
change the network function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError
from .model import (
    ActivationCache,
    AdapterLayer,
    AdapterStack,
    Backbone,
    ClassifierHead,
    forward,
)
from .numerics import pairwise_euclidean, weighted_sum
from .ot import (
    TransportPlan,
    activation_support,
    plan_to_alignment,
    solve_exact,
    uniform_mass,
    weight_support,
)

__all__ = [
    "FusionConfig",
    "fedavg",
    "align_stack",
    "dynamic_integrate",
    "server_pia",
    "client_pia",
    "merge_stacks",
    "stack_distance",
]


@dataclass(frozen=True)
class FusionConfig:
    """Knobs for both fusion sites; defaults follow the training protocol."""

    gamma: float = 1.0
    client_cost_mode: str = "activation"  # or "weight"
    activation_mode: str = "mean"  # or "per_sample"
    m_probe: int = 16
    lambda_merge: float = 0.5
    normalize_weights: bool = False

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.client_cost_mode not in ("activation", "weight"):
            raise ValueError(f"bad client_cost_mode {self.client_cost_mode!r}")
        if self.activation_mode not in ("mean", "per_sample"):
            raise ValueError(f"bad activation_mode {self.activation_mode!r}")
        if self.m_probe < 1:
            raise ValueError("m_probe must be >= 1")
        if not (0.0 <= self.lambda_merge <= 1.0):
            raise ValueError("lambda_merge must lie in [0, 1]")


def _check_same_shapes(stacks: list[AdapterStack]) -> None:
    first = stacks[0]
    for s in stacks[1:]:
        if not first.same_shape(s):
            raise ShapeError("adapter stacks differ in shape")


def _map_stacks(stacks: list[AdapterStack], weights: list[float]) -> AdapterStack:
    """Parameter-wise order-free weighted sum across stacks."""
    layers = []
    for i in range(len(stacks[0].layers)):
        layers.append(
            AdapterLayer(
                w_down=weighted_sum([s.layers[i].w_down for s in stacks], weights),
                b_down=weighted_sum(
                    [s.layers[i].b_down[:, None] for s in stacks], weights
                )[:, 0],
                w_up=weighted_sum([s.layers[i].w_up for s in stacks], weights),
                b_up=weighted_sum(
                    [s.layers[i].b_up[:, None] for s in stacks], weights
                )[:, 0],
            )
        )
    return AdapterStack(layers)


def fedavg(stacks: list[AdapterStack], sizes: list[int]) -> AdapterStack:
    """Dataset-size-weighted parameter average of client stacks."""
    if not stacks:
        raise ShapeError("fedavg needs at least one stack")
    if len(sizes) != len(stacks):
        raise ShapeError("fedavg: one size per stack required")
    if any(s < 1 for s in sizes):
        raise DataError("fedavg: sizes must be >= 1")
    _check_same_shapes(stacks)
    total = float(sum(sizes))
    return _map_stacks(stacks, [s / total for s in sizes])


def _plan_alignment_map(plan: TransportPlan) -> np.ndarray:
    # Separated out so the self-verification mutation hook can patch it.
    return plan_to_alignment(plan)


def _layer_plan(
    movable: AdapterLayer,
    anchor: AdapterLayer,
    mode: str,
    layer_index: int,
    movable_cache: ActivationCache | None,
    anchor_cache: ActivationCache | None,
    activation_mode: str,
) -> TransportPlan:
    if mode == "weight":
        eye = np.eye(movable.hidden)
        sup_m = weight_support(movable, "down", eye)
        sup_a = weight_support(anchor, "down", eye)
    elif mode == "activation":
        if movable_cache is None or anchor_cache is None:
            raise DataError("activation-mode alignment requires probe caches for both stacks")
        sup_m = activation_support(movable_cache, layer_index, activation_mode)
        sup_a = activation_support(anchor_cache, layer_index, activation_mode)
    else:
        raise ValueError(f"alignment mode must be 'weight' or 'activation', got {mode!r}")
    cost = pairwise_euclidean(sup_m, sup_a)
    n = movable.bottleneck
    return solve_exact(cost, uniform_mass(n), uniform_mass(n))


def align_stack(
    movable: AdapterStack,
    anchor: AdapterStack,
    mode: str = "weight",
    movable_cache: ActivationCache | None = None,
    anchor_cache: ActivationCache | None = None,
    activation_mode: str = "mean",
) -> tuple[AdapterStack, list[TransportPlan]]:
    """Permute ``movable``'s bottleneck neurons layerwise onto ``anchor``'s.

    Every adapter layer reads from and writes back to the unpermuted backbone
    stream, so its interface plans are the identity and only the bottleneck
    coupling is solved. With A = diag(1/beta) P^T the update is

        w_down <- w_down A^T,  b_down <- A b_down,  w_up <- A w_up,

    which leaves the layer's input-output map unchanged whenever A is a hard
    permutation (relu commutes with coordinate reordering).
    """
    if not movable.same_shape(anchor):
        raise ShapeError("align_stack: stacks differ in shape")
    aligned_layers = []
    plans = []
    for i, (ml, al) in enumerate(zip(movable.layers, anchor.layers)):
        plan = _layer_plan(
            ml, al, mode, i, movable_cache, anchor_cache, activation_mode
        )
        a_map = _plan_alignment_map(plan)
        aligned_layers.append(
            AdapterLayer(
                w_down=ml.w_down @ a_map.T,
                b_down=a_map @ ml.b_down,
                w_up=a_map @ ml.w_up,
                b_up=ml.b_up.copy(),
            )
        )
        plans.append(plan)
    return AdapterStack(aligned_layers), plans


def stack_distance(a: AdapterStack, b: AdapterStack) -> float:
    """Frobenius norm over the concatenation of every adapter parameter."""
    return float(np.linalg.norm(a.flatten() - b.flatten()))


def dynamic_integrate(
    aligned: list[AdapterStack],
    anchor: AdapterStack,
    gamma: float,
    normalize: bool = False,
) -> AdapterStack:
    """Average aligned stacks with weights exp(-gamma * distance-to-anchor).

    Default is the unnormalized (1/K) sum; ``normalize`` rescales by the
    weight total so consensus mass is preserved even when all distances are
    large.
    """
    if not aligned:
        raise ShapeError("dynamic_integrate needs at least one stack")
    _check_same_shapes(aligned + [anchor])
    w = [math.exp(-gamma * stack_distance(s, anchor)) for s in aligned]
    if normalize:
        total = math.fsum(w)
        coeffs = [wk / total for wk in w]
    else:
        coeffs = [wk / len(aligned) for wk in w]
    return _map_stacks(aligned, coeffs)


def server_pia(
    client_stacks: list[AdapterStack],
    sizes: list[int],
    cfg: FusionConfig,
    align: bool = True,
) -> AdapterStack:
    """Two-step server fusion: FedAvg anchor, then align-and-integrate.

    ``align=False`` keeps the identity plans (every client stack passes
    through unpermuted) while the dynamic integration still applies; this is
    the structural reduction used by the ablation identity checks.
    """
    if not client_stacks:
        raise ShapeError("server_pia needs at least one client stack")
    anchor = fedavg(client_stacks, sizes)
    if align:
        aligned = [align_stack(s, anchor, mode="weight")[0] for s in client_stacks]
    else:
        aligned = client_stacks
    return dynamic_integrate(aligned, anchor, cfg.gamma, cfg.normalize_weights)


def merge_stacks(local: AdapterStack, incoming: AdapterStack, lam: float) -> AdapterStack:
    """Convex parameter merge lam * local + (1 - lam) * incoming."""
    if not (0.0 <= lam <= 1.0):
        raise ValueError("merge weight must lie in [0, 1]")
    if not local.same_shape(incoming):
        raise ShapeError("merge_stacks: stacks differ in shape")
    layers = []
    for ll, il in zip(local.layers, incoming.layers):
        layers.append(
            AdapterLayer(
                w_down=lam * ll.w_down + (1.0 - lam) * il.w_down,
                b_down=lam * ll.b_down + (1.0 - lam) * il.b_down,
                w_up=lam * ll.w_up + (1.0 - lam) * il.w_up,
                b_up=lam * ll.b_up + (1.0 - lam) * il.b_up,
            )
        )
    return AdapterStack(layers)


def client_pia(
    global_stack: AdapterStack,
    local_stack: AdapterStack,
    probe_batch: np.ndarray,
    cfg: FusionConfig,
    backbone: Backbone,
    align: bool = True,
) -> AdapterStack:
    """Align the incoming global stack to the local one, then convex-merge.

    The ground cost defaults to activation supports: both stacks process the
    same probe batch through the shared frozen backbone and neurons are
    matched by how similarly they respond. ``align=False`` merges the global
    stack unpermuted (the client-side ablation).
    """
    probe = np.asarray(probe_batch, dtype=np.float64)
    if probe.ndim != 2 or probe.shape[0] < 1:
        raise DataError("probe batch must be a nonempty 2-D array")
    if align:
        if cfg.client_cost_mode == "activation":
            global_cache = _probe_cache(backbone, global_stack, probe)
            local_cache = _probe_cache(backbone, local_stack, probe)
            aligned, _ = align_stack(
                global_stack,
                local_stack,
                mode="activation",
                movable_cache=global_cache,
                anchor_cache=local_cache,
                activation_mode=cfg.activation_mode,
            )
        else:
            aligned, _ = align_stack(global_stack, local_stack, mode="weight")
    else:
        aligned = global_stack
    return merge_stacks(local_stack, aligned, cfg.lambda_merge)


def _probe_cache(backbone: Backbone, stack: AdapterStack, probe: np.ndarray) -> ActivationCache:
    # Logits are irrelevant here; a zero head keeps forward's contract intact.
    dummy = ClassifierHead(w=np.zeros((backbone.width, 1)), b=np.zeros(1))
    _, cache = forward(backbone, stack, dummy, probe)
    return cache
