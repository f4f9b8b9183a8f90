"""Self-verification oracles: independent re-derivations that gate releases.

Each oracle checks an implementation path against a slower or structurally
different reference (exhaustive enumeration, finite differences, planted
ground truth, structural identity). The CLI ``verify`` command runs them all
and reports one line per oracle.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from unittest import mock

import numpy as np

from . import pia
from .fedsim import (
    DataConfig,
    ExperimentConfig,
    FusionConfig,
    ModelConfig,
    run_experiment,
)
from .model import (
    AdapterStack,
    forward,
    init_model,
    loss_and_backward,
    trainable_params,
)
from .numerics import Rng, pairwise_euclidean
from .ot import solve_exact, uniform_mass

__all__ = [
    "OracleResult",
    "brute_force_min_cost",
    "permute_bottleneck",
    "finite_difference_grads",
    "oracle_ot_bruteforce",
    "oracle_planted_permutation",
    "oracle_gradient_check",
    "oracle_ablation_equivalence",
    "run_all",
]


@dataclass
class OracleResult:
    name: str
    ok: bool
    detail: str = ""


def brute_force_min_cost(cost: np.ndarray) -> float:
    """Minimum coupling cost over all n! permutations, scaled to mass 1."""
    n = cost.shape[0]
    perms = np.array(list(itertools.permutations(range(n))), dtype=np.int64)
    totals = cost[np.arange(n)[None, :], perms].sum(axis=1)
    return float(totals.min() / n)


def permute_bottleneck(stack: AdapterStack, perms: list[np.ndarray]) -> AdapterStack:
    """Reorder each layer's bottleneck neurons: new neuron j = old neuron perm[j]."""
    out = stack.copy()
    for layer, perm in zip(out.layers, perms):
        layer.w_down = layer.w_down[:, perm]
        layer.b_down = layer.b_down[perm]
        layer.w_up = layer.w_up[perm, :]
    return out


def finite_difference_grads(
    backbone, adapters, head, batch, labels, eps: float = 1e-5
) -> dict[str, np.ndarray]:
    """Central-difference gradients of the batch loss w.r.t. every trainable
    parameter; the independent reference for the analytic backward pass."""

    def loss_at() -> float:
        logits, cache = forward(backbone, adapters, head, batch)
        loss, _ = loss_and_backward(logits, labels, cache, adapters, head)
        return loss

    params = trainable_params(adapters, head)
    grads = {}
    for name, p in params.items():
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_at()
            flat[i] = orig - eps
            down = loss_at()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * eps)
        grads[name] = g
    return grads


def oracle_ot_bruteforce(
    sizes=range(2, 6), instances: int = 20, tol: float = 1e-9
) -> OracleResult:
    rng = Rng(11, "verify/ot")
    for n in sizes:
        for t in range(instances):
            cost = np.abs(rng.child(f"n{n}/i{t}").normal((n, n)))
            plan = solve_exact(cost, uniform_mass(n), uniform_mass(n))
            ref = brute_force_min_cost(cost)
            if abs(plan.cost - ref) > tol:
                return OracleResult(
                    "ot-bruteforce",
                    False,
                    f"n={n} instance={t}: solver {plan.cost!r} vs brute force {ref!r}\n"
                    f"cost matrix:\n{np.array2string(cost, precision=6)}",
                )
    return OracleResult("ot-bruteforce", True)


def oracle_planted_permutation(
    instances: int = 10,
    width: int = 12,
    bottleneck: int = 6,
    depth: int = 2,
    recovery_tol: float = 1e-9,
    forward_tol: float = 1e-6,
    inject: str | None = None,
) -> OracleResult:
    """Shuffle a stack's bottlenecks by a known permutation and demand that
    alignment undoes it exactly and leaves the network function unchanged.

    ``inject="eq1-sign"`` deliberately drops the transpose in the alignment
    map; the oracle must then fail, proving it can detect that mutation.
    """

    def mutated_map(plan):
        return plan.plan / plan.col_marginal[:, None]

    patch = (
        mock.patch.object(pia, "_plan_alignment_map", mutated_map)
        if inject == "eq1-sign"
        else None
    )

    for t in range(instances):
        rng = Rng(23, f"verify/planted/{t}")
        backbone, anchor, head = init_model(
            rng, width, bottleneck, depth, num_classes=3, input_dim=width, adapter_std=1.0
        )
        if t == 0:
            # Pin a 3-cycle so a transpose bug cannot hide behind involutions.
            base = np.roll(np.arange(bottleneck), 1)
            perms = [base.copy() for _ in range(depth)]
        else:
            perms = [rng.child(f"perm{i}").permutation(bottleneck) for i in range(depth)]
        movable = permute_bottleneck(anchor, perms)
        probe = rng.child("probe").normal((16, width))

        if patch is not None:
            with patch:
                aligned, plans = pia.align_stack(movable, anchor, mode="weight")
        else:
            aligned, plans = pia.align_stack(movable, anchor, mode="weight")

        err = float(np.abs(aligned.flatten() - anchor.flatten()).max())
        if err > recovery_tol:
            return OracleResult(
                "planted-permutation",
                False,
                f"instance {t}: weight recovery error {err:.3e} "
                f"(planted perms {[p.tolist() for p in perms]})",
            )
        ref, _ = forward(backbone, movable, head, probe)
        got, _ = forward(backbone, aligned, head, probe)
        ferr = float(np.abs(ref - got).max())
        if ferr > forward_tol:
            return OracleResult(
                "planted-permutation",
                False,
                f"instance {t}: forward preservation error {ferr:.3e}",
            )
    return OracleResult("planted-permutation", True)


def oracle_gradient_check(
    instances: int = 5, eps: float = 1e-5, tol: float = 1e-3
) -> OracleResult:
    for t in range(instances):
        rng = Rng(37, f"verify/grad/{t}")
        multi = t % 2 == 1
        backbone, adapters, head = init_model(
            rng, width=4, bottleneck=2, depth=1 + t % 2, num_classes=3,
            input_dim=3, adapter_std=0.5,
        )
        batch = rng.child("batch").normal((4, 3))
        if multi:
            labels = (rng.child("labels").normal((4, 3)) > 0).astype(np.float64)
        else:
            labels = rng.child("labels").integers(0, 3, 4)
        logits, cache = forward(backbone, adapters, head, batch)
        _, analytic = loss_and_backward(logits, labels, cache, adapters, head)
        numeric = finite_difference_grads(backbone, adapters, head, batch, labels, eps)
        for name, num in numeric.items():
            rel = np.abs(analytic[name] - num) / np.maximum(1.0, np.abs(num))
            if rel.max() > tol:
                return OracleResult(
                    "gradient-check",
                    False,
                    f"instance {t} param {name}: max rel error {rel.max():.3e}\n"
                    f"analytic:\n{analytic[name]!r}\nnumeric:\n{num!r}",
                )
    return OracleResult("gradient-check", True)


def _tiny_ablation_config() -> ExperimentConfig:
    return ExperimentConfig(
        methods=("fedpia", "fedavg_adapters"),
        clients=2,
        rounds=2,
        local_steps=5,
        batch_size=8,
        base_lr=0.01,
        seeds=(0,),
        server_pia_on=False,
        client_pia_on=False,
        fusion=FusionConfig(lambda_merge=0.0),
        model=ModelConfig(width=8, bottleneck=2, depth=1),
        data=DataConfig(n_samples=200, features=6, num_classes=3, concentration=1.0),
    )


def oracle_ablation_equivalence(seed: int = 0) -> OracleResult:
    """With both PIA sites disabled and merge weight 0, the fedpia path must
    reproduce plain adapter FedAvg record for record."""
    cfg = _tiny_ablation_config()
    m_pia, _ = run_experiment(cfg, "fedpia", seed)
    m_avg, _ = run_experiment(cfg, "fedavg_adapters", seed)
    rec_pia = [m.to_record("x", seed) for m in m_pia]
    rec_avg = [m.to_record("x", seed) for m in m_avg]
    if rec_pia != rec_avg:
        return OracleResult(
            "ablation-equivalence",
            False,
            f"records diverge:\nfedpia: {rec_pia}\nfedavg: {rec_avg}",
        )
    return OracleResult("ablation-equivalence", True)


def run_all(inject: str | None = None) -> list[OracleResult]:
    return [
        oracle_ot_bruteforce(),
        oracle_planted_permutation(inject=inject),
        oracle_gradient_check(),
        oracle_ablation_equivalence(),
    ]
