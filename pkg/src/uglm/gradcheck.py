"""Finite-difference verification of every analytic gradient path.

Four checks, each over randomized small configurations: the encoder
composite (all three task granularities), the contrastive loss w.r.t.
graph rows and adapter parameters, the frozen-head instance loss w.r.t.
projector parameters, and the weighted multi-domain objective w.r.t.
projector parameters with the weights held constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .align import (
    FrozenHead,
    Projector,
    _domain_losses_with_caches,
    domain_mean_gradient,
    instance_loss,
    projector_grad,
)
from .encoder import MultiScaleEncoder, encoder_backward, task_representation
from .errors import GradientCheckError
from .graphdata import Batch, DomainDataset, EdgeTarget, GraphInstance, GraphTarget, NodeTarget, Splits
from .numcore import ParamSet, finite_difference_gradient
from .pretrain import DomainCenters, TextAdapter, build_domain_weights, dr_clip_loss

GRADCHECK_TOLERANCE = 1e-6

# A float64 central difference of an O(1) function at eps=1e-5 carries
# ~1e-10 of subtractive-cancellation noise. Entries agreeing to below this
# floor are unresolvable by the oracle and count as exact matches; any
# real gradient defect disagrees by many orders of magnitude more.
FD_ABSOLUTE_FLOOR = 1e-9

# Finite differences need local smoothness; configurations that put a ReLU
# pre-activation within this margin of its kink are redrawn.
_KINK_MARGIN = 1e-4


def _gated_rel_error(analytic: ParamSet, numeric: ParamSet) -> float:
    """Floored relative error with the FD resolvability gate applied."""
    worst = 0.0
    for name, a in analytic.items():
        b = numeric[name]
        diff = np.abs(a - b)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
        rel = np.where(diff <= FD_ABSOLUTE_FLOOR, 0.0, diff / denom)
        if rel.size:
            worst = max(worst, float(rel.max()))
    return worst


@dataclass
class CheckResult:
    name: str
    trials: int
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= GRADCHECK_TOLERANCE


def _random_instance(
    rng: np.random.Generator, n: int, d_in: int, kind: str, domain: str = "d0"
) -> GraphInstance:
    edges: list[tuple[int, int]] = []
    for v in range(1, n):
        parent = int(rng.integers(0, v))
        edges += [(parent, v), (v, parent)]
    if kind == "node":
        target = NodeTarget(node=int(rng.integers(0, n)))
    elif kind == "edge":
        target = EdgeTarget(edge=edges[int(rng.integers(0, len(edges)))])
    else:
        target = GraphTarget()
    return GraphInstance(
        num_nodes=n,
        edges=edges,
        node_features=rng.normal(size=(n, d_in)),
        target=target,
        label=0,
        text_index=0,
        domain=domain,
    )


def _sample_smooth_encoder_case(rng: np.random.Generator, kind: str):
    """Encoder + instance whose hidden pre-activations avoid the ReLU kink."""
    for _ in range(64):
        n = int(rng.integers(2, 7))
        d_in = int(rng.integers(1, 5))
        d = int(rng.integers(2, 9))
        layers = int(rng.integers(1, 4))
        enc = MultiScaleEncoder.initialize(d_in, d, layers, rng)
        g = _random_instance(rng, n, d_in, kind)
        _, cache = task_representation(g, enc)
        margins = [
            float(np.abs(trace.pre).min()) for trace in cache.layers[:-1]
        ]
        if not margins or min(margins) > _KINK_MARGIN:
            return enc, g
    raise GradientCheckError("could not sample a kink-free encoder configuration")


def check_encoder_gradients(seed: int, trials: int) -> CheckResult:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    worst = 0.0
    for trial in range(trials):
        kind = ("node", "edge", "graph")[trial % 3]
        enc, g = _sample_smooth_encoder_case(rng, kind)
        probe = rng.normal(size=enc.hidden_dim)

        def f(ps, g=g, enc=enc, probe=probe):
            x, _ = task_representation(g, enc.with_params(ps))
            return float(probe @ x)

        _, cache = task_representation(g, enc)
        analytic = encoder_backward(cache, probe)
        numeric = finite_difference_gradient(f, enc.params)
        worst = max(worst, _gated_rel_error(analytic, numeric))
    return CheckResult("encoder_backward", trials, worst)


def check_contrastive_gradients(seed: int, trials: int) -> CheckResult:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    worst = 0.0
    for trial in range(trials):
        n = int(rng.integers(2, 9))
        d = int(rng.integers(2, 9))
        d_t = int(rng.integers(2, 7))
        n_domains = int(rng.integers(1, 4))
        domains = [f"d{i}" for i in range(n_domains)]
        centers = DomainCenters(
            domains=domains,
            graph_centers={name: rng.normal(size=4) for name in domains},
            text_centers={name: rng.normal(size=4) for name in domains},
            sample_counts={name: 1 for name in domains},
        )
        weights = build_domain_weights(centers)
        ids = [domains[int(rng.integers(0, n_domains))] for _ in range(n)]
        x = rng.normal(size=(n, d))
        t = rng.normal(size=(n, d_t))
        adapter = TextAdapter.initialize(d_t, d, rng)
        tau = (1.0, 0.07)[trial % 2]

        result = dr_clip_loss(x, t, ids, weights, tau, adapter)
        fd_x = finite_difference_gradient(
            lambda ps: dr_clip_loss(ps["x"], t, ids, weights, tau, adapter).loss,
            ParamSet({"x": x}),
        )
        worst = max(worst, _gated_rel_error(ParamSet({"x": result.grad_x}), fd_x))
        fd_adapter = finite_difference_gradient(
            lambda ps: dr_clip_loss(x, t, ids, weights, tau, adapter.with_params(ps)).loss,
            adapter.params(),
        )
        worst = max(worst, _gated_rel_error(result.grad_adapter, fd_adapter))
    return CheckResult("contrastive_loss", trials, worst)


def _random_head_setup(rng: np.random.Generator, kind: str, domain: str = "d0"):
    d_in = int(rng.integers(1, 5))
    d = int(rng.integers(2, 9))
    n = int(rng.integers(2, 7))
    k = int(rng.integers(2, 6))
    m = int(rng.integers(1, 4))
    d_l = int(rng.integers(2, 7))
    enc = MultiScaleEncoder.initialize(d_in, d, int(rng.integers(1, 3)), rng)
    proj = Projector.initialize(d, m, d_l, rng)
    head = FrozenHead.build(int(rng.integers(0, 2**31)), {domain: k}, m, d_l)
    g = _random_instance(rng, n, d_in, kind, domain)
    g.label = int(rng.integers(0, k))
    return enc, proj, head, g


def check_instance_loss_gradients(seed: int, trials: int) -> CheckResult:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    worst = 0.0
    for trial in range(trials):
        kind = ("node", "edge", "graph")[trial % 3]
        enc, proj, head, g = _random_head_setup(rng, kind)
        _, cache = instance_loss(g, enc, proj, head)
        analytic = projector_grad(cache, proj, head)
        numeric = finite_difference_gradient(
            lambda ps: instance_loss(g, enc, proj.with_params(ps), head)[0],
            proj.params(),
        )
        worst = max(worst, _gated_rel_error(analytic, numeric))
    return CheckResult("instance_loss", trials, worst)


def check_weighted_objective_gradients(seed: int, trials: int) -> CheckResult:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 4]))
    worst = 0.0
    for trial in range(trials):
        kind = ("node", "edge", "graph")[trial % 3]
        d_in = int(rng.integers(1, 4))
        d = int(rng.integers(2, 7))
        m = int(rng.integers(1, 3))
        d_l = int(rng.integers(2, 6))
        enc = MultiScaleEncoder.initialize(d_in, d, 1, rng)
        proj = Projector.initialize(d, m, d_l, rng)
        domains = ["a", "b"]
        classes = {name: int(rng.integers(2, 5)) for name in domains}
        head = FrozenHead.build(int(rng.integers(0, 2**31)), classes, m, d_l)
        datasets = {}
        for name in domains:
            instances = []
            for _ in range(3):
                g = _random_instance(rng, int(rng.integers(2, 6)), d_in, kind, name)
                g.label = int(rng.integers(0, classes[name]))
                instances.append(g)
            datasets[name] = DomainDataset(
                domain=name,
                task=kind,
                num_classes=classes[name],
                instances=instances,
                text_embeddings=np.zeros((3, 2)),
                splits=Splits(train=[0, 1, 2]),
            )
        batch = Batch(
            items=[(datasets["a"], 0), (datasets["a"], 1), (datasets["b"], 0), (datasets["b"], 2)],
            active_domains=("a", "b"),
        )
        w_fixed = {"a": float(rng.uniform(0.2, 0.8))}
        w_fixed["b"] = 1.0 - w_fixed["a"]

        _, groups = _domain_losses_with_caches(batch, enc, proj, head)
        analytic = proj.params().zeros_like()
        for name in sorted(groups):
            analytic = analytic + w_fixed[name] * domain_mean_gradient(groups[name], proj, head)

        def objective(ps):
            losses, _ = _domain_losses_with_caches(batch, enc, proj.with_params(ps), head)
            return sum(w_fixed[name] * losses[name] for name in losses)

        numeric = finite_difference_gradient(objective, proj.params())
        worst = max(worst, _gated_rel_error(analytic, numeric))
    return CheckResult("weighted_objective", trials, worst)


def run_gradcheck(seed: int = 0, trials: int = 21) -> list[CheckResult]:
    """All four checks; ``trials`` randomized configurations each."""
    return [
        check_encoder_gradients(seed, trials),
        check_contrastive_gradients(seed, trials),
        check_instance_loss_gradients(seed, trials),
        check_weighted_objective_gradients(seed, trials),
    ]
