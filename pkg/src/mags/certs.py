"""Self-contained numerical certificates for the theoretical guarantees.

Each certificate builds randomized instances from a seed, checks the claimed
property through the production code paths, and reports pass/fail with a
short detail string. Reports are deterministic for a fixed seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .faults import sample_comm_faults
from .inference import PredictionState, gossip_round
from .metrics import count_comm, ensemble_decomposition
from .nn import log_softmax
from .rng import stream
from .topology import build_graph, consensus_matrix, spectral_radius
from .training import split_loss_and_grads

RING16_RADIUS = (1.0 + 2.0 * math.cos(math.pi / 8.0)) / 3.0  # circulant eigenvalue


@dataclass
class CertResult:
    name: str
    passed: bool
    detail: str

    def line(self):
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


def cert_ensemble_identity(seed=0, sets=10000, ks=(2, 4, 16), classes=10,
                           combine=None) -> CertResult:
    """Ensemble loss equals mean member loss minus a non-negative diversity
    term, per sample, for geometric-mean combining of random members.

    ``combine`` overrides the combiner (member log-probs -> ensemble
    log-probs) so a broken combiner can be shown to fail the identity.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))
    max_residual = 0.0
    min_diversity = np.inf
    failures = 0
    for k in ks:
        for _ in range(sets):
            lps = log_softmax(2.0 * rng.standard_normal((k, classes)))
            y = np.zeros(classes)
            y[rng.integers(classes)] = 1.0
            if combine is None:
                try:
                    ens_loss, mean_loss, diversity = ensemble_decomposition(lps, y)
                except ArithmeticError:
                    failures += 1
                    continue
                residual = abs(ens_loss - (mean_loss - diversity))
            else:
                ens_lp = combine(lps)
                p_ens = np.exp(ens_lp)
                ens_loss = float(-(y * ens_lp).sum())
                mean_loss = float(-(y[None, :] * lps).sum(axis=1).mean())
                diversity = float(np.mean([(p_ens * (ens_lp - lps[j])).sum()
                                           for j in range(k)]))
                residual = abs(ens_loss - (mean_loss - diversity))
            max_residual = max(max_residual, residual)
            min_diversity = min(min_diversity, diversity)
    passed = failures == 0 and max_residual < 1e-9 and min_diversity >= -1e-12
    return CertResult(
        "ensemble-identity", passed,
        f"max residual {max_residual:.3e}, min diversity {min_diversity:.3e}, "
        f"K in {tuple(ks)}, {sets} sets each",
    )


def cert_gossip_contraction(seed=0, inits=100, max_rounds=10, dim=10) -> CertResult:
    """Per-device disagreement after G gossip rounds is bounded by
    lambda^G * sqrt(C) * (max initial pairwise distance) on regular graphs,
    where lambda is the spectral radius of the shifted consensus matrix.

    Also pins the 16-device ring spectral radius to its closed form.
    """
    c = 16
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))
    worst_slack = np.inf
    checks = 0
    ring_err = None
    for kind in ("ring", "complete", "torus"):
        graph = build_graph(kind, c, c)
        lam = spectral_radius(consensus_matrix(graph))
        if kind == "ring":
            ring_err = abs(lam - RING16_RADIUS)
        realized = _no_fault_realization(graph)
        for _ in range(inits):
            y0 = rng.standard_normal((c, dim))
            y_bar = y0.mean(axis=0)
            max_pair = max(np.linalg.norm(y0[i] - y0[j])
                           for i in range(c) for j in range(i + 1, c))
            state = PredictionState({k: y0[k - 1:k].copy() for k in graph.aggregators})
            for g in range(1, max_rounds + 1):
                state = gossip_round(state, realized, graph.aggregators)
                bound = (lam ** g) * math.sqrt(c) * max_pair + 1e-9
                for k in graph.aggregators:
                    dev = float(np.linalg.norm(y_bar - state.values[k][0]))
                    worst_slack = min(worst_slack, bound - dev)
                    checks += 1
    passed = worst_slack >= 0.0 and ring_err is not None and ring_err < 1e-6
    return CertResult(
        "gossip-contraction", passed,
        f"{checks} bound checks, min slack {worst_slack:.3e}, "
        f"ring-16 radius error {ring_err:.3e}",
    )


def _no_fault_realization(graph):
    from .faults import realize_base
    return realize_base(graph)


def cert_catastrophic_probability(seed=0, draws=10 ** 6,
                                  rates=(0.3, 0.5), ks=(1, 2, 4)) -> CertResult:
    """Empirical probability that every aggregator dies matches r^K within a
    3-sigma Monte Carlo band under i.i.d. device faults."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))
    worst = 0.0  # worst |deviation| / sigma
    details = []
    for r in rates:
        for k in ks:
            dead = rng.random((draws, k)) >= (1.0 - r)
            empirical = float(dead.all(axis=1).mean())
            expected = r ** k
            sigma = math.sqrt(expected * (1.0 - expected) / draws)
            z = abs(empirical - expected) / max(sigma, 1e-15)
            worst = max(worst, z)
            details.append(f"r={r} K={k}: {empirical:.6f} vs {expected:.6f}")
    passed = worst <= 3.0
    return CertResult("catastrophic-probability", passed,
                      f"max |z| {worst:.2f} over {len(details)} cells, {draws} draws each")


def cert_selection_uniformity(seed=0, draws=10 ** 6, rate=0.3, k=4) -> CertResult:
    """Conditioned on a nonempty active set, each aggregator is selected with
    probability 1/K (within 3 sigma) under uniform active selection."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))
    alive = rng.random((draws, k)) < (1.0 - rate)
    scores = rng.random((draws, k))
    scores[~alive] = -1.0
    nonempty = alive.any(axis=1)
    picks = scores[nonempty].argmax(axis=1)  # uniform among alive entries
    n = int(nonempty.sum())
    freq = np.bincount(picks, minlength=k) / n
    sigma = math.sqrt((1.0 / k) * (1.0 - 1.0 / k) / n)
    worst = float(np.abs(freq - 1.0 / k).max()) / sigma
    passed = worst <= 3.0
    return CertResult("selection-uniformity", passed,
                      f"max |z| {worst:.2f}, K={k}, rate={rate}, {n} conditioned draws")


COMM_COUNT_CASES = (
    # (name, aggregator count, gossip rounds, expected mean, tolerance)
    ("VFL", 1, 0, 10.5, 0.4),
    ("4-MACL", 4, 0, 42.0, 1.0),
    ("4-MACL-G2", 4, 2, 126.0, 2.0),
    ("MACL", 16, 0, 168.0, 3.0),
    ("MACL-G4", 16, 4, 840.0, 10.0),
)


def cert_comm_counts(seed=0, realizations=10 ** 4, rate=0.3) -> CertResult:
    """Mean per-inference message counts on the 16-device complete graph
    under communication faults match the accounting convention."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))
    rows = []
    passed = True
    for name, k, g, expected, tol in COMM_COUNT_CASES:
        graph = build_graph("complete", 16, k)
        total = 0.0
        for _ in range(realizations):
            r = sample_comm_faults(graph, rate, rng)
            total += count_comm([r] * (g + 1), graph.aggregators).total
        mean = total / realizations
        ok = abs(mean - expected) <= tol
        passed = passed and ok
        rows.append(f"{name} {mean:.1f}/{expected:g}")
    return CertResult("comm-counts", passed, ", ".join(rows))


def cert_gradient_check(seed=0, step=1e-5, tol=1e-6) -> CertResult:
    """Analytic gradients through the split pipeline (encoders, zero-imputed
    concatenation, heads) match central finite differences on a two-client,
    two-aggregator toy, with and without a dropped delivery."""
    from .data import one_hot
    from .inference import init_split_model

    graph = build_graph("complete", 2, 2)
    rng = stream(seed, "init")
    model = init_split_model(graph, [4, 4], 3, rng)
    data_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed + 1)))
    views = [data_rng.random((5, 4)), data_rng.random((5, 4))]
    y = one_hot(data_rng.integers(0, 3, size=5), 3)

    full = np.ones((2, 2), dtype=bool)
    dropped = full.copy()
    dropped[0, 1] = False  # aggregator 1 loses client 2
    worst = 0.0
    for keep in (full, dropped):
        worst = max(worst, _max_grad_error(model, views, y, keep, graph, step))
    return CertResult("gradient-check", worst < tol,
                      f"max relative error {worst:.3e} (tolerance {tol:g})")


def _max_grad_error(model, views, y, keep, graph, step):
    alive_aggs = list(graph.aggregators)
    alive_clients = np.ones(model.client_count, dtype=bool)

    def loss_of(m):
        val, _, _ = split_loss_and_grads(m, views, y, keep, alive_aggs, alive_clients)
        return val

    _, enc_grads, head_grads = split_loss_and_grads(
        model, views, y, keep, alive_aggs, alive_clients)

    worst = 0.0
    groups = [(enc_grads[c], model.encoders[c - 1])
              for c in range(1, model.client_count + 1)]
    groups += [(head_grads[k], model.heads[k]) for k in sorted(model.heads)]
    for grads, mlp in groups:
        for li in range(len(mlp.layers)):
            for wi in range(2):  # weight then bias
                arr = mlp.layers[li][wi]
                g = grads[li][wi]
                it = np.nditer(arr, flags=["multi_index"])
                for _ in it:
                    idx = it.multi_index
                    orig = arr[idx]
                    arr[idx] = orig + step
                    up = loss_of(model)
                    arr[idx] = orig - step
                    down = loss_of(model)
                    arr[idx] = orig
                    fd = (up - down) / (2.0 * step)
                    denom = max(abs(fd), abs(g[idx]), 1e-3)
                    worst = max(worst, abs(fd - g[idx]) / denom)
    return worst


def run_all(seed=0):
    return [
        cert_ensemble_identity(seed),
        cert_gossip_contraction(seed),
        cert_catastrophic_probability(seed),
        cert_selection_uniformity(seed),
        cert_comm_counts(seed),
        cert_gradient_check(seed),
    ]


def format_report(results):
    lines = [r.line() for r in results]
    lines.append("all certificates passed" if all(r.passed for r in results)
                 else "CERTIFICATE FAILURES PRESENT")
    return "\n".join(lines)
