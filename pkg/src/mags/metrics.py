"""Selection policies, Monte Carlo risk estimation, communication counting,
and the ensemble-loss decomposition.

Selection policies map per-aggregator predictions to one system output:

* ``active_rand``  uniform pick among active aggregators
* ``active_best``  correct iff any active prediction is correct (oracle)
* ``active_worst`` incorrect iff any active prediction is incorrect (oracle)
* ``any_rand``     uniform pick over all devices, active or not

When no aggregator can reach the entity (or an uninformed device is picked),
the output is a uniformly random class.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import PartitionSpec, client_views
from .errors import ConfigError, InputError
from .faults import FAULT_KIND_IDS, FaultModel
from .inference import SplitModel, mags_infer
from .rng import stream
from .topology import DeviceGraph

POLICIES = ("active_rand", "active_best", "active_worst", "any_rand")


def select(policy, predictions, active, device_count, label, class_count, rng):
    """Single-sample selection. Returns (predicted class, correct flag).

    ``predictions`` maps alive aggregator ids to probability vectors;
    ``active`` is the set of aggregators whose entity link is up.
    """
    if policy not in POLICIES:
        raise ConfigError(f"unknown policy {policy!r}")
    act = sorted(int(a) for a in active)
    if policy == "any_rand":
        pick = 1 + int(rng.integers(device_count))
        if pick in act and pick in predictions:
            pred = int(np.argmax(predictions[pick]))
        else:
            pred = int(rng.integers(class_count))
        return pred, pred == label
    if not act:
        pred = int(rng.integers(class_count))
        return pred, pred == label
    argmaxes = {k: int(np.argmax(predictions[k])) for k in act}
    if policy == "active_rand":
        pred = argmaxes[act[int(rng.integers(len(act)))]]
        return pred, pred == label
    if policy == "active_best":
        for k in act:
            if argmaxes[k] == label:
                return label, True
        return argmaxes[act[0]], False
    # active_worst
    for k in act:
        if argmaxes[k] != label:
            return argmaxes[k], False
    return label, True


@dataclass
class CommCount:
    """Messages into aggregators per inference, final entity hop excluded."""

    aggregation: int
    gossip: list

    @property
    def total(self):
        return self.aggregation + sum(self.gossip)


def count_comm(realizations, aggregators) -> CommCount:
    """Count alive directed non-self device edges into each alive aggregator,
    once per communication round. Gossip rounds count deliveries from all
    base neighbors (the accounting convention), even though the averaging
    itself only consumes aggregator values."""
    per_round = []
    for r in realizations:
        total = 0
        for k in aggregators:
            if not r.alive[k]:
                continue
            row = r.edge_alive[k, 1:]
            total += int(row.sum()) - int(r.edge_alive[k, k])
        per_round.append(total)
    if not per_round:
        return CommCount(0, [])
    return CommCount(per_round[0], per_round[1:])


def _logsumexp(v):
    m = float(np.max(v))
    return m + float(np.log(np.sum(np.exp(v - m))))


def ensemble_decomposition(member_log_probs, y_onehot):
    """Normalized geometric-mean ensemble of probability members.

    Members are normalized log-probability vectors, shape (K, M). Returns
    (ensemble loss, mean member loss, diversity) where diversity is the mean
    KL divergence from the ensemble to each member; the three satisfy
    ensemble = mean - diversity, checked here to 1e-9.
    """
    lps = np.asarray(member_log_probs, dtype=np.float64)
    if lps.ndim != 2 or lps.shape[0] < 1:
        raise InputError("need at least one member log-probability vector")
    y = np.asarray(y_onehot, dtype=np.float64).reshape(-1)
    if y.shape[0] != lps.shape[1]:
        raise InputError("target length does not match class count")

    mean_lp = lps.mean(axis=0)
    log_z = _logsumexp(mean_lp)
    ens_lp = mean_lp - log_z
    p_ens = np.exp(ens_lp)

    ens_loss = float(-(y * ens_lp).sum())
    mean_member_loss = float(-(y[None, :] * lps).sum(axis=1).mean())
    diversity = float(np.mean([(p_ens * (ens_lp - lps[k])).sum()
                               for k in range(lps.shape[0])]))
    residual = abs(ens_loss - (mean_member_loss - diversity))
    if residual > 1e-9:
        raise ArithmeticError(f"ensemble decomposition identity violated by {residual:.3e}")
    return ens_loss, mean_member_loss, diversity


@dataclass
class EvalResult:
    accuracy: dict       # policy -> accuracy in [0, 1]
    comm_mean: float     # mean messages per inference
    sample_count: int


def evaluate_policies(model: SplitModel, features, labels, partition: PartitionSpec,
                      graph: DeviceGraph, fault_model: FaultModel, policies,
                      gossip_rounds: int, seed: int, batch_size: int = 64,
                      trials: int = 1) -> EvalResult:
    """Score several selection policies against shared fault realizations and
    shared selection draws (common random numbers).

    The coupling preserves each policy's marginal distribution while making
    the oracle orderings (best >= rand >= worst) hold per sample: the
    any-device pick doubles as the active pick whenever it lands in the
    active set, and every uniform-guess fallback within a sample shares one
    draw. One realization is drawn per batch and held fixed for the batch.
    """
    for p in policies:
        if p not in POLICIES:
            raise ConfigError(f"unknown policy {p!r}")
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    fault_model.validate()
    kind_id = FAULT_KIND_IDS[fault_model.kind]
    rate_key = int(round(fault_model.rate * 1000))
    rng_fault = stream(seed, "fault", kind_id, rate_key)
    rng_sel = stream(seed, "select", kind_id, rate_key)

    views = client_views(features, partition)
    n = labels.shape[0]
    c_count = graph.device_count
    m = model.class_count

    hits = {p: 0.0 for p in policies}
    comm_total = 0.0
    seen = 0
    for _ in range(trials):
        for start in range(0, n, batch_size):
            sl = slice(start, min(start + batch_size, n))
            b = sl.stop - sl.start
            res = mags_infer(model, [v[sl] for v in views], graph, fault_model,
                             gossip_rounds, rng_fault)
            comm_total += count_comm(res.realizations, graph.aggregators).total * b
            seen += b
            lab = labels[sl]
            act = sorted(res.active)

            guess = rng_sel.integers(m, size=b)
            upick = rng_sel.integers(1, c_count + 1, size=b)
            vpick = rng_sel.integers(max(len(act), 1), size=b)

            guess_ok = guess == lab
            if not act:
                for p in policies:
                    hits[p] += float(guess_ok.sum())
                continue

            argmax = np.stack([res.probs[k].argmax(axis=1) for k in act])  # (|A|, b)
            correct = argmax == lab[None, :]
            row_of = np.full(c_count + 1, -1, dtype=np.int64)
            for i, k in enumerate(act):
                row_of[k] = i
            u_row = row_of[upick]
            u_in_act = u_row >= 0
            rand_rows = np.where(u_in_act, u_row, vpick)
            cols = np.arange(b)

            outcomes = {
                "active_rand": correct[rand_rows, cols],
                "active_best": correct.any(axis=0),
                "active_worst": correct.all(axis=0),
                "any_rand": np.where(u_in_act, correct[np.maximum(u_row, 0), cols], guess_ok),
            }
            for p in policies:
                hits[p] += float(outcomes[p].sum())

    total = n * trials
    return EvalResult({p: hits[p] / total for p in policies},
                      comm_total / max(seen, 1), total)


@dataclass
class RiskEstimate:
    policy: str
    mean: float
    std: float
    per_seed: list
    sample_count: int
    fault_kind: str
    fault_rate: float


def estimate_risk(model: SplitModel, features, labels, partition, graph,
                  fault_model: FaultModel, policy: str, gossip_rounds: int,
                  trials: int, seeds) -> RiskEstimate:
    """Accuracy under the given fault model and policy, aggregated over seeds
    (each seed drives independent fault and selection streams)."""
    seeds = list(seeds)
    if not seeds:
        raise ConfigError("need at least one seed")
    accs = []
    for s in seeds:
        r = evaluate_policies(model, features, labels, partition, graph,
                              fault_model, [policy], gossip_rounds, s,
                              trials=trials)
        accs.append(r.accuracy[policy])
    arr = np.array(accs)
    std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return RiskEstimate(policy, float(arr.mean()), std, accs,
                        labels.shape[0] * trials, fault_model.kind, fault_model.rate)


@dataclass
class RiskBoundReport:
    fault_rate: float
    aggregator_count: int
    clean_risk: float
    faulted_risk: float
    bound: float
    sigma: float
    passed: bool


def risk_bound_report(model: SplitModel, features, labels, partition, graph,
                      rate: float, seed: int = 0, trials: int = 1,
                      gossip_rounds: int = 0, batch_size: int = 64) -> RiskBoundReport:
    """Catastrophic-failure lower bound on 0-1 risk under device faults.

    With K aggregators all dying independently at rate r, the faulted risk
    cannot drop below (1 - r^K) * clean risk + r^K * uniform-guess risk; the
    check allows a 3-sigma Monte Carlo margin. One fault realization is
    shared per batch, so catastrophic events fluctuate at batch granularity
    and the sigma combines batch-level and sample-level variance.
    """
    k = len(graph.aggregators)
    m = model.class_count
    clean = evaluate_policies(model, features, labels, partition, graph,
                              FaultModel("none"), ["active_rand"],
                              gossip_rounds, seed, batch_size=batch_size, trials=trials)
    faulted = evaluate_policies(model, features, labels, partition, graph,
                                FaultModel("device", rate), ["active_rand"],
                                gossip_rounds, seed, batch_size=batch_size, trials=trials)
    clean_risk = 1.0 - clean.accuracy["active_rand"]
    faulted_risk = 1.0 - faulted.accuracy["active_rand"]
    catastrophic = rate ** k
    bound = (1.0 - catastrophic) * clean_risk + catastrophic * (1.0 - 1.0 / m)
    n = labels.shape[0] * trials
    batches = -(-labels.shape[0] // batch_size) * trials
    var = (catastrophic * (1.0 - catastrophic) / batches
           + max(faulted_risk * (1.0 - faulted_risk), 1e-12) / n)
    sigma = float(np.sqrt(var))
    return RiskBoundReport(rate, k, clean_risk, faulted_risk, bound, sigma,
                           faulted_risk >= bound - 3.0 * sigma)
