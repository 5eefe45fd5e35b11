"""Decentralized training.

The objective is the sum over aggregator heads of mean cross-entropy (labels
are available at every device), backpropagated exactly through the
concatenation into every client encoder, one Adam step per parameter group
per batch. Faults are simulated with party-wise (PD) or communication-wise
(CD) dropout: dropped slots are zero-imputed with no inverse-rate rescaling,
because the point is to match the test-time fault distribution, not to
regularize. One dropout/fault realization is drawn per batch and held fixed
for that batch. Gossip stays out of training unless explicitly enabled.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, PartitionSpec, client_views, one_hot
from .errors import ConfigError, InputError
from .faults import FaultModel, sample_realization
from .inference import SplitModel, init_split_model
from .nn import (Mlp, adam_init, adam_update, check_one_hot, log_softmax,
                 mlp_backward, mlp_forward, relu, zero_grads_like)
from .rng import stream
from .topology import DeviceGraph

DROPOUT_KINDS = ("none", "pd", "cd")


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    dropout: str = "none"        # none | pd | cd
    dropout_rate: float = 0.3
    train_fault: FaultModel = field(default_factory=FaultModel)
    gossip_rounds: int = 0       # rounds folded into the training loss; 0 = off
    seed: int = 1

    def validate(self):
        if self.dropout not in DROPOUT_KINDS:
            raise ConfigError(f"unknown dropout kind {self.dropout!r}")
        if not 0.0 <= self.dropout_rate <= 1.0:
            raise ConfigError(f"dropout rate {self.dropout_rate} outside [0, 1]")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.gossip_rounds < 0:
            raise ConfigError("gossip_rounds must be >= 0")
        self.train_fault.validate()
        return self


def apply_pd_mask(client_count: int, rate: float, rng) -> np.ndarray:
    """Party-wise dropout keep flags: a dropped client's representation
    disappears for every aggregator at once, its own head included."""
    if not 0.0 <= rate <= 1.0:
        raise ConfigError(f"dropout rate {rate} outside [0, 1]")
    return rng.random(client_count) >= rate


def apply_cd_mask(aggregator_count: int, client_count: int, aggregators, rate: float, rng) -> np.ndarray:
    """Communication-wise dropout keep flags, shape (K, C): each non-self
    client->aggregator delivery drops independently; self slots never drop."""
    if not 0.0 <= rate <= 1.0:
        raise ConfigError(f"dropout rate {rate} outside [0, 1]")
    keep = rng.random((aggregator_count, client_count)) >= rate
    for j, k in enumerate(aggregators):
        keep[j, k - 1] = True
    return keep


def batch_delivery(graph: DeviceGraph, cfg: TrainConfig, rng_dropout, rng_fault):
    """One per-batch delivery mask: which client representations reach which
    aggregator. Returns (keep (K, C), alive aggregators, alive clients)."""
    aggs = graph.aggregators
    c = graph.device_count
    base = graph.adj[np.ix_(list(aggs), range(1, c + 1))].copy()
    alive_clients = np.ones(c, dtype=bool)
    alive_aggs = list(aggs)
    if cfg.train_fault.kind != "none":
        realized = sample_realization(graph, cfg.train_fault, rng_fault)
        keep = realized.edge_alive[np.ix_(list(aggs), range(1, c + 1))]
        alive_clients = realized.alive[1:].copy()
        alive_aggs = [k for k in aggs if realized.alive[k]]
    elif cfg.dropout == "pd":
        keep = base & apply_pd_mask(c, cfg.dropout_rate, rng_dropout)[None, :]
    elif cfg.dropout == "cd":
        keep = base & apply_cd_mask(len(aggs), c, aggs, cfg.dropout_rate, rng_dropout)
    else:
        keep = base
    return keep, alive_aggs, alive_clients


def gossip_mix_matrix(graph: DeviceGraph, alive_aggs) -> np.ndarray:
    """Row-stochastic averaging matrix over alive aggregators (base edges)."""
    n = len(alive_aggs)
    w = np.zeros((n, n))
    for i, k in enumerate(alive_aggs):
        nbrs = [j for j, kp in enumerate(alive_aggs) if kp == k or graph.adj[k, kp]]
        w[i, nbrs] = 1.0 / len(nbrs)
    return w


def split_loss_and_grads(model: SplitModel, views, y_onehot, keep, alive_aggs,
                         alive_clients, gossip_mix=None, gossip_rounds=0):
    """Loss summed over aggregator heads (mean over the batch) with exact
    gradients for every encoder and head.

    ``keep[j, c-1]`` says whether client c's representation reaches
    ``alive_aggs[j]``; unreachable slots are zero-imputed and receive no
    gradient. With ``gossip_mix`` set, the per-head log-probabilities are
    mixed for ``gossip_rounds`` rounds and renormalized before the loss.
    """
    y = check_one_hot(y_onehot)
    n = max(y.shape[0], 1)
    c_count = model.client_count
    rep = model.rep_dim

    reps, enc_tapes = {}, {}
    for c in range(1, c_count + 1):
        if not alive_clients[c - 1]:
            continue
        out, tape = mlp_forward(model.encoders[c - 1], views[c - 1])
        reps[c] = relu(out)
        enc_tapes[c] = tape

    head_tapes, log_ps = {}, []
    for j, k in enumerate(alive_aggs):
        u = np.zeros((y.shape[0], c_count * rep))
        for c in range(1, c_count + 1):
            if keep[j, c - 1] and c in reps:
                u[:, model.slot(c)] = reps[c]
        logits, tape = mlp_forward(model.heads[k], u)
        head_tapes[k] = tape
        log_ps.append(log_softmax(logits))

    if not alive_aggs:
        return 0.0, {}, {}

    if gossip_mix is not None and gossip_rounds > 0:
        z = np.stack(log_ps)  # (K', B, M)
        mixed = z
        for _ in range(gossip_rounds):
            mixed = np.tensordot(gossip_mix, mixed, axes=(1, 0))
        finals = [log_softmax(mixed[j]) for j in range(len(alive_aggs))]
        loss = sum(float(-(y * lp).sum() / n) for lp in finals)
        dmix = np.stack([(np.exp(lp) - y) / n for lp in finals])
        for _ in range(gossip_rounds):
            dmix = np.tensordot(gossip_mix.T, dmix, axes=(1, 0))
        dlogits_list = []
        for j in range(len(alive_aggs)):
            dlp = dmix[j]
            p = np.exp(log_ps[j])
            dlogits_list.append(dlp - p * dlp.sum(axis=1, keepdims=True))
    else:
        loss = sum(float(-(y * lp).sum() / n) for lp in log_ps)
        dlogits_list = [(np.exp(lp) - y) / n for lp in log_ps]

    d_rep = {c: np.zeros_like(r) for c, r in reps.items()}
    head_grads = {}
    for j, k in enumerate(alive_aggs):
        hg, du = mlp_backward(model.heads[k], head_tapes[k], dlogits_list[j])
        head_grads[k] = hg
        for c in range(1, c_count + 1):
            if keep[j, c - 1] and c in reps:
                d_rep[c] += du[:, model.slot(c)]

    enc_grads = {}
    for c, r in reps.items():
        dh = d_rep[c] * (r > 0)
        eg, _ = mlp_backward(model.encoders[c - 1], enc_tapes[c], dh)
        enc_grads[c] = eg
    return loss, enc_grads, head_grads


@dataclass
class SplitOptimizer:
    encoder_states: list
    head_states: dict


def init_optimizer(model: SplitModel, cfg: TrainConfig) -> SplitOptimizer:
    return SplitOptimizer(
        [adam_init(e, cfg.lr, cfg.beta1, cfg.beta2) for e in model.encoders],
        {k: adam_init(h, cfg.lr, cfg.beta1, cfg.beta2) for k, h in model.heads.items()},
    )


def optimizer_step(model: SplitModel, opt: SplitOptimizer, enc_grads, head_grads):
    """Adam step for every parameter group; groups without a gradient this
    batch step with zeros, matching a single monolithic optimizer."""
    encoders, enc_states = [], []
    for c, (enc, st) in enumerate(zip(model.encoders, opt.encoder_states), start=1):
        g = enc_grads.get(c) or zero_grads_like(enc)
        e2, s2 = adam_update(enc, g, st)
        encoders.append(e2)
        enc_states.append(s2)
    heads, head_states = {}, {}
    for k in model.heads:
        g = head_grads.get(k) or zero_grads_like(model.heads[k])
        h2, s2 = adam_update(model.heads[k], g, opt.head_states[k])
        heads[k] = h2
        head_states[k] = s2
    model2 = SplitModel(encoders, heads, model.rep_dim, model.class_count)
    return model2, SplitOptimizer(enc_states, head_states)


def train_epoch(model, opt, views, y_onehot, graph, cfg, rng_data, rng_dropout, rng_fault):
    """One pass over the data. Returns (model, optimizer, mean train loss)."""
    n = y_onehot.shape[0]
    order = rng_data.permutation(n)
    total, seen = 0.0, 0
    for start in range(0, n, cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        keep, alive_aggs, alive_clients = batch_delivery(graph, cfg, rng_dropout, rng_fault)
        mix = gossip_mix_matrix(graph, alive_aggs) if cfg.gossip_rounds > 0 else None
        loss, eg, hg = split_loss_and_grads(
            model, [v[idx] for v in views], y_onehot[idx], keep, alive_aggs,
            alive_clients, gossip_mix=mix, gossip_rounds=cfg.gossip_rounds)
        model, opt = optimizer_step(model, opt, eg, hg)
        total += loss * len(idx)
        seen += len(idx)
    return model, opt, total / max(seen, 1)


def evaluate_split(model: SplitModel, views, labels, graph: DeviceGraph, chunk=512):
    """Fault-free validation: summed head cross-entropy (mean over samples)
    and accuracy averaged over aggregators."""
    aggs = graph.aggregators
    c = graph.device_count
    keep = graph.adj[np.ix_(list(aggs), range(1, c + 1))]
    alive_clients = np.ones(c, dtype=bool)
    n = labels.shape[0]
    y = one_hot(labels, model.class_count)
    loss_sum, hit_sum = 0.0, 0.0
    for start in range(0, n, chunk):
        sl = slice(start, min(start + chunk, n))
        b = sl.stop - sl.start
        reps = {}
        for ci in range(1, c + 1):
            out, _ = mlp_forward(model.encoders[ci - 1], views[ci - 1][sl])
            reps[ci] = relu(out)
        for j, k in enumerate(aggs):
            u = np.zeros((b, c * model.rep_dim))
            for ci in range(1, c + 1):
                if keep[j, ci - 1]:
                    u[:, model.slot(ci)] = reps[ci]
            logits, _ = mlp_forward(model.heads[k], u)
            lp = log_softmax(logits)
            loss_sum += float(-(y[sl] * lp).sum())
            hit_sum += float((lp.argmax(axis=1) == labels[sl]).sum())
    return loss_sum / n, hit_sum / (n * len(aggs))


@dataclass
class Checkpoint:
    model: SplitModel
    config: dict
    best_val_loss: float
    best_epoch: int


def config_echo(cfg: TrainConfig, graph: DeviceGraph, partition: PartitionSpec, class_count: int) -> dict:
    return {
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "lr": cfg.lr,
        "beta1": cfg.beta1,
        "beta2": cfg.beta2,
        "dropout": cfg.dropout,
        "dropout_rate": cfg.dropout_rate,
        "train_fault_kind": cfg.train_fault.kind,
        "train_fault_rate": cfg.train_fault.rate,
        "gossip_rounds": cfg.gossip_rounds,
        "seed": cfg.seed,
        "graph_kind": graph.kind,
        "device_count": graph.device_count,
        "rgg_radius": graph.rgg_radius,
        "aggregators": list(graph.aggregators),
        "grid_side": partition.grid_side,
        "class_count": class_count,
    }


def fit(cfg: TrainConfig, train: Dataset, val: Dataset, partition: PartitionSpec,
        graph: DeviceGraph, curve_path=None) -> Checkpoint:
    """Train for cfg.epochs and keep the parameters with the lowest fault-free
    validation loss. Fully deterministic for a fixed seed."""
    cfg.validate()
    if len(val) == 0:
        raise InputError("validation split must be nonempty")
    if partition.client_count != graph.device_count:
        raise ConfigError(
            f"{partition.client_count} clients in partition vs {graph.device_count} devices")

    tr_views = client_views(train.features, partition)
    va_views = client_views(val.features, partition)
    y = one_hot(train.labels, train.class_count)

    model = init_split_model(graph, partition.patch_dims(), train.class_count,
                             stream(cfg.seed, "init"))
    opt = init_optimizer(model, cfg)
    rng_data = stream(cfg.seed, "data")
    rng_dropout = stream(cfg.seed, "dropout")
    rng_fault = stream(cfg.seed, "fault")

    best_loss, _ = evaluate_split(model, va_views, val.labels, graph)
    best_model = model.copy()
    best_epoch = 0

    curves = []
    for epoch in range(1, cfg.epochs + 1):
        model, opt, tr_loss = train_epoch(model, opt, tr_views, y, graph, cfg,
                                          rng_data, rng_dropout, rng_fault)
        val_loss, val_acc = evaluate_split(model, va_views, val.labels, graph)
        curves.append((epoch, tr_loss, val_loss, val_acc))
        if val_loss < best_loss:
            best_loss = val_loss
            best_model = model.copy()
            best_epoch = epoch

    if curve_path is not None:
        with open(curve_path, "a") as f:
            if f.tell() == 0:
                f.write("epoch,train_loss,val_loss,val_accuracy\n")
            for row in curves:
                f.write(f"{row[0]},{row[1]:.9g},{row[2]:.9g},{row[3]:.9g}\n")

    echo = config_echo(cfg, graph, partition, train.class_count)
    return Checkpoint(best_model, echo, best_loss, best_epoch)


# Checkpoint file layout: a text manifest (layer shapes, config echo and its
# hash) terminated by a DATA line, then raw little-endian float32 values,
# row-major per layer, clients ascending then aggregators ascending, weight
# before bias. Parameters compute in float64 but serialize as float32.

_CKPT_MAGIC = "MAGS-CKPT v1"


def _config_line(config: dict) -> str:
    return json.dumps(config, sort_keys=True, separators=(",", ":"))


def save_checkpoint(ckpt: Checkpoint, path):
    model = ckpt.model
    cfg_line = _config_line(ckpt.config)
    cfg_hash = hashlib.sha256(cfg_line.encode()).hexdigest()
    head = io.StringIO()
    head.write(_CKPT_MAGIC + "\n")
    head.write(f"config {cfg_line}\n")
    head.write(f"config_hash {cfg_hash}\n")
    head.write(f"best_epoch {ckpt.best_epoch}\n")
    head.write(f"best_val_loss {ckpt.best_val_loss!r}\n")
    head.write(f"clients {model.client_count}\n")
    head.write(f"classes {model.class_count}\n")
    head.write(f"rep_dim {model.rep_dim}\n")
    head.write("aggregators " + " ".join(str(k) for k in sorted(model.heads)) + "\n")
    for c, enc in enumerate(model.encoders, start=1):
        head.write(f"encoder {c} " + " ".join(str(d) for d in enc.dims) + "\n")
    for k in sorted(model.heads):
        head.write(f"head {k} " + " ".join(str(d) for d in model.heads[k].dims) + "\n")
    head.write("DATA\n")

    blobs = []
    for enc in model.encoders:
        for w, b in enc.layers:
            blobs.append(w.astype("<f4").tobytes())
            blobs.append(b.astype("<f4").tobytes())
    for k in sorted(model.heads):
        for w, b in model.heads[k].layers:
            blobs.append(w.astype("<f4").tobytes())
            blobs.append(b.astype("<f4").tobytes())

    with open(path, "wb") as f:
        f.write(head.getvalue().encode())
        for blob in blobs:
            f.write(blob)


def _read_mlp(buf: memoryview, offset: int, dims):
    layers = []
    for n, m in zip(dims[:-1], dims[1:]):
        w = np.frombuffer(buf, dtype="<f4", count=n * m, offset=offset)
        offset += 4 * n * m
        b = np.frombuffer(buf, dtype="<f4", count=m, offset=offset)
        offset += 4 * m
        layers.append((w.reshape(n, m).astype(np.float64), b.astype(np.float64)))
    return Mlp(layers), offset


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    marker = b"\nDATA\n"
    cut = raw.find(marker)
    if cut < 0 or not raw.startswith(_CKPT_MAGIC.encode()):
        raise ConfigError(f"{path}: not a checkpoint file")
    header = raw[:cut].decode().splitlines()
    body = memoryview(raw[cut + len(marker):])

    fields = {}
    enc_dims, head_dims = {}, {}
    for line in header[1:]:
        key, _, rest = line.partition(" ")
        if key == "encoder":
            c, *dims = rest.split()
            enc_dims[int(c)] = [int(d) for d in dims]
        elif key == "head":
            k, *dims = rest.split()
            head_dims[int(k)] = [int(d) for d in dims]
        else:
            fields[key] = rest
    config = json.loads(fields["config"])
    if hashlib.sha256(fields["config"].encode()).hexdigest() != fields["config_hash"]:
        raise ConfigError(f"{path}: config hash mismatch")

    offset = 0
    encoders = []
    for c in sorted(enc_dims):
        mlp, offset = _read_mlp(body, offset, enc_dims[c])
        encoders.append(mlp)
    heads = {}
    for k in sorted(head_dims):
        mlp, offset = _read_mlp(body, offset, head_dims[k])
        heads[k] = mlp
    if offset != len(body):
        raise ConfigError(f"{path}: trailing bytes in checkpoint payload")

    model = SplitModel(encoders, heads, int(fields["rep_dim"]), int(fields["classes"]))
    return Checkpoint(model, config, float(fields["best_val_loss"]),
                      int(fields["best_epoch"]))
