"""Round loop: server and client state machines, local training, aggregation.

With every mechanism toggled off the update rule is plain FedAvg: clients
overwrite their model with the broadcast, train on cross-entropy and the
server takes the sample-weighted average.
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .ace import AceContextMatrix, anneal_tau, client_context
from .config import RunConfig
from .cro import DegenerateMeasurementError, compute_cr, cr_weighted_loss, measure_class_gradients, normalize_cr
from .data import Dataset, SesSet, Shard, Workload, build_workload
from .dmr import Schedule
from .fau import multi_scale_divergence, fau_update
from .metrics import class_accuracy, confusion, pca_trajectory, ratio_similarity, sample_accuracy
from .model import (ActivationCapture, ModelConfig, ModelParams, flatten_params, forward, init_params,
                    is_backbone, is_embedding, is_head, predict)

log = logging.getLogger(__name__)

SELECTION_STREAM = 1_000_003
INIT_STREAM = 7


class RoundError(RuntimeError):
    def __init__(self, round_: int, cause: BaseException):
        super().__init__(f"round {round_}: {type(cause).__name__}: {cause}")
        self.round = round_


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, values: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name in sorted(grads):
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            values[name] = values[name] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def select_clients(num_clients: int, k: int, rng: np.random.Generator) -> list[int]:
    """k distinct client ids, uniform without replacement, returned sorted."""
    if not 1 <= k <= num_clients:
        raise ValueError(f"cannot select {k} of {num_clients} clients")
    if k == num_clients:
        return list(range(num_clients))
    return sorted(int(i) for i in rng.choice(num_clients, size=k, replace=False))


@dataclass
class Upload:
    client_id: int
    params: ModelParams
    num_samples: int
    embedding_rows: list[np.ndarray]
    capture: ActivationCapture | None
    epoch_losses: list[float]
    d_cka: float | None


def aggregation_weights(sample_counts) -> np.ndarray:
    n = np.asarray(sample_counts, dtype=np.float64)
    if np.any(n < 0) or n.sum() <= 0:
        raise ValueError("sample counts must be non-negative with a positive total")
    return n / n.sum()


def aggregate(uploads: list[Upload], template: ModelParams | None = None) -> ModelParams:
    """Sample-weighted mean of backbone and head; embedding rows are not averaged.

    Uploads are put in client-id order and averaged as offsets from the first
    one, so identical uploads reproduce their value exactly.
    """
    if not uploads:
        raise ValueError("nothing to aggregate")
    ups = sorted(uploads, key=lambda u: u.client_id)
    w = aggregation_weights([u.num_samples for u in ups])
    ref = ups[0].params.arrays()
    for u in ups[1:]:
        arr = u.params.arrays()
        if arr.keys() != ref.keys() or any(arr[k].shape != ref[k].shape for k in ref):
            raise ValueError(f"upload from client {u.client_id} has a different parameter layout")
    base = (template or ups[0].params).arrays()
    out = {}
    for name, r in ref.items():
        if is_embedding(name):
            out[name] = np.array(base[name], copy=True)
            continue
        acc = np.array(r, copy=True)
        for wk, u in zip(w[1:], ups[1:]):
            acc += wk * (u.params.arrays()[name] - r)
        out[name] = acc
    return ups[0].params.with_values(out)


@dataclass
class Broadcast:
    round: int
    params: ModelParams
    cr_tilde: np.ndarray
    context: list[np.ndarray]  # per-stage K×D
    global_capture: ActivationCapture | None
    schedule: Schedule
    tau: float
    learning_rate: float
    fau_round: bool


class Server:
    """Holds only the global model, the SES, CR̃, per-client D_CKA and the context matrix."""

    def __init__(self, params: ModelParams, ses: SesSet, mcfg: ModelConfig, context: list[np.ndarray]):
        self.params = params
        self.ses = ses
        self.mcfg = mcfg
        self.cr_tilde = np.zeros(mcfg.num_classes)
        self.context = [c.copy() for c in context]
        self.d_cka: dict[int, float] = {}
        self.round = 0

    def context_matrix(self) -> AceContextMatrix | None:
        return AceContextMatrix.from_arrays(self.context) if self.mcfg.ace_enabled else None

    def capture(self) -> ActivationCapture:
        _, cap = forward(self.params, self.ses.images, self.mcfg, self.context_matrix(), training=False)
        return cap

    def remeasure_cr(self) -> np.ndarray:
        g = measure_class_gradients(self.params, self.ses.images, self.ses.labels, self.mcfg, self.context_matrix())
        try:
            self.cr_tilde = normalize_cr(compute_cr(g))
        except DegenerateMeasurementError:
            log.warning("degenerate CR measurement at round %d; keeping previous CR", self.round)
        return self.cr_tilde

    def absorb(self, uploads: list[Upload]) -> None:
        self.params = aggregate(uploads, self.params)
        for u in uploads:
            for s, row in enumerate(u.embedding_rows):
                self.context[s][u.client_id] = row
            if u.d_cka is not None:
                self.d_cka[u.client_id] = u.d_cka


class Client:
    def __init__(self, shard: Shard, test: Dataset, params: ModelParams, mcfg: ModelConfig, cfg: RunConfig):
        self.client_id = shard.client_id
        self.shard = shard
        self.test = test
        self.params = params
        self.mcfg = mcfg
        self.cfg = cfg

    def rng(self, round_: int) -> np.random.Generator:
        stream = 0 if self.cfg.shared_client_stream else self.client_id + 1
        return np.random.default_rng([self.cfg.seed, stream, round_])

    def context(self, arrays: list[np.ndarray]) -> AceContextMatrix | None:
        if not self.mcfg.ace_enabled:
            return None
        mats = [a.copy() for a in arrays]
        for s, row in enumerate(self.params.embedding_rows()):
            mats[s][self.client_id] = row
        return AceContextMatrix.from_arrays(mats)

    def ses_capture(self, ses_images: np.ndarray, context: list[np.ndarray]) -> ActivationCapture:
        _, cap = forward(self.params, ses_images, self.mcfg, self.context(context), training=False)
        return cap

    def receive(self, b: Broadcast, ses_images: np.ndarray) -> float | None:
        """Blend (FAU round) or overwrite with the broadcast; returns D_CKA when measured."""
        toggles = self.cfg.toggles
        local = self.params.arrays()
        glob = b.params.arrays()
        d_cka = None
        if toggles.fau and b.fau_round:
            d_cka = multi_scale_divergence(b.global_capture, self.ses_capture(ses_images, b.context)).mean
            eps_m = b.schedule.eps_minus if toggles.dmr else 0.0
            names = [k for k in local if is_backbone(k)]
            blended = fau_update({k: local[k] for k in names}, {k: glob[k] for k in names}, d_cka, eps_m)
            new = {**local, **blended, **{k: glob[k].copy() for k in local if is_head(k)}}
        else:
            new = {k: (local[k] if is_embedding(k) else glob[k].copy()) for k in local}
        self.params = self.params.with_values(new)
        return d_cka

    def train(self, b: Broadcast) -> list[float]:
        data = self.shard.read(self.client_id)
        if len(data) == 0:
            raise ValueError(f"client {self.client_id} has an empty shard")
        toggles = self.cfg.toggles
        beta = self.cfg.cro.beta
        eps_p = (b.schedule.eps_plus if toggles.dmr else 1.0) if toggles.cro else 0.0
        rng = self.rng(b.round)
        opt = Adam(b.learning_rate)
        values = self.params.arrays()
        values = {k: np.array(v, copy=True) for k, v in values.items()}
        losses = []
        for _ in range(self.cfg.local_epochs):
            order = rng.permutation(len(data))
            total, seen = 0.0, 0
            for start in range(0, len(order), self.cfg.batch_size):
                idx = order[start:start + self.cfg.batch_size]
                leaves = self.params.with_values(values).as_leaves()
                ctx = None
                if self.mcfg.ace_enabled:
                    ctx = client_context(b.context, [a.context_embedding for a in leaves.ace], self.client_id)
                logits, _ = forward(leaves, data.images[idx], self.mcfg, ctx, b.tau, training=True, rng=rng)
                loss = cr_weighted_loss(logits, data.labels[idx], b.cr_tilde, beta, eps_p, from_logits=True)
                grads = T.backward(loss)
                opt.step(values, grads)
                total += loss.item() * len(idx)
                seen += len(idx)
            losses.append(total / seen)
        self.params = self.params.with_values(values)
        return losses

    def update(self, b: Broadcast, ses_images: np.ndarray) -> Upload:
        d_cka = self.receive(b, ses_images)
        losses = self.train(b)
        cap = self.ses_capture(ses_images, b.context)
        return Upload(self.client_id, self.params.clone(), len(self.shard.dataset),
                      [np.array(r, copy=True) for r in self.params.embedding_rows()], cap, losses, d_cka)

    def evaluate(self, context: list[np.ndarray]) -> tuple[float, float, np.ndarray] | None:
        if len(self.test) == 0:
            return None
        preds = predict(self.params, self.test.images, self.mcfg, self.context(context))
        j = self.mcfg.num_classes
        return (class_accuracy(preds, self.test.labels, j), sample_accuracy(preds, self.test.labels),
                confusion(preds, self.test.labels, j))


@dataclass
class RoundRecord:
    round: int
    eps_plus: float
    eps_minus: float
    tau: float
    cloud_c_acc: float
    cloud_s_acc: float
    client_c_acc: list[float | None]
    client_s_acc: list[float | None]
    mean_client_c_acc: float
    mean_client_s_acc: float
    d_cka: list[float]
    cr_tilde: list[float]
    ratio_cosine: float
    selected: list[int] = field(default_factory=list)
    epoch_losses: dict[int, list[float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["epoch_losses"] = {str(k): v for k, v in self.epoch_losses.items()}
        return d


def _mean(xs) -> float:
    xs = [x for x in xs if x is not None]
    return float(np.mean(xs)) if xs else 0.0


class Simulation:
    """One federated run; exposes the server, the clients and the records."""

    def __init__(self, cfg: RunConfig, workload: Workload | None = None):
        self.cfg = cfg
        self.mcfg = cfg.model_config()
        self.workload = workload or build_workload(cfg.data_config())
        if len(self.workload.shards) != cfg.clients:
            raise ValueError(f"workload has {len(self.workload.shards)} shards for {cfg.clients} clients")
        init = init_params(self.mcfg, np.random.default_rng([cfg.seed, INIT_STREAM]))
        erng = np.random.default_rng([cfg.seed, INIT_STREAM, 1])
        rows = [erng.normal(0.0, 1.0, (cfg.clients, self.mcfg.ace_dim)) for _ in init.embedding_rows()]
        self.server = Server(init, self.workload.ses, self.mcfg, rows)
        self.clients = []
        for shard, test in zip(self.workload.shards, self.workload.tests):
            p = init.clone()
            if p.ace is not None:
                for s, a in enumerate(p.ace):
                    a.context_embedding = rows[s][shard.client_id].copy()
            self.clients.append(Client(shard, test, p, self.mcfg, cfg))
        self.cloud_test = self.workload.cloud_test()
        self.train_counts = self.workload.train_counts()
        self.records: list[RoundRecord] = []
        self.snapshots: list[list[np.ndarray]] = []
        self.last_confusion: dict = {}

    def schedule(self, l: int) -> Schedule:
        return Schedule.at(l, max(self.cfg.rounds, 1))

    def evaluate(self, round_: int, l: int, selected, losses) -> RoundRecord:
        j = self.mcfg.num_classes
        ctx = self.server.context_matrix()
        preds = predict(self.server.params, self.cloud_test.images, self.mcfg, ctx)
        c_acc = class_accuracy(preds, self.cloud_test.labels, j)
        s_acc = sample_accuracy(preds, self.cloud_test.labels)
        self.last_confusion = {"cloud": confusion(preds, self.cloud_test.labels, j).tolist()}
        client_c, client_s = [], []
        for c in self.clients:
            res = c.evaluate(self.server.context)
            client_c.append(None if res is None else res[0])
            client_s.append(None if res is None else res[1])
            if res is not None:
                self.last_confusion[f"client_{c.client_id}"] = res[2].tolist()
        sch = self.schedule(l)
        rec = RoundRecord(
            round=round_, eps_plus=sch.eps_plus, eps_minus=sch.eps_minus,
            tau=anneal_tau(l, max(self.cfg.rounds, 1), self.cfg.gumbel_config()),
            cloud_c_acc=c_acc, cloud_s_acc=s_acc, client_c_acc=client_c, client_s_acc=client_s,
            mean_client_c_acc=_mean(client_c), mean_client_s_acc=_mean(client_s),
            d_cka=[self.server.d_cka.get(i, 1.0) for i in range(self.cfg.clients)],
            cr_tilde=self.server.cr_tilde.tolist(),
            ratio_cosine=ratio_similarity(self.server.cr_tilde, self.train_counts),
            selected=list(selected), epoch_losses=losses)
        if self.cfg.track_trajectory:
            self.snapshots.append([flatten_params(self.server.params)[0]]
                                  + [flatten_params(c.params)[0] for c in self.clients])
        return rec

    def step(self, round_: int) -> RoundRecord:
        """Run communication round ``round_`` (1-based); its schedule index is round_ - 1."""
        cfg = self.cfg
        l = round_ - 1
        L = max(cfg.rounds, 1)
        sel = select_clients(cfg.clients, cfg.selected_per_round,
                             np.random.default_rng([cfg.seed, SELECTION_STREAM, round_]))
        fau_round = cfg.toggles.fau and l % cfg.fau_period == 0
        lr = cfg.learning_rate * (0.5 if l >= cfg.rounds / 2 else 1.0)
        b = Broadcast(l, self.server.params.clone(), self.server.cr_tilde.copy(),
                      [c.copy() for c in self.server.context],
                      self.server.capture() if fau_round else None,
                      self.schedule(l), anneal_tau(l, L, cfg.gumbel_config()), lr, fau_round)
        ses_images = self.server.ses.images
        chosen = [self.clients[i] for i in sel]
        if cfg.workers > 1 and len(chosen) > 1:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                uploads = list(pool.map(lambda c: c.update(b, ses_images), chosen))
        else:
            uploads = [c.update(b, ses_images) for c in chosen]
        self.server.absorb(uploads)
        self.server.round = round_
        self.server.remeasure_cr()
        return self.evaluate(round_, l, sel, {u.client_id: u.epoch_losses for u in uploads})

    def run(self) -> list[RoundRecord]:
        self.records = [self.evaluate(0, 0, [], {})]
        for r in range(1, self.cfg.rounds + 1):
            try:
                rec = self.step(r)
            except Exception as e:  # surface which round failed
                raise RoundError(r, e) from e
            log.info("round %d cloud C.Acc %.4f S.Acc %.4f ratio %.3f", r, rec.cloud_c_acc,
                     rec.cloud_s_acc, rec.ratio_cosine)
            self.records.append(rec)
        return self.records

    def trajectory(self) -> list | None:
        if not self.snapshots:
            return None
        flat = [v for snap in self.snapshots for v in snap]
        if len(flat) < 3:
            return None
        pts = pca_trajectory(flat)
        per = len(self.snapshots[0])
        return [pts[i * per:(i + 1) * per].tolist() for i in range(len(self.snapshots))]


def run_training(cfg: RunConfig, workload: Workload | None = None) -> dict:
    """Execute a full run and return the report as a JSON-ready dict."""
    t0 = time.perf_counter()
    sim = Simulation(cfg, workload)
    records = sim.run()
    report = {
        "config": cfg.to_dict(),
        "rounds": [r.to_dict() for r in records],
        "final_confusion": sim.last_confusion,
        "train_class_counts": sim.train_counts.tolist(),
        "wall_clock_seconds": time.perf_counter() - t0,
    }
    traj = sim.trajectory()
    if traj is not None:
        report["trajectory"] = traj
    return report
