"""Code-level refinement of the mapping W and the task backbones it is judged by.

The mapping is trained against two teachers: a discriminator that tries to
tell mapped target embeddings from source embeddings, and a frozen task model
whose classification loss on a few labelled target patients flows back into W.
"""
from __future__ import annotations

import copy
import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import neural as nn
from .corpus import Corpus
from .eval import MetricUndefined, auc_pr, ovo_weighted_auc

log = logging.getLogger(__name__)

PROB_EPS = 1e-7
TASK_CLASSES = {"mortality": 2, "length_of_stay": 4}


# ----------------------------------------------------------------- task data

@dataclass(frozen=True)
class TaskData:
    """Model-ready examples: per-visit code counts, a step mask and labels.

    Mortality has one example per patient. Length of stay has one example per
    visit whose input is the patient's history up to and including that visit.
    """

    task: str
    counts: np.ndarray  # (n, steps, n_codes)
    mask: np.ndarray  # (n, steps) bool
    labels: np.ndarray  # (n,)
    patients: np.ndarray  # (n,) patient id of every example

    def __len__(self):
        return self.labels.size

    @property
    def n_classes(self) -> int:
        return TASK_CLASSES[self.task]

    def take(self, idx) -> "TaskData":
        idx = np.asarray(idx, dtype=int)
        return TaskData(self.task, self.counts[idx], self.mask[idx], self.labels[idx], self.patients[idx])


def task_data(corpus: Corpus, task: str, codes=None) -> TaskData:
    if task not in TASK_CLASSES:
        raise ValueError(f"unknown task {task!r}; expected one of {sorted(TASK_CLASSES)}")
    codes = list(corpus.code_ids if codes is None else codes)
    col = {c: i for i, c in enumerate(codes)}
    steps = max((len(p.visits) for p in corpus.patients), default=1)
    seqs, masks, labels, owners = [], [], [], []
    for p in corpus.patients:
        seq = np.zeros((steps, len(codes)))
        for t, v in enumerate(p.visits):
            for c in v.codes:
                seq[t, col[c]] += 1
        n_v = len(p.visits)
        if task == "mortality":
            cuts, labs = [n_v], [p.mortality]
        else:
            cuts, labs = range(1, n_v + 1), p.los_classes
        for cut, lab in zip(cuts, labs):
            seqs.append(seq)
            m = np.zeros(steps, dtype=bool)
            m[:cut] = True
            masks.append(m)
            labels.append(int(lab))
            owners.append(p.id)
    if not seqs:
        return TaskData(task, np.zeros((0, steps, len(codes))), np.zeros((0, steps), bool),
                        np.zeros(0, int), np.zeros(0, dtype=object))
    return TaskData(task, np.array(seqs), np.array(masks), np.array(labels), np.array(owners, dtype=object))


# ----------------------------------------------------------------- backbones

class Backbone:
    """Task model F over code embeddings.

    ``mlp``: sum every code embedding of the history, dense 128, ReLU, logits.
    ``rnn``: sum per visit, tanh recurrent 128, dense 128, ReLU, logits.
    """

    def __init__(self, kind: str, task: str, d: int, hidden: int = 128, seed: int = 0, net=None):
        if kind not in ("mlp", "rnn"):
            raise ValueError(f"unknown backbone kind {kind!r}")
        if task not in TASK_CLASSES:
            raise ValueError(f"unknown task {task!r}")
        self.kind, self.task, self.d = kind, task, d
        if net is None:
            rng = np.random.default_rng(seed)
            n_out = TASK_CLASSES[task]
            if kind == "mlp":
                layers = [nn.SumPool(), nn.Dense(d, hidden, rng), nn.ReLU(), nn.Dense(hidden, n_out, rng)]
            else:
                layers = [nn.Recurrent(d, hidden, rng), nn.Dense(hidden, hidden, rng), nn.ReLU(),
                          nn.Dense(hidden, n_out, rng)]
            net = nn.Sequential(layers)
        self.net = net
        self._counts = None

    @property
    def n_classes(self) -> int:
        return TASK_CLASSES[self.task]

    @property
    def params(self):
        return self.net.params

    @property
    def head(self):
        return self.net.layers[-1].params

    def state(self):
        return [p.data.copy() for p in self.params]

    def load_state(self, state):
        for p, v in zip(self.params, state):
            p.data = v.copy()

    def logits(self, counts, mask, emb, train=False, rng=None):
        emb = np.asarray(emb, dtype=float)
        if emb.shape != (counts.shape[2], self.d):
            raise ValueError(f"embedding table has shape {emb.shape}, expected {(counts.shape[2], self.d)}")
        self._counts = counts
        return self.net.forward(counts @ emb, train=train, rng=rng, mask=mask)

    def backward(self, g_logits) -> np.ndarray:
        """Accumulate parameter gradients; return the gradient for the embedding table."""
        if self._counts is None:
            raise RuntimeError("backward called without a preceding forward")
        g_in = self.net.backward(g_logits)
        counts, self._counts = self._counts, None
        return np.einsum("btc,btd->cd", counts, g_in)

    def predict_proba(self, data: TaskData, emb, batch: int = 512) -> np.ndarray:
        out = []
        for s in range(0, len(data), batch):
            z = self.logits(data.counts[s:s + batch], data.mask[s:s + batch], emb)
            out.append(np.exp(nn.log_softmax(z)))
        self._counts = None
        return np.vstack(out) if out else np.zeros((0, self.n_classes))

    def save(self, path):
        nn.save_network(self.net, path)

    @classmethod
    def load(cls, path, kind: str, task: str):
        net = nn.load_network(path)
        d = net.layers[0].Wx.shape[0] if kind == "rnn" else net.layers[1].W.shape[0]
        return cls(kind, task, d, net=net)


def monitored_metric(task: str, prob: np.ndarray, labels: np.ndarray) -> float:
    """Validation score used for early stopping: AUC-PR for mortality, ovo AUC for LOS."""
    if task == "mortality":
        return auc_pr(prob[:, 1], labels)
    return ovo_weighted_auc(prob, labels)


def _score(backbone, data, emb) -> float:
    if data is None or len(data) == 0:
        return float("nan")
    try:
        return monitored_metric(backbone.task, backbone.predict_proba(data, emb), data.labels)
    except MetricUndefined:
        return float("nan")


# ----------------------------------------------------------------- discriminator and losses

@dataclass(frozen=True)
class RefineConfig:
    alpha: float = 0.1
    d_steps_per_w_step: int = 5
    epochs: int = 100
    early_stop_patience: int = 20
    batch_size: int = 8
    learning_rate: float = 1e-4
    seed: int = 0
    fine_tune_head: bool = False
    hidden: int = 128
    dropout: float = 0.1

    def validate(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.early_stop_patience < 1 or self.epochs < 0 or self.batch_size < 1 or self.d_steps_per_w_step < 0:
            raise ValueError("patience and batch_size must be >= 1; epochs and d_steps >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    @property
    def optimizer(self) -> nn.OptimizerConfig:
        return nn.OptimizerConfig(learning_rate=self.learning_rate, batch_size=self.batch_size)


def make_discriminator(d: int, hidden: int = 128, dropout: float = 0.1, seed: int = 0) -> nn.Sequential:
    """Three dense layers with leaky rectifiers and dropout; emits one logit."""
    rng = np.random.default_rng(seed)
    return nn.Sequential([
        nn.Dense(d, hidden, rng), nn.LeakyReLU(0.2), nn.Dropout(dropout),
        nn.Dense(hidden, hidden, rng), nn.LeakyReLU(0.2), nn.Dropout(dropout),
        nn.Dense(hidden, 1, rng),
    ])


def discriminator_prob(D: nn.Sequential, x, train=False, rng=None) -> np.ndarray:
    """D(x) in (0, 1): probability that x is a source embedding."""
    return nn.sigmoid(D.forward(x, train=train, rng=rng)[:, 0])


def _neg_log(p, positive: bool):
    """-log(p) or -log(1-p) after clamping, with d/dlogit of the same."""
    pc = np.clip(p, PROB_EPS, 1 - PROB_EPS)
    live = (p > PROB_EPS) & (p < 1 - PROB_EPS)
    if positive:
        return -np.log(pc), np.where(live, -(1 - p), 0.0)
    return -np.log(1 - pc), np.where(live, p, 0.0)


def discriminator_loss(D, e_s, e_t, W, train=False, rng=None, grad=False):
    """mean(-log D(e_s)) + mean(-log(1 - D(e_t W))).

    With ``grad`` the discriminator's parameter gradients are accumulated and
    (loss, dL/dW) is returned.
    """
    e_s, e_t = np.atleast_2d(e_s), np.atleast_2d(e_t)
    if len(e_s) == 0 or len(e_t) == 0:
        raise ValueError("discriminator batches must be non-empty")
    x = np.vstack([e_s, e_t @ W])
    p = discriminator_prob(D, x, train=train, rng=rng)
    ns = len(e_s)
    ls, gs = _neg_log(p[:ns], True)
    lt, gt = _neg_log(p[ns:], False)
    loss = float(ls.mean() + lt.mean())
    if not grad:
        return loss
    g = np.r_[gs / ns, gt / len(e_t)][:, None]
    gx = D.backward(g)
    return loss, e_t.T @ gx[ns:]


def generator_loss(D, e_t, W, grad=False):
    """mean(-log D(e_t W)), discriminator in eval mode; with ``grad`` also dL/dW.

    The discriminator's own gradient buffers are left untouched.
    """
    e_t = np.atleast_2d(e_t)
    if len(e_t) == 0:
        raise ValueError("generator batch must be non-empty")
    p = discriminator_prob(D, e_t @ W)
    lt, g = _neg_log(p, True)
    loss = float(lt.mean())
    if not grad:
        return loss
    saved = [q.grad.copy() for q in D.params]
    gx = D.backward((g / len(e_t))[:, None])
    for q, s in zip(D.params, saved):
        q.grad = s
    return loss, e_t.T @ gx


def classification_loss(backbone: Backbone, data: TaskData, E_t, W, grad=False, train=False, rng=None):
    """Cross-entropy of F(visits, E_t W); with ``grad`` also dL/dW (backbone grads accumulate)."""
    if len(data) == 0:
        raise ValueError("no labelled examples")
    if np.any(data.labels < 0) or np.any(data.labels >= backbone.n_classes):
        raise ValueError(f"label outside [0, {backbone.n_classes})")
    z = backbone.logits(data.counts, data.mask, E_t @ W, train=train, rng=rng)
    loss, gz = nn.softmax_cross_entropy(z, data.labels)
    if not grad:
        backbone._counts = None
        return loss
    g_emb = backbone.backward(gz)
    return loss, E_t.T @ g_emb


def combined_loss(backbone, data, D, e_t, E_t, W, alpha, grad=False):
    """L_W = L_cls + alpha * L_G."""
    if not grad:
        return classification_loss(backbone, data, E_t, W) + alpha * generator_loss(D, e_t, W)
    lc, gc = classification_loss(backbone, data, E_t, W, grad=True)
    lg, gg = generator_loss(D, e_t, W, grad=True)
    return lc + alpha * lg, gc + alpha * gg


def jsd(p, q) -> float:
    """Jensen-Shannon divergence in nats; 0 log 0 counts as 0."""
    p, q = np.asarray(p, dtype=float), np.asarray(q, dtype=float)
    if p.shape != q.shape or p.ndim != 1 or p.size == 0:
        raise ValueError("distributions must be 1-D with the same support")
    for v in (p, q):
        if np.any(v < 0) or not np.all(np.isfinite(v)) or abs(v.sum() - 1.0) > 1e-9:
            raise ValueError("invalid probability distribution")
    m = 0.5 * (p + q)

    def kl(a):
        nz = a > 0
        return float(np.sum(a[nz] * np.log(a[nz] / m[nz])))

    return 0.5 * kl(p) + 0.5 * kl(q)


def jsd_estimate(d_loss: float) -> float:
    """JSD implied by a discriminator loss; exact when D is optimal (loss = 2 ln 2 - 2 JSD)."""
    return max(0.0, math.log(2.0) - 0.5 * d_loss)


def random_orthogonal(d: int, seed: int = 0) -> np.ndarray:
    q, r = np.linalg.qr(np.random.default_rng(seed).normal(size=(d, d)))
    return q * np.sign(np.diag(r))


# ----------------------------------------------------------------- training loops

@dataclass
class RefineResult:
    W: np.ndarray
    stage: str = "post-step2"
    best_epoch: int = 0
    best_metric: float = float("nan")
    log: list = field(default_factory=list)

    def write_log(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "L_D", "L_G", "L_cls", "L_W", "val_metric", "jsd_estimate"])
            for row in self.log:
                w.writerow([row[0]] + [f"{v:.10g}" for v in row[1:]])


def _batches(n, bs, rng):
    order = rng.permutation(n)
    return [order[s:s + bs] for s in range(0, n, bs)]


class _EarlyStop:
    def __init__(self, patience):
        self.patience, self.best, self.best_epoch, self.bad, self.state = patience, -np.inf, 0, 0, None

    def update(self, epoch, metric, snapshot: Callable):
        if np.isnan(metric):
            return False
        if metric > self.best:
            self.best, self.best_epoch, self.bad, self.state = metric, epoch, 0, snapshot()
            return False
        self.bad += 1
        return self.bad >= self.patience


def refine_mapping(
    W0,
    E_t,
    E_s,
    backbone: Backbone,
    train: TaskData | None,
    val: TaskData | None,
    config: RefineConfig = RefineConfig(),
) -> RefineResult:
    """Alternate discriminator updates with joint updates of W; keep the best-validation W.

    Each outer step does ``d_steps_per_w_step`` discriminator updates followed by
    one RMSprop step on W against L_cls + alpha * L_G. The backbone is frozen
    unless ``fine_tune_head`` is set, in which case its output layer also trains.
    Adversary batches, task batches and dropout draw from separate streams so
    that alpha = 0 reproduces pure task fine-tuning exactly.
    """
    config.validate()
    E_t, E_s = np.asarray(E_t, dtype=float), np.asarray(E_s, dtype=float)
    d = E_t.shape[1]
    W = nn.Tensor(np.array(W0, dtype=float), "W")
    if W.shape != (d, E_s.shape[1]):
        raise ValueError(f"W0 has shape {W.shape}, expected {(d, E_s.shape[1])}")
    ss = np.random.default_rng(config.seed).bit_generator.seed_seq.spawn(3)
    rng_adv, rng_task, rng_drop = (np.random.default_rng(s) for s in ss)
    D = make_discriminator(d, config.hidden, config.dropout, seed=int(rng_adv.integers(2**31)))
    head = backbone.head if config.fine_tune_head else []
    opt = config.optimizer
    has_labels = train is not None and len(train) > 0
    if not has_labels:
        warnings.warn("no labelled target data: refining W with the adversarial loss only", stacklevel=2)
    steps = math.ceil(len(train) / config.batch_size) if has_labels else max(1, math.ceil(E_t.shape[0] / config.batch_size))
    bs = config.batch_size
    saved_backbone = backbone.state()

    def snapshot():
        return W.data.copy(), [p.data.copy() for p in head]

    stopper = _EarlyStop(config.early_stop_patience)
    stopper.update(0, _score(backbone, val, E_t @ W.data), snapshot)
    result = RefineResult(W.data.copy())
    for epoch in range(1, config.epochs + 1):
        sums = np.zeros(4)
        counts = np.zeros(4)
        task_batches = _batches(len(train), bs, rng_task) if has_labels else [None] * steps
        for tb in task_batches:
            for _ in range(config.d_steps_per_w_step):
                D.zero_grad()
                ls, _ = discriminator_loss(
                    D, E_s[rng_adv.integers(0, E_s.shape[0], bs)], E_t[rng_adv.integers(0, E_t.shape[0], bs)],
                    W.data, train=True, rng=rng_drop, grad=True)
                nn.rmsprop_step(D.params, opt)
                sums[0] += ls
                counts[0] += 1
            W.zero_grad()
            for p in backbone.params:
                p.zero_grad()
            gW = np.zeros_like(W.data)
            lw = 0.0
            if config.alpha > 0 or not has_labels:
                lg, gg = generator_loss(D, E_t[rng_adv.integers(0, E_t.shape[0], bs)], W.data, grad=True)
                sums[1] += lg
                counts[1] += 1
                lw += config.alpha * lg
                gW = gW + config.alpha * gg
            if has_labels:
                lc, gc = classification_loss(backbone, train.take(tb), E_t, W.data, grad=True)
                sums[2] += lc
                counts[2] += 1
                lw += lc
                gW = gc + gW
            sums[3] += lw
            counts[3] += 1
            W.grad = gW
            nn.rmsprop_step([W] + head, opt)
        means = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
        metric = _score(backbone, val, E_t @ W.data)
        result.log.append((epoch, *means, metric, jsd_estimate(means[0]) if counts[0] else float("nan")))
        if stopper.update(epoch, metric, snapshot):
            log.info("early stop at epoch %d (best %d)", epoch, stopper.best_epoch)
            break
    if stopper.state is not None:
        best_W, best_head = stopper.state
    else:
        best_W, best_head = snapshot()
    backbone.load_state(saved_backbone)
    for p, v in zip(head, best_head):
        p.data = v
    result.W, result.best_epoch, result.best_metric = best_W, stopper.best_epoch, stopper.best
    return result


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    early_stop_patience: int = 20
    batch_size: int = 8
    learning_rate: float = 1e-4
    hidden: int = 128
    seed: int = 0

    @property
    def optimizer(self):
        return nn.OptimizerConfig(learning_rate=self.learning_rate, batch_size=self.batch_size)


def fit_backbone(backbone: Backbone, emb: nn.Tensor, train: TaskData, val: TaskData | None,
                 config: TrainConfig, train_embedding: bool = False, params=None) -> tuple[Backbone, np.ndarray, float]:
    """Minibatch RMSprop with early stopping on the monitored validation metric.

    Returns the backbone restored to its best state, the matching embedding
    table and the best validation score.
    """
    if len(train) == 0:
        raise ValueError("cannot train on an empty split")
    rng = np.random.default_rng(config.seed)
    params = list(backbone.params if params is None else params)
    trainable = params + ([emb] if train_embedding else [])

    def snapshot():
        return backbone.state(), emb.data.copy()

    stopper = _EarlyStop(config.early_stop_patience)
    stopper.update(0, _score(backbone, val, emb.data), snapshot)
    for epoch in range(1, config.epochs + 1):
        for tb in _batches(len(train), config.batch_size, rng):
            for p in backbone.params + [emb]:
                p.zero_grad()
            batch = train.take(tb)
            z = backbone.logits(batch.counts, batch.mask, emb.data, train=True, rng=rng)
            _, gz = nn.softmax_cross_entropy(z, batch.labels)
            emb.grad = backbone.backward(gz)
            nn.rmsprop_step(trainable, config.optimizer)
        if val is None:
            stopper.state = snapshot()
            continue
        if stopper.update(epoch, _score(backbone, val, emb.data), snapshot):
            break
    if stopper.state is not None:
        state, table = stopper.state
        backbone.load_state(state)
        emb.data = table
    return backbone, emb.data, stopper.best


def train_backbone_fixed(train: TaskData, val: TaskData | None, E, kind: str = "mlp",
                         config: TrainConfig = TrainConfig()) -> Backbone:
    """Train F on top of a frozen embedding table (the source model used by alignment)."""
    E = np.asarray(E, dtype=float)
    bb = Backbone(kind, train.task, E.shape[1], config.hidden, seed=config.seed)
    fit_backbone(bb, nn.Tensor(E), train, val, config)
    return bb


def train_backbone_direct(train: TaskData, val: TaskData | None, n_codes: int, d: int, kind: str = "mlp",
                          config: TrainConfig = TrainConfig()) -> tuple[Backbone, np.ndarray]:
    """Train embeddings and backbone together from a random start."""
    rng = np.random.default_rng(config.seed)
    emb = nn.Tensor((rng.random((n_codes, d)) - 0.5) / d * 2.0, "E")
    bb = Backbone(kind, train.task, d, config.hidden, seed=config.seed + 1)
    fit_backbone(bb, emb, train, val, config, train_embedding=True)
    return bb, emb.data


def transfer_learning(pretrained: Backbone, E_t, train: TaskData, val: TaskData | None,
                      config: TrainConfig = TrainConfig()) -> tuple[Backbone, np.ndarray]:
    """Swap in the target embedding table, then fine-tune it together with the output head."""
    E_t = np.asarray(E_t, dtype=float)
    if E_t.shape[1] != pretrained.d:
        raise ValueError(f"target embeddings have d={E_t.shape[1]}, backbone expects {pretrained.d}")
    bb = copy.deepcopy(pretrained)
    emb = nn.Tensor(E_t.copy(), "E")
    if config.epochs == 0 or len(train) == 0:
        return bb, emb.data
    fit_backbone(bb, emb, train, val, config, train_embedding=True, params=bb.head)
    return bb, emb.data


__all__ = [
    "Backbone", "RefineConfig", "RefineResult", "TaskData", "TrainConfig", "classification_loss",
    "combined_loss", "discriminator_loss", "generator_loss", "jsd", "jsd_estimate", "make_discriminator",
    "random_orthogonal", "refine_mapping", "task_data", "train_backbone_direct", "train_backbone_fixed",
    "transfer_learning",
]
