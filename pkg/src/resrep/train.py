"""Training loops: plain SGD, gradient resetting on compactors, and the ablation variants.

A channel is a row of a penalised tensor: a compactor row when compactors
are present, otherwise an output channel of the target conv kernel.  Masks
and metrics are keyed by the target conv's node index.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .flops import layer_costs, model_flops
from .graph import ModelGraph, evaluate, loss_and_grads
from .layers import Compactor, Conv2d
from .optim import LrSchedule, cosine_lr, default_groups, sgd_step
from .reparam import EPSILON, channel_norms, insert_compactors, prune_channels

log = logging.getLogger(__name__)

DELTA = 1e-12


@dataclass
class ResRepConfig:
    lam: float = 1e-4
    epsilon: float = EPSILON
    theta_init: int = 4
    theta_step: int = 4
    selection_interval: int = 200
    warmup_epochs: int = 5
    flops_target: float = 0.5
    compactor_momentum: float = 0.99
    total_epochs: int = 180
    batch_size: int = 64
    initial_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lam must be positive")
        if not 0 <= self.flops_target < 1:
            raise ValueError("flops_target must lie in [0, 1)")
        if self.theta_init < 1 or self.theta_step < 0 or self.selection_interval < 1:
            raise ValueError("bad channel-selection schedule")

    def to_dict(self):
        return asdict(self)


# gradient manipulation ---------------------------------------------------------


def penalty_gradient(f, lam, delta=DELTA):
    """Group-Lasso gradient lam * F / ||F||, zero when ||F|| < delta."""
    norm = float(np.sqrt(np.sum(np.square(f, dtype=np.float64))))
    if norm < delta:
        return np.zeros_like(f)
    return (f * (lam / norm)).astype(f.dtype, copy=False)


def reset_gradients(grad, q, mask, lam, delta=DELTA):
    """Row j: grad_j * mask_j + lam * q_j / ||q_j||.

    Works on any tensor whose first axis indexes channels.
    """
    g = grad.reshape(grad.shape[0], -1)
    w = q.reshape(q.shape[0], -1)
    norms = np.sqrt(np.einsum("ij,ij->i", w, w, dtype=np.float64))
    scale = np.where(norms >= delta, lam / np.maximum(norms, delta), 0.0).astype(q.dtype)
    m = np.asarray(mask, dtype=grad.dtype).reshape(-1, 1)
    return (g * m + w * scale.reshape(-1, 1)).reshape(grad.shape)


# channel selection --------------------------------------------------------------


def compute_metrics(model: ModelGraph) -> dict[int, np.ndarray]:
    """Row norm of every channel of every compactor (or target kernel when there are none)."""
    return channel_norms(model)


def _coupled_widths(model, out_width: dict[int, int]):
    """Conv (in, out) widths when each target t keeps ``out_width[t]`` channels."""
    widths = {}
    succ = model.successors()
    for i, node in enumerate(model.nodes):
        if isinstance(node, Conv2d) and not isinstance(node, Compactor):
            widths[i] = [node.in_channels, node.out_channels]
    for t, w in out_width.items():
        widths[t][1] = w
        widths[succ[t]][0] = w
    return {i: tuple(v) for i, v in widths.items()}


def deduced_flops(model: ModelGraph, masks: dict[int, np.ndarray]) -> int:
    """FLOPs after removing every mask-0 channel from its target conv and the successor's input."""
    kept = {t: int(np.count_nonzero(m)) for t, m in masks.items()}
    return sum(c.multiply_adds for c in layer_costs(model, count_compactors=False, widths=_coupled_widths(model, kept)))


@dataclass
class Selection:
    masks: dict[int, np.ndarray]
    picked: list[tuple[int, int]]
    flops: int
    reduction: float
    reached: bool
    exhausted: bool


def select_channels(metrics, model, flops_target, theta) -> Selection:
    """Mask the globally smallest-metric channels until the FLOPs target or ``theta`` picks.

    Ties break on (layer, channel).  The last live channel of a layer is never
    taken.  Picking is incremental on per-conv costs, so each candidate costs
    O(1) to evaluate.
    """
    if theta < 0:
        raise ValueError("theta must be non-negative")
    base = model_flops(model, count_compactors=False)
    masks = {t: np.ones(len(v), dtype=np.uint8) for t, v in metrics.items()}
    alive = {t: len(v) for t, v in metrics.items()}
    costs = {c.layer: c for c in layer_costs(model, count_compactors=False)}
    per = {i: c.multiply_adds // (c.in_channels * c.out_channels) for i, c in costs.items()}
    width = {i: [c.in_channels, c.out_channels] for i, c in costs.items()}
    succ = model.successors()
    flops = base

    def gain(t):
        s = succ[t]
        return per[t] * width[t][0] + per[s] * width[s][1]

    order = sorted(((float(v), t, j) for t, vals in metrics.items() for j, v in enumerate(vals)))
    picked = []
    exhausted = True
    for value, t, j in order:
        if base - flops >= flops_target * base or len(picked) >= theta:
            exhausted = False
            break
        if alive[t] <= 1:
            continue
        flops -= gain(t)
        width[t][1] -= 1
        width[succ[t]][0] -= 1
        alive[t] -= 1
        masks[t][j] = 0
        picked.append((t, j))
    reached = base - flops >= flops_target * base
    if reached:
        exhausted = False
    return Selection(masks, picked, flops, 1 - flops / base, reached, exhausted and not reached)


def sparsity_trace(model: ModelGraph, masks: dict[int, np.ndarray]):
    """(sum of squares of surviving channels, sum of squares of mask-0 channels)."""
    comps = model.compactors()
    survive = pruned = 0.0
    for t, m in masks.items():
        w = model.nodes[comps[t]].kernel if t in comps else model.nodes[t].kernel
        sq = np.square(w.reshape(w.shape[0], -1), dtype=np.float64).sum(axis=1)
        m = np.asarray(m, dtype=bool)
        survive += float(sq[m].sum())
        pruned += float(sq[~m].sum())
    return survive, pruned


# trainers -------------------------------------------------------------------


class Trainer:
    """Cosine-annealed grouped SGD over a dataset with seed-deterministic batch order."""

    def __init__(self, model, dataset, *, initial_lr, total_epochs, batch_size, seed=0, groups=None, augment=None):
        self.model = model
        self.dataset = dataset
        self.schedule = LrSchedule(initial_lr, total_epochs)
        self.batch_size = min(batch_size, len(dataset))
        self.seed = seed
        self.groups = groups if groups is not None else default_groups(model)
        self.augment = dataset.augment if augment is None else augment
        self.params = model.parameters()
        self.epoch = 0
        self.iteration = 0
        self.history: list[dict] = []

    @property
    def iters_per_epoch(self):
        return len(self.dataset) // self.batch_size

    def lr(self):
        return cosine_lr(min(self.epoch, self.schedule.total_epochs - 1), self.schedule)

    def adjust_gradients(self, grads):
        """Hook for penalty/resetting rules; plain SGD leaves gradients alone."""

    def before_step(self):
        pass

    def step(self, x, y):
        self.before_step()
        out = loss_and_grads(self.model, x, y)
        self.adjust_gradients(out.grads)
        sgd_step(self.groups, self.lr(), self.params, out.grads)
        self.iteration += 1
        return out

    def epoch_batches(self, epoch):
        order = np.random.default_rng([self.seed, epoch]).permutation(len(self.dataset))
        for b in range(self.iters_per_epoch):
            idx = order[b * self.batch_size : (b + 1) * self.batch_size]
            rng = np.random.default_rng([self.seed, epoch, b]) if self.augment else None
            yield self.dataset.get(idx, rng)

    def run_epoch(self):
        losses, correct, seen = [], 0, 0
        lr = self.lr()
        for x, y in self.epoch_batches(self.epoch):
            out = self.step(x, y)
            losses.append(out.loss)
            correct += int((out.logits.argmax(axis=1) == y).sum())
            seen += len(y)
        record = {"epoch": self.epoch, "lr": lr, "loss": float(np.mean(losses)), "accuracy": correct / max(seen, 1)}
        self.epoch += 1
        self.end_epoch(record)
        self.history.append(record)
        log.info("epoch %(epoch)d lr %(lr).5f loss %(loss).4f acc %(accuracy).4f", record)
        return record

    def end_epoch(self, record):
        pass

    def fit(self, epochs=None):
        """Train until ``epochs`` (default: the schedule's total) have completed."""
        stop = self.schedule.total_epochs if epochs is None else min(epochs, self.schedule.total_epochs)
        while self.epoch < stop:
            self.run_epoch()
        return self

    # persistence --------------------------------------------------------------

    def state(self) -> tuple[dict, dict[str, np.ndarray]]:
        """JSON-able counters and velocity tensors, enough to resume bit-exactly."""
        meta = {"epoch": self.epoch, "iteration": self.iteration, "history": self.history}
        tensors = {f"velocity/{g.name}/{k}": v for g in self.groups for k, v in g.velocity.items()}
        return meta, tensors

    def load_state(self, meta, tensors):
        self.epoch = meta["epoch"]
        self.iteration = meta["iteration"]
        self.history = list(meta.get("history", []))
        for g in self.groups:
            prefix = f"velocity/{g.name}/"
            g.velocity = {k[len(prefix) :]: v.copy() for k, v in tensors.items() if k.startswith(prefix)}


class SparsityTrainer(Trainer):
    """Adds channel penalties to the gradients of penalised tensors.

    ``rule="reset"`` masks the objective gradient of selected channels (gradient
    resetting) and runs scheduled channel selection; ``rule="lasso"`` keeps the
    objective gradient everywhere (group Lasso, no selection).
    """

    def __init__(self, model, dataset, config: ResRepConfig, rule="reset", lam=None, **kw):
        if rule not in ("reset", "lasso"):
            raise ValueError(f"unknown rule {rule!r}")
        super().__init__(
            model,
            dataset,
            initial_lr=config.initial_lr,
            total_epochs=config.total_epochs,
            batch_size=config.batch_size,
            seed=config.seed,
            groups=default_groups(model, config.compactor_momentum, config.momentum, config.weight_decay),
            **kw,
        )
        self.config = config
        self.rule = rule
        self.lam = config.lam if lam is None else lam
        comps = model.compactors()
        self.penalised = {t: f"{comps.get(t, t)}.kernel" for t in model.targets()}
        self.masks = {t: np.ones(self.params[k].shape[0], dtype=np.uint8) for t, k in self.penalised.items()}
        self.frozen = rule == "lasso"
        self.events: list[dict] = []
        self.trace: list[dict] = []
        self.on_event = None

    @property
    def first_selection(self):
        return self.config.warmup_epochs * self.iters_per_epoch

    def theta(self):
        k = (self.iteration - self.first_selection) // self.config.selection_interval
        return self.config.theta_init + k * self.config.theta_step

    def before_step(self):
        if self.frozen or self.iteration < self.first_selection:
            return
        if (self.iteration - self.first_selection) % self.config.selection_interval:
            return
        self.select()

    def select(self):
        theta = self.theta()
        sel = select_channels(compute_metrics(self.model), self.model, self.config.flops_target, theta)
        self.set_masks(sel.masks)
        event = {
            "iteration": self.iteration,
            "epoch": self.epoch,
            "theta": theta,
            "masked": [[int(t), int(j)] for t, j in sel.picked],
            "deduced_flops": int(sel.flops),
            "reduction": sel.reduction,
            "reached": sel.reached,
        }
        if sel.reached or sel.exhausted:
            self.frozen = True
        if sel.exhausted:
            event["unreachable"] = True
            log.warning("FLOPs target %.4f unreachable; best reduction %.4f", self.config.flops_target, sel.reduction)
        self.events.append(event)
        if self.on_event:
            self.on_event(event)
        return sel

    def set_masks(self, masks):
        comps = self.model.compactors()
        for t, m in masks.items():
            self.masks[t] = np.asarray(m, dtype=np.uint8).copy()
            if t in comps:
                self.model.nodes[comps[t]].buffers["mask"] = self.masks[t].copy()

    def adjust_gradients(self, grads):
        for t, key in self.penalised.items():
            mask = self.masks[t] if self.rule == "reset" else np.ones_like(self.masks[t])
            grads[key][...] = reset_gradients(grads[key], self.params[key], mask, self.lam)

    def end_epoch(self, record):
        rows = {}
        for t, key in self.penalised.items():
            w = self.params[key]
            rows[str(t)] = np.square(w.reshape(w.shape[0], -1), dtype=np.float64).sum(axis=1).tolist()
        self.trace.append({"epoch": record["epoch"], "rows": rows})
        record["masked"] = int(sum(int((m == 0).sum()) for m in self.masks.values()))

    def deduced_flops(self):
        return deduced_flops(self.model, self.masks)

    def trace_table(self, keep=None):
        """Per-epoch (epoch, surviving sum of squares, pruned sum of squares).

        ``keep`` (default: current masks) decides which channels count as
        surviving; pass a final minimal structure for the Lasso baselines.
        """
        keep = self.masks if keep is None else keep
        out = []
        for rec in self.trace:
            s = p = 0.0
            for t, rows in rec["rows"].items():
                m = np.asarray(keep[int(t)], dtype=bool)
                rows = np.asarray(rows)
                s += float(rows[m].sum())
                p += float(rows[~m].sum())
            out.append((rec["epoch"], s, p))
        return out

    def state(self):
        meta, tensors = super().state()
        meta.update(
            rule=self.rule,
            lam=self.lam,
            frozen=self.frozen,
            masks={str(t): m.tolist() for t, m in self.masks.items()},
            events=self.events,
            trace=self.trace,
        )
        return meta, tensors

    def load_state(self, meta, tensors):
        super().load_state(meta, tensors)
        self.frozen = meta["frozen"]
        self.events = list(meta.get("events", []))
        self.trace = list(meta.get("trace", []))
        self.set_masks({int(t): np.array(m, dtype=np.uint8) for t, m in meta["masks"].items()})


def train_resrep(model: ModelGraph, dataset, config: ResRepConfig, epochs=None, on_event=None) -> SparsityTrainer:
    """Compactors + gradient resetting + scheduled selection.

    A base model gets identity compactors first; a model that already has them
    is trained as-is.  Returns the trainer; ``trainer.model`` is the trained
    re-parameterised model.
    """
    if model.kind != "reparam":
        model = insert_compactors(model)
    trainer = SparsityTrainer(model, dataset, config, rule="reset")
    trainer.on_event = on_event
    return trainer.fit(epochs)


def train_res_only(model: ModelGraph, dataset, config: ResRepConfig, epochs=None) -> SparsityTrainer:
    """Gradient resetting applied directly to the target conv kernels (no compactors)."""
    if model.compactors():
        raise ValueError("res-only expects a model without compactors")
    return SparsityTrainer(model, dataset, config, rule="reset").fit(epochs)


def train_group_lasso_baseline(model: ModelGraph, dataset, lam, config: ResRepConfig, epochs=None) -> SparsityTrainer:
    """Plain training plus lam * F/||F|| on every target-kernel channel."""
    if lam < 0:
        raise ValueError("lam must be non-negative")
    if model.compactors():
        raise ValueError("the group-Lasso baseline penalises target kernels; pass a model without compactors")
    return SparsityTrainer(model, dataset, config, rule="lasso", lam=lam).fit(epochs)


def train_rep_only(model: ModelGraph, dataset, lam, config: ResRepConfig, epochs=None) -> SparsityTrainer:
    """Compactors with a plain group-Lasso penalty, no gradient resetting."""
    if model.kind != "reparam":
        model = insert_compactors(model)
    return SparsityTrainer(model, dataset, config, rule="lasso", lam=lam).fit(epochs)


# structure search -------------------------------------------------------------


@dataclass
class MinimalStructure:
    widths: dict[int, int]
    keep: dict[int, np.ndarray]
    accuracy_before: float
    accuracy_after: float
    removed: list[tuple[int, int]] = field(default_factory=list)


def minimal_structure(model: ModelGraph, evalset, granularity=1) -> MinimalStructure:
    """Greedily remove the smallest-norm channels while accuracy stays at or above the original.

    ``granularity`` channels are tried per step; the search stops before the
    first step that lowers accuracy.  The last channel of a layer is kept.
    """
    if granularity < 1:
        raise ValueError("granularity must be >= 1")
    ref = evaluate(model, evalset)
    norms = channel_norms(model)
    keep = {t: np.ones(len(v), dtype=bool) for t, v in norms.items()}
    order = sorted((float(v), t, j) for t, vals in norms.items() for j, v in enumerate(vals))
    removed, acc = [], ref
    pos = 0
    while pos < len(order):
        trial = {t: m.copy() for t, m in keep.items()}
        chunk = []
        while pos < len(order) and len(chunk) < granularity:
            _, t, j = order[pos]
            pos += 1
            if trial[t].sum() > 1:
                trial[t][j] = False
                chunk.append((t, j))
        if not chunk:
            break
        a = evaluate(prune_channels(model, {t: np.flatnonzero(m) for t, m in trial.items()}), evalset)
        if a < ref:
            break
        keep, acc = trial, a
        removed.extend(chunk)
    widths = {t: int(m.sum()) for t, m in keep.items()}
    return MinimalStructure(widths, keep, ref, acc, removed)


def structure_flops(model: ModelGraph, keep: dict[int, np.ndarray]) -> int:
    return deduced_flops(model, {t: np.asarray(m, dtype=np.uint8) for t, m in keep.items()})
