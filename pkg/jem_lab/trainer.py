"""
Joint training of p(y|x) and p(x) with persistent contrastive divergence.

Each step draws a data batch, advances the negative chains, and descends on
L_clf + gen_weight * L_gen where L_gen = mean lse(f(x_neg)) - mean lse(f(x)).
Minimising L_gen raises log p(x) on data and lowers it on negatives.
"""

import copy
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import diffcore as dc
from .data import LabeledDataset, split_train_val
from .diffcore import Network, Tensor
from .energy import JemModel
from .errors import ConfigError, DivergenceError, TrainingFailedError
from .rng import Rng
from .sampler import ReplayBuffer, SamplerConfig, draw_p0, pcd_transition, run_chain, sample_px_method2
from .utils import write_jsonl

logger = logging.getLogger(__name__)

OBJECTIVES = ("joint_factored", "conditional_factored")
RECOVERY_LADDER = ("reseed", "halve_lr", "double_eta")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    decay_factor: float = 0.3
    decay_epochs: Tuple[int, ...] = (50, 100)
    epochs: int = 150
    batch_size: int = 64
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    objective: str = "joint_factored"
    gen_weight: float = 1.0
    divergence_threshold: float = 100.0
    divergence_window: int = 50
    max_restarts: int = 3
    val_fraction: float = 0.1
    noise_std: float = 0.03
    renoise: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ConfigError(f"decay_factor must lie in (0, 1], got {self.decay_factor}")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown objective '{self.objective}', expected one of {OBJECTIVES}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be positive and epochs non-negative")

    def lr_at(self, epoch: int, scale: float = 1.0) -> float:
        """Staircase schedule: multiply by decay_factor at every passed decay epoch."""
        passed = sum(1 for e in self.decay_epochs if epoch >= e)
        return self.lr * scale * self.decay_factor ** passed


@dataclass
class AdamState:
    t: int
    m: List[np.ndarray]
    v: List[np.ndarray]


class Adam:
    """Adaptive moment estimation with bias correction."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    @staticmethod
    def init_state(params: Sequence[Tensor]) -> AdamState:
        return AdamState(0, [np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])

    def step(self, params: Sequence[Tensor], grads: Sequence[Tensor], state: AdamState, lr: float):
        state.t += 1
        correction1 = 1.0 - self.beta1 ** state.t
        correction2 = 1.0 - self.beta2 ** state.t
        for p, g, m, v in zip(params, grads, state.m, state.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g.data
            v *= self.beta2
            v += (1.0 - self.beta2) * g.data * g.data
            p.data -= lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)


@dataclass
class TrainState:
    epoch: int
    step: int
    adam: AdamState
    eta: int
    seed: int = 0
    seed_offset: int = 0
    lr_scale: float = 1.0
    restarts: int = 0
    recoveries: List[str] = field(default_factory=list)
    gap_window: List[float] = field(default_factory=list)
    e_data_mean: float = 0.0
    e_neg_mean: float = 0.0
    best_val: float = -1.0

    @classmethod
    def initial(cls, net: Network, cfg: TrainConfig, seed: int) -> "TrainState":
        return cls(epoch=0, step=0, adam=Adam.init_state(net.parameters), eta=cfg.sampler.eta, seed=seed)


@dataclass
class Snapshot:
    """Everything needed to resume training exactly."""
    network: Network
    state: TrainState
    buffer: ReplayBuffer

    def copy(self) -> "Snapshot":
        return Snapshot(self.network.copy(), copy.deepcopy(self.state), copy.deepcopy(self.buffer))


@dataclass
class StepTerms:
    loss: float
    l_clf: float
    l_gen: float
    e_data: float
    e_neg: float
    grads: List[Tensor] = field(default_factory=list)


# --- objectives -----------------------------------------------------------------

def _joint_objective(labels: np.ndarray, gen_weight: float, parts: Dict[str, float]) -> Callable:
    labels = np.asarray(labels, dtype=np.int64)
    labeled = (labels >= 0).astype(np.float64)
    safe_labels = np.where(labels >= 0, labels, 0)
    count = max(float(labeled.sum()), 1.0)

    def objective(f_data: Tensor, f_neg: Tensor) -> Tensor:
        lse_data = dc.logsumexp(f_data)
        lse_neg = dc.logsumexp(f_neg)
        # unlabelled rows (label -1) only feed the generative term
        nll = dc.sub(lse_data, dc.index_select(f_data, safe_labels))
        l_clf = dc.sum(dc.mul(nll, labeled)) / count
        l_gen = dc.sub(dc.mean(lse_neg), dc.mean(lse_data))
        parts.update(l_clf=l_clf.item(), l_gen=l_gen.item(),
                     e_data=-float(np.mean(lse_data.data)), e_neg=-float(np.mean(lse_neg.data)))
        return dc.add(l_clf, dc.mul(l_gen, gen_weight))

    return objective


def _conditional_objective(labels: np.ndarray, negative_labels: np.ndarray, parts: Dict[str, float]) -> Callable:
    labels = np.asarray(labels, dtype=np.int64)
    negative_labels = np.asarray(negative_labels, dtype=np.int64)

    def objective(f_data: Tensor, f_neg: Tensor) -> Tensor:
        contrastive = dc.sub(dc.mean(dc.index_select(f_neg, negative_labels)),
                             dc.mean(dc.index_select(f_data, labels)))
        parts.update(l_clf=0.0, l_gen=contrastive.item(),
                     e_data=-float(np.mean(dc.logsumexp(f_data.data).data)),
                     e_neg=-float(np.mean(dc.logsumexp(f_neg.data).data)))
        return contrastive

    return objective


def loss_terms(m: JemModel, batch_x, batch_y, negatives) -> Tuple[float, float]:
    """(L_clf, L_gen) for a batch; negatives are constants."""
    parts: Dict[str, float] = {}
    _joint_objective(batch_y, 1.0, parts)(dc.forward(m.net, batch_x), dc.forward(m.net, negatives))
    return parts["l_clf"], parts["l_gen"]


def joint_gradients(m: JemModel, batch_x, batch_y, negatives, gen_weight: float = 1.0) -> StepTerms:
    """Value and parameter gradients of L_clf + gen_weight * L_gen."""
    parts: Dict[str, float] = {}
    result = dc.backprop(m.net, [batch_x, negatives], _joint_objective(batch_y, gen_weight, parts))
    return StepTerms(result.value, parts["l_clf"], parts["l_gen"], parts["e_data"], parts["e_neg"], result.params)


def class_log_prior(labels, class_prior) -> np.ndarray:
    """log p(y) per example under a class prior."""
    return np.log(np.asarray(class_prior, dtype=np.float64)[np.asarray(labels, dtype=np.int64)])


def empirical_class_prior(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    counts = np.bincount(labels[labels >= 0], minlength=num_classes).astype(np.float64)
    return counts / counts.sum()


def loss_terms_conditional(m: JemModel, batch_x, batch_y, negatives, negative_labels=None,
                           class_prior=None) -> float:
    """
    Loss of the p(x|y) + p(y) factorisation.

    The contrastive term works on f(x)[y] directly; the prior term -mean log p(y)
    carries no parameter gradient.
    """
    negative_labels = batch_y if negative_labels is None else negative_labels
    prior = empirical_class_prior(batch_y, m.num_classes) if class_prior is None else class_prior
    parts: Dict[str, float] = {}
    _conditional_objective(batch_y, negative_labels, parts)(dc.forward(m.net, batch_x), dc.forward(m.net, negatives))
    return parts["l_gen"] - float(np.mean(class_log_prior(batch_y, prior)))


def conditional_gradients(m: JemModel, batch_x, batch_y, negatives, negative_labels=None) -> StepTerms:
    negative_labels = batch_y if negative_labels is None else negative_labels
    parts: Dict[str, float] = {}
    result = dc.backprop(m.net, [batch_x, negatives], _conditional_objective(batch_y, negative_labels, parts))
    return StepTerms(result.value, parts["l_clf"], parts["l_gen"], parts["e_data"], parts["e_neg"], result.params)


# --- recovery -------------------------------------------------------------------

def recover(state: TrainState, cfg: TrainConfig) -> TrainState:
    """
    Next rung of the retry ladder applied to a state reloaded from the last
    good checkpoint: new seed, then half the learning rate, then twice the
    SGLD steps, cycling after that.
    """
    action = RECOVERY_LADDER[state.restarts % len(RECOVERY_LADDER)]
    new_state = copy.deepcopy(state)
    new_state.restarts += 1
    new_state.recoveries.append(action)
    new_state.gap_window = []
    if action == "reseed":
        new_state.seed_offset += 1
    elif action == "halve_lr":
        new_state.lr_scale *= 0.5
    else:
        new_state.eta = max(1, 2 * new_state.eta)
    logger.warning(f"Recovery {new_state.restarts}/{cfg.max_restarts}: {action} "
                   f"(seed_offset={new_state.seed_offset}, lr_scale={new_state.lr_scale}, eta={new_state.eta})")
    return new_state


# --- training loop ----------------------------------------------------------------

@dataclass
class TrainResult:
    model: JemModel
    metrics: List[Dict[str, float]]
    state: TrainState
    buffer: ReplayBuffer
    train_set: LabeledDataset
    val_set: LabeledDataset


def _accuracy(model: JemModel, ds: LabeledDataset) -> float:
    if len(ds) == 0:
        return float("nan")
    labeled = ds.labels >= 0
    if not np.any(labeled):
        return float("nan")
    return float(np.mean(model.predict(ds.inputs[labeled]) == ds.labels[labeled]))


class JemTrainer:
    """Runs the training loop, checkpointing and recovering from divergence."""

    def __init__(self, config: TrainConfig, store=None, metrics_path: Optional[Path] = None,
                 step_hook: Optional[Callable[[TrainState, StepTerms], StepTerms]] = None):
        """
        Initialize the trainer.

        Args:
            config: Training hyperparameters.
            store: Optional checkpoint store with a save(snapshot, best=...) method.
            metrics_path: JSON-lines file receiving one record per epoch.
            step_hook: Called with every step's terms before the update; may return altered terms.
        """
        self.config = config
        self.store = store
        self.metrics_path = Path(metrics_path) if metrics_path else None
        self.step_hook = step_hook
        self.optimizer = Adam(config.beta1, config.beta2, config.adam_eps)

    def _negatives(self, model: JemModel, buffer: ReplayBuffer, state: TrainState, batch_x, batch_y: np.ndarray,
                   rng: Rng) -> np.ndarray:
        scfg = replace(self.config.sampler, eta=state.eta)
        srng = rng.substream("sampler", state.seed_offset)
        conditional_y = batch_y if self.config.objective == "conditional_factored" else None
        if conditional_y is None and self.config.gen_weight == 0:
            # plain classifier: L_gen carries no weight, so no chains are run
            return np.asarray(batch_x, dtype=np.float64).copy()
        if scfg.persistent:
            return pcd_transition(model, buffer, scfg, srng, len(batch_y), conditional_y=conditional_y)
        short_rng = srng.substream("short-run", state.step)
        if conditional_y is None:
            return sample_px_method2(model, scfg, short_rng, scfg.eta, n=len(batch_y))
        x0 = draw_p0(scfg, short_rng.substream("p0"), len(batch_y), model.input_dim)
        return run_chain(model, x0, scfg, scfg.eta, rng=short_rng.substream("noise"), conditional_y=conditional_y)

    def _step(self, model: JemModel, batch_x, batch_y, buffer: ReplayBuffer, state: TrainState,
              rng: Rng) -> StepTerms:
        cfg = self.config
        negatives = self._negatives(model, buffer, state, batch_x, batch_y, rng)
        if cfg.objective == "joint_factored":
            terms = joint_gradients(model, batch_x, batch_y, negatives, cfg.gen_weight)
        else:
            terms = conditional_gradients(model, batch_x, batch_y, negatives)
        if self.step_hook is not None:
            terms = self.step_hook(state, terms)
        if not math.isfinite(terms.loss):
            raise DivergenceError(f"non-finite loss at step {state.step}")
        state.gap_window.append(abs(terms.e_neg - terms.e_data))
        del state.gap_window[:-cfg.divergence_window]
        running_gap = float(np.mean(state.gap_window))
        if running_gap > cfg.divergence_threshold:
            raise DivergenceError(f"energy gap {running_gap:.3g} exceeds {cfg.divergence_threshold} at step {state.step}")
        self.optimizer.step(model.net.parameters, terms.grads, state.adam, cfg.lr_at(state.epoch, state.lr_scale))
        state.step += 1
        return terms

    def _run_epoch(self, model: JemModel, train_set: LabeledDataset, val_set: LabeledDataset,
                   buffer: ReplayBuffer, state: TrainState, rng: Rng) -> Dict[str, float]:
        cfg = self.config
        epoch = state.epoch
        erng = rng.substream("epoch", state.seed_offset, epoch)
        order = erng.substream("order").permutation(len(train_set))
        sums = {"l_clf": 0.0, "l_gen": 0.0, "e_data": 0.0, "e_neg": 0.0}
        batches = 0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            batch_x, batch_y = train_set.draw(idx, erng.substream("noise", b))
            terms = self._step(model, batch_x, batch_y, buffer, state, rng)
            for key in sums:
                sums[key] += getattr(terms, key)
            batches += 1
            logger.debug(f"epoch {epoch} step {state.step}: loss={terms.loss:.4f} "
                         f"E(data)={terms.e_data:.3f} E(neg)={terms.e_neg:.3f}")
        means = {key: value / max(batches, 1) for key, value in sums.items()}
        state.e_data_mean, state.e_neg_mean = means["e_data"], means["e_neg"]
        return {
            "epoch": epoch,
            "train_acc": _accuracy(model, train_set),
            "val_acc": _accuracy(model, val_set),
            "e_data_mean": means["e_data"],
            "e_neg_mean": means["e_neg"],
            "l_clf": means["l_clf"],
            "l_gen": means["l_gen"],
            "lr": cfg.lr_at(epoch, state.lr_scale),
            "restarts": state.restarts,
        }

    def _restore(self, last_good: Snapshot, current: TrainState) -> Snapshot:
        restored = last_good.copy()
        base = restored.state
        base.restarts = current.restarts
        base.recoveries = list(current.recoveries)
        base.seed_offset = current.seed_offset
        base.lr_scale = current.lr_scale
        base.eta = current.eta
        restored.state = recover(base, self.config)
        return restored

    def _write_metrics(self, rows: List[Dict[str, float]]):
        if self.metrics_path is not None:
            write_jsonl(self.metrics_path, rows)

    def train(self, model: JemModel, dataset: LabeledDataset, rng: Rng, state: Optional[TrainState] = None,
              buffer: Optional[ReplayBuffer] = None, metrics: Optional[List[Dict[str, float]]] = None) -> TrainResult:
        """
        Train `model` in place on a preprocessed dataset.

        Args:
            model: JemModel whose network parameters are updated.
            dataset: Preprocessed dataset (a per-batch re-noising view when renoise is on).
            rng: Root stream of the run.
            state: Resume from this state (with `buffer` and `metrics`) instead of starting fresh.

        Returns:
            TrainResult with the per-epoch metrics log.

        Raises:
            TrainingFailedError: Divergence persisted beyond max_restarts.
        """
        cfg = self.config
        if len(dataset) == 0:
            raise ConfigError("cannot train on an empty dataset")
        train_set, val_set = split_train_val(dataset, cfg.val_fraction, rng.substream("split"))
        state = state if state is not None else TrainState.initial(model.net, cfg, rng.seed)
        buffer = buffer if buffer is not None else ReplayBuffer(cfg.sampler.buffer_size, dataset.dim)
        rows = list(metrics or [])[:state.epoch]
        last_good = Snapshot(model.net, state, buffer).copy()
        logger.info(f"Training {cfg.objective} for epochs {state.epoch}..{cfg.epochs - 1} "
                    f"on {len(train_set)} points ({len(val_set)} held out)")

        while state.epoch < cfg.epochs:
            try:
                row = self._run_epoch(model, train_set, val_set, buffer, state, rng)
            except DivergenceError as e:
                logger.warning(f"Divergence in epoch {state.epoch}: {e}")
                if state.restarts >= cfg.max_restarts:
                    raise TrainingFailedError(f"training diverged after {state.restarts} restarts: {e}",
                                              checkpoint=last_good) from e
                restored = self._restore(last_good, state)
                model.net, state, buffer = restored.network, restored.state, restored.buffer
                continue

            state.epoch += 1
            is_best = row["val_acc"] > state.best_val
            if is_best:
                state.best_val = row["val_acc"]
            rows.append(row)
            last_good = Snapshot(model.net, state, buffer).copy()
            self._write_metrics(rows)
            if self.store is not None:
                self.store.save(last_good, best=is_best)
            logger.info(f"Epoch {row['epoch']}: train_acc={row['train_acc']:.3f} val_acc={row['val_acc']:.3f} "
                        f"E(data)={row['e_data_mean']:.3f} E(neg)={row['e_neg_mean']:.3f} lr={row['lr']:.2e}")

        return TrainResult(model, rows, state, buffer, train_set, val_set)


def train(m: JemModel, dataset: LabeledDataset, cfg: TrainConfig, rng: Rng, **kwargs) -> Tuple[JemModel, List[Dict[str, float]]]:
    """Train m on dataset; returns the trained model and its metrics log."""
    result = JemTrainer(cfg, **kwargs).train(m, dataset, rng)
    return result.model, result.metrics
