"""
Adversarial evaluation of a classifier defended by SGLD refinement.

The defended classifier runs k SGLD steps from its input n times and averages
log p(y|x) over the refined points. Attacks see the defense through
first-order expectation over transformations: the gradient is the average of
the cross-entropy gradients at the refined points, with every noise draw held
fixed and the refinement treated as the identity during the backward pass.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, EmptyInputError
from .rng import Rng
from .sampler import SamplerConfig, draw_p0, run_chain
from .utils import parallel_map

logger = logging.getLogger(__name__)

NORMS = ("linf", "l2")


@dataclass(frozen=True)
class AttackConfig:
    norm: str = "linf"
    pgd_iters: int = 40
    restarts: int = 20
    eot_samples: int = 5
    refine_steps: int = 0
    search_steps: int = 12
    step_scale: float = 2.5
    eps_max: Optional[float] = None
    num_inputs: int = 300
    votes: int = 5
    pointwise_seed_trials: int = 50
    pointwise_bisect_steps: int = 20

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ConfigError(f"unknown norm '{self.norm}', expected one of {NORMS}")
        if self.pgd_iters < 1 or self.eot_samples < 1 or self.restarts < 1:
            raise ConfigError("pgd_iters, restarts and eot_samples must be at least 1")
        if self.refine_steps < 0 or self.search_steps < 1 or self.votes < 1:
            raise ConfigError("refine_steps must be >= 0, search_steps and votes >= 1")

    def bracket(self, dim: int) -> float:
        """Upper end of the epsilon search; covers the whole [-1, 1] box."""
        if self.eps_max is not None:
            return self.eps_max
        return 2.0 if self.norm == "linf" else 2.0 * math.sqrt(dim)


def perturbation_norm(delta: np.ndarray, norm: str) -> np.ndarray:
    delta = np.asarray(delta, dtype=np.float64)
    if norm == "linf":
        return np.max(np.abs(delta), axis=-1)
    return np.linalg.norm(delta, axis=-1)


def refine(m, x, k: int, cfg: SamplerConfig, rng: Rng) -> np.ndarray:
    """k unconditional SGLD steps seeded at x."""
    return run_chain(m, x, cfg, k, rng=rng)


class DefendedClassifier:
    """A model wrapped in the k-step refinement defense with n-sample averaging."""

    def __init__(self, model, refine_steps: int = 0, eot_samples: int = 5,
                 sampler: Optional[SamplerConfig] = None, votes: int = 5):
        self.model = model
        self.refine_steps = refine_steps
        self.eot_samples = eot_samples
        self.sampler = sampler or SamplerConfig()
        self.votes = votes

    @property
    def stochastic(self) -> bool:
        return self.refine_steps > 0

    def _refined(self, x: np.ndarray, rng: Rng) -> np.ndarray:
        """[n, N, D] refinements of a batch."""
        n = self.eot_samples
        stacked = np.tile(x, (n, 1))
        return refine(self.model, stacked, self.refine_steps, self.sampler, rng).reshape(n, *x.shape)

    def eot_log_probs(self, x, rng: Rng) -> np.ndarray:
        """Mean log p(y|x_i) over the refined copies of x; [N, K] or [K]."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        batch = np.atleast_2d(x)
        if not self.stochastic:
            # zero refinement steps is the undefended model
            out = self.model.log_p_y_given_x(batch)
        else:
            refined = self._refined(batch, rng)
            out = np.mean(self.model.log_p_y_given_x(refined.reshape(-1, batch.shape[1]))
                          .reshape(self.eot_samples, len(batch), -1), axis=0)
        return out[0] if single else out

    def loss_gradient(self, x: np.ndarray, y: np.ndarray, rng: Rng) -> Tuple[np.ndarray, np.ndarray]:
        """Cross-entropy of the averaged prediction and its EOT input gradient, per row."""
        y = np.asarray(y, dtype=np.int64)
        rows = np.arange(len(x))
        if not self.stochastic:
            loss = -self.model.log_p_y_given_x(x)[rows, y]
            return loss, -self.model.grad_log_p_y(x, y)
        refined = self._refined(x, rng)
        flat = refined.reshape(-1, x.shape[1])
        labels = np.tile(y, self.eot_samples)
        log_probs = self.model.log_p_y_given_x(flat).reshape(self.eot_samples, len(x), -1)
        grads = self.model.grad_log_p_y(flat, labels).reshape(self.eot_samples, *x.shape)
        return -np.mean(log_probs, axis=0)[rows, y], -np.mean(grads, axis=0)

    def predict(self, x, rng: Rng) -> np.ndarray:
        return np.argmax(self.eot_log_probs(x, rng), axis=-1)

    def predict_majority(self, x, rng: Rng) -> np.ndarray:
        """Majority label over `votes` fresh evaluations; ties go to the lowest class."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if not self.stochastic:
            return self.predict(x, rng)
        ballots = np.stack([self.predict(x, rng.substream("vote", v)) for v in range(self.votes)])
        num_classes = self.model.num_classes
        counts = np.stack([np.sum(ballots == c, axis=0) for c in range(num_classes)], axis=-1)
        return np.argmax(counts, axis=-1)


def eot_logits(m, x, n: int, k: int, rng: Rng, cfg: Optional[SamplerConfig] = None) -> np.ndarray:
    """(1/n) sum_i log p(y|x_i) with x_i the result of k SGLD steps from x."""
    if n < 1:
        raise ConfigError("EOT needs at least one sample")
    return DefendedClassifier(m, k, n, cfg).eot_log_probs(x, rng)


# --- PGD --------------------------------------------------------------------------

def _box(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    # widened to contain x so box clipping never lengthens the perturbation
    return np.minimum(-1.0, x), np.maximum(1.0, x)


def _project(adv: np.ndarray, x: np.ndarray, eps: float, norm: str) -> np.ndarray:
    delta = adv - x
    if norm == "linf":
        delta = np.clip(delta, -eps, eps)
    else:
        lengths = np.linalg.norm(delta, axis=-1, keepdims=True)
        delta = delta * np.minimum(1.0, eps / np.maximum(lengths, 1e-12))
    lo, hi = _box(x)
    return np.clip(x + delta, lo, hi)


def _random_starts(x: np.ndarray, eps: float, norm: str, count: int, rng: Rng) -> np.ndarray:
    dim = x.shape[-1]
    if norm == "linf":
        delta = rng.uniform(-eps, eps, (count, dim))
    else:
        direction = rng.substream("direction").normal((count, dim))
        direction /= np.maximum(np.linalg.norm(direction, axis=-1, keepdims=True), 1e-12)
        radius = eps * rng.substream("radius").random(count) ** (1.0 / dim)
        delta = direction * radius[:, None]
    return _project(x + delta, x, eps, norm)


def _ascent_direction(grad: np.ndarray, norm: str) -> np.ndarray:
    if norm == "linf":
        return np.sign(grad)
    lengths = np.linalg.norm(grad, axis=-1, keepdims=True)
    return grad / np.maximum(lengths, 1e-12)


def pgd_attack(defended: DefendedClassifier, x, y_true: int, eps: float, ac: AttackConfig,
               rng: Rng) -> Optional[np.ndarray]:
    """
    Projected gradient ascent on the cross-entropy inside the eps-ball.

    All restarts run as one batch. A candidate counts only if the majority of
    fresh defended evaluations misclassify it.

    Returns:
        An adversarial input within eps of x, or None.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.full(ac.restarts, int(y_true))
    adv = _random_starts(x, eps, ac.norm, ac.restarts, rng.substream("start"))
    step = ac.step_scale * eps / ac.pgd_iters
    for it in range(ac.pgd_iters):
        _, grad = defended.loss_gradient(adv, labels, rng.substream("iter", it))
        adv = _project(adv + step * _ascent_direction(grad, ac.norm), x, eps, ac.norm)
    fooled = np.flatnonzero(defended.predict(adv, rng.substream("check")) != y_true)
    if fooled.size == 0:
        return None
    confirmed = defended.predict_majority(adv[fooled], rng.substream("confirm")) != y_true
    if not np.any(confirmed):
        return None
    return adv[fooled[np.argmax(confirmed)]]


@dataclass
class AttackResult:
    """Minimal epsilon found for one input (inf if never fooled, 0 if misclassified clean)."""
    epsilon: float
    adversarial: Optional[np.ndarray] = None


def minimal_adversarial(defended: DefendedClassifier, x, y_true: int, ac: AttackConfig, rng: Rng) -> AttackResult:
    """Binary search over eps in [0, eps_max] with a fixed number of bisections."""
    x = np.asarray(x, dtype=np.float64)
    if defended.predict_majority(x[None], rng.substream("clean"))[0] != y_true:
        return AttackResult(0.0, x.copy())
    lo, hi = 0.0, ac.bracket(x.shape[-1])
    best = AttackResult(math.inf)
    for i in range(ac.search_steps):
        mid = 0.5 * (lo + hi)
        adv = pgd_attack(defended, x, y_true, mid, ac, rng.substream("search", i))
        if adv is None:
            lo = mid
        else:
            best = AttackResult(mid, adv)
            hi = mid
    return best


def pgd_minimal_eps(m_defended: DefendedClassifier, x, y_true: int, ac: AttackConfig, rng: Rng) -> float:
    return minimal_adversarial(m_defended, x, y_true, ac, rng).epsilon


# --- gradient-free ----------------------------------------------------------------

class _Oracle:
    """Misclassification queries, each on its own substream."""

    def __init__(self, defended: DefendedClassifier, y_true: int, rng: Rng):
        self.defended = defended
        self.y_true = y_true
        self.rng = rng
        self.queries = 0

    def fooled(self, point: np.ndarray) -> bool:
        self.queries += 1
        label = self.defended.predict_majority(point[None], self.rng.substream("query", self.queries))[0]
        return label != self.y_true


def _salt_and_pepper_seed(oracle: _Oracle, x: np.ndarray, trials: int, rng: Rng) -> Optional[np.ndarray]:
    lo, hi = _box(x)
    for trial in range(trials):
        trng = rng.substream("seed", trial)
        fraction = (trial + 1) / trials
        mask = trng.random(x.shape[0]) < fraction
        salt = np.where(trng.random(x.shape[0]) < 0.5, lo, hi)
        candidate = np.where(mask, salt, x)
        if np.any(mask) and oracle.fooled(candidate):
            return candidate
    return None


def pointwise_attack(m_defended: DefendedClassifier, x, y_true: int, norm: str, rng: Rng,
                     ac: Optional[AttackConfig] = None) -> float:
    """
    Gradient-free minimal perturbation.

    Starts from a misclassified salt-and-pepper corruption of x, resets single
    coordinates to their clean values while the input stays misclassified,
    then bisects every remaining coordinate toward its clean value.

    Returns:
        Norm of the final perturbation, or inf if no misclassified seed is found.
    """
    ac = ac or AttackConfig(norm=norm)
    x = np.asarray(x, dtype=np.float64)
    oracle = _Oracle(m_defended, y_true, rng.substream("oracle"))
    if oracle.fooled(x):
        return 0.0
    adv = _salt_and_pepper_seed(oracle, x, ac.pointwise_seed_trials, rng)
    if adv is None:
        return math.inf
    order = rng.substream("order").permutation(x.shape[0])

    improved = True
    while improved:
        improved = False
        for i in order:
            if adv[i] == x[i]:
                continue
            trial = adv.copy()
            trial[i] = x[i]
            if oracle.fooled(trial):
                adv, improved = trial, True

    improved = True
    while improved:
        improved = False
        for i in order:
            if adv[i] == x[i]:
                continue
            clean, fooled = x[i], adv[i]
            for _ in range(ac.pointwise_bisect_steps):
                trial = adv.copy()
                trial[i] = 0.5 * (clean + fooled)
                if oracle.fooled(trial):
                    fooled = trial[i]
                else:
                    clean = trial[i]
            if fooled != adv[i]:
                adv[i] = fooled
                improved = True
    return float(perturbation_norm(adv - x, norm))


# --- transfer, curves, distal -------------------------------------------------------

@dataclass
class TransferResult:
    accuracy: float
    epsilons: np.ndarray


def transfer_eval(m_eval: DefendedClassifier, adv_examples, y_true, epsilons, rng: Rng) -> TransferResult:
    """
    Re-classify adversarial examples crafted against another model.

    An example refined back to its true class gets epsilon = inf.
    """
    adv_examples = np.asarray(adv_examples, dtype=np.float64)
    y_true = np.asarray(y_true, dtype=np.int64)
    if len(adv_examples) == 0:
        raise EmptyInputError("transfer evaluation needs at least one adversarial example")
    predictions = np.array([m_eval.predict_majority(a[None], rng.substream("transfer", i))[0]
                            for i, a in enumerate(adv_examples)])
    correct = predictions == y_true
    eps = np.where(correct, math.inf, np.asarray(epsilons, dtype=np.float64))
    return TransferResult(float(np.mean(correct)), eps)


@dataclass
class RobustnessCurve:
    """Accuracy against perturbation budget from per-input minimal epsilons."""
    epsilons: np.ndarray
    label: str = ""

    def __post_init__(self):
        self.epsilons = np.asarray(self.epsilons, dtype=np.float64)

    def accuracy_at(self, eps: float) -> float:
        if self.epsilons.size == 0:
            raise EmptyInputError("robustness curve has no inputs")
        return float(np.mean(self.epsilons > eps))

    def points(self, eps_max: float, num: int = 50) -> Tuple[np.ndarray, np.ndarray]:
        grid = np.linspace(0.0, eps_max, num)
        return grid, np.array([self.accuracy_at(e) for e in grid])

    def median(self) -> float:
        return float(np.median(self.epsilons))

    def to_dict(self) -> Dict:
        return {"label": self.label, "epsilons": self.epsilons.tolist(), "median": self.median()}


def select_attack_inputs(n_total: int, num: int, rng: Rng) -> np.ndarray:
    """The same seeded subset for every model variant."""
    return np.sort(rng.substream("attack-inputs").permutation(n_total)[:min(num, n_total)])


def attack_inputs(defended: DefendedClassifier, xs, ys, ac: AttackConfig, rng: Rng,
                  threads: int = 1) -> List[AttackResult]:
    """Minimal-epsilon PGD on every input; each input owns its RNG substream."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.int64)

    def run(i: int) -> AttackResult:
        result = minimal_adversarial(defended, xs[i], int(ys[i]), ac, rng.substream("input", i))
        logger.debug(f"input {i}: minimal {ac.norm} eps = {result.epsilon}")
        return result

    return parallel_map(run, range(len(xs)), threads)


@dataclass
class DistalResult:
    x: np.ndarray
    confidence: float
    trajectory: List[float] = field(default_factory=list)
    reached: bool = False


def distal_generate(m, y_target: int, conf_target: float = 0.9, max_iters: int = 200, rng: Optional[Rng] = None,
                    step: float = 0.05, cfg: Optional[SamplerConfig] = None) -> DistalResult:
    """
    Gradient ascent on log p(y_target|x) from a p0 draw, kept inside [-1, 1]^D.

    Steps move a fixed distance along the normalised gradient. Stops once the
    target confidence is reached or after max_iters steps.
    """
    if not 0.0 < conf_target < 1.0:
        raise ConfigError(f"conf_target must lie in (0, 1), got {conf_target}")
    cfg = cfg or SamplerConfig()
    rng = rng or Rng(0)
    x = np.clip(draw_p0(cfg, rng.substream("p0"), 1, m.input_dim)[0], -1.0, 1.0)
    confidence = float(np.exp(m.log_p_y_given_x(x)[y_target]))
    trajectory = [confidence]
    for _ in range(max_iters):
        if confidence >= conf_target:
            break
        grad = m.grad_log_p_y(x, y_target)
        length = np.linalg.norm(grad)
        if length > 0:
            x = np.clip(x + step * grad / length, -1.0, 1.0)
        confidence = float(np.exp(m.log_p_y_given_x(x)[y_target]))
        trajectory.append(confidence)
    return DistalResult(x, confidence, trajectory, confidence >= conf_target)
