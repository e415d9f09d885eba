"""
The train, sample, eval, ood, attack and distal commands.

Each command returns a process exit code: 0 on success, 1 when a JemError
(bad config, corrupt checkpoint, empty input, failed training) stops it.
"""

import functools
import json
import logging
import math
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .checkpoint import Checkpoint, CheckpointStore, load_checkpoint
from .config import RunConfig
from .data import LabeledDataset, generate, load_file, preprocess, save_file, split_train_val
from .energy import JemModel
from .errors import ConfigError, EmptyInputError, JemError, TrainingFailedError
from .evaluation import SCORE_NAMES, calibration, default_ood_sets, ood_report
from .rng import Rng
from .robustness import (
    DefendedClassifier, RobustnessCurve, attack_inputs, distal_generate, pointwise_attack,
    select_attack_inputs, transfer_eval,
)
from .sampler import sample_px_method1, sample_px_method2
from .trainer import JemTrainer, empirical_class_prior
from .utils import atomic_write_text, write_columns, write_json

logger = logging.getLogger(__name__)


def command(fn: Callable[..., None]) -> Callable[..., int]:
    """Map a command body onto an exit code, logging failures."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs) -> int:
        name = fn.__name__.replace("cmd_", "")
        logger.info(f"Starting '{name}'")
        try:
            fn(*args, **kwargs)
        except KeyboardInterrupt:
            logger.info(f"'{name}' interrupted by user")
            return 0
        except JemError as e:
            logger.error(f"'{name}' failed: {e}")
            return 1
        logger.info(f"'{name}' completed successfully")
        return 0
    return wrapper


def _run_config(ckpt: Checkpoint, seed: Optional[int] = None) -> RunConfig:
    config = RunConfig.parse(ckpt.config_text, "<checkpoint config>")
    return config if seed is None else config.with_seed(seed)


def _load_model_space(path, ckpt: Checkpoint) -> LabeledDataset:
    ds = load_file(path, num_classes=ckpt.network.num_classes)
    if len(ds) == 0:
        raise EmptyInputError(f"dataset {path} has no rows")
    if ds.dim != ckpt.network.input_dim:
        raise ConfigError(f"dataset {path} has {ds.dim} features, model expects {ckpt.network.input_dim}")
    return LabeledDataset(ckpt.to_model_space(ds.inputs), ds.labels, ds.num_classes, name=ds.name)


def _read_metrics(path: Path) -> List[Dict]:
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


@command
def cmd_train(config_path, out_dir, resume: bool = False, seed: Optional[int] = None):
    """Train a model per the config; writes checkpoints, metrics.jsonl and the resolved config."""
    config = RunConfig.load(config_path, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config_text = config.to_text()
    atomic_write_text(out / "resolved_config.txt", config_text)

    rng = Rng(config.seed)
    raw = generate(config.data, rng.substream("data"))
    dataset = preprocess(raw, rng.substream("preprocess"), config.train.noise_std, renoise=config.train.renoise)
    train_rng = rng.substream("train")

    raw_train, raw_val = split_train_val(raw, config.train.val_fraction, train_rng.substream("split"))
    save_file(raw_train, out / "data" / "train.jtb")
    if len(raw_val):
        save_file(raw_val, out / "data" / "val.jtb")

    store = CheckpointStore(out / "checkpoints", config.data.spec_hash(), config_text, rng.describe(),
                            dataset.normalization, empirical_class_prior(raw_train.labels, raw.num_classes))
    model = JemModel(config.model.build(dataset.dim, dataset.num_classes, rng.substream("init")))
    state = buffer = None
    metrics_path = out / "metrics.jsonl"
    metrics: List[Dict] = []
    if resume and store.last_path.exists():
        ckpt = load_checkpoint(store.last_path)
        if ckpt.spec_hash != store.spec_hash:
            raise ConfigError("cannot resume: the checkpoint was trained on a different dataset spec")
        model, state, buffer = JemModel(ckpt.network), ckpt.state, ckpt.buffer
        metrics = _read_metrics(metrics_path)
        logger.info(f"Resuming from {store.last_path} at epoch {state.epoch}")
    elif resume:
        logger.warning(f"No checkpoint under {store.directory}; starting from scratch")

    trainer = JemTrainer(config.train, store=store, metrics_path=metrics_path)
    try:
        result = trainer.train(model, dataset, train_rng, state, buffer, metrics)
    except TrainingFailedError as e:
        if e.checkpoint is not None:
            store.save(e.checkpoint)
        raise
    last = result.metrics[-1] if result.metrics else {}
    logger.info(f"Finished {len(result.metrics)} epochs; final val_acc={last.get('val_acc', float('nan')):.3f}")


@command
def cmd_sample(checkpoint, out_dir, method: int = 2, n: int = 100, steps: int = 100,
               seed: Optional[int] = None, keep_top: Optional[float] = None, source: str = "chains"):
    """Draw samples (method 1 or 2, or the replay buffer) and write them as JTB."""
    ckpt = load_checkpoint(checkpoint)
    config = _run_config(ckpt, seed)
    model = ckpt.model
    if n < 1:
        raise EmptyInputError("need at least one sample")
    if keep_top is not None and not 0.0 < keep_top <= 1.0:
        raise ConfigError(f"keep_top must lie in (0, 1], got {keep_top}")
    rng = Rng(config.seed).substream("sample", source, method)

    if source == "buffer":
        if len(ckpt.buffer) == 0:
            raise EmptyInputError("the checkpoint's replay buffer is empty")
        x = ckpt.buffer.states.copy()
        y = model.predict(x)
    elif method == 1:
        x, y = sample_px_method1(model, config.sampler, rng, steps, n, ckpt.class_prior)
    elif method == 2:
        x = sample_px_method2(model, config.sampler, rng, steps, n)
        y = model.predict(x)
    else:
        raise ConfigError(f"sampling method must be 1 or 2, got {method}")

    confidence = np.exp(np.max(model.log_p_y_given_x(x), axis=-1))
    if keep_top is not None:
        count = max(1, int(math.ceil(keep_top * len(x))))
        keep = np.sort(np.argsort(-confidence, kind="stable")[:count])
        x, y, confidence = x[keep], y[keep], confidence[keep]

    out = Path(out_dir)
    samples = LabeledDataset(x, y, model.num_classes, name="samples")
    save_file(samples, out / "samples.jtb")
    if x.shape[1] == 2:
        write_columns(out / "samples_scatter.txt", [x[:, 0], x[:, 1], y], header="x0 x1 label")
    write_json(out / "samples.json", {
        "method": method, "source": source, "count": len(x), "steps": steps,
        "mean_log_p_tilde": float(np.mean(model.log_p_tilde(x))),
        "mean_confidence": float(np.mean(confidence)),
        "class_counts": np.bincount(y, minlength=model.num_classes),
    })


@command
def cmd_eval(checkpoint, dataset, out_dir, bins: int = 20):
    """Accuracy and the reliability table on a dataset file (raw space)."""
    ckpt = load_checkpoint(checkpoint)
    ds = _load_model_space(dataset, ckpt)
    model = ckpt.model
    table = calibration(model, ds.inputs, ds.labels, bins)
    accuracy = float(np.mean(model.predict(ds.inputs) == ds.labels))
    out = Path(out_dir)
    write_json(out / "eval.json", {"dataset": str(dataset), "n": len(ds), "accuracy": accuracy,
                                   "reliability": table.to_dict()})
    write_columns(out / "reliability.txt", [table.bin_centers(), table.accuracy, table.confidence, table.counts],
                  header="bin_center accuracy confidence count")
    logger.info(f"accuracy={accuracy:.4f} ECE={table.ece:.4f} on {len(ds)} points")


@command
def cmd_ood(checkpoint, in_dataset, out_dir, ood_datasets: Sequence = (), scores: Sequence[str] = SCORE_NAMES,
            include_reference: bool = True, seed: Optional[int] = None, threads: int = 1, bins: int = 30):
    """AUROC and histograms of each OOD score, in-distribution vs every OOD set."""
    ckpt = load_checkpoint(checkpoint)
    config = _run_config(ckpt, seed)
    in_ds = _load_model_space(in_dataset, ckpt)
    ood_sets: Dict[str, np.ndarray] = {}
    for path in ood_datasets:
        ds = load_file(path)
        if ds.dim != in_ds.dim:
            raise ConfigError(f"OOD set {path} has {ds.dim} features, expected {in_ds.dim}")
        ood_sets[Path(path).stem] = ckpt.to_model_space(ds.inputs)
    if include_reference:
        ood_sets = default_ood_sets(in_ds.dim, len(in_ds), Rng(config.seed).substream("ood"), extra=ood_sets)
    if not ood_sets:
        raise EmptyInputError("no OOD sets to compare against")

    reports = ood_report(ckpt.model, in_ds.inputs, ood_sets, scores, bins, threads)
    out = Path(out_dir)
    write_json(out / "ood.json", {"in_dataset": str(in_dataset), "reports": [r.to_dict() for r in reports]})
    for report in reports:
        for name, hist in report.histograms.items():
            edges = hist["edges"]
            write_columns(out / f"hist_{report.score}_{name}.txt",
                          [0.5 * (edges[:-1] + edges[1:]), hist["in_counts"], hist["ood_counts"]],
                          header="bin_center in_count ood_count")


@command
def cmd_attack(checkpoint, dataset, out_dir, config_path=None, seed: Optional[int] = None, threads: int = 1,
               pointwise: bool = True):
    """
    Robustness curves for every (norm, refine steps) pair, the pointwise
    comparison at zero refinement, and transfer of L-inf adversarials.
    """
    ckpt = load_checkpoint(checkpoint)
    config = RunConfig.load(config_path, seed) if config_path else _run_config(ckpt, seed)
    plan = config.attack
    ds = _load_model_space(dataset, ckpt)
    model = ckpt.model
    rng = Rng(config.seed).substream("attack")
    chosen = select_attack_inputs(len(ds), plan.num_inputs, rng)
    xs, ys = ds.inputs[chosen], ds.labels[chosen]
    out = Path(out_dir)
    refiner = plan.refine_sampler(config.sampler)
    summary: Dict = {"inputs": chosen, "curves": {}, "pointwise": {}, "transfer": {},
                     "refine_sampler": {"alpha": refiner.alpha, "sigma": refiner.sigma}}

    for norm in plan.norms:
        pgd_eps = {}
        for k in plan.refine_steps:
            ac = plan.attack_config(norm, k)
            defended = DefendedClassifier(model, k, ac.eot_samples, refiner, ac.votes)
            results = attack_inputs(defended, xs, ys, ac, rng.substream("pgd", norm, k), threads)
            curve = RobustnessCurve([r.epsilon for r in results], label=f"{norm}-k{k}")
            pgd_eps[k] = curve.epsilons
            summary["curves"][curve.label] = curve.to_dict()
            grid, acc = curve.points(ac.bracket(ds.dim))
            write_columns(out / f"curve_{norm}_k{k}.txt", [grid, acc], header="epsilon accuracy")
            logger.info(f"{curve.label}: median minimal eps {curve.median():.4f}")

            if norm == "linf" and k == 0:
                _transfer(plan, model, refiner, results, ys, rng, out, summary)

        if pointwise and 0 in pgd_eps:
            defended = DefendedClassifier(model, 0, 1, refiner)
            count = min(plan.pointwise_inputs, len(xs))
            pw = np.array([pointwise_attack(defended, xs[i], int(ys[i]), norm, rng.substream("pointwise", norm, i))
                           for i in range(count)])
            pgd = pgd_eps[0][:count]
            write_columns(out / f"pointwise_{norm}.txt", [pgd, pw], header="pgd_eps pointwise_eps")
            summary["pointwise"][norm] = {"pointwise_eps": pw, "pgd_eps": pgd,
                                          "fraction_pointwise_ge_pgd": float(np.mean(pw >= pgd))}

    write_json(out / "attack.json", summary)


def _transfer(plan, model, refiner, results, ys, rng, out: Path, summary: Dict):
    """Re-evaluate successful zero-step L-inf adversarials under refinement."""
    found = [i for i, r in enumerate(results) if r.adversarial is not None and r.epsilon > 0]
    if not found:
        logger.warning("No successful L-inf adversarials to transfer")
        return
    adv = np.stack([results[i].adversarial for i in found])
    labels = ys[found]
    eps = np.array([results[i].epsilon for i in found])
    save_file(LabeledDataset(adv, labels, model.num_classes, name="adversarial"), out / "adversarial_linf_k0.jtb")
    for k in (0, *plan.transfer_steps):
        defended = DefendedClassifier(model, k, plan.eot_samples, refiner, plan.votes)
        result = transfer_eval(defended, adv, labels, eps, rng.substream("transfer", k))
        summary["transfer"][f"k{k}"] = {"accuracy": result.accuracy, "epsilons": result.epsilons}
        logger.info(f"transfer to k={k}: accuracy {result.accuracy:.3f} on {len(adv)} adversarials")


@command
def cmd_distal(checkpoint, target: int, out_dir, n: int = 10, conf_target: float = 0.9, max_iters: int = 200,
               step: float = 0.05, seed: Optional[int] = None):
    """Distal adversarials: inputs grown from noise until p(target|x) reaches conf_target."""
    ckpt = load_checkpoint(checkpoint)
    config = _run_config(ckpt, seed)
    model = ckpt.model
    if not 0 <= target < model.num_classes:
        raise ConfigError(f"target class {target} outside [0, {model.num_classes})")
    if n < 1:
        raise EmptyInputError("need at least one distal start")
    rng = Rng(config.seed).substream("distal", target)
    runs = [distal_generate(model, target, conf_target, max_iters, rng.substream("start", i), step, config.sampler)
            for i in range(n)]
    points = np.stack([r.x for r in runs])
    out = Path(out_dir)
    write_json(out / "distal.json", {
        "target": target,
        "conf_target": conf_target,
        "reached_fraction": float(np.mean([r.reached for r in runs])),
        "final_confidence": [r.confidence for r in runs],
        "final_log_p_tilde": np.atleast_1d(model.log_p_tilde(points)),
        "points": points,
        "trajectories": [r.trajectory for r in runs],
    })
    longest = max(len(r.trajectory) for r in runs)
    padded = np.array([r.trajectory + [r.trajectory[-1]] * (longest - len(r.trajectory)) for r in runs])
    write_columns(out / f"distal_{target}.txt", [np.arange(longest), padded.mean(axis=0)],
                  header="iteration mean_confidence")
