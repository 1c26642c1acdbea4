"""End-to-end experiments: train arms, attack, score, aggregate.

An experiment is a grid of cells (arm x seed).  Each cell trains one
model, attacks every evaluation image with the shared ``AttackConfig`` and
scores the clean and per-round outputs.  Cells share nothing, so they can
run in worker processes; results are always collected in grid order.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from ..attacks import AttackConfig, bim_attack
from ..errors import InvalidConfigError, PRSLError
from ..losses import B_GRID, LossConfig, RankWindow
from ..models import (
    Checkpoint,
    TrainConfig,
    config_hash,
    greedy_decode,
    predict,
    spec_from_dict,
    train,
)
from ..models.specs import SPECIAL_TOKENS
from ..textmetrics import (
    CorpusStats,
    best_reference,
    bleu,
    cider,
    greedy_align_score,
    meteor_exact,
    random_embedding_table,
    rouge_l,
    threshold_proportion,
)
from .data import SyntheticDatasetSpec, generate_dataset, vocabulary

log = logging.getLogger(__name__)

CAPTION_METRICS = ("bleu", "rougeL", "meteor", "cider", "align")
PAPER_THRESHOLDS = (0.90, 0.80, 0.75, 0.70)
# published top-6/20/100 windows, scaled down to a 16-class / 64-token model
DESK_WINDOWS = {"top-6": RankWindow(2, 3), "top-20": RankWindow(2, 6), "top-100": RankWindow(2, 10)}
ROUND_DEFINITION = "one round = iters_per_round BIM sign steps; round 0 is the clean input"


@dataclass(frozen=True)
class Arm:
    label: str
    b: float = 0.0
    window: RankWindow = field(default_factory=lambda: RankWindow(2, 6))

    @property
    def is_baseline(self) -> bool:
        return self.b == 0.0

    def to_dict(self) -> dict:
        return {"label": self.label, "b": self.b, "window": [self.window.j, self.window.k]}

    @classmethod
    def from_dict(cls, d: dict) -> "Arm":
        return cls(d["label"], float(d.get("b", 0.0)), RankWindow(*d.get("window", [2, 6])))


@dataclass(frozen=True)
class Band:
    """Clean-score interval every compared arm must land in."""

    metric: str
    low: float = 0.0
    high: float = 1.0
    stop_in_band: bool = False
    min_epochs: int = 1

    def contains(self, value: float) -> bool:
        return self.low <= value <= self.high

    def to_dict(self) -> dict:
        return {"metric": self.metric, "low": self.low, "high": self.high,
                "stop_in_band": self.stop_in_band, "min_epochs": self.min_epochs}


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    dataset: SyntheticDatasetSpec
    model: object
    train: TrainConfig
    attack: AttackConfig
    arms: tuple
    seeds: tuple = (0, 1, 2, 3, 4)
    metrics: tuple = ("accuracy",)
    band: Band | None = None
    thresholds: tuple = PAPER_THRESHOLDS
    embedding_dim: int = 16
    embedding_seed: int = 0
    bleu_smoothing: float = 0.0
    workers: int = 1
    eval_split: str = "test"
    save_checkpoints: bool = True

    def __post_init__(self):
        object.__setattr__(self, "arms", tuple(self.arms))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "metrics", tuple(self.metrics))
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))
        if not self.arms:
            raise InvalidConfigError("an experiment needs at least one arm")
        if len({a.label for a in self.arms}) != len(self.arms):
            raise InvalidConfigError("arm labels must be unique")
        if not self.seeds:
            raise InvalidConfigError("at least one seed is required")
        for arm in self.arms:
            self.model.validate_window(arm.window)
        valid = ("accuracy",) if self.model.kind == "classifier" else CAPTION_METRICS
        for metric in self.metrics:
            if metric not in valid:
                raise InvalidConfigError(f"metric {metric!r} is not available for a {self.model.kind}")
        if self.model.image_shape != (self.dataset.image_size, self.dataset.image_size, 3):
            raise InvalidConfigError("model input shape does not match the dataset images")
        if self.model.classes < self.dataset.num_classes and self.model.kind == "classifier":
            raise InvalidConfigError("model has fewer classes than the dataset")
        if self.eval_split not in ("train", "test"):
            raise InvalidConfigError("eval_split must be 'train' or 'test'")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "dataset": self.dataset.to_dict(),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "attack": self.attack.to_dict(),
            "arms": [a.to_dict() for a in self.arms],
            "seeds": list(self.seeds),
            "metrics": list(self.metrics),
            "band": None if self.band is None else self.band.to_dict(),
            "thresholds": list(self.thresholds),
            "embedding_dim": self.embedding_dim,
            "embedding_seed": self.embedding_seed,
            "bleu_smoothing": self.bleu_smoothing,
            "workers": self.workers,
            "eval_split": self.eval_split,
            "save_checkpoints": self.save_checkpoints,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        d = dict(d)
        band = d.get("band")
        return cls(
            name=d.get("name", "experiment"),
            dataset=SyntheticDatasetSpec.from_dict(d.get("dataset", {})),
            model=spec_from_dict(d.get("model", {})),
            train=TrainConfig.from_dict(d.get("train", {})),
            attack=AttackConfig.from_dict(d.get("attack", {})),
            arms=tuple(Arm.from_dict(a) for a in d.get("arms", [{"label": "CE", "b": 0.0}])),
            seeds=tuple(d.get("seeds", (0, 1, 2, 3, 4))),
            metrics=tuple(d.get("metrics", ("accuracy",))),
            band=None if band is None else Band(**band),
            thresholds=tuple(d.get("thresholds", PAPER_THRESHOLDS)),
            embedding_dim=int(d.get("embedding_dim", 16)),
            embedding_seed=int(d.get("embedding_seed", 0)),
            bleu_smoothing=float(d.get("bleu_smoothing", 0.0)),
            workers=int(d.get("workers", 1)),
            eval_split=d.get("eval_split", "test"),
            save_checkpoints=bool(d.get("save_checkpoints", True)),
        )

    def train_config(self, arm: Arm, seed: int) -> TrainConfig:
        base = self.train.loss or LossConfig()
        loss = replace(base, b=arm.b, window=arm.window)
        return replace(self.train, loss=loss, seed=seed)

    def attack_hash(self) -> str:
        return config_hash(self.attack.to_dict())


@dataclass
class DegradationCurve:
    arm: str
    metric: str
    mean: list
    std: list
    n_seeds: int
    b: float = 0.0
    window: str = ""

    def __len__(self) -> int:
        return len(self.mean)


@dataclass
class ReportRow:
    arm: str
    threshold: float
    proportion: float
    rounds: int
    n_seeds: int
    metric: str = ""


@dataclass
class CellResult:
    arm: Arm
    seed: int
    scores: dict  # metric -> (rounds + 1, n_items) array
    checkpoint: object = None
    clean: dict = field(default_factory=dict)
    error: str | None = None


# -- scoring --------------------------------------------------------------------

class Scorer:
    """Scores model outputs against clean references for the configured metrics."""

    def __init__(self, exp: ExperimentSpec, split):
        self.exp = exp
        self.split = split
        self.vocab = vocabulary()
        if exp.model.kind == "captioner":
            self.stats = CorpusStats.build(split.references)
            self.table = random_embedding_table(self.vocab, exp.embedding_dim, exp.embedding_seed)

    def words(self, token_ids) -> list[str]:
        return [self.vocab[t] for t in token_ids
                if t < len(self.vocab) and self.vocab[t] not in SPECIAL_TOKENS]

    def score(self, ckpt, images) -> dict:
        spec = ckpt.spec
        if spec.kind == "classifier":
            correct = predict(ckpt.params, spec, images) == self.split.labels
            return {"accuracy": correct.astype(np.float64)}
        decoded = [self.words(c) for c in greedy_decode(ckpt.params, spec, images)]
        return {m: np.array([self.score_text(m, cand, refs).value
                             for cand, refs in zip(decoded, self.split.references)])
                for m in self.exp.metrics}

    def score_text(self, metric, cand, refs):
        if metric == "bleu":
            return bleu(cand, refs, smoothing=self.exp.bleu_smoothing)
        if metric == "cider":
            return cider(cand, refs, self.stats)
        if metric == "rougeL":
            return best_reference(rouge_l, cand, refs)
        if metric == "meteor":
            return best_reference(meteor_exact, cand, refs)
        if metric == "align":
            return best_reference(greedy_align_score, cand, refs, table=self.table)
        raise InvalidConfigError(f"unknown metric {metric!r}")


def attack_references(spec, split):
    return split.labels if spec.kind == "classifier" else split.captions


def score_rounds(ckpt, split, attack: AttackConfig, scorer: Scorer) -> dict:
    """Per-item scores for the clean images and after each attack round."""
    trace = bim_attack(ckpt.spec, ckpt.params, split.images, attack_references(ckpt.spec, split),
                       attack)
    per_round = [scorer.score(ckpt, images) for images in trace.images]
    return {m: np.stack([r[m] for r in per_round]) for m in per_round[0]}


def degradation_curve(checkpoints, split, attack: AttackConfig, metric: str, exp=None,
                      arm: str = "") -> DegradationCurve:
    """Mean (and std across checkpoints/seeds) of per-item scores at every round."""
    if not isinstance(checkpoints, (list, tuple)):
        checkpoints = [checkpoints]
    exp = exp or _scoring_only_experiment(checkpoints[0].spec, split, attack, metric)
    scorer = Scorer(exp, split)
    means = np.array([score_rounds(c, split, attack, scorer)[metric].mean(axis=1)
                      for c in checkpoints])
    return DegradationCurve(arm, metric, means.mean(axis=0).tolist(), means.std(axis=0).tolist(),
                            len(checkpoints))


def threshold_report(checkpoints_per_arm: dict, split, attack: AttackConfig, thresholds,
                     rounds: int = 2, metric: str = "rougeL", exp=None) -> list[ReportRow]:
    """Seed-mean proportion of post-attack per-item scores strictly below each threshold."""
    if len(split) == 0:
        raise InvalidConfigError("threshold report needs a non-empty dataset")
    if not thresholds:
        raise InvalidConfigError("at least one threshold is required")
    attack = replace(attack, rounds=rounds)
    rows = []
    for label, ckpts in checkpoints_per_arm.items():
        ckpts = ckpts if isinstance(ckpts, (list, tuple)) else [ckpts]
        scorer = Scorer(exp or _scoring_only_experiment(ckpts[0].spec, split, attack, metric), split)
        finals = [score_rounds(c, split, attack, scorer)[metric][rounds] for c in ckpts]
        for t in thresholds:
            prop = float(np.mean([threshold_proportion(f, t) for f in finals]))
            rows.append(ReportRow(label, float(t), prop, rounds, len(ckpts), metric))
    return rows


def _scoring_only_experiment(spec, split, attack, metric):
    size = spec.image_shape[0]
    return ExperimentSpec(
        name="scoring", dataset=SyntheticDatasetSpec(image_size=size, shape_size=min(5, size)),
        model=spec, train=TrainConfig(), attack=attack,
        arms=(Arm("CE", 0.0, RankWindow(2, 3)),), metrics=(metric,),
    )


# -- running cells --------------------------------------------------------------

_DATASETS: dict = {}


def _dataset(spec: SyntheticDatasetSpec):
    key = tuple(sorted(spec.to_dict().items(), key=lambda kv: kv[0]))
    key = repr(key)
    if key not in _DATASETS:
        _DATASETS[key] = generate_dataset(spec)
    return _DATASETS[key]


def run_cell(exp: ExperimentSpec, arm: Arm, seed: int) -> CellResult:
    """Train, attack and score one (arm, seed) cell; failures are recorded, not raised."""
    ds = _dataset(exp.dataset)
    split = getattr(ds, exp.eval_split)
    scorer = Scorer(exp, split)
    config = exp.train_config(arm, seed)
    callback = None
    if exp.band is not None and exp.band.stop_in_band:
        def stop_in_band(epoch, params, _loss):
            if epoch < exp.band.min_epochs:
                return False
            probe = Checkpoint(exp.model, params)
            value = float(scorer.score(probe, split.images)[exp.band.metric].mean())
            return exp.band.contains(value)
        callback = stop_in_band
    try:
        ckpt = train((ds.train.images, ds.train.targets(exp.model.kind)), config, exp.model,
                     epoch_callback=callback)
        scores = score_rounds(ckpt, split, exp.attack, scorer)
    except PRSLError as exc:
        log.warning("cell %s/seed %d failed: %s", arm.label, seed, exc)
        return CellResult(arm, seed, {}, None, {}, f"{type(exc).__name__}: {exc}")
    clean = {m: float(v[0].mean()) for m, v in scores.items()}
    return CellResult(arm, seed, scores, ckpt, clean)


def _run_cell_args(args):
    return run_cell(*args)


def run_experiment(exp: ExperimentSpec) -> list[CellResult]:
    jobs = [(exp, arm, seed) for arm in exp.arms for seed in exp.seeds]
    if exp.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=exp.workers) as pool:
            return list(pool.map(_run_cell_args, jobs))
    return [run_cell(*job) for job in jobs]


@dataclass
class ExperimentResult:
    exp: ExperimentSpec
    kind: str
    command: dict
    cells: list
    curves: list = field(default_factory=list)
    thresholds: list = field(default_factory=list)
    band_flags: dict = field(default_factory=dict)

    def cells_for(self, label: str) -> list:
        return [c for c in self.cells if c.arm.label == label]

    def curve(self, arm: str, metric: str) -> DegradationCurve:
        return next(c for c in self.curves if c.arm == arm and c.metric == metric)


def aggregate(exp: ExperimentSpec, cells, kind: str, command: dict,
              threshold_rounds: int | None = None) -> ExperimentResult:
    result = ExperimentResult(exp, kind, command, cells)
    rounds = exp.attack.rounds
    threshold_rounds = min(2, rounds) if threshold_rounds is None else threshold_rounds
    for arm in exp.arms:
        ok = [c for c in result.cells_for(arm.label) if c.error is None]
        for metric in exp.metrics:
            if not ok:
                result.curves.append(DegradationCurve(arm.label, metric, [float("nan")] * (rounds + 1),
                                                      [float("nan")] * (rounds + 1), 0, arm.b,
                                                      str(arm.window)))
                continue
            per_seed = np.array([c.scores[metric].mean(axis=1) for c in ok])
            result.curves.append(DegradationCurve(arm.label, metric, per_seed.mean(axis=0).tolist(),
                                                  per_seed.std(axis=0).tolist(), len(ok), arm.b,
                                                  str(arm.window)))
            for t in exp.thresholds:
                props = [threshold_proportion(c.scores[metric][threshold_rounds], t) for c in ok]
                result.thresholds.append(ReportRow(arm.label, t, float(np.mean(props)),
                                                   threshold_rounds, len(ok), metric))
        if exp.band is not None:
            if ok:
                clean = float(np.mean([c.clean[exp.band.metric] for c in ok]))
                in_band = exp.band.contains(clean)
            else:
                clean, in_band = None, False
            result.band_flags[arm.label] = {"clean_mean": clean, "in_band": in_band}
    return result


def grid_search_b(exp: ExperimentSpec, b_values=B_GRID, window: RankWindow | None = None):
    """One arm per b plus the CE baseline; curves for every metric."""
    b_values = list(b_values)
    if not b_values:
        raise InvalidConfigError("b grid must be non-empty")
    window = window or next((a.window for a in exp.arms if not a.is_baseline), RankWindow(2, 6))
    arms = [Arm("CE", 0.0, window)] + [Arm(f"PRSL b={b:g}", float(b), window) for b in b_values]
    exp = replace(exp, arms=tuple(arms))
    command = {"kind": "sweep-b", "grid": b_values, "window": [window.j, window.k]}
    return aggregate(exp, run_experiment(exp), "sweep-b", command)


def k_sweep(exp: ExperimentSpec, windows, b: float | None = None, include_baseline: bool = True):
    """One PRSL arm per rank window (plus the CE baseline) under every metric."""
    windows = list(windows)
    if not windows:
        raise InvalidConfigError("at least one window is required")
    if b is None:
        b = next((a.b for a in exp.arms if not a.is_baseline), 1e-1)
    arms = [Arm(f"PRSL {w}", float(b), w) for w in windows]
    if include_baseline:
        arms.insert(0, Arm("CE", 0.0, windows[0]))
    exp = replace(exp, arms=tuple(arms))
    command = {"kind": "sweep-k", "windows": [[w.j, w.k] for w in windows], "b": b,
               "include_baseline": include_baseline}
    return aggregate(exp, run_experiment(exp), "sweep-k", command)


def run_arms(exp: ExperimentSpec, threshold_rounds: int | None = None):
    """Run the arms exactly as configured."""
    command = {"kind": "arms", "threshold_rounds": threshold_rounds}
    return aggregate(exp, run_experiment(exp), "arms", command, threshold_rounds)


def replay(manifest: dict):
    """Re-run an experiment from its manifest alone."""
    exp = ExperimentSpec.from_dict(manifest["experiment"])
    command = manifest["command"]
    kind = command["kind"]
    if kind == "sweep-b":
        return grid_search_b(exp, command["grid"], RankWindow(*command["window"]))
    if kind == "sweep-k":
        return k_sweep(exp, [RankWindow(*w) for w in command["windows"]], command["b"],
                       command["include_baseline"])
    if kind == "arms":
        return run_arms(exp, command.get("threshold_rounds"))
    raise InvalidConfigError(f"unknown experiment kind {kind!r}")


def tune_b(exp: ExperimentSpec, b_values=B_GRID, seeds=(100, 101, 102), metric: str | None = None):
    """Pick the b whose arm most reduces the below-threshold proportions versus CE.

    Tuning uses its own seeds so the evaluation seeds never inform the choice.
    Returns ``(best_b, margins)`` with ``margins[b]`` the mean over thresholds of
    CE proportion minus PRSL proportion.
    """
    metric = metric or exp.metrics[0]
    result = grid_search_b(replace(exp, seeds=tuple(seeds), save_checkpoints=False), b_values)
    rows = [t for t in result.thresholds if t.metric == metric]
    base = {t.threshold: t.proportion for t in rows if t.arm == "CE"}
    margins = {}
    for arm in result.exp.arms:
        if arm.is_baseline or not any(c.error is None for c in result.cells_for(arm.label)):
            continue
        mine = [base[t.threshold] - t.proportion for t in rows if t.arm == arm.label]
        margins[arm.b] = float(np.mean(mine))
    if not margins:
        raise InvalidConfigError("every tuning arm failed")
    best = max(margins, key=lambda b: (margins[b], b))
    return best, margins
