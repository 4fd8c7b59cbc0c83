"""Experiment matrix: multi-seed training runs, ablations and curve reports.

Each (spec, seed) pair owns one directory::

    <out>/<spec id>/seed<k>/
        spec.json        experiment spec plus resolved hyperparameters
        scenario.ini     scenario config echo (loadable with load_config)
        metrics.csv      one row per epoch
        eval_epoch1.json greedy evaluation after the first epoch
        eval.json        greedy evaluation of the final policy
        model.mrlp       final parameter snapshot

The CSV writers use ``repr``-exact floats so identical specs produce
byte-identical files.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import tensor as T
from .mappo import Hyperparams, MappoModel, Trainer, evaluate
from .sim import FEATURE_MASKS, SCENARIO_TABLE, ScenarioConfig, dump_config, load_config, scenario_config

log = logging.getLogger(__name__)

ALGORITHMS = {
    # name: (critic scope, default encoder)
    "mappo_lsa": ("joint", "lsa"),
    "mappo": ("joint", "flatten"),
    "ippo_lsa": ("local", "lsa"),
    "ippo": ("local", "flatten"),
}
ENCODERS = ("lsa", "flatten")
METRIC_FIELDS = ("epoch", "mean_reward_norm", "policy_loss", "value_loss", "entropy", "clip_fraction",
                 "crash_rate")
CURVE_FIELDS = ("epoch", "spec_id", "mean", "std", "moving_avg")
COMPARISON_FIELDS = ("variant", "spec_id", "n_seeds", "final_reward_mean", "final_reward_std",
                     "crash_rate_mean", "crash_rate_std", "eval_reward_mean", "eval_crash_rate_mean")
SMOOTHING_WINDOW = 10


class UsageError(ValueError):
    """Invalid experiment settings."""


@dataclass
class ExperimentSpec:
    scenario: int = 1
    algo: str = "mappo_lsa"
    encoder: Optional[str] = None
    n_obs: Optional[int] = None
    mask: str = "full"
    seeds: tuple = (0,)
    epochs: int = 200
    out: Path = Path("runs")
    eval_episodes: int = 10
    checkpoint_every: int = 0
    hp_overrides: dict = field(default_factory=dict)
    cfg_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        self.out = Path(self.out)
        self.seeds = tuple(int(s) for s in self.seeds)
        self.validate()

    def validate(self) -> None:
        if self.scenario not in SCENARIO_TABLE:
            raise UsageError(f"unknown scenario {self.scenario}; valid: {sorted(SCENARIO_TABLE)}")
        if self.algo not in ALGORITHMS:
            raise UsageError(f"unknown algorithm {self.algo!r}; valid: {', '.join(ALGORITHMS)}")
        if self.encoder is not None and self.encoder not in ENCODERS:
            raise UsageError(f"unknown encoder {self.encoder!r}; valid: {', '.join(ENCODERS)}")
        if self.mask not in FEATURE_MASKS:
            raise UsageError(f"unknown feature mask {self.mask!r}; valid: {', '.join(FEATURE_MASKS)}")
        if self.n_obs is not None and self.n_obs < 1:
            raise UsageError("--n-obs must be at least 1")
        if not self.seeds:
            raise UsageError("at least one seed is required")
        if self.epochs < 1 or self.eval_episodes < 1:
            raise UsageError("epochs and evaluation episodes must be positive")
        bad = set(self.hp_overrides) - {f.name for f in dataclasses.fields(Hyperparams)}
        if bad:
            raise UsageError(f"unknown hyperparameters: {sorted(bad)}")
        try:
            self.scenario_config().validate()
            self.hyperparams()
        except (ValueError, TypeError) as exc:
            raise UsageError(str(exc)) from None

    @property
    def resolved_encoder(self) -> str:
        return self.encoder or ALGORITHMS[self.algo][1]

    @property
    def resolved_n_obs(self) -> int:
        return self.n_obs or SCENARIO_TABLE[self.scenario][2]

    @property
    def spec_id(self) -> str:
        return f"s{self.scenario}_{self.algo}_{self.resolved_encoder}_n{self.resolved_n_obs}_{self.mask}"

    def scenario_config(self) -> ScenarioConfig:
        overrides = dict(self.cfg_overrides)
        overrides.update(n_obs=self.n_obs, features=self.mask)
        return scenario_config(self.scenario, **overrides)

    def hyperparams(self) -> Hyperparams:
        values = dict(self.hp_overrides)
        values["critic_scope"] = ALGORITHMS[self.algo][0]
        values["encoder"] = self.resolved_encoder
        if "hidden" in values:
            values["hidden"] = tuple(values["hidden"])
        return Hyperparams(**values)

    def run_dir(self, seed: int) -> Path:
        return self.out / self.spec_id / f"seed{seed}"

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["out"] = str(self.out)
        d["seeds"] = list(self.seeds)
        d["spec_id"] = self.spec_id
        return d


@dataclass
class SeedResult:
    seed: int
    run_dir: Path
    curve: np.ndarray
    final_reward: float
    crash_rate: float
    evaluation: dict
    first_evaluation: dict

    @property
    def metrics_csv(self) -> Path:
        return self.run_dir / "metrics.csv"


@dataclass
class RunReport:
    spec_id: str
    results: list

    @property
    def final_rewards(self) -> np.ndarray:
        return np.array([r.final_reward for r in self.results])

    @property
    def crash_rates(self) -> np.ndarray:
        return np.array([r.crash_rate for r in self.results])

    def summary(self) -> dict:
        rewards, crashes = self.final_rewards, self.crash_rates
        return {
            "spec_id": self.spec_id,
            "n_seeds": len(self.results),
            "final_reward_mean": float(rewards.mean()),
            "final_reward_std": float(rewards.std()),
            "crash_rate_mean": float(crashes.mean()),
            "crash_rate_std": float(crashes.std()),
            "eval_reward_mean": float(np.mean([r.evaluation["mean_reward_norm"] for r in self.results])),
            "eval_crash_rate_mean": float(np.mean([r.evaluation["crash_rate"] for r in self.results])),
        }


def final_window(values: Sequence[float]) -> float:
    """Mean over the last decile of epochs (at least one)."""
    values = np.asarray(values, dtype=float)
    return float(values[-max(1, len(values) // 10):].mean())


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def run_seed(spec: ExperimentSpec, seed: int) -> SeedResult:
    cfg, hp = spec.scenario_config(), spec.hyperparams()
    out = spec.run_dir(seed)
    out.mkdir(parents=True, exist_ok=True)
    (out / "spec.json").write_text(json.dumps({**spec.to_json(), "seed": seed,
                                               "hyperparams": dataclasses.asdict(hp)}, indent=2))
    dump_config(cfg, out / "scenario.ini")

    trainer = Trainer(cfg, hp, seed=seed)
    rewards, crashes = [], []
    first_eval = {}
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_FIELDS)
        for epoch in range(1, spec.epochs + 1):
            metrics = trainer.train_epoch()
            writer.writerow([_fmt(metrics[k]) for k in METRIC_FIELDS])
            fh.flush()
            rewards.append(metrics["mean_reward_norm"])
            crashes.append(metrics["crash_rate"])
            if epoch == 1:
                first_eval = evaluate(trainer.model, cfg, spec.eval_episodes)
                (out / "eval_epoch1.json").write_text(json.dumps(first_eval, indent=2))
            if spec.checkpoint_every and epoch % spec.checkpoint_every == 0:
                T.save_snapshot(out / f"model_epoch{epoch}.mrlp", trainer.model.state_dict())
            log.info("%s seed %d epoch %d reward %.3f crash %.3f", spec.spec_id, seed, epoch,
                     metrics["mean_reward_norm"], metrics["crash_rate"])
    T.save_snapshot(out / "model.mrlp", trainer.model.state_dict())
    evaluation = evaluate(trainer.model, cfg, spec.eval_episodes)
    (out / "eval.json").write_text(json.dumps(evaluation, indent=2))
    return SeedResult(seed, out, np.array(rewards), final_window(rewards), final_window(crashes), evaluation,
                      first_eval)


def run(spec: ExperimentSpec) -> RunReport:
    """Train every seed of ``spec`` and collect the per-seed results."""
    return RunReport(spec.spec_id, [run_seed(spec, s) for s in spec.seeds])


def evaluate_run(run_dir: Path, episodes: int = 10, seed: int = 10_000) -> dict:
    """Greedy evaluation of the snapshot stored in one seed directory."""
    run_dir = Path(run_dir)
    meta = json.loads((run_dir / "spec.json").read_text())
    hp = meta["hyperparams"]
    hp["hidden"] = tuple(hp["hidden"])
    cfg = load_config(run_dir / "scenario.ini")
    model = MappoModel(cfg, Hyperparams(**hp), np.random.default_rng(0))
    model.load_state_dict(T.load_snapshot(run_dir / "model.mrlp"))
    return evaluate(model, cfg, episodes, seed)


# ---------------------------------------------------------------------------
# ablations


def ablate_n(base: ExperimentSpec, values: Iterable[int] = (2, 4, 6)) -> list:
    reports = [run(dataclasses.replace(base, n_obs=n)) for n in values]
    write_comparison(base.out / "ablate_n.csv", [f"N={n}" for n in values], reports)
    return reports


def ablate_features(base: ExperimentSpec, masks: Iterable[str] = FEATURE_MASKS) -> list:
    masks = list(masks)
    unknown = [m for m in masks if m not in FEATURE_MASKS]
    if unknown:
        raise UsageError(f"unknown feature masks {unknown}; valid: {', '.join(FEATURE_MASKS)}")
    reports = [run(dataclasses.replace(base, mask=m)) for m in masks]
    write_comparison(base.out / "ablate_features.csv", masks, reports)
    return reports


def write_comparison(path: Path, variants: Sequence[str], reports: Sequence[RunReport]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, COMPARISON_FIELDS, lineterminator="\n")
        writer.writeheader()
        for variant, report in zip(variants, reports):
            row = {k: _fmt(v) for k, v in report.summary().items()}
            writer.writerow({"variant": variant, **row})


# ---------------------------------------------------------------------------
# reports


def _read_curve(metrics_csv: Path) -> np.ndarray:
    with open(metrics_csv, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRIC_FIELDS:
            raise ValueError(f"unexpected header {reader.fieldnames}")
        rows = [(int(r["epoch"]), float(r["mean_reward_norm"])) for r in reader]
    if not rows:
        raise ValueError("no epochs recorded")
    epochs = [e for e, _ in rows]
    if epochs != list(range(1, len(rows) + 1)):
        raise ValueError("epochs are not consecutive from 1")
    curve = np.array([r for _, r in rows])
    if not np.all((curve >= 0.0) & (curve <= 1.0)):
        raise ValueError("reward outside [0, 1]")
    return curve


def _seed_dirs(path: Path) -> list:
    """Seed directories at or below ``path``."""
    if (path / "spec.json").exists() or (path / "metrics.csv").exists() or not path.is_dir():
        return [path]
    found = {p.parent for p in path.rglob("spec.json")} | {p.parent for p in path.rglob("metrics.csv")}
    return sorted(found) or [path]


def moving_average(values: np.ndarray, window: int = SMOOTHING_WINDOW) -> np.ndarray:
    """Trailing mean over up to ``window`` epochs."""
    csum = np.concatenate([[0.0], np.cumsum(values)])
    idx = np.arange(1, len(values) + 1)
    lo = np.maximum(idx - window, 0)
    return (csum[idx] - csum[lo]) / (idx - lo)


def collect_curves(paths: Iterable[Path]) -> dict:
    """spec id -> list of per-seed reward curves; unreadable runs are skipped."""
    curves: dict = {}
    for path in paths:
        path = Path(path)
        if not path.exists():
            log.warning("skipping missing run directory %s", path)
            continue
        for seed_dir in _seed_dirs(path):
            try:
                meta = json.loads((seed_dir / "spec.json").read_text())
                curve = _read_curve(seed_dir / "metrics.csv")
            except (OSError, ValueError, KeyError) as exc:
                log.warning("skipping %s: %s", seed_dir, exc)
                continue
            curves.setdefault(meta["spec_id"], []).append(curve)
    return curves


def report(paths: Iterable[Path], out_csv: Path, smooth: bool = True) -> str:
    """Merge seed curves into mean and std per epoch; returns a text table."""
    curves = collect_curves(paths)
    fields = CURVE_FIELDS if smooth else CURVE_FIELDS[:-1]
    lines = [f"{'spec':<40} {'seeds':>5} {'epochs':>6} {'final mean':>10} {'final std':>9}"]
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    with open(out_csv, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fields)
        for spec_id in sorted(curves):
            runs = curves[spec_id]
            length = min(len(c) for c in runs)
            if any(len(c) != length for c in runs):
                log.warning("%s: truncating seed curves to %d epochs", spec_id, length)
            stack = np.stack([c[:length] for c in runs])
            # offsets from the first seed keep identical copies exact
            offsets = stack - stack[0]
            mean, std = stack[0] + offsets.mean(axis=0), offsets.std(axis=0)
            smoothed = moving_average(mean)
            for e in range(length):
                row = [e + 1, spec_id, repr(float(mean[e])), repr(float(std[e]))]
                if smooth:
                    row.append(repr(float(smoothed[e])))
                writer.writerow(row)
            finals = [final_window(c[:length]) for c in runs]
            lines.append(f"{spec_id:<40} {len(runs):>5} {length:>6} {np.mean(finals):>10.4f} "
                         f"{np.std(finals):>9.4f}")
    if not curves:
        lines.append("(no readable runs)")
    return "\n".join(lines)


def first_last_deciles(curve: Sequence[float]) -> tuple:
    curve = np.asarray(curve, dtype=float)
    d = max(1, len(curve) // 10)
    return float(curve[:d].mean()), float(curve[-d:].mean())

