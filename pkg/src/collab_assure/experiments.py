"""Empirical checks of the random-labelling checks and the M1 / M2 / M~2 comparison driver."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from . import rng as rngs
from .data import LabeledDataset, RandomLabeler, SplitPlan, gen_synthetic_binary, relabel_random, split
from .protocol.session import SessionConfig, run_session

MODEL_M1 = "M1"
MODEL_M2_PLAIN = "M2-plain"
MODEL_M2_PRIVATE = "M~2"

# small binary net used by the random-label checks; the features are irrelevant there
RANDOM_LABEL_TRAIN = nn.TrainConfig(epochs=20, batch_size=32, lr=0.1, l2=0.01)


@dataclass(frozen=True)
class Hyperparams:
    hidden: tuple = (20,)
    epochs: int = 50
    batch_size: int = 256
    lr: float = 0.1
    l2: float = 0.01
    compat_nonneg: bool = False
    transport: str = "inproc"

    def spec(self, d_in: int, n_classes: int) -> nn.LayerSpec:
        return nn.LayerSpec((d_in, *self.hidden, n_classes))

    @property
    def train_config(self) -> nn.TrainConfig:
        return nn.TrainConfig(self.epochs, self.batch_size, self.lr, self.l2)

    def session_config(self, spec, epsilon: float, seed: int) -> SessionConfig:
        return SessionConfig(spec=spec, epsilon_total=epsilon, epochs=self.epochs, batch_size=self.batch_size,
                             learning_rate=self.lr, l2=self.l2, seed=seed, compat_nonneg=self.compat_nonneg,
                             verdict_detail="with-accuracy")


@dataclass
class ReportRow:
    dataset: str
    epsilon: float | None
    model: str
    seed: int
    accuracy: float
    wall_time: float
    verdict: bool | None = None

    def to_json(self) -> dict:
        d = asdict(self)
        # JSON has no infinity
        if d["epsilon"] is not None and math.isinf(d["epsilon"]):
            d["epsilon"] = "inf"
        return d


@dataclass
class ExperimentReport:
    rows: list = field(default_factory=list)

    def add(self, row: ReportRow):
        if not 0.0 <= row.accuracy <= 1.0:
            raise ValueError(f"accuracy {row.accuracy} outside [0, 1]")
        self.rows.append(row)

    def select(self, model: str, epsilon=None) -> list:
        return [r for r in self.rows if r.model == model and (epsilon is None or r.epsilon == epsilon)]

    def mean_accuracy(self, model: str, epsilon=None) -> float:
        rows = self.select(model, epsilon)
        if not rows:
            raise KeyError(f"no rows for {model} at epsilon={epsilon}")
        return float(np.mean([r.accuracy for r in rows]))

    def aggregates(self) -> list[dict]:
        keys = sorted({(r.dataset, r.model, r.epsilon) for r in self.rows},
                      key=lambda k: (k[0], k[1], -1.0 if k[2] is None else k[2]))
        out = []
        for ds, model, eps in keys:
            rows = [r for r in self.rows if (r.dataset, r.model, r.epsilon) == (ds, model, eps)]
            out.append({"dataset": ds, "model": model, "epsilon": "inf" if eps == math.inf else eps,
                        "runs": len(rows), "mean_accuracy": float(np.mean([r.accuracy for r in rows])),
                        "mean_wall_time": float(np.mean([r.wall_time for r in rows]))})
        return out

    def to_jsonl(self, include_times: bool = True) -> str:
        lines = []
        for row in self.rows:
            d = row.to_json()
            if not include_times:
                d.pop("wall_time")
            lines.append(json.dumps(d, sort_keys=True))
        for agg in self.aggregates():
            if not include_times:
                agg.pop("mean_wall_time")
            lines.append(json.dumps({"aggregate": agg}, sort_keys=True))
        return "\n".join(lines) + "\n"

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_jsonl())


def _timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t0


def run_value_assessment(dataset: LabeledDataset, plan: SplitPlan, eps_list, hyperparams: Hyperparams,
                         repetitions: int = 10, seed: int = 0, report: ExperimentReport | None = None,
                         on_row=None) -> ExperimentReport:
    """For each repetition: train M1 on D1, M2 on D1+D2 in the clear, then M~2 through the protocol per epsilon.

    Repetition ``i`` uses seed ``seed + i`` for the split, initialisation, shuffling and the session.
    Rows are appended to ``report`` as they are produced, so a caller that catches a session error
    still holds everything finished before it.
    """
    report = report if report is not None else ExperimentReport()
    emit = on_row or (lambda row: None)
    spec = hyperparams.spec(dataset.features.shape[1], dataset.n_classes)
    tc = hyperparams.train_config
    for rep in range(repetitions):
        s = seed + rep
        d1, d2, hold = split(dataset, SplitPlan(plan.holdout_fraction, plan.d1_fraction, plan.d2_fraction,
                                                plan.d1_counts, plan.holdout_counts, s))
        m1, t1 = _timed(nn.train_plaintext, *d1.xy, spec, tc, s)
        x12 = np.vstack([d1.features, d2.features])
        y12 = np.r_[d1.labels, d2.labels]
        m2, t2 = _timed(nn.train_plaintext, x12, y12, spec, tc, s)
        acc1 = nn.evaluate(m1, *hold.xy)
        acc2 = nn.evaluate(m2, *hold.xy)
        for eps in eps_list:
            for row in (ReportRow(dataset.name, eps, MODEL_M1, s, acc1, t1),
                        ReportRow(dataset.name, eps, MODEL_M2_PLAIN, s, acc2, t2)):
                report.add(row)
                emit(row)
            cfg = hyperparams.session_config(spec, eps, s)
            res, tp = _timed(run_session, cfg, d1.xy, d2.xy, hold.xy, hyperparams.transport, m1)
            row = ReportRow(dataset.name, eps, MODEL_M2_PRIVATE, s, res.p1.acc_m2, tp, res.p1.verdict.improved)
            report.add(row)
            emit(row)
    return report


# --- the skewed binary scenario -------------------------------------------

SKEW_ROWS = 10_000
SKEW_D1 = (96, 864)
SKEW_HOLD = (200, 200)
SKEW_HYPERPARAMS = Hyperparams(hidden=(4,), epochs=100, batch_size=128, lr=0.2)


def skewed_scenario(seed: int, hyperparams: Hyperparams = SKEW_HYPERPARAMS):
    """Plaintext M1 vs M2 on synthetic data whose D1 holds 96 class-0 and 864 class-1 rows.

    Returns ``(acc_m1, acc_m2)`` on a balanced 400-row holdout.
    """
    data = gen_synthetic_binary(SKEW_ROWS, 4, 0.5, seed)
    plan = SplitPlan(d2_fraction=None, d1_counts=SKEW_D1, holdout_counts=SKEW_HOLD, seed=seed)
    d1, d2, hold = split(data, plan)
    spec = hyperparams.spec(4, 2)
    tc = hyperparams.train_config
    m1 = nn.train_plaintext(*d1.xy, spec, tc, seed)
    m2 = nn.train_plaintext(np.vstack([d1.features, d2.features]), np.r_[d1.labels, d2.labels], spec, tc, seed)
    return nn.evaluate(m1, *hold.xy), nn.evaluate(m2, *hold.xy)


# --- random-labelling checks ------------------------------------------------

def _holdout_with_fraction(n: int, q: float, d: int, rng) -> LabeledDataset:
    n1 = int(round(q * n))
    labels = rng.permutation(np.r_[np.zeros(n - n1, dtype=int), np.ones(n1, dtype=int)])
    return LabeledDataset("holdout", rng.normal(size=(n, d)), labels, 2)


def random_label_accuracy(p: float, q: float, seed: int, dataset_size: int = 400, holdout_size: int = 400,
                          d_features: int = 4) -> float:
    """Train on features labelled Bernoulli(p) regardless of content; score on a holdout with a fraction q of ones."""
    train = gen_synthetic_binary(dataset_size, d_features, 0.5, seed)
    train = relabel_random(train, RandomLabeler(p, seed))
    hold = _holdout_with_fraction(holdout_size, q, d_features, rngs.stream(seed, rngs.DATA, 1))
    spec = nn.LayerSpec((d_features, 4, 2))
    model = nn.train_plaintext(*train.xy, spec, RANDOM_LABEL_TRAIN, seed)
    return nn.evaluate(model, *hold.xy)


@dataclass
class RandomLabelReport:
    mean_accuracy: dict  # p -> mean accuracy over seeds
    per_seed: dict

    def within(self, lo: float, hi: float) -> bool:
        return all(lo <= a <= hi for a in self.mean_accuracy.values())


def check_balanced_holdout(n_seeds: int = 10, dataset_size: int = 400, probs=(0.2, 0.5, 0.8), q: float = 0.5) -> RandomLabelReport:
    """Mean holdout accuracy of randomly-labelled models, per labelling probability.

    With ``q = 0.5`` (balanced holdout) every mean should sit near 1/2.
    """
    per_seed = {p: [random_label_accuracy(p, q, s, dataset_size) for s in range(n_seeds)] for p in probs}
    return RandomLabelReport({p: float(np.mean(v)) for p, v in per_seed.items()}, per_seed)


def check_uniform_holdout(trials: int = 200, seed: int = 0, dataset_size: int = 200) -> float:
    """Grand mean accuracy when the holdout's share of ones is uniform on [0, 1].

    q is stratified (one draw per equal-width bin) to cut Monte Carlo variance;
    the labelling probability is drawn uniformly per trial.
    """
    rng = rngs.stream(seed, rngs.LABELS, 1)
    qs = (np.arange(trials) + rng.random(trials)) / trials
    ps = rng.random(trials)
    accs = [random_label_accuracy(float(p), float(q), seed * trials + i, dataset_size, holdout_size=200)
            for i, (p, q) in enumerate(zip(ps, qs))]
    return float(np.mean(accs))


def check_random_d2(n_seeds: int = 10, d1_rows: int = 100, d2_rows: int = 400, hold_rows: int = 400,
                    hyperparams: Hyperparams = Hyperparams(hidden=(4,), epochs=100, batch_size=32)):
    """Adding a randomly-labelled D2 to a well-labelled D1 should not help.

    Returns ``(mean acc M1, mean acc M2)`` over seeds on balanced holdouts.
    """
    a1, a2 = [], []
    spec = hyperparams.spec(4, 2)
    tc = hyperparams.train_config
    for s in range(n_seeds):
        data = gen_synthetic_binary(d1_rows + d2_rows + hold_rows, 4, 0.5, s)
        plan = SplitPlan(d2_fraction=None, d1_counts=(d1_rows // 2, d1_rows - d1_rows // 2),
                         holdout_counts=(hold_rows // 2, hold_rows - hold_rows // 2), seed=s)
        d1, d2, hold = split(data, plan)
        d2 = relabel_random(d2, RandomLabeler(0.5, s))
        m1 = nn.train_plaintext(*d1.xy, spec, tc, s)
        m2 = nn.train_plaintext(np.vstack([d1.features, d2.features]), np.r_[d1.labels, d2.labels], spec, tc, s)
        a1.append(nn.evaluate(m1, *hold.xy))
        a2.append(nn.evaluate(m2, *hold.xy))
    return float(np.mean(a1)), float(np.mean(a2))
