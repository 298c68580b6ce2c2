"""Training loop, Monte Carlo experiment runner and result rendering."""

from __future__ import annotations

import csv
import io
import logging
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .alignment import GrlConfig, LatentBatch, bregman_divergence, domain_adversarial_terms
from .autodiff import Tensor, backward, mse, no_grad, softmax_cross_entropy
from .autodiff.nn import Adam
from .data import LabeledDataset, SynthSpec, generate_direct_sum_toy, load_domain
from .networks import ArchitectureSpec, ModelBundle, build_bundle, save_checkpoint
from .objective import ABLATION_CONFIGS, LossTerms, LossWeights, ablation_config, canonical_name, compose_loss

log = logging.getLogger(__name__)

TOY = "toy"
OPTIMIZER = "adam"
SATURATION_LOSS = 1e-2


class PlanError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, trial: int | None = None):
        super().__init__(message)
        self.trial = trial


@dataclass(frozen=True)
class DomainSpec:
    dataset: str
    classes: tuple[int, ...] = (0, 1)
    n_max: int | None = None


@dataclass(frozen=True)
class ExperimentPlan:
    configs: tuple[str, ...] = ("Everything",)
    source: DomainSpec = DomainSpec(TOY)
    target: DomainSpec = DomainSpec(TOY)
    latent_dim: int = 3
    epochs: int = 50
    batch_size: int = 128
    learning_rate: float = 1e-3
    mc_trials: int = 5
    seed_base: int = 0
    data_root: str = "data"
    eval_fraction: float = 0.15
    toy_n_per_class: int = 500
    toy_std: float = 0.5
    source_arch: str = "auto"
    target_arch: str = "auto"

    def __post_init__(self):
        if self.mc_trials < 1:
            raise PlanError(f"mc_trials must be >= 1, got {self.mc_trials}")
        if self.batch_size < 2:
            raise PlanError(f"batch_size must be >= 2 for covariance estimation, got {self.batch_size}")
        if self.epochs < 1:
            raise PlanError(f"epochs must be >= 1, got {self.epochs}")
        if not 0 < self.eval_fraction < 1:
            raise PlanError(f"eval_fraction must lie in (0, 1), got {self.eval_fraction}")
        if self.learning_rate <= 0:
            raise PlanError(f"learning_rate must be positive, got {self.learning_rate}")
        if (self.source.dataset == TOY) != (self.target.dataset == TOY):
            raise PlanError("the toy generator supplies both domains; set source and target to 'toy' together")
        for name in self.configs:
            canonical_name(name)


_INT_KEYS = {"latent_dim", "epochs", "batch_size", "mc_trials", "seed", "toy_n_per_class"}
_FLOAT_KEYS = {"learning_rate", "eval_fraction", "toy_std"}
_STR_KEYS = {"data_root", "source_arch", "target_arch"}
_DOMAIN_KEYS = {f"{d}{s}" for d in ("source", "target") for s in ("", "_classes", "_n_max")}


def _parse_configs(value: str) -> tuple[str, ...]:
    if value.strip().lower() == "all":
        return tuple(ABLATION_CONFIGS)
    names = [v.strip() for v in value.split(";") if v.strip()]
    return tuple(canonical_name(n) for n in names)


def parse_plan(text: str) -> ExperimentPlan:
    """Read ``key = value`` lines; ``#`` starts a comment.

    ``config`` takes one name, several names separated by ``;``, or ``all``.
    """
    kwargs: dict = {}
    domain = {"source": {}, "target": {}}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise PlanError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.lower()
        try:
            if key in ("config", "configs"):
                kwargs["configs"] = _parse_configs(value)
            elif key in _INT_KEYS:
                kwargs["seed_base" if key == "seed" else key] = int(value)
            elif key in _FLOAT_KEYS:
                kwargs[key] = float(value)
            elif key in _STR_KEYS:
                kwargs[key] = value
            elif key in _DOMAIN_KEYS:
                side, _, attr = key.partition("_")
                if not attr:
                    domain[side]["dataset"] = value
                elif attr == "classes":
                    domain[side]["classes"] = tuple(int(c) for c in re.split(r"[,\s]+", value) if c)
                else:
                    domain[side]["n_max"] = None if value.lower() in ("none", "all") else int(value)
            else:
                raise PlanError(f"line {lineno}: unknown key {key!r}")
        except ValueError as e:
            if isinstance(e, PlanError):
                raise
            raise PlanError(f"line {lineno}: bad value for {key!r}: {e}") from None
        except KeyError as e:
            raise PlanError(f"line {lineno}: {e}") from None
    for side in ("source", "target"):
        if domain[side]:
            kwargs[side] = DomainSpec(**{"dataset": TOY, **domain[side]})
    try:
        return ExperimentPlan(**kwargs)
    except KeyError as e:
        raise PlanError(str(e)) from None


def load_plan(path) -> ExperimentPlan:
    return parse_plan(Path(path).read_text())


# ---------------------------------------------------------------------------
# data preparation


@dataclass
class TrialData:
    source_train: LabeledDataset
    source_eval: LabeledDataset
    target_train: LabeledDataset
    target_eval: LabeledDataset
    num_classes: int


def _split(ds: LabeledDataset, frac: float, rng: np.random.Generator) -> tuple[LabeledDataset, LabeledDataset]:
    perm = rng.permutation(len(ds))
    n_eval = max(1, int(round(frac * len(ds))))
    if len(ds) - n_eval < 2:
        raise PlanError(f"{ds.domain} dataset too small to split ({len(ds)} samples)")
    return ds.subset(np.sort(perm[n_eval:])), ds.subset(np.sort(perm[:n_eval]))


def _pad(ds: LabeledDataset, width: int) -> LabeledDataset:
    if ds.samples.shape[1] == width:
        return ds
    x = np.zeros((len(ds), width), dtype=ds.samples.dtype)
    x[:, : ds.samples.shape[1]] = ds.samples
    return LabeledDataset(x, ds.labels, dict(ds.class_map), ds.domain)


def prepare_data(plan: ExperimentPlan, trial_seed: int) -> TrialData:
    ss = np.random.SeedSequence(trial_seed)
    data_seed, split_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    if plan.source.dataset == TOY:
        src, tgt = generate_direct_sum_toy(SynthSpec(plan.toy_n_per_class, std=plan.toy_std, seed=data_seed))
    else:
        src = load_domain(plan.data_root, plan.source.dataset, plan.source.classes, plan.source.n_max,
                          data_seed, "source")
        tgt = load_domain(plan.data_root, plan.target.dataset, plan.target.classes, plan.target.n_max,
                          data_seed + 1, "target")
    if src.num_classes != tgt.num_classes:
        raise PlanError(f"source has {src.num_classes} classes but target has {tgt.num_classes}")
    rng = np.random.default_rng(split_seed)
    s_tr, s_ev = _split(src, plan.eval_fraction, rng)
    t_tr, t_ev = _split(tgt, plan.eval_fraction, rng)
    return TrialData(s_tr, s_ev, t_tr, t_ev, src.num_classes)


def _arch(kind: str, ds: LabeledDataset, latent_dim: int) -> ArchitectureSpec:
    shape = ds.sample_shape
    if kind == "auto":
        kind = "conv28" if shape == (1, 28, 28) else "mlp"
    return ArchitectureSpec(kind, shape, latent_dim)


def _harmonize(plan: ExperimentPlan, data: TrialData, shared: bool) -> tuple[TrialData, ArchitectureSpec, ArchitectureSpec]:
    """Zero-pad vector inputs to a common width when one encoder serves both domains."""
    s_shape, t_shape = data.source_train.sample_shape, data.target_train.sample_shape
    if shared and s_shape != t_shape:
        if len(s_shape) != 1 or len(t_shape) != 1:
            raise PlanError(f"shared embedding needs equal input shapes, got {s_shape} and {t_shape}")
        width = max(s_shape[0], t_shape[0])
        data = TrialData(_pad(data.source_train, width), _pad(data.source_eval, width),
                         _pad(data.target_train, width), _pad(data.target_eval, width), data.num_classes)
    src_arch = _arch(plan.source_arch, data.source_train, plan.latent_dim)
    tgt_arch = _arch(plan.target_arch, data.target_train, plan.latent_dim)
    return data, src_arch, tgt_arch


# ---------------------------------------------------------------------------
# training


class _IndexStream:
    """Endless minibatch indices; reshuffles each time the permutation is used up."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng = n, rng
        self.perm = rng.permutation(n)
        self.pos = 0

    def take(self, k: int) -> np.ndarray:
        out = []
        while k > 0:
            if self.pos == self.n:
                self.perm = self.rng.permutation(self.n)
                self.pos = 0
            step = min(k, self.n - self.pos)
            out.append(self.perm[self.pos:self.pos + step])
            self.pos += step
            k -= step
        return np.concatenate(out)


def compute_terms(bundle: ModelBundle, w: LossWeights, xs: np.ndarray, ys: np.ndarray,
                  xt: np.ndarray) -> LossTerms:
    """Forward both domains and evaluate every loss component with a nonzero weight."""
    x_s, x_t = Tensor(xs), Tensor(xt)
    z_s = bundle.f_source(x_s)
    z_t = bundle.f_target(x_t)
    terms = LossTerms()
    terms.class_ce = softmax_cross_entropy(bundle.classifier(z_s), ys)
    if w.lambda_ae_s > 0:
        terms.ae_s = mse(bundle.d_source(z_s), x_s)
    if w.lambda_ae_t > 0:
        terms.ae_t = mse(bundle.d_target(z_t), x_t)
    if w.alpha_da > 0:
        terms.da_s, terms.da_t = domain_adversarial_terms(z_s, z_t, bundle.domain_classifier,
                                                          GrlConfig(w.alpha_da))
    if w.lambda_breg > 0:
        terms.breg = bregman_divergence(LatentBatch(z_s, "source"), LatentBatch(z_t, "target"))
    return terms


def _first_nonfinite(terms: LossTerms) -> str | None:
    for name, v in terms.values().items():
        if not math.isfinite(v):
            return name
    return None


def train(plan: ExperimentPlan, trial_seed: int, config: str | None = None,
          data: TrialData | None = None) -> tuple[ModelBundle, list[dict[str, float]]]:
    """Train one model bundle; returns it with per-epoch mean loss terms."""
    name = canonical_name(config or plan.configs[0])
    w = ablation_config(name)
    shared = not w.separate_embedding
    data = data if data is not None else prepare_data(plan, trial_seed)
    data, s_arch, t_arch = _harmonize(plan, data, shared)

    ss = np.random.SeedSequence([trial_seed, 1])
    init_seed, shuffle_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    bundle = build_bundle(s_arch, t_arch, data.num_classes, shared_embedding=shared, seed=init_seed)
    bundle.train()
    opt = Adam(bundle.parameters(), lr=plan.learning_rate)
    params = opt.params

    src, tgt = data.source_train, data.target_train
    batch = min(plan.batch_size, len(src), len(tgt))
    steps = max(1, max(len(src), len(tgt)) // batch)
    shuffle = np.random.default_rng(shuffle_seed)
    s_stream, t_stream = _IndexStream(len(src), shuffle), _IndexStream(len(tgt), shuffle)

    history: list[dict[str, float]] = []
    warned = False
    for epoch in range(plan.epochs):
        sums: dict[str, float] = {}
        for _ in range(steps):
            i_s, i_t = s_stream.take(batch), t_stream.take(batch)
            terms = compute_terms(bundle, w, src.samples[i_s], src.labels[i_s], tgt.samples[i_t])
            bad = _first_nonfinite(terms)
            if bad is not None:
                raise TrainingAborted(
                    f"{name}: non-finite {bad} loss at epoch {epoch}; exploding or vanishing gradients -- "
                    f"try alpha_da <= 0.1, batch normalization, or a smaller learning rate")
            loss = compose_loss(terms, w)
            opt.zero_grad()
            backward(loss, inputs=params)
            opt.step()
            for k, v in terms.values().items():
                sums[k] = sums.get(k, 0.0) + v
            sums["total"] = sums.get("total", 0.0) + loss.item()
        record = {k: v / steps for k, v in sums.items()}
        history.append(record)
        if not warned and w.alpha_da > 0 and record["da_s"] + record["da_t"] < SATURATION_LOSS:
            log.warning("%s: domain classifier saturated at epoch %d; reversed gradients are vanishing", name, epoch)
            warned = True
    bundle.eval()
    return bundle, history


# ---------------------------------------------------------------------------
# evaluation


def corrected_accuracy(pred, truth, num_classes: int) -> float:
    """Accuracy, folded to max(acc, 1 - acc) for two-class problems where labels may be swapped."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction/label length mismatch: {pred.shape} vs {truth.shape}")
    acc = float(np.mean(pred == truth))
    if num_classes == 2:
        return max(acc, 1.0 - acc)
    return acc


def predict(bundle: ModelBundle, encoder, x: np.ndarray, chunk: int = 512) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(x), chunk):
            out.append(bundle.classifier(encoder(Tensor(x[i:i + chunk]))).data.argmax(axis=1))
    return np.concatenate(out)


def confusion_matrix(pred, truth, k: int) -> np.ndarray:
    m = np.zeros((k, k), dtype=np.int64)
    np.add.at(m, (np.asarray(truth), np.asarray(pred)), 1)
    return m


def top_k_prediction_share(conf: np.ndarray, k: int = 3) -> float:
    """Fraction of predictions that land in the k most-predicted classes."""
    cols = np.sort(conf.sum(axis=0))[::-1]
    return float(cols[:k].sum() / cols.sum())


@dataclass
class RunResult:
    config: str
    latent_dim: int
    source_acc: list[float] = field(default_factory=list)
    target_acc: list[float] = field(default_factory=list)
    confusions: list[np.ndarray] = field(default_factory=list)
    plan: ExperimentPlan | None = None

    @property
    def trials(self) -> int:
        return len(self.source_acc)

    @property
    def src_mean(self) -> float:
        return float(np.mean(self.source_acc))

    @property
    def src_std(self) -> float:
        return float(np.std(self.source_acc))

    @property
    def tgt_mean(self) -> float:
        return float(np.mean(self.target_acc))

    @property
    def tgt_std(self) -> float:
        return float(np.std(self.target_acc))


def _slug(name: str) -> str:
    return re.sub(r"[^a-z0-9]+", "_", name.lower()).strip("_")


def run_experiment(plan: ExperimentPlan, config: str | None = None, out_dir=None) -> RunResult:
    """Run ``plan.mc_trials`` seeded trainings of one config and aggregate accuracies."""
    name = canonical_name(config or plan.configs[0])
    result = RunResult(name, plan.latent_dim, plan=plan)
    for trial in range(plan.mc_trials):
        seed = plan.seed_base + trial
        data = prepare_data(plan, seed)
        try:
            bundle, _ = train(plan, seed, name, data)
        except TrainingAborted as e:
            raise TrainingAborted(f"trial {trial}: {e}", trial=trial) from e
        shared = not ablation_config(name).separate_embedding
        data, _, _ = _harmonize(plan, data, shared)
        k = data.num_classes
        src_pred = predict(bundle, bundle.f_source, data.source_eval.samples)
        tgt_pred = predict(bundle, bundle.f_target, data.target_eval.samples)
        result.source_acc.append(float(np.mean(src_pred == data.source_eval.labels)))
        result.target_acc.append(corrected_accuracy(tgt_pred, data.target_eval.labels, k))
        result.confusions.append(confusion_matrix(tgt_pred, data.target_eval.labels, k))
        log.info("%s trial %d: source %.3f target %.3f", name, trial, result.source_acc[-1], result.target_acc[-1])
        if out_dir is not None:
            ckpt = Path(out_dir) / "checkpoints"
            ckpt.mkdir(parents=True, exist_ok=True)
            save_checkpoint(bundle, ckpt / f"{_slug(name)}_trial{trial}.ckpt")
    return result


def run_plan(plan: ExperimentPlan, out_dir=None) -> list[RunResult]:
    return [run_experiment(plan, c, out_dir) for c in plan.configs]


# ---------------------------------------------------------------------------
# output

CSV_COLUMNS = ["config", "latent_dim", "src_mean", "src_std", "tgt_mean", "tgt_std", "trials",
               "source_acc", "target_acc", "optimizer", "learning_rate", "epochs", "batch_size", "seed_base"]


def format_pct(mean: float, std: float) -> str:
    return f"{100 * mean:.1f}%±{100 * std:.1f}%"


def emit_results(results: list[RunResult], fmt: str = "csv") -> str:
    if not results:
        raise ValueError("no results to emit")
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in results:
            p = r.plan or ExperimentPlan()
            writer.writerow([r.config, r.latent_dim, repr(r.src_mean), repr(r.src_std), repr(r.tgt_mean),
                             repr(r.tgt_std), r.trials, format_pct(r.src_mean, r.src_std),
                             format_pct(r.tgt_mean, r.tgt_std), OPTIMIZER, repr(p.learning_rate), p.epochs,
                             p.batch_size, p.seed_base])
        return buf.getvalue()
    if fmt == "table":
        width = max(len("Experiment"), *(len(r.config) for r in results))
        lines = [f"{'Experiment':<{width}}  {'Source':>14}  {'Target':>14}"]
        for r in results:
            lines.append(f"{r.config:<{width}}  {format_pct(r.src_mean, r.src_std):>14}  "
                         f"{format_pct(r.tgt_mean, r.tgt_std):>14}")
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown format {fmt!r}; expected 'csv' or 'table'")


def read_results_csv(text: str) -> list[dict]:
    rows = []
    for row in csv.DictReader(io.StringIO(text)):
        for key in ("src_mean", "src_std", "tgt_mean", "tgt_std", "learning_rate"):
            row[key] = float(row[key])
        for key in ("latent_dim", "trials", "epochs", "batch_size", "seed_base"):
            row[key] = int(row[key])
        rows.append(row)
    return rows


def emit_trials(results: list[RunResult]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["config", "trial", "seed", "source_acc", "target_acc", "top3_share"])
    for r in results:
        base = r.plan.seed_base if r.plan else 0
        for i, (s, t, c) in enumerate(zip(r.source_acc, r.target_acc, r.confusions)):
            writer.writerow([r.config, i, base + i, repr(s), repr(t), repr(top_k_prediction_share(c))])
    return buf.getvalue()


def write_outputs(results: list[RunResult], out_dir) -> None:
    import json

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.csv").write_text(emit_results(results, "csv"))
    (out / "results.txt").write_text(emit_results(results, "table"))
    (out / "trials.csv").write_text(emit_trials(results))
    confusions = {r.config: [c.tolist() for c in r.confusions] for r in results}
    (out / "confusion.json").write_text(json.dumps(confusions, indent=1) + "\n")


def with_overrides(plan: ExperimentPlan, seed=None, latent_dim=None, config=None) -> ExperimentPlan:
    changes = {}
    if seed is not None:
        changes["seed_base"] = seed
    if latent_dim is not None:
        changes["latent_dim"] = latent_dim
    if config is not None:
        changes["configs"] = _parse_configs(config)
    return replace(plan, **changes)
