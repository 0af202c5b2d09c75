"""Training loop, evaluation, ablation grid, routing sweep and report files."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import encoders, taskbench, vocab
from .checkpoint import array_digest, load_checkpoint, save_checkpoint
from .config import RunConfig
from .decoder import Decoder, DecoderConfig, generate, pretrain_decoder
from .errors import ConfigError, FrozenDriftError, TrainingFailure, WeeError
from .model import VARIANTS, Batch, WEEModel, make_batch
from .numerics import DiffArray, GradReport, grad_check, no_grad
from .objective import LossBreakdown
from .optim import AdamW, ParamGroup
from .taskbench import TASKS

METRICS = {  # task -> metrics reported, the first one enters the aggregate score
    "ER": ("macro_f1",),
    "CTC": ("accuracy", "macro_f1"),
    "CMD": ("p_at_5",),
    "DS": ("rouge_l",),
}
HEADLINE = {task: metrics[0] for task, metrics in METRICS.items()}
LOG_FIELDS = ("step", "next_token", "indep_ent", "dep_ent", "dep_div", "wee", "total",
              "lambda", "diversity_weight", "usage_entropy")
SWEEP_FIELDS = ("lambda", "diversity", "seed", "usage_entropy", "er_f1", "ctc_acc", "cmd_p5", "ds_rougeL")


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _seed_seq(*parts) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(p) & 0xFFFFFFFFFFFFFFFF for p in parts])


# -- data ---------------------------------------------------------------------------


@dataclass
class TaskData:
    dataset: taskbench.Dataset
    base: np.ndarray  # (N, T, d_base)
    experts: np.ndarray  # (N, M, T, d_w), or zero-padded descriptors when experts train

    def __len__(self) -> int:
        return len(self.dataset)


_FEATURE_CACHE: dict[tuple, dict[str, TaskData]] = {}


def encoder_pool(cfg: RunConfig) -> encoders.EncoderPool:
    return encoders.default_pool(cfg.d_base, cfg.d_w, cfg.frame_len, cfg.hop, cfg.encoder_seed)


def _descriptor_width(pool: encoders.EncoderPool) -> int:
    return max(e.descriptor_dim for e in pool.experts)


def _expert_inputs(pool: encoders.EncoderPool, audio: np.ndarray, sr: int, raw: bool) -> np.ndarray:
    if not raw:
        return np.stack([encoders.encode_batch(e, audio, sr) for e in pool.experts], axis=1)
    width = _descriptor_width(pool)
    out = []
    for e in pool.experts:
        desc = np.stack([encoders.descriptor(e, encoders.frame_signal(x, e.frame_len, e.hop), sr) for x in audio])
        out.append(np.pad(desc, ((0, 0), (0, 0), (0, width - desc.shape[-1]))))
    return np.stack(out, axis=1)


def prepare_split(cfg: RunConfig, seed: int, split: str, n: int) -> dict[str, TaskData]:
    """Generate and encode one split of every task.  Cached in-process."""
    key = (seed, split, n, cfg.sample_rate_hz, cfg.duration_s, cfg.frame_len, cfg.hop,
           cfg.encoder_seed, cfg.d_base, cfg.d_w, cfg.train_weak_encoders)
    if key in _FEATURE_CACHE:
        return _FEATURE_CACHE[key]
    pool = encoder_pool(cfg)
    params = {"sample_rate_hz": cfg.sample_rate_hz, "duration_s": cfg.duration_s}
    out = {}
    for task in TASKS:
        ds = taskbench.gen_task(task, n, seed, split, params)
        audio = ds.audio_matrix()
        base = encoders.encode_batch(pool.base, audio, cfg.sample_rate_hz)
        experts = _expert_inputs(pool, audio, cfg.sample_rate_hz, cfg.train_weak_encoders)
        out[task] = TaskData(ds, base, experts)
    _FEATURE_CACHE[key] = out
    return out


def prepare_data(cfg: RunConfig, seed: int) -> dict[str, dict[str, TaskData]]:
    return {"train": prepare_split(cfg, seed, "train", cfg.n_train),
            "dev": prepare_split(cfg, seed, "dev", cfg.n_dev),
            "test": prepare_split(cfg, seed, "test", cfg.n_test)}


def batch_from(data: dict[str, TaskData], picks: list[tuple[str, int]]) -> Batch:
    examples = [data[t].dataset.examples[i] for t, i in picks]
    base = np.stack([data[t].base[i] for t, i in picks])
    experts = np.stack([data[t].experts[i] for t, i in picks])
    return make_batch([t for t, _ in picks], base, experts, examples)


class TaskSchedule:
    """Interleaves tasks by smooth weighted round-robin; items drawn uniformly."""

    def __init__(self, weights: dict[str, float], sizes: dict[str, int], rng: np.random.Generator):
        self.tasks = [t for t in TASKS if weights.get(t, 0) > 0]
        self.weights = np.array([float(weights[t]) for t in self.tasks])
        self.current = np.zeros(len(self.tasks))
        self.sizes = sizes
        self.rng = rng

    def next_task(self) -> str:
        self.current += self.weights
        i = int(np.argmax(self.current))
        self.current[i] -= self.weights.sum()
        return self.tasks[i]

    def draw(self, batch_size: int) -> list[tuple[str, int]]:
        picks = []
        for _ in range(batch_size):
            task = self.next_task()
            picks.append((task, int(self.rng.integers(self.sizes[task]))))
        return picks


# -- decoder and model construction -----------------------------------------------------


_DECODER_CACHE: dict[tuple, dict[str, np.ndarray]] = {}


def pretrained_decoder_arrays(cfg: RunConfig, log=None) -> dict[str, np.ndarray]:
    """Frozen copy-task decoder weights: from the configured checkpoint or pretrained here."""
    if cfg.decoder_checkpoint and Path(cfg.decoder_checkpoint).exists():
        dec = Decoder.load(cfg.decoder_checkpoint)
        if dec.config != cfg.decoder_config():
            raise ConfigError("decoder checkpoint does not match the configured decoder")
        return dec.state()[0]
    key = (cfg.decoder_config(), cfg.pretrain_seed, cfg.pretrain_steps)
    if key not in _DECODER_CACHE:
        res = pretrain_decoder(cfg.decoder_config(), steps=cfg.pretrain_steps, seed=cfg.pretrain_seed, log=log)
        _DECODER_CACHE[key] = res.decoder.state()[0]
        if cfg.decoder_checkpoint:
            res.decoder.save(cfg.decoder_checkpoint)
    return _DECODER_CACHE[key]


def frozen_decoder(cfg: RunConfig, arrays: dict[str, np.ndarray]) -> Decoder:
    dec = Decoder(cfg.decoder_config())
    dec.load_arrays(arrays)
    dec.freeze()
    return dec


def build_model(cfg: RunConfig, decoder_arrays: dict[str, np.ndarray], seed: int) -> WEEModel:
    dec = frozen_decoder(cfg, decoder_arrays)
    dec.attach_lora(np.random.default_rng(_seed_seq(seed, 23)))
    pool = encoder_pool(cfg)
    projections = None
    if cfg.train_weak_encoders:
        width = _descriptor_width(pool)
        projections = [np.pad(e.projection(), ((0, width - e.descriptor_dim), (0, 0))) for e in pool.experts]
    prior = None if cfg.prior_expert is None else pool.index(cfg.prior_expert)
    return WEEModel(cfg.variant, dec, cfg.d_base, cfg.d_w, cfg.num_experts, cfg.stack_factor, cfg.d_adapter,
                    cfg.routing_mode, weak_only_index=pool.index(cfg.weak_only_expert), prior_index=prior,
                    prior_value=cfg.prior_value, seed=seed, expert_projections=projections)


def expected_census(cfg: RunConfig) -> set[str]:
    """Names that may be trained: the routers the variant uses, adapter, projection, LoRA."""
    names = {"adapter.W", "adapter.b", "projection.W", "projection.b"}
    if cfg.variant in ("indep_only", "full_wee"):
        names.add("w_indep")
    if cfg.variant in ("dep_only", "full_wee"):
        names.add("W_dep")
    for i in range(cfg.decoder_config().num_blocks):
        for proj in ("q", "v"):
            names |= {f"lora.block{i}.attn.{proj}.A", f"lora.block{i}.attn.{proj}.B"}
    if cfg.train_weak_encoders:
        names |= {f"encoder.expert{k}.projection" for k in range(cfg.num_experts)}
    return names


def frozen_state(cfg: RunConfig, model: WEEModel) -> dict[str, np.ndarray]:
    arrays = dict(model.frozen_arrays())
    pool = encoder_pool(cfg).frozen_arrays()
    if cfg.train_weak_encoders:
        pool = {"encoder.base.projection": pool["encoder.base.projection"]}
    arrays.update(pool)
    return arrays


def model_arrays(cfg: RunConfig, model: WEEModel) -> tuple[dict[str, np.ndarray], dict[str, bool]]:
    arrays = {k: v.values for k, v in model.trainable().items()}
    flags = {k: True for k in arrays}
    for k, v in frozen_state(cfg, model).items():
        arrays[k] = v
        flags[k] = False
    return arrays, flags


def save_model(path, cfg: RunConfig, model: WEEModel, seed: int) -> None:
    arrays, flags = model_arrays(cfg, model)
    meta = {"kind": "wee_model", "variant": cfg.variant, "seed": seed, "config": cfg.to_dict()}
    save_checkpoint(path, arrays, flags, meta)


def load_model(path, cfg: RunConfig | None = None) -> tuple[WEEModel, RunConfig]:
    from .config import config_from_dict
    arrays, flags, meta = load_checkpoint(path)
    if meta.get("kind") != "wee_model":
        raise ConfigError(f"{path}: not a trained-model checkpoint")
    saved = config_from_dict(meta["config"])
    if cfg is not None:
        for f in ("d_base", "d_w", "num_experts", "d_llm", "stack_factor", "d_adapter", "decoder", "variant"):
            if getattr(cfg, f) != getattr(saved, f):
                raise ConfigError(f"checkpoint {f}={getattr(saved, f)!r} does not match config {getattr(cfg, f)!r}")
    dec_arrays = {k: v for k, v in arrays.items() if k.startswith("decoder.")}
    model = build_model(saved, dec_arrays, meta["seed"])
    for name, p in model.trainable().items():
        if name not in arrays:
            raise ConfigError(f"checkpoint lacks trainable array {name}")
        if arrays[name].shape != p.shape:
            raise ConfigError(f"checkpoint shape mismatch for {name}")
        p.values = np.array(arrays[name])
    return model, saved


# -- evaluation ---------------------------------------------------------------------------


@dataclass
class EvalResult:
    metrics: dict[str, dict[str, float]]  # task -> metric -> value
    usage: dict[str, list[float]]  # task -> fraction of items per expert (dep router)
    mean_dep: list[float] | None  # mean soft dep distribution over all items
    indep_choice: int | None

    @property
    def usage_entropy(self) -> float | None:
        if self.mean_dep is None:
            return None
        p = np.asarray(self.mean_dep)
        p = p[p > 0]
        return float(-(p * np.log(p)).sum())

    def aggregate(self) -> float:
        return aggregate_score(self.metrics)


def aggregate_score(metrics: dict[str, dict[str, float]]) -> float:
    """Mean of the four headline metrics (all already in [0, 1])."""
    return float(np.mean([metrics[t][HEADLINE[t]] for t in TASKS]))


def score_task(task: str, generations, first_probs, labels, k: int = 5) -> dict[str, float]:
    """Metrics of one task from generated ids and the first-step distributions."""
    preds = [taskbench.label_from_generation(task, g) for g in generations]
    if task == "ER":
        return {"macro_f1": taskbench.macro_f1(preds, labels, 3)}
    if task == "CTC":
        return {"accuracy": taskbench.accuracy(preds, labels),
                "macro_f1": taskbench.macro_f1(preds, labels, 4)}
    if task == "CMD":
        scores = np.asarray(first_probs)[:, vocab.RISK]
        return {f"p_at_{k}": taskbench.precision_at_k(scores, labels, k)}
    if task == "DS":
        return {"rouge_l": float(np.mean([taskbench.rouge_l(p, y) for p, y in zip(preds, labels)]))}
    raise ConfigError(f"unknown task {task!r}")


def evaluate(model: WEEModel, data: dict[str, TaskData], cfg: RunConfig, chunk: int = 256) -> EvalResult:
    if model.decoder.config != cfg.decoder_config():
        raise ConfigError("model decoder does not match the configured decoder")
    metrics, usage = {}, {}
    dep_sum, n_total = np.zeros(model.num_experts), 0
    indep_choice = None
    for task in TASKS:
        td = data[task]
        expected = (cfg.d_base,)
        if td.base.shape[-1:] != expected:
            raise ConfigError(f"{task} features have d_base {td.base.shape[-1]}, model expects {cfg.d_base}")
        gens, probs, choices = [], [], []
        for start in range(0, len(td), chunk):
            idx = range(start, min(len(td), start + chunk))
            batch = batch_from(data, [(task, i) for i in idx])
            with no_grad():
                audio, indep, dep = model.audio_tokens(batch)
            seqs, first = generate(model.decoder, audio, batch.instruction_ids, cfg.max_new, return_first_probs=True)
            gens += [s.ids for s in seqs]
            probs.append(first)
            if dep is not None:
                choices.append(dep.chosen_index)
                dep_sum += dep.soft.values.sum(axis=0)
            if indep is not None:
                indep_choice = int(indep.chosen_index)
        n_total += len(td)
        labels = [e.label for e in td.dataset.examples]
        metrics[task] = score_task(task, gens, np.concatenate(probs), labels, cfg.eval_k)
        if choices:
            usage[task] = (np.bincount(np.concatenate(choices), minlength=model.num_experts) / len(td)).tolist()
    mean_dep = (dep_sum / n_total).tolist() if model.uses_dep else None
    return EvalResult(metrics, usage, mean_dep, indep_choice)


# -- training -------------------------------------------------------------------------------


@dataclass
class FreezeAudit:
    before: dict[str, str]
    after: dict[str, str]

    @property
    def drifted(self) -> list[str]:
        return sorted(k for k in self.before if self.after.get(k) != self.before[k])

    @property
    def ok(self) -> bool:
        return not self.drifted and set(self.before) == set(self.after)


@dataclass
class TrainResult:
    model: WEEModel
    config: RunConfig
    seed: int
    log: list[dict]
    audit: FreezeAudit
    census: list[str]
    dev_initial: EvalResult | None = None
    dev_final: EvalResult | None = None
    test: EvalResult | None = None

    def write_log(self, path) -> None:
        write_csv(path, LOG_FIELDS, self.log)


def _digests(arrays: dict[str, np.ndarray]) -> dict[str, str]:
    return {k: array_digest(v) for k, v in sorted(arrays.items())}


def _dump_batch(path: Path, batch: Batch, step: int, breakdown: LossBreakdown | None) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, base=batch.base, experts=batch.experts, instruction_ids=batch.instruction_ids,
             target_ids=batch.target_ids, target_mask=batch.target_mask, tasks=np.array(batch.tasks),
             step=step, breakdown=json.dumps(None if breakdown is None else breakdown.as_row()))


def train(cfg: RunConfig, seed: int | None = None, out_dir=None, data=None, decoder_arrays=None,
          evaluate_splits: bool = True, log=None) -> TrainResult:
    seed = cfg.seeds[0] if seed is None else seed
    out = Path(out_dir) if out_dir is not None else None
    data = data if data is not None else prepare_data(cfg, seed)
    decoder_arrays = decoder_arrays if decoder_arrays is not None else pretrained_decoder_arrays(cfg, log)
    model = build_model(cfg, decoder_arrays, seed)

    trainable = model.trainable()
    census = sorted(trainable)
    if set(census) != expected_census(cfg):
        raise ConfigError(f"trainable census {census} differs from {sorted(expected_census(cfg))}")
    if any(p.requires_grad for p in model.decoder.params.values()):
        raise ConfigError("decoder base weights must be frozen before training")
    before = _digests(frozen_state(cfg, model))

    lora = [p for k, p in trainable.items() if k.startswith("lora.")]
    rest = [p for k, p in trainable.items() if not k.startswith("lora.")]
    opt = AdamW([ParamGroup(rest, cfg.lr_router, cfg.weight_decay),
                 ParamGroup(lora, cfg.lr_lora, cfg.weight_decay)], cfg.beta1, cfg.beta2)
    schedule = TaskSchedule(cfg.task_weights, {t: len(d) for t, d in data["train"].items()},
                            np.random.default_rng(_seed_seq(seed, 29)))

    dev_initial = evaluate(model, data["dev"], cfg) if evaluate_splits else None
    rows = []
    for step in range(1, cfg.steps + 1):
        batch = batch_from(data["train"], schedule.draw(cfg.batch_size))
        opt.zero_grad()
        terms, fwd = model.loss(batch, cfg.lam, cfg.diversity_weight)
        bd = terms.breakdown()
        if not all(math.isfinite(v) for v in (bd.next_token, bd.wee, bd.total)):
            if out is not None:
                _dump_batch(out / "nan_batch.npz", batch, step, bd)
            raise TrainingFailure(f"non-finite loss at step {step} (seed {seed}, variant {cfg.variant}): {bd}")
        terms.total.backward()
        opt.step()
        row = {"step": step, **bd.as_row(), "usage_entropy": None}
        if fwd.dep is not None:
            rbar = fwd.dep.soft.values.mean(axis=0)
            row["usage_entropy"] = float(-(rbar * np.log(np.where(rbar > 0, rbar, 1.0))).sum())
        rows.append(row)
        if log and (step % 250 == 0 or step == cfg.steps):
            log(f"[{cfg.variant} seed {seed}] step {step} total {bd.total:.4f} next_token {bd.next_token:.4f}")
        if cfg.eval_every and step % cfg.eval_every == 0 and log:
            log(f"[{cfg.variant} seed {seed}] step {step} dev {evaluate(model, data['dev'], cfg).metrics}")

    audit = FreezeAudit(before, _digests(frozen_state(cfg, model)))
    if not audit.ok:
        raise FrozenDriftError(f"frozen arrays changed during training: {audit.drifted}")

    result = TrainResult(model, cfg, seed, rows, audit, census, dev_initial)
    if evaluate_splits:
        result.dev_final = evaluate(model, data["dev"], cfg)
        result.test = evaluate(model, data["test"], cfg)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_model(out / "model.ckpt", cfg, model, seed)
        result.write_log(out / "train_log.csv")
    return result


# -- reports ------------------------------------------------------------------------------------


def write_csv(path, fields, rows) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(csv_text(fields, rows))


def csv_text(fields, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([_fmt(r.get(f)) for f in fields])
    return buf.getvalue()


@dataclass
class RunReport:
    config: dict
    seeds: list[int]
    rows: list[dict] = field(default_factory=list)  # long format: variant, task, metric, seed, value
    loss_curves: dict[tuple[str, int], list[dict]] = field(default_factory=dict)
    usage: dict[tuple[str, int], dict[str, list[float]]] = field(default_factory=dict)
    failures: dict[tuple[str, int], str] = field(default_factory=dict)

    def add(self, variant: str, seed: int, result: EvalResult) -> None:
        for task in TASKS:
            for metric, value in result.metrics[task].items():
                self.rows.append({"variant": variant, "task": task, "metric": metric, "seed": seed, "value": value})
        self.rows.append({"variant": variant, "task": "ALL", "metric": "aggregate", "seed": seed,
                          "value": result.aggregate()})
        if result.usage:
            self.usage[(variant, seed)] = result.usage

    def sorted_rows(self) -> list[dict]:
        order = {v: i for i, v in enumerate(VARIANTS)}
        task_order = {t: i for i, t in enumerate(TASKS + ("ALL",))}
        return sorted(self.rows, key=lambda r: (order.get(r["variant"], 99), r["variant"], r["seed"],
                                                task_order[r["task"]], r["metric"]))

    def value(self, variant: str, task: str, metric: str, seed: int) -> float | None:
        for r in self.rows:
            if (r["variant"], r["task"], r["metric"], r["seed"]) == (variant, task, metric, seed):
                return r["value"]
        return None

    def mean(self, variant: str, task: str, metric: str) -> float | None:
        vals = [r["value"] for r in self.rows
                if (r["variant"], r["task"], r["metric"]) == (variant, task, metric)]
        return float(np.mean(vals)) if vals else None

    def aggregate_by_seed(self, variant: str) -> dict[int, float]:
        return {r["seed"]: r["value"] for r in self.rows
                if r["variant"] == variant and r["metric"] == "aggregate"}

    def to_csv(self) -> str:
        return csv_text(("variant", "task", "metric", "seed", "value"), self.sorted_rows())

    def to_markdown(self) -> str:
        cols = [(t, HEADLINE[t]) for t in TASKS] + [("ALL", "aggregate")]
        head = ["Model"] + [f"{t} {m}" for t, m in cols[:-1]] + ["Aggregate"]
        lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
        means = {v: [self.mean(v, t, m) for t, m in cols] for v in VARIANTS}
        best = []
        for j in range(len(cols)):
            vals = [means[v][j] for v in VARIANTS if means[v][j] is not None]
            best.append(max(vals) if vals else None)
        for v in VARIANTS:
            cells = []
            for j, x in enumerate(means[v]):
                if x is None:
                    cells.append("failed" if any(k[0] == v for k in self.failures) else "n/a")
                else:
                    s = f"{100 * x:.1f}"
                    cells.append(f"**{s}**" if x == best[j] else s)
            lines.append(f"| {v} | " + " | ".join(cells) + " |")
        delta = []
        for j in range(len(cols)):
            a, b = means["full_wee"][j], means["base_only"][j]
            delta.append("n/a" if a is None or b is None else f"{100 * (a - b):+.1f}")
        lines.append("| Δ (full_wee − base_only) | " + " | ".join(delta) + " |")
        out = ["# Ablation report", "",
               f"Scores ×100, mean over seeds {self.seeds}. Best per column in bold.", ""] + lines
        if self.usage:
            out += ["", "## Data-dependent router usage (test items per expert)", ""]
            names = encoders.DEFAULT_POOL
            out.append("| Variant | Seed | Task | " + " | ".join(names) + " |")
            out.append("|" + "---|" * (3 + len(names)))
            for (v, s), per_task in sorted(self.usage.items()):
                for t in TASKS:
                    if t in per_task:
                        out.append(f"| {v} | {s} | {t} | " + " | ".join(f"{u:.3f}" for u in per_task[t]) + " |")
        if self.failures:
            out += ["", "## Failed runs", ""]
            for (v, s), msg in sorted(self.failures.items()):
                out.append(f"- {v} seed {s}: {msg}")
        return "\n".join(out) + "\n"

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(self.to_csv())
        (out / "report.md").write_text(self.to_markdown())
        (out / "config.json").write_text(json.dumps(self.config, indent=2, sort_keys=True) + "\n")


def report_from_csv(path, seeds=None) -> RunReport:
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.append({"variant": r["variant"], "task": r["task"], "metric": r["metric"],
                         "seed": int(r["seed"]), "value": float(r["value"])})
    seeds = sorted({r["seed"] for r in rows}) if seeds is None else seeds
    return RunReport({}, seeds, rows)


def ablate(cfg: RunConfig, out_dir=None, variants=VARIANTS, log=None) -> RunReport:
    """Every variant on every seed, with shared data and decoder per seed."""
    decoder_arrays = pretrained_decoder_arrays(cfg, log)
    report = RunReport(cfg.to_dict(), list(cfg.seeds))
    for seed in cfg.seeds:
        data = prepare_data(cfg, seed)
        for variant in variants:
            run_cfg = cfg.replace(variant=variant)
            run_dir = None if out_dir is None else Path(out_dir) / variant / f"seed{seed}"
            try:
                res = train(run_cfg, seed, run_dir, data, decoder_arrays, evaluate_splits=False, log=log)
                test = evaluate(res.model, data["test"], run_cfg)
            except WeeError as exc:
                report.failures[(variant, seed)] = f"{type(exc).__name__}: {exc}"
                continue
            report.add(variant, seed, test)
            report.loss_curves[(variant, seed)] = res.log
    if out_dir is not None:
        report.write(out_dir)
    return report


@dataclass
class OrderingCheck:
    pairs: list[tuple[str, str]]
    means: dict[str, float]
    wins: dict[tuple[str, str], int]  # seeds where the first variant beats the second
    num_seeds: int

    @property
    def means_ordered(self) -> bool:
        return all(self.means[a] > self.means[b] for a, b in self.pairs)

    @property
    def majority(self) -> bool:
        return all(2 * self.wins[p] > self.num_seeds for p in self.pairs)

    @property
    def ok(self) -> bool:
        return self.means_ordered and self.majority


ORDERING = [("full_wee", "dep_only"), ("dep_only", "indep_only"), ("indep_only", "base_only"),
            ("full_wee", "weak_only")]


def check_ordering(report: RunReport, pairs=ORDERING) -> OrderingCheck:
    per_seed = {v: report.aggregate_by_seed(v) for v in VARIANTS}
    means = {v: float(np.mean(list(s.values()))) if s else float("nan") for v, s in per_seed.items()}
    wins = {}
    for a, b in pairs:
        shared = set(per_seed[a]) & set(per_seed[b])
        wins[(a, b)] = sum(per_seed[a][s] > per_seed[b][s] for s in shared)
    return OrderingCheck(list(pairs), means, wins, len(report.seeds))


# -- routing sweep --------------------------------------------------------------------------------


def sweep_routing(cfg: RunConfig, lambdas=(0.1,), diversity=(True, False), out_dir=None, log=None) -> list[dict]:
    """full_wee with each (lambda, diversity on/off, seed); one row per run."""
    decoder_arrays = pretrained_decoder_arrays(cfg, log)
    rows = []
    for seed in cfg.seeds:
        data = prepare_data(cfg, seed)
        for lam in lambdas:
            for div in diversity:
                run_cfg = cfg.replace(variant="full_wee", lam=float(lam),
                                      diversity_weight=cfg.diversity_weight if div else 0.0)
                res = train(run_cfg, seed, None, data, decoder_arrays, evaluate_splits=False, log=log)
                ev = evaluate(res.model, data["test"], run_cfg)
                m = ev.metrics
                row = {"lambda": float(lam), "diversity": int(bool(div)), "seed": seed,
                       "usage_entropy": ev.usage_entropy, "er_f1": m["ER"]["macro_f1"],
                       "ctc_acc": m["CTC"]["accuracy"], "cmd_p5": m["CMD"][f"p_at_{cfg.eval_k}"],
                       "ds_rougeL": m["DS"]["rouge_l"]}
                for task, u in ev.usage.items():
                    for k, name in enumerate(encoders.DEFAULT_POOL):
                        row[f"{task}:{name}"] = u[k]
                rows.append(row)
    if out_dir is not None:
        usage_fields = tuple(f"{t}:{n}" for t in TASKS for n in encoders.DEFAULT_POOL)
        write_csv(Path(out_dir) / "sweep.csv", SWEEP_FIELDS + usage_fields, rows)
    return rows


# -- gradient check ---------------------------------------------------------------------------------


MICRO = dict(d_base=8, d_w=4, num_experts=3, vocab=16, frames=16, batch=2, blocks=1, d_llm=8, heads=2,
             stack_factor=2, d_adapter=6, lora_rank=2)


def micro_setup(variant: str = "full_wee", seed: int = 0, micro: dict | None = None):
    """A tiny random model and batch.  Routing is soft so the loss is differentiable."""
    m = {**MICRO, **(micro or {})}
    rng = np.random.default_rng(seed)
    dcfg = DecoderConfig(vocab=m["vocab"], d_llm=m["d_llm"], num_blocks=m["blocks"], num_heads=m["heads"],
                         max_len=32, lora_rank=m["lora_rank"], lora_alpha=2.0 * m["lora_rank"])
    dec = Decoder(dcfg, seed=seed)
    dec.freeze()
    dec.attach_lora(rng)
    for delta in dec.lora.values():  # nonzero B so the gradient of A is exercised
        delta.B.values = 0.1 * rng.standard_normal(delta.B.shape)
    model = WEEModel(variant, dec, m["d_base"], m["d_w"], m["num_experts"], m["stack_factor"], m["d_adapter"],
                     routing_mode="soft", prior_index=0, seed=seed)
    if model.router is not None:
        model.router.W_dep.values = 0.5 * rng.standard_normal(model.router.W_dep.shape)
        model.router.w_indep.values = rng.standard_normal(model.router.w_indep.shape)
    B, T = m["batch"], m["frames"]
    base = np.tanh(rng.standard_normal((B, T, m["d_base"])))
    experts = np.tanh(rng.standard_normal((B, m["num_experts"], T, m["d_w"])))
    instr = rng.integers(4, m["vocab"], size=(B, 1))
    tgt = rng.integers(4, m["vocab"], size=(B, 3))
    tgt[:, -1] = vocab.EOS
    batch = Batch(["ER"] * B, base, experts, instr, tgt, np.ones_like(tgt, dtype=bool))
    return model, batch


def run_grad_check(variant: str = "full_wee", seed: int = 0, lam: float = 0.1,
                   max_entries: int | None = None) -> list[GradReport]:
    model, batch = micro_setup(variant, seed)
    params = model.trainable()

    def closure() -> DiffArray:
        return model.loss(batch, lam)[0].total

    return grad_check(closure, params, max_entries=max_entries)
