"""Training loop with dev-based selection, multi-seed runs, evaluation and reports."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .cache import CacheManifest, EntryStore, FingerprintMismatch, MANIFEST_NAME, assemble_batch, build_cache, prefix_fingerprint
from .checkpoint import canonical_json, save_checkpoint
from .data import AudioCache, DataError, Manifest, batch_ids, make_raw_batch
from .model import (
    DESK,
    FreezePlan,
    LoraConfig,
    Model,
    ModelConfig,
    count_trainable_params,
    format_count,
    plan_model,
)
from .objectives import AdamWState, LossScaler, Trainer, ccc, multitask_loss
from .stats import StatsError, mean_std

log = logging.getLogger(__name__)

SELECTION_RULE = "max mean(dev activation CCC, dev valence CCC); earliest epoch wins ties"
METRICS = ("dev_activation", "dev_valence", "test_activation", "test_valence")
MEMORY_BUDGETS = {"11GB": 11 * 1024**3, "48GB": 48 * 1024**3}


class RunConfigError(ValueError):
    pass


class PartialResultError(RuntimeError):
    def __init__(self, message: str, completed: list):
        super().__init__(message)
        self.completed = completed


class ReportError(ValueError):
    pass


@dataclass
class RunConfig:
    name: str = "run"
    model: ModelConfig = DESK
    freeze: FreezePlan = FreezePlan("full")
    precision: str = "single"
    cached: bool = False
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    epochs: int = 5
    lr: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 32
    eval_batch_size: int = 32
    lora: LoraConfig = LoraConfig()
    data: str = ""
    cache_root: str = ""
    out_root: str = "runs"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.precision not in ("single", "mixed"):
            raise RunConfigError(f"precision must be 'single' or 'mixed', got {self.precision!r}")
        if self.cached and self.freeze.mode != "caching_partial":
            raise RunConfigError(f"cached training needs a caching_partial plan, got {self.freeze.label}")
        if self.freeze.mode == "caching_partial" and not self.cached:
            raise RunConfigError("a caching_partial plan must be trained with cached = true")
        if self.epochs < 1:
            raise RunConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2 or self.eval_batch_size < 2:
            raise RunConfigError("batch sizes must be >= 2 for the CCC loss")
        if not self.seeds:
            raise RunConfigError("at least one seed is required")
        self.model.validate()

    @property
    def split_layer(self) -> int:
        return self.freeze.split_layer(self.model.n_layers)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "model": self.model.to_dict(),
            "freeze": {"mode": self.freeze.mode, "n": self.freeze.n},
            "precision": self.precision,
            "cached": self.cached,
            "seeds": list(self.seeds),
            "epochs": self.epochs,
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "batch_size": self.batch_size,
            "eval_batch_size": self.eval_batch_size,
            "lora": dataclasses.asdict(self.lora),
            "data": self.data,
            "cache_root": self.cache_root,
            "out_root": self.out_root,
        }

    @classmethod
    def from_dict(cls, body: Mapping[str, Any]) -> "RunConfig":
        body = dict(body)
        unknown = set(body) - {f.name for f in dataclasses.fields(cls)} - {"preset"}
        if unknown:
            raise RunConfigError(f"unknown config keys: {sorted(unknown)}")
        from .model import PRESETS

        base = PRESETS[body.pop("preset", "desk")]
        model = body.pop("model", None) or {}
        if isinstance(model, Mapping):
            model = ModelConfig.from_dict({**base.to_dict(), **model})
        freeze = body.pop("freeze", None) or {"mode": "full"}
        if isinstance(freeze, str):
            freeze = FreezePlan.parse(freeze)
        elif isinstance(freeze, Mapping):
            freeze = FreezePlan(freeze.get("mode", "full"), int(freeze.get("n", 0)))
        lora = body.pop("lora", None) or {}
        if isinstance(lora, Mapping):
            lora = LoraConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in lora.items()})
        if "seeds" in body:
            body["seeds"] = tuple(int(s) for s in body["seeds"])
        if freeze.mode == "caching_partial":
            body.setdefault("cached", True)
        return cls(model=model, freeze=freeze, lora=lora, **body)

    def identity(self) -> str:
        """Hash of everything that determines a run except seeds and output location."""
        body = self.to_dict()
        for key in ("seeds", "out_root", "cache_root", "name"):
            body.pop(key)
        return hashlib.sha256(canonical_json(body).encode()).hexdigest()[:12]

    def run_dir(self, seed: int) -> Path:
        return Path(self.out_root) / f"{self.name}-{self.identity()}-seed{seed}"

    def summary_dir(self) -> Path:
        return Path(self.out_root) / f"{self.name}-{self.identity()}"


@dataclass
class SeedResult:
    seed: int
    best_epoch: int
    dev_activation: float
    dev_valence: float
    test_activation: float
    test_valence: float
    train_seconds: float
    trainable_params: int


@dataclass
class RunResult:
    name: str
    plan: str
    precision: str
    config: dict
    seeds: list[SeedResult] = field(default_factory=list)

    def values(self, metric: str) -> list[float]:
        return [getattr(r, metric) for r in self.seeds]

    def aggregate(self) -> dict[str, tuple[float, float]]:
        if len(self.seeds) < 2:
            raise StatsError("aggregating needs at least 2 seeds")
        return {m: mean_std(self.values(m)) for m in (*METRICS, "train_seconds")}

    def to_dict(self) -> dict:
        body = {
            "name": self.name,
            "plan": self.plan,
            "precision": self.precision,
            "config": self.config,
            "seeds": [dataclasses.asdict(r) for r in self.seeds],
        }
        if len(self.seeds) >= 2:
            body["aggregate"] = {k: {"mean": m, "std": s} for k, (m, s) in self.aggregate().items()}
        return body

    @classmethod
    def from_dict(cls, body: Mapping) -> "RunResult":
        return cls(body["name"], body["plan"], body["precision"], body["config"],
                   [SeedResult(**r) for r in body["seeds"]])


class RunLog:
    """JSON-lines event log; wall-clock values go to a separate timings file."""

    def __init__(self, path: Path):
        self.path = path
        self._fh = path.open("w", encoding="utf-8")

    def event(self, kind: str, **fields) -> None:
        self._fh.write(json.dumps({"event": kind, **fields}, sort_keys=True) + "\n")

    def close(self) -> None:
        self._fh.close()


def read_log(path: Path | str) -> list[dict]:
    with Path(path).open(encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def select_epoch(epochs: Sequence[Mapping]) -> Mapping:
    """Epoch record with the best mean dev CCC; the first one wins ties."""
    best = None
    for rec in epochs:
        score = 0.5 * (rec["dev_activation"] + rec["dev_valence"])
        if best is None or score > best[0]:
            best = (score, rec)
    if best is None:
        raise ValueError("no epochs to select from")
    return best[1]


def eval_chunks(ids: Sequence[str], batch_size: int) -> list[list[str]]:
    """Fixed-order chunks; a trailing singleton joins the previous chunk."""
    chunks = [list(ids[i : i + batch_size]) for i in range(0, len(ids), batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2].extend(chunks.pop())
    return chunks


def split_ccc(predictions: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """Activation and valence CCC computed once over a whole split."""
    return ccc(predictions[:, 0], labels[:, 0]), ccc(predictions[:, 1], labels[:, 1])


class Batcher:
    """Yields model inputs for a training or evaluation batch on the raw or cached path."""

    def __init__(self, manifest: Manifest, model: Model, cached: CacheManifest | None = None):
        self.manifest = manifest
        self.model = model
        self.audio = AudioCache(manifest)
        self.cache = cached
        self.store = EntryStore(cached) if cached is not None else None

    def inputs(self, ids: Sequence[str]) -> tuple[T.Tensor, np.ndarray]:
        if self.cache is None:
            batch = make_raw_batch(self.manifest, ids, self.audio)
            return T.Tensor(batch.audio), batch.labels
        batch = assemble_batch(self.cache, ids, self.manifest.labels(ids), self.store)
        return T.Tensor(batch.representations), batch.labels

    def predict(self, x: T.Tensor, train: bool = False, rng=None, weights=None) -> T.Tensor:
        if self.cache is None:
            return self.model(x, train, rng, weights).predictions
        return self.model.forward_from(x, self.cache.split_layer, train, rng, weights).predictions


def evaluate(model: Model, manifest: Manifest, split: str, batch_size: int = 32,
             batcher: Batcher | None = None) -> tuple[float, float]:
    """Eval-mode (activation, valence) CCC over the whole split."""
    ids = [r.sample_id for r in manifest.split(split)]
    if not ids:
        raise DataError(f"split {split!r} is empty")
    batcher = batcher or Batcher(manifest, model)
    preds = []
    with T.no_grad():
        for chunk in eval_chunks(ids, batch_size):
            x, _ = batcher.inputs(chunk)
            preds.append(batcher.predict(x).data)
    return split_ccc(np.concatenate(preds).astype(np.float64), manifest.labels(ids))


def prepare_cache(config: RunConfig, model: Model, manifest: Manifest) -> CacheManifest:
    """Load the cache matching this model's frozen prefix, building it once if absent."""
    split = config.split_layer
    fingerprint = prefix_fingerprint(model, split)
    root = Path(config.cache_root or Path(config.out_root) / "cache") / f"{fingerprint[:16]}-L{split}"
    if (root / MANIFEST_NAME).exists():
        cached = CacheManifest.load(root)
    else:
        cached = build_cache(manifest, model, split, root)
    if cached.fingerprint != fingerprint:
        raise FingerprintMismatch(f"cache at {root} was built for a different model; refusing to train")
    missing = [r.sample_id for r in manifest.records if r.sample_id not in cached.entries]
    if missing:
        raise FingerprintMismatch(f"cache at {root} lacks {len(missing)} samples, e.g. {missing[0]}")
    return cached


def build_run_model(config: RunConfig, seed: int) -> Model:
    return plan_model(config.model, config.freeze, seed=seed, lora=config.lora)


def make_trainer(config: RunConfig, model: Model) -> Trainer:
    state = AdamWState(lr=config.lr, weight_decay=config.weight_decay)
    scaler = LossScaler() if config.precision == "mixed" else None
    return Trainer(model, state, config.precision, scaler)


def loss_closure(batcher: Batcher, x: T.Tensor, y: np.ndarray) -> Callable:
    labels = T.Tensor(y)

    def loss_fn(weights, train, rng):
        preds = batcher.predict(x, train, rng, weights)
        with T.autocast_half(False):
            return multitask_loss(preds, labels)

    return loss_fn


def train(config: RunConfig, seed: int, manifest: Manifest | None = None,
          run_dir: Path | str | None = None) -> SeedResult:
    """Train one seed; writes log.jsonl, timings.json, best.fcft and result.json into the run directory."""
    manifest = manifest or Manifest.load(config.data)
    run_dir = Path(run_dir) if run_dir is not None else config.run_dir(seed)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(canonical_json({**config.to_dict(), "seed": seed}) + "\n")

    model = build_run_model(config, seed)
    cached = prepare_cache(config, model, manifest) if config.cached else None
    batcher = Batcher(manifest, model, cached)
    trainer = make_trainer(config, model)
    train_ids = [r.sample_id for r in manifest.split("train")]

    runlog = RunLog(run_dir / "log.jsonl")
    runlog.event("config", seed=seed, config=config.to_dict(), selection=SELECTION_RULE,
                 remainder="trailing batch of 1 dropped", trainable_params=count_trainable_params(model))
    epochs, best, best_score, timings = [], None, -math.inf, []
    try:
        for epoch in range(config.epochs):
            rng = T.make_rng(seed, 10, epoch)
            started = time.perf_counter()
            losses = []
            for step, ids in enumerate(batch_ids(train_ids, config.batch_size, seed, epoch)):
                x, y = batcher.inputs(ids)
                scale_before = trainer.scaler.scale if trainer.scaler else None
                outcome = trainer.step(loss_closure(batcher, x, y), rng)
                losses.append(outcome.loss)
                runlog.event("step", epoch=epoch, step=step, loss=outcome.loss, applied=outcome.applied,
                             scale=outcome.scale, overflow=outcome.overflow)
                if trainer.scaler and trainer.scaler.scale != scale_before:
                    runlog.event("loss_scale", epoch=epoch, step=step, old=scale_before, new=trainer.scaler.scale)
            dev = evaluate(model, manifest, "dev", config.eval_batch_size, batcher)
            timings.append(time.perf_counter() - started)
            finite = [v for v in losses if math.isfinite(v)]
            record = {"epoch": epoch, "train_loss": float(np.mean(finite)) if finite else None,
                      "dev_activation": dev[0], "dev_valence": dev[1]}
            runlog.event("epoch", **record)
            epochs.append(record)
            score = 0.5 * (dev[0] + dev[1])
            if score > best_score:
                best_score = score
                best = {p: a.copy() for p, a in model.state_arrays().items()}
                save_checkpoint(run_dir / "best.fcft", model, trainer.state,
                                {"epoch": epoch, "dev_activation": dev[0], "dev_valence": dev[1]})
        chosen = select_epoch(epochs)
        model.load_arrays(best)
        if config.precision == "mixed":
            trainer.refresh_half()
        test = evaluate(model, manifest, "test", config.eval_batch_size, batcher)
        runlog.event("selected", epoch=chosen["epoch"], dev_activation=chosen["dev_activation"],
                     dev_valence=chosen["dev_valence"], test_activation=test[0], test_valence=test[1])
    finally:
        runlog.close()
    (run_dir / "timings.json").write_text(json.dumps({"epoch_seconds": timings, "total": sum(timings)}) + "\n")
    result = SeedResult(seed, chosen["epoch"], chosen["dev_activation"], chosen["dev_valence"], test[0], test[1],
                        sum(timings), count_trainable_params(model))
    (run_dir / "result.json").write_text(json.dumps(dataclasses.asdict(result), sort_keys=True) + "\n")
    return result


def replay_run(run_dir: Path | str) -> SeedResult:
    """Rebuild a seed's result from its log and timings files alone."""
    run_dir = Path(run_dir)
    events = read_log(run_dir / "log.jsonl")
    config = next(e for e in events if e["event"] == "config")
    chosen = select_epoch([e for e in events if e["event"] == "epoch"])
    selected = next(e for e in events if e["event"] == "selected")
    if selected["epoch"] != chosen["epoch"]:
        raise ValueError(f"log selected epoch {selected['epoch']}, replay selects {chosen['epoch']}")
    timings = json.loads((run_dir / "timings.json").read_text())
    return SeedResult(config["seed"], chosen["epoch"], chosen["dev_activation"], chosen["dev_valence"],
                      selected["test_activation"], selected["test_valence"], timings["total"],
                      config["trainable_params"])


def _train_job(args) -> SeedResult:
    config_body, seed = args
    return train(RunConfig.from_dict(config_body), seed)


def run_seeds(config: RunConfig, manifest: Manifest | None = None, workers: int = 1) -> RunResult:
    """Train every seed and aggregate mean and sample standard deviation."""
    if len(config.seeds) < 2:
        raise RunConfigError(f"run_seeds needs at least 2 seeds, got {len(config.seeds)}")
    result = RunResult(config.name, config.freeze.label, config.precision, config.to_dict())
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as pool:
            futures = [(s, pool.submit(_train_job, (config.to_dict(), s))) for s in config.seeds]
            for seed, fut in futures:
                try:
                    result.seeds.append(fut.result())
                except Exception as exc:
                    done = [r.seed for r in result.seeds]
                    raise PartialResultError(f"seed {seed} failed ({exc}); completed seeds {done}", done) from exc
    else:
        manifest = manifest or Manifest.load(config.data)
        for seed in config.seeds:
            try:
                result.seeds.append(train(config, seed, manifest))
            except Exception as exc:
                done = [r.seed for r in result.seeds]
                raise PartialResultError(f"seed {seed} failed ({exc}); completed seeds {done}", done) from exc
    out = config.summary_dir()
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.json").write_text(json.dumps(result.to_dict(), sort_keys=True, indent=1) + "\n")
    return result


def aggregate_from_logs(run_dirs: Iterable[Path | str]) -> dict[str, tuple[float, float]]:
    rows = [replay_run(d) for d in run_dirs]
    return {m: mean_std([getattr(r, m) for r in rows]) for m in METRICS}


# reports

def speedup(seconds: float, baseline_seconds: float) -> float:
    """Relative time saved against the baseline: 1 - t / t_baseline."""
    if baseline_seconds <= 0:
        raise ReportError(f"baseline time must be positive, got {baseline_seconds}")
    return 1.0 - seconds / baseline_seconds


REPORT_COLUMNS = ("name", "layers", "precision", "activation", "valence", "time_s", "speedup", "params")


@dataclass
class ReportRow:
    name: str
    layers: str
    precision: str
    params: int
    activation: tuple[float, float] | None = None
    valence: tuple[float, float] | None = None
    time_s: float | None = None
    speedup: float | None = None

    def cells(self) -> list[str]:
        def pm(v):
            return "-" if v is None else f"{v[0]:.3f}±{v[1]:.3f}"

        return [
            self.name,
            self.layers,
            self.precision,
            pm(self.activation),
            pm(self.valence),
            "-" if self.time_s is None else f"{self.time_s:.2f}",
            "-" if self.speedup is None else f"{100 * self.speedup:.1f}%",
            format_count(self.params),
        ]


@dataclass
class Report:
    rows: list[ReportRow]
    baseline: str | None = None
    selection: str = SELECTION_RULE
    params_only: bool = False

    def to_dict(self) -> dict:
        return {
            "baseline": self.baseline,
            "selection": self.selection,
            "params_only": self.params_only,
            "columns": list(REPORT_COLUMNS),
            "rows": [dataclasses.asdict(r) for r in self.rows],
        }

    @classmethod
    def from_dict(cls, body: Mapping) -> "Report":
        rows = []
        for r in body["rows"]:
            r = dict(r)
            for key in ("activation", "valence"):
                if r[key] is not None:
                    r[key] = tuple(r[key])
            rows.append(ReportRow(**r))
        return cls(rows, body["baseline"], body["selection"], body["params_only"])

    def table(self) -> str:
        header = ["name", "layers", "precision", "activation", "valence", "time_s", "speedup", "params"]
        grid = [header] + [r.cells() for r in self.rows]
        widths = [max(len(row[i]) for row in grid) for i in range(len(header))]
        lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in grid]
        return "\n".join(lines) + "\n"


def parse_table(text: str) -> list[dict[str, str]]:
    """Read an aligned text table back into one dict per row."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    header = lines[0].split()
    return [dict(zip(header, ln.split())) for ln in lines[1:]]


def layers_label(plan: FreezePlan, n_layers: int) -> str:
    """Compact, whitespace-free description of the trained transformer layers."""
    if plan.mode == "full":
        return f"all{n_layers}"
    if plan.mode == "lora":
        return "lora"
    if plan.mode == "partial":
        return f"last{plan.n}"
    return f"cached{plan.n}"


def params_report(config: ModelConfig, plans: Sequence[str]) -> Report:
    """Parameter counts only; no model weights are allocated."""
    rows = []
    for name in plans:
        plan = FreezePlan.parse(name)
        model = plan_model(config, plan, materialize=False)
        rows.append(ReportRow(name, layers_label(plan, config.n_layers), "-", count_trainable_params(model)))
    return Report(rows, params_only=True)


def bench_report(results: Sequence[RunResult], baseline: str) -> Report:
    """Table with CCC mean±std, time, speedup against ``baseline`` and trainable parameters."""
    by_name = {r.name: r for r in results}
    if baseline not in by_name:
        raise ReportError(f"baseline {baseline!r} is not among the runs {sorted(by_name)}")
    base_time = by_name[baseline].aggregate()["train_seconds"][0] if len(by_name[baseline].seeds) >= 2 \
        else by_name[baseline].seeds[0].train_seconds
    rows = []
    for res in results:
        cfg = RunConfig.from_dict(res.config)
        if len(res.seeds) >= 2:
            agg = res.aggregate()
            act = agg["test_activation"]
            val = agg["test_valence"]
            t = agg["train_seconds"][0]
        else:
            only = res.seeds[0]
            act, val, t = (only.test_activation, 0.0), (only.test_valence, 0.0), only.train_seconds
        rows.append(ReportRow(res.name, layers_label(cfg.freeze, cfg.model.n_layers), res.precision,
                              res.seeds[0].trainable_params, act, val, t, speedup(t, base_time)))
    return Report(rows, baseline)


def write_report(report: Report, out_dir: Path | str, figures: bool = True) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"json": out_dir / "report.json", "table": out_dir / "report.txt"}
    paths["json"].write_text(json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n")
    paths["table"].write_text(report.table())
    if figures:
        from .report import render_figures

        paths.update(render_figures(report, out_dir))
    return paths


# memory

@dataclass
class MemoryEstimate:
    parameters: int
    half_copies: int
    gradients: int
    optimizer: int
    activations: int
    transient: int
    exceeds: list[str]

    @property
    def total(self) -> int:
        return self.parameters + self.half_copies + self.gradients + self.optimizer + self.activations + self.transient


def estimate_memory(config: ModelConfig, plan: FreezePlan, precision: str = "single", batch_size: int = 32,
                    seconds: float = 15.0, lora: LoraConfig | None = None) -> MemoryEstimate:
    """Analytic training-memory estimate in bytes.

    Counts 32-bit weights, trainable gradients and AdamW moments, stored activations
    of trainable blocks and the largest transient buffer of the frozen forward pass.
    """
    model = plan_model(config, plan, materialize=False, lora=lora)
    total = sum(int(np.prod(s)) for s in model.shapes.values())
    trainable = count_trainable_params(model)
    act_bytes = 2 if precision == "mixed" else 4
    samples = int(seconds * 16000)
    frames = config.n_frames(samples)
    d, f, h = config.d_model, config.d_ffn, config.n_heads
    per_block = batch_size * frames * (10 * d + 2 * f) + 2 * batch_size * h * frames * frames
    split = plan.split_layer(config.n_layers)
    stored_blocks = config.n_layers if plan.mode == "lora" else config.n_layers - split
    stored = stored_blocks * per_block
    if plan.mode in ("full", "partial"):
        stored += batch_size * frames * 4 * d
    if plan.mode == "caching_partial":
        transient = batch_size * frames * d
    else:
        first = config.fe_channels[0] * T.conv_output_length(samples, config.fe_kernels[0], config.fe_strides[0])
        transient = batch_size * max(first, per_block)
    est = MemoryEstimate(
        parameters=4 * total,
        half_copies=2 * total if precision == "mixed" else 0,
        gradients=act_bytes * trainable,
        optimizer=8 * trainable,
        activations=act_bytes * stored,
        transient=act_bytes * transient,
        exceeds=[],
    )
    est.exceeds = [name for name, limit in MEMORY_BUDGETS.items() if est.total > limit]
    return est
