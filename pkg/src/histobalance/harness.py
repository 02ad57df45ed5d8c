"""Experiment matrix orchestration: plans the baseline/mixture grid, executes
runs idempotently with a JSON-lines ledger, and persists one RunRecord per
(condition, repetition).

Seeds are derived by stable hashing of the condition label and repetition,
so extending a spec with new conditions never changes existing runs.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from histobalance.checkpoints import load_checkpoint, save_checkpoint
from histobalance.datasets import load_patches
from histobalance.diffusion import AutoencoderConfig, LdmConfig, train_autoencoder, train_ldm
from histobalance.errors import ValidationError
from histobalance.evaluation import EvalReport, evaluate_predictions
from histobalance.gan import GanConfig, train_gan
from histobalance.pools import generate_pool, load_pool
from histobalance.sampling import (
    MIX_METHODS,
    STRATEGY_KINDS,
    DatasetItem,
    MixSpec,
    SamplingStrategy,
    build_training_sampler,
    mix_real_synthetic,
)
from histobalance.seeding import stable_seed
from histobalance.segmentation import SegConfig, predict_mask, train_segmenter

logger = logging.getLogger(__name__)

LEDGER_NAME = "ledger.jsonl"
RUN_STATES = ("pending", "running", "done", "failed")


@dataclass
class ExperimentSpec:
    dataset_root: str
    output_dir: str
    baselines: tuple = ("tumor_sampled", "subtype_sampled")
    methods: tuple = ()
    ratios: tuple = (0.5, 1.0, 2.0, 4.0)
    repetitions: int = 5
    base_seed: int = 0
    seg: dict = field(default_factory=dict)
    generators: dict = field(default_factory=dict)
    pool_size: int | None = None
    train_draws: int | None = None

    def __post_init__(self):
        self.baselines = tuple(self.baselines)
        self.methods = tuple(self.methods)
        self.ratios = tuple(float(r) for r in self.ratios)
        if self.repetitions < 1:
            raise ValidationError("repetitions must be >= 1")
        if any(r <= 0 for r in self.ratios):
            raise ValidationError("ratios must be > 0")
        bad = [b for b in self.baselines if b not in STRATEGY_KINDS]
        if bad:
            raise ValidationError(f"unknown baselines {bad}")
        bad = [m for m in self.methods if m not in MIX_METHODS]
        if bad:
            raise ValidationError(f"unknown methods {bad}")
        if not self.baselines and not self.methods:
            raise ValidationError("spec needs at least one baseline or method")
        train_missing = self.generators.get("train_missing", True)
        for name in self._needed_generators():
            path = self.generators.get(name)
            if path is not None and not Path(path).exists():
                raise ValidationError(f"{name} checkpoint {path} does not exist")
            if path is None and not train_missing:
                raise ValidationError(
                    f"{name} checkpoint required for methods {self.methods} "
                    "but training is disabled"
                )

    def _needed_generators(self) -> list[str]:
        needed = []
        if any(m in ("diffusion", "inpaint") for m in self.methods):
            needed += ["ae", "ldm"]
        if "gan" in self.methods:
            needed.append("gan")
        return needed

    def to_json(self) -> dict:
        payload = asdict(self)
        payload["baselines"] = list(self.baselines)
        payload["methods"] = list(self.methods)
        payload["ratios"] = list(self.ratios)
        return payload

    @classmethod
    def from_json(cls, payload: dict) -> "ExperimentSpec":
        return cls(**payload)

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class RunDescriptor:
    label: str
    repetition: int
    seed: int
    kind: str  # "baseline" or "mixture"
    strategy: str | None = None
    method: str | None = None
    ratio: float | None = None

    @property
    def run_id(self) -> str:
        return f"{self.label}_rep{self.repetition}"


@dataclass
class RunRecord:
    config_hash: str
    label: str
    repetition: int
    seed: int
    report: EvalReport
    wall_clock_s: float
    artifacts: dict

    def to_json(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "label": self.label,
            "repetition": self.repetition,
            "seed": self.seed,
            "report": self.report.to_json(),
            "wall_clock_s": self.wall_clock_s,
            "artifacts": self.artifacts,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "RunRecord":
        return cls(
            config_hash=payload["config_hash"],
            label=payload["label"],
            repetition=payload["repetition"],
            seed=payload["seed"],
            report=EvalReport.from_json(payload["report"]),
            wall_clock_s=payload["wall_clock_s"],
            artifacts=payload["artifacts"],
        )


def plan_runs(spec: ExperimentSpec) -> list[RunDescriptor]:
    """Deterministic descriptor list: baselines, then method×ratio, each
    repeated `repetitions` times with stable per-run seeds."""
    descriptors = []
    conditions = [("baseline", b, None, None) for b in spec.baselines]
    conditions += [
        ("mixture", None, m, r) for m in spec.methods for r in spec.ratios
    ]
    for kind, strategy, method, ratio in conditions:
        label = strategy if kind == "baseline" else f"{method}@{ratio:g}"
        for rep in range(spec.repetitions):
            descriptors.append(
                RunDescriptor(
                    label=label,
                    repetition=rep,
                    seed=spec.base_seed ^ stable_seed("run", label, rep),
                    kind=kind,
                    strategy=strategy,
                    method=method,
                    ratio=ratio,
                )
            )
    return descriptors


def _ledger_append(output_dir: Path, run_id: str, state: str, **extra):
    if state not in RUN_STATES:
        raise ValidationError(f"unknown run state {state!r}")
    output_dir.mkdir(parents=True, exist_ok=True)
    entry = {"time": time.time(), "run_id": run_id, "state": state, **extra}
    with open(output_dir / LEDGER_NAME, "a") as fh:
        fh.write(json.dumps(entry, sort_keys=True) + "\n")


def experiment_status(output_dir: str | Path) -> dict[str, str]:
    """Latest ledger state per run id; empty dict when nothing ran yet."""
    path = Path(output_dir) / LEDGER_NAME
    states: dict[str, str] = {}
    if not path.exists():
        return states
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        entry = json.loads(line)
        states[entry["run_id"]] = entry["state"]
    return states


def _generator_seed(spec: ExperimentSpec, name: str) -> int:
    return spec.base_seed ^ stable_seed("train", name)


def ensure_generators(spec: ExperimentSpec, train_patches) -> dict[str, dict]:
    """Load or train the generator checkpoints the experiment's methods need.

    Trained checkpoints are cached under <output_dir>/generators and reused
    on subsequent calls, so the whole matrix shares one set.
    """
    needed = spec._needed_generators()
    kinds = {"ae": "autoencoder", "ldm": "ldm", "gan": "gan"}
    out: dict[str, dict] = {}
    gen_dir = Path(spec.output_dir) / "generators"
    for name in needed:
        explicit = spec.generators.get(name)
        if explicit is not None:
            out[name] = load_checkpoint(explicit, kinds[name])
            continue
        cached = gen_dir / f"{name}.pt"
        if cached.exists():
            out[name] = load_checkpoint(cached, kinds[name])
            continue
        seed = _generator_seed(spec, name)
        logger.info("training %s generator (seed %d)", name, seed)
        if name == "ae":
            config = AutoencoderConfig(**spec.generators.get("ae_config", {}))
            payload, _ = train_autoencoder(train_patches, config, seed=seed)
        elif name == "ldm":
            config = LdmConfig(**spec.generators.get("ldm_config", {}))
            payload, _ = train_ldm(train_patches, out["ae"], config, seed=seed)
        else:
            config = GanConfig(**spec.generators.get("gan_config", {}))
            payload, _ = train_gan(train_patches, config, seed=seed)
        save_checkpoint(cached, payload)
        out[name] = payload
    return out


def ensure_pool(spec: ExperimentSpec, method: str, train_patches, generators: dict):
    """Load the method's synthetic pool, generating it on first use."""
    pool_dir = Path(spec.output_dir) / "pools" / method
    if (pool_dir / "pool.json").exists():
        return load_pool(pool_dir)
    count = spec.pool_size or max(1, int(max(spec.ratios) * len(train_patches)))
    generate_pool(
        method,
        train_patches,
        count,
        seed=spec.base_seed ^ stable_seed("pool", method),
        out_dir=pool_dir,
        gan=generators.get("gan"),
        ldm=generators.get("ldm"),
        ae=generators.get("ae"),
    )
    return load_pool(pool_dir)


def _baseline_items(train_patches, descriptor: RunDescriptor) -> list[DatasetItem]:
    sampler = build_training_sampler(
        train_patches, SamplingStrategy(descriptor.strategy, seed=descriptor.seed)
    )
    n = len(train_patches)
    items = []
    for i in sampler.draw(n):
        p = train_patches[i]
        items.append(
            DatasetItem(
                image=p.image,
                mask=p.mask,
                source="real",
                provenance={"slide_id": p.slide_id, "index": int(i)},
            )
        )
    return items


def _training_items(spec: ExperimentSpec, descriptor: RunDescriptor, train_patches) -> list[DatasetItem]:
    if descriptor.kind == "baseline":
        return _baseline_items(train_patches, descriptor)
    generators = ensure_generators(spec, train_patches)
    pool = ensure_pool(spec, descriptor.method, train_patches, generators)
    mix = MixSpec(ratio=descriptor.ratio, method=descriptor.method, seed=descriptor.seed)
    return mix_real_synthetic(train_patches, pool, mix)


def execute_run(spec: ExperimentSpec, descriptor: RunDescriptor, *, force: bool = False) -> RunRecord:
    """Run one (condition, repetition): sample/mix, train, evaluate, persist.

    A completed run is returned from its stored record unless `force`;
    failures are recorded in the ledger and re-raised.
    """
    out_dir = Path(spec.output_dir)
    run_dir = out_dir / "runs" / descriptor.run_id
    record_path = run_dir / "record.json"
    if record_path.exists() and not force:
        return RunRecord.from_json(json.loads(record_path.read_text()))

    _ledger_append(out_dir, descriptor.run_id, "running")
    started = time.time()
    try:
        train_patches = load_patches(spec.dataset_root, "train")
        val_patches = load_patches(spec.dataset_root, "val")
        test_patches = load_patches(spec.dataset_root, "test")
        items = _training_items(spec, descriptor, train_patches)

        seg_config = SegConfig(**spec.seg)
        payload, history = train_segmenter(items, seg_config, descriptor.seed, val_items=val_patches)

        run_dir.mkdir(parents=True, exist_ok=True)
        checkpoint_path = run_dir / "segmenter.pt"
        save_checkpoint(checkpoint_path, payload)

        preds = [predict_mask(payload, p.image).binary for p in test_patches]
        report = evaluate_predictions(preds, [p.mask for p in test_patches])
        record = RunRecord(
            config_hash=spec.config_hash(),
            label=descriptor.label,
            repetition=descriptor.repetition,
            seed=descriptor.seed,
            report=report,
            wall_clock_s=time.time() - started,
            artifacts={
                "checkpoint": str(checkpoint_path),
                "record": str(record_path),
                "best_step": history.get("best_step"),
            },
        )
        record_path.write_text(json.dumps(record.to_json(), indent=2, sort_keys=True))
    except Exception as exc:
        _ledger_append(out_dir, descriptor.run_id, "failed", error=str(exc))
        raise
    _ledger_append(out_dir, descriptor.run_id, "done")
    return record


def run_matrix(spec: ExperimentSpec, *, force: bool = False) -> tuple[list[RunRecord], list[str]]:
    """Execute every planned run; failures don't stop the rest.

    Returns (completed records, failed run ids).
    """
    descriptors = plan_runs(spec)
    out_dir = Path(spec.output_dir)
    done = experiment_status(out_dir)
    for d in descriptors:
        if done.get(d.run_id) != "done":
            _ledger_append(out_dir, d.run_id, "pending")
    records, failed = [], []
    for d in descriptors:
        try:
            records.append(execute_run(spec, d, force=force))
        except Exception:
            logger.exception("run %s failed", d.run_id)
            failed.append(d.run_id)
    return records, failed


def load_records(output_dir: str | Path) -> list[RunRecord]:
    """All persisted RunRecords under an experiment output directory."""
    runs_dir = Path(output_dir) / "runs"
    records = []
    if runs_dir.exists():
        for record_path in sorted(runs_dir.glob("*/record.json")):
            records.append(RunRecord.from_json(json.loads(record_path.read_text())))
    return records
