"""Experiment configuration and the generate -> pretrain -> curriculum -> eval pipeline.

Each stage writes its artifacts into the run directory and is skipped when a
checkpoint with a matching stage digest is already present, so re-running a
finished config is cheap and an interrupted run continues where it stopped.
The stage digest covers only the config fields that stage depends on, which
lets sweeps share one pretraining across many curriculum settings.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckptmod
from . import rng as rngmod
from .curriculum import CurriculumConfig, CurriculumState, TeacherState, run_curriculum
from .data import AugmentConfig, DatasetManifest, Datasets, build_manifest
from .errors import CapacityError, CDFSLError, MissingDependencyError, ValidationError
from .fewshot import EvalConfig, EvalReport, evaluate_features, extract_features
from .model import ClipSpec, EncoderConfig, ModelConfig, init_encoder
from .params import ModelParams
from .pretrain import PretrainConfig, PretrainState, run_pretraining

STAGES = ("generate", "pretrain", "curriculum", "eval")

VARIANTS = ("full", "equal_weighting", "no_sharpening", "ssl_only", "supervised_only")


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ManifestConfig:
    n_source_classes: int = 8
    n_target_classes: int = 5
    n_per_class: int = 40
    domain_gap: float = 1.0


@dataclass(frozen=True)
class AblationSpec:
    """Table-row variant and the config overrides it implies."""

    variant: str = "full"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")

    @property
    def runs_pretrain(self) -> bool:
        return self.variant != "supervised_only"

    @property
    def runs_curriculum(self) -> bool:
        return self.variant != "ssl_only"

    def curriculum_overrides(self) -> dict:
        return {
            "full": {},
            "equal_weighting": {"lambda_override": 1.0},
            "no_sharpening": {"temperature": 1.0},
            "ssl_only": {},
            "supervised_only": {"lambda_override": 0.0},
        }[self.variant]


def _desk_pretrain() -> PretrainConfig:
    # with momentum 0.9 the effective step lr / (1 - momentum) is 0.1, the plain-SGD recipe
    return PretrainConfig(epochs=30, learning_rate=0.01)


def _desk_curriculum() -> CurriculumConfig:
    return CurriculumConfig(epochs=60, student_lr=0.05)


def _desk_augment() -> AugmentConfig:
    # horizontal flips turn left-moving clips into right-moving ones, which
    # changes the label of direction-coded classes
    return AugmentConfig(p_flip=0.0)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run depends on. ``seed`` overrides every stage seed."""

    manifest: ManifestConfig = field(default_factory=ManifestConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=_desk_pretrain)
    curriculum: CurriculumConfig = field(default_factory=_desk_curriculum)
    eval: EvalConfig = field(default_factory=EvalConfig)
    augment: AugmentConfig = field(default_factory=_desk_augment)
    variant: str = "full"
    out_dir: str = "runs/default"
    seed: int = 0

    def __post_init__(self):
        AblationSpec(self.variant)
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ValidationError("seed must be a non-negative integer")

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "manifest": asdict(self.manifest),
            "model": self.model.to_dict(),
            "pretrain": asdict(self.pretrain),
            "curriculum": asdict(self.curriculum),
            "eval": asdict(self.eval),
            "augment": asdict(self.augment),
            "variant": self.variant,
            "out_dir": self.out_dir,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown config sections {sorted(unknown)}")
        base = cls()
        try:
            aug = dict(d.get("augment", {}))
            for key in ("crop_scale", "blur_sigma"):
                if key in aug:
                    aug[key] = tuple(aug[key])
            return cls(
                manifest=replace(base.manifest, **d.get("manifest", {})),
                model=ModelConfig(
                    ClipSpec(**d.get("model", {}).get("clip", {})),
                    EncoderConfig(**d.get("model", {}).get("encoder", {})),
                ),
                pretrain=replace(base.pretrain, **d.get("pretrain", {})),
                curriculum=replace(base.curriculum, **d.get("curriculum", {})),
                eval=replace(base.eval, **d.get("eval", {})),
                augment=replace(base.augment, **aug),
                variant=d.get("variant", base.variant),
                out_dir=d.get("out_dir", base.out_dir),
                seed=d.get("seed", base.seed),
            )
        except TypeError as exc:  # unexpected field names inside a section
            raise ValidationError(f"invalid config: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ValidationError("config file must hold a JSON object")
        return cls.from_dict(raw)

    # -- provenance --------------------------------------------------------

    def _digest(self, sections: tuple[str, ...]) -> str:
        d = self.to_dict()
        payload = {k: d[k] for k in sections}
        return hashlib.sha256(json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()).hexdigest()

    @property
    def digest(self) -> str:
        """Digest of everything except the output location."""
        return self._digest(("manifest", "model", "pretrain", "curriculum", "eval", "augment", "variant", "seed"))

    def stage_digest(self, stage: str) -> str:
        spec = AblationSpec(self.variant)
        if stage == "generate":
            return self._digest(("manifest", "seed"))
        if stage == "pretrain":
            return self._digest(("manifest", "model", "pretrain", "seed"))
        if stage == "curriculum":
            d = self.to_dict()
            payload = {k: d[k] for k in ("manifest", "model", "curriculum", "augment", "seed")}
            payload["curriculum"] = {**payload["curriculum"], **spec.curriculum_overrides()}
            payload["init"] = self.stage_digest("pretrain") if spec.runs_pretrain else "random"
            return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()
        if stage == "eval":
            return self.digest
        raise ValidationError(f"unknown stage {stage!r}")

    # -- resolved stage configs ----------------------------------------------

    @property
    def ablation(self) -> AblationSpec:
        return AblationSpec(self.variant)

    def pretrain_config(self) -> PretrainConfig:
        return replace(self.pretrain, seed=self.seed)

    def curriculum_config(self) -> CurriculumConfig:
        return replace(self.curriculum, seed=self.seed, **self.ablation.curriculum_overrides())

    def eval_config(self) -> EvalConfig:
        return replace(self.eval, seed=self.seed)

    def build_manifest(self) -> DatasetManifest:
        m = self.manifest
        return build_manifest(m.n_source_classes, m.n_target_classes, m.n_per_class, self.seed, m.domain_gap)


ALIASES = {
    "curriculum.tau": "curriculum.temperature",
    "curriculum.alpha": "curriculum.teacher_momentum",
    "curriculum.beta": "curriculum.student_lr",
    "curriculum.lr": "curriculum.student_lr",
    "eval.k": "eval.shot",
    "eval.n": "eval.way",
}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: ExperimentConfig, overrides: dict[str, str]) -> ExperimentConfig:
    """Apply ``section.field=value`` overrides; values are parsed as JSON when possible."""
    d = cfg.to_dict()
    for raw_key, value in overrides.items():
        key = ALIASES.get(raw_key, raw_key)
        parts = key.split(".")
        node = d
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ValidationError(f"unknown config path {raw_key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ValidationError(f"unknown config path {raw_key!r}")
        node[parts[-1]] = _parse_value(value) if isinstance(value, str) else value
    return ExperimentConfig.from_dict(d)


# ---------------------------------------------------------------------------
# artifacts


def _write_json(path: Path, obj) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    os.replace(tmp, path)


def _write_jsonl(path: Path, records: list[dict], cfg: ExperimentConfig) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("w") as fh:
        for r in records:
            fh.write(json.dumps({**r, "config_digest": cfg.digest, "seed": cfg.seed}, sort_keys=True) + "\n")
    os.replace(tmp, path)


def read_jsonl(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


TIMING_FIELDS = frozenset({"wall_ms"})


def strip_timing(records: list[dict]) -> list[dict]:
    return [{k: v for k, v in r.items() if k not in TIMING_FIELDS} for r in records]


@dataclass
class RunArtifacts:
    root: Path

    @property
    def config(self) -> Path:
        return self.root / "config.json"

    @property
    def manifest(self) -> Path:
        return self.root / "manifest.json"

    @property
    def pretrain_ckpt(self) -> Path:
        return self.root / "pretrain.ckpt"

    @property
    def pretrain_metrics(self) -> Path:
        return self.root / "pretrain_metrics.jsonl"

    @property
    def curriculum_ckpt(self) -> Path:
        return self.root / "curriculum.ckpt"

    @property
    def curriculum_metrics(self) -> Path:
        return self.root / "curriculum_metrics.jsonl"

    @property
    def eval_report(self) -> Path:
        return self.root / "eval_report.json"

    @property
    def episodes(self) -> Path:
        return self.root / "episodes.csv"


def _load_matching(path: Path, stage: str, digest: str) -> ckptmod.Checkpoint | None:
    if not path.exists():
        return None
    ck = ckptmod.load(path)
    if ck.stage != stage or ck.digest != digest:
        return None
    return ck


# ---------------------------------------------------------------------------
# stages


class Pipeline:
    """One experiment run rooted at ``cfg.out_dir``.

    ``cache_dir`` (optional) holds finished stage checkpoints keyed by stage
    digest, so runs that agree on everything a stage depends on share it.
    """

    def __init__(self, cfg: ExperimentConfig, cache_dir: str | Path | None = None, checkpoint_every: int = 1):
        self.cfg = cfg
        self.paths = RunArtifacts(Path(cfg.out_dir))
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        self.checkpoint_every = max(1, int(checkpoint_every))
        self._datasets: Datasets | None = None

    # -- stage 0 -----------------------------------------------------------

    def generate(self) -> DatasetManifest:
        self.paths.root.mkdir(parents=True, exist_ok=True)
        _write_json(self.paths.config, {**self.cfg.to_dict(), "config_digest": self.cfg.digest})
        manifest = self.cfg.build_manifest()
        doc = {**manifest.to_dict(), "config_digest": self.cfg.digest, "global_seed": self.cfg.seed}
        _write_json(self.paths.manifest, doc)
        return manifest

    def _manifest(self) -> DatasetManifest:
        if not self.paths.manifest.exists():
            raise MissingDependencyError(f"stage 'generate' has not produced {self.paths.manifest}")
        doc = json.loads(self.paths.manifest.read_text())
        doc.pop("config_digest", None)
        doc.pop("global_seed", None)
        return DatasetManifest.from_dict(doc)

    def datasets(self) -> Datasets:
        if self._datasets is None:
            self._datasets = Datasets.from_manifest(self._manifest(), self.cfg.model.clip)
        return self._datasets

    # -- stage 1 -----------------------------------------------------------

    def _pretrain_checkpoint(self, state: PretrainState) -> ckptmod.Checkpoint:
        return ckptmod.Checkpoint(
            digest=self.cfg.stage_digest("pretrain"),
            stage="pretrain",
            epoch=state.epoch,
            tensors=ckptmod.pack({"params": state.params, "momentum": state.momentum}),
            meta={"log": state.log, "config_digest": self.cfg.digest, "global_seed": self.cfg.seed},
        )

    def _cache_file(self, stage: str) -> Path | None:
        if self.cache_dir is None:
            return None
        return self.cache_dir / f"{stage}-{self.cfg.stage_digest(stage)[:20]}.ckpt"

    def _adopt_cached(self, stage: str, dest: Path) -> None:
        """Copy a finished stage result from the cache, re-tagged with this run's provenance."""
        cached = self._cache_file(stage)
        if cached is None or dest.exists() or not cached.exists():
            return
        ck = _load_matching(cached, stage, self.cfg.stage_digest(stage))
        if ck is None:
            return
        ck.meta.update(config_digest=self.cfg.digest, global_seed=self.cfg.seed)
        self.paths.root.mkdir(parents=True, exist_ok=True)
        ckptmod.save(ck, dest)

    def _publish(self, stage: str, ck: ckptmod.Checkpoint) -> None:
        cached = self._cache_file(stage)
        if cached is not None:
            cached.parent.mkdir(parents=True, exist_ok=True)
            ckptmod.save(ck, cached)

    def pretrain(self) -> PretrainState:
        cfg = self.cfg
        digest = cfg.stage_digest("pretrain")
        pcfg = cfg.pretrain_config()
        self._adopt_cached("pretrain", self.paths.pretrain_ckpt)
        ck = _load_matching(self.paths.pretrain_ckpt, "pretrain", digest)
        state = None
        if ck is not None:
            state = PretrainState(
                ck.params("params"),
                {k: v.copy() for k, v in ck.section("momentum").items()},
                ck.epoch,
                list(ck.meta.get("log", [])),
            )
            if state.epoch >= pcfg.epochs:
                _write_jsonl(self.paths.pretrain_metrics, state.log, cfg)
                return state

        def on_epoch(st: PretrainState, record: dict) -> None:
            if st.epoch % self.checkpoint_every == 0 or st.epoch == pcfg.epochs:
                ckptmod.save(self._pretrain_checkpoint(st), self.paths.pretrain_ckpt)
                _write_jsonl(self.paths.pretrain_metrics, st.log, cfg)

        data = self.datasets()
        reads_before = data.source.label_reads + data.target_unlabeled.label_reads
        state = run_pretraining(data, cfg.model, pcfg, state, on_epoch)
        if data.source.label_reads + data.target_unlabeled.label_reads != reads_before:
            raise CDFSLError("pretraining read labels")
        final = self._pretrain_checkpoint(state)
        ckptmod.save(final, self.paths.pretrain_ckpt)
        _write_jsonl(self.paths.pretrain_metrics, state.log, cfg)
        self._publish("pretrain", final)
        return state

    def _pretrained_encoder(self) -> ModelParams:
        ck = _load_matching(self.paths.pretrain_ckpt, "pretrain", self.cfg.stage_digest("pretrain"))
        if ck is None or ck.epoch < self.cfg.pretrain.epochs:
            raise MissingDependencyError(f"stage 'pretrain' has not produced a complete {self.paths.pretrain_ckpt}")
        return ck.params("params").without(["decoder"])

    def encoder_init(self) -> ModelParams:
        if self.cfg.ablation.runs_pretrain:
            return self._pretrained_encoder()
        return init_encoder(self.cfg.model, rngmod.stream(self.cfg.seed, "init", "encoder"), decoder=False)

    # -- stage 2 -----------------------------------------------------------

    def _curriculum_checkpoint(self, state: CurriculumState) -> ckptmod.Checkpoint:
        return ckptmod.Checkpoint(
            digest=self.cfg.stage_digest("curriculum"),
            stage="curriculum",
            epoch=state.epoch,
            tensors=ckptmod.pack(
                {
                    "encoder": state.encoder,
                    "student": state.student,
                    "teacher": state.teacher.params,
                    "momentum": state.momentum,
                }
            ),
            meta={
                "log": state.log,
                "teacher_updates": state.teacher.update_count,
                "config_digest": self.cfg.digest,
                "global_seed": self.cfg.seed,
            },
        )

    def curriculum(self) -> CurriculumState:
        cfg = self.cfg
        ccfg = cfg.curriculum_config()
        self._adopt_cached("curriculum", self.paths.curriculum_ckpt)
        ck = _load_matching(self.paths.curriculum_ckpt, "curriculum", cfg.stage_digest("curriculum"))
        state = None
        if ck is not None:
            state = CurriculumState(
                ck.params("student"),
                TeacherState(ck.params("teacher"), int(ck.meta.get("teacher_updates", 0))),
                {k: v.copy() for k, v in ck.section("momentum").items()},
                ck.epoch,
                list(ck.meta.get("log", [])),
            )
            if state.epoch >= ccfg.epochs:
                _write_jsonl(self.paths.curriculum_metrics, state.log, cfg)
                return state
        init = self.encoder_init()

        def on_epoch(st: CurriculumState, record: dict) -> None:
            if st.epoch % self.checkpoint_every == 0 or st.epoch == ccfg.epochs:
                ckptmod.save(self._curriculum_checkpoint(st), self.paths.curriculum_ckpt)
                _write_jsonl(self.paths.curriculum_metrics, st.log, cfg)

        state = run_curriculum(init, self.datasets(), cfg.model, ccfg, state, cfg.augment, on_epoch)
        final = self._curriculum_checkpoint(state)
        ckptmod.save(final, self.paths.curriculum_ckpt)
        _write_jsonl(self.paths.curriculum_metrics, state.log, cfg)
        self._publish("curriculum", final)
        return state

    def final_encoder(self) -> ModelParams:
        if not self.cfg.ablation.runs_curriculum:
            return self._pretrained_encoder()
        ck = _load_matching(self.paths.curriculum_ckpt, "curriculum", self.cfg.stage_digest("curriculum"))
        if ck is None or ck.epoch < self.cfg.curriculum.epochs:
            raise MissingDependencyError(
                f"stage 'curriculum' has not produced a complete {self.paths.curriculum_ckpt}"
            )
        return ck.params("encoder")

    # -- stage 3 -----------------------------------------------------------

    def features(self, encoder: ModelParams | None = None) -> tuple[np.ndarray, list[np.ndarray]]:
        encoder = self.final_encoder() if encoder is None else encoder
        test = self.datasets().target_test
        return extract_features(encoder, test.clips(), self.cfg.model), test.indices_by_class()

    def evaluate(self, eval_cfg: EvalConfig | None = None, write: bool = True) -> EvalReport:
        ecfg = eval_cfg or self.cfg.eval_config()
        feats, by_class = self.features()
        report = evaluate_features(feats, by_class, ecfg)
        if write:
            doc = {
                **report.to_dict(),
                "variant": self.cfg.variant,
                "config_digest": self.cfg.digest,
                "global_seed": self.cfg.seed,
            }
            _write_json(self.paths.eval_report, doc)
            with self.paths.episodes.open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["episode_index", "accuracy", "config_digest", "seed"])
                for i, a in enumerate(report.accuracies):
                    w.writerow([i, repr(a), self.cfg.digest, self.cfg.seed])
        return report

    # -- orchestration -------------------------------------------------------

    def run(self, stages: tuple[str, ...] = STAGES) -> EvalReport | None:
        report = None
        for stage in stages:
            if stage not in STAGES:
                raise ValidationError(f"unknown stage {stage!r}")
            try:
                if stage == "generate":
                    self.generate()
                elif stage == "pretrain":
                    if self.cfg.ablation.runs_pretrain:
                        self.pretrain()
                elif stage == "curriculum":
                    if self.cfg.ablation.runs_curriculum:
                        self.curriculum()
                else:
                    report = self.evaluate()
            except CDFSLError as exc:
                exc.stage = stage
                raise
        return report


def run_pipeline(cfg: ExperimentConfig, stages: tuple[str, ...] = STAGES, cache_dir: str | Path | None = None) -> EvalReport | None:
    return Pipeline(cfg, cache_dir).run(stages)


def load_report(run_dir: str | Path) -> dict:
    return json.loads((Path(run_dir) / "eval_report.json").read_text())


# ---------------------------------------------------------------------------
# sweeps


def max_workers() -> int:
    raw = os.environ.get("CDFSL_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValidationError(f"CDFSL_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ValidationError("CDFSL_THREADS must be at least 1")
    return n


def _run_cell(args: tuple[dict, str | None]) -> dict:
    cfg_dict, cache = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    try:
        report = run_pipeline(cfg, cache_dir=cache)
        return {"status": "ok", "mean": report.mean, "ci95": report.ci95}
    except CDFSLError as exc:
        return {"status": "failed", "error": f"{type(exc).__name__}: {exc}", "mean": None, "ci95": None}


def _map_cells(cells: list[ExperimentConfig], cache: Path | None) -> list[dict]:
    jobs = [(c.to_dict(), str(cache) if cache else None) for c in cells]
    workers = min(max_workers(), len(jobs))
    if workers <= 1:
        return [_run_cell(j) for j in jobs]
    with ProcessPoolExecutor(workers) as pool:
        return list(pool.map(_run_cell, jobs))


def _prewarm_pretraining(cfgs: list[ExperimentConfig], cache: Path) -> None:
    """Run each distinct stage-1 config once so parallel cells can share it."""
    seen, firsts = set(), []
    for c in cfgs:
        if c.ablation.runs_pretrain and c.stage_digest("pretrain") not in seen:
            seen.add(c.stage_digest("pretrain"))
            firsts.append(replace(c, out_dir=str(Path(c.out_dir).parent / "_pretrain" / f"seed{c.seed}")))
    if len(firsts) > 1 and max_workers() > 1:
        _map_cells([replace(c, variant="ssl_only") for c in firsts], cache)


def _summary(values: list[float | None]) -> dict:
    ok = [v for v in values if v is not None]
    return {
        "per_seed": values,
        "mean": float(np.mean(ok)) if ok else None,
        "std": float(np.std(ok, ddof=1)) if len(ok) > 1 else 0.0,
        "n_ok": len(ok),
    }


@dataclass
class SweepTable:
    """Cells keyed by (row, seed) plus per-row aggregates over seeds."""

    name: str
    key: str
    cells: list[dict]
    rows: list[dict]
    extra: dict = field(default_factory=dict)

    def row(self, value) -> dict:
        for r in self.rows:
            if r[self.key] == value:
                return r
        raise KeyError(value)

    def means(self) -> dict:
        return {r[self.key]: r["mean"] for r in self.rows}

    def to_dict(self) -> dict:
        return {"name": self.name, "key": self.key, "cells": self.cells, "rows": self.rows, **self.extra}

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / f"{self.name}.json", self.to_dict())
        with (out / f"{self.name}.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([self.key, "seed", "mean", "ci95", "status"])
            for c in self.cells:
                w.writerow([c[self.key], c["seed"], c["mean"], c["ci95"], c["status"]])


def _table(name: str, key: str, values: list, seeds: list[int], results: list[dict], extra=None) -> SweepTable:
    cells, rows = [], []
    it = iter(results)
    for v in values:
        accs = []
        for s in seeds:
            r = next(it)
            cells.append({key: v, "seed": s, **r})
            accs.append(r["mean"])
        rows.append({key: v, **_summary(accs)})
    return SweepTable(name, key, cells, rows, extra or {})


def _seeds(seeds) -> list[int]:
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValidationError("at least one seed is required")
    return seeds


def run_ablation_matrix(cfg: ExperimentConfig, variants, seeds, out_dir: str | Path, cache_dir: str | Path | None = None) -> SweepTable:
    variants, seeds = list(variants), _seeds(seeds)
    if not variants:
        raise ValidationError("variants must be non-empty")
    for v in variants:
        AblationSpec(v)
    out = Path(out_dir)
    cache = Path(cache_dir) if cache_dir is not None else out / "_cache"
    cells = [replace(cfg, variant=v, seed=s, out_dir=str(out / v / f"seed{s}")) for v in variants for s in seeds]
    _prewarm_pretraining(cells, cache)
    table = _table("ablation", "variant", variants, seeds, _map_cells(cells, cache))
    table.write(out)
    return table


def spearman(x, y) -> float:
    from scipy.stats import spearmanr

    rho = spearmanr(x, y).statistic
    return float(rho) if np.isfinite(rho) else 0.0


def run_temperature_sweep(cfg: ExperimentConfig, taus, seeds, out_dir: str | Path, cache_dir: str | Path | None = None) -> SweepTable:
    taus, seeds = [float(t) for t in taus], _seeds(seeds)
    if not taus or any(not t > 0 for t in taus):
        raise ValidationError("temperatures must be positive")
    out = Path(out_dir)
    cache = Path(cache_dir) if cache_dir is not None else out / "_cache"
    cells = [
        replace(
            cfg,
            variant="full",
            seed=s,
            curriculum=replace(cfg.curriculum, temperature=t),
            out_dir=str(out / f"tau{t:g}" / f"seed{s}"),
        )
        for t in taus
        for s in seeds
    ]
    _prewarm_pretraining(cells, cache)
    table = _table("temperature", "tau", taus, seeds, _map_cells(cells, cache))
    pairs = [(c["tau"], c["mean"]) for c in table.cells if c["mean"] is not None]
    rho = spearman([p[0] for p in pairs], [p[1] for p in pairs]) if len(pairs) > 1 else 0.0
    # the reported trend is "accuracy tends to fall as temperature grows"
    table.extra = {"spearman_rho": rho, "trend_ok": rho <= 0.0}
    table.write(out)
    return table


def run_kshot_sweep(cfg: ExperimentConfig, ks, seeds, out_dir: str | Path, cache_dir: str | Path | None = None) -> SweepTable:
    ks, seeds = [int(k) for k in ks], _seeds(seeds)
    if not ks or any(k < 1 for k in ks):
        raise ValidationError("every K must be at least 1")
    need = max(ks) + cfg.eval.query
    if need > cfg.manifest.n_per_class:
        raise CapacityError(f"K={max(ks)} plus {cfg.eval.query} queries exceeds {cfg.manifest.n_per_class} clips per class")
    out = Path(out_dir)
    cache = Path(cache_dir) if cache_dir is not None else out / "_cache"
    results: dict[tuple[int, int], dict] = {}
    for s in seeds:
        pipe = Pipeline(replace(cfg, seed=s, out_dir=str(out / "runs" / f"seed{s}")), cache)
        pipe.run(STAGES[:3])
        feats, by_class = pipe.features()
        for k in ks:
            rep = evaluate_features(feats, by_class, replace(pipe.cfg.eval_config(), shot=k))
            results[(k, s)] = {"status": "ok", "mean": rep.mean, "ci95": rep.ci95}
    table = _table("kshot", "k", ks, seeds, [results[(k, s)] for k in ks for s in seeds])
    table.write(out)
    return table


def run_source_size_sweep(cfg: ExperimentConfig, counts, seeds, out_dir: str | Path, cache_dir: str | Path | None = None) -> SweepTable:
    counts, seeds = [int(c) for c in counts], _seeds(seeds)
    total = 28
    for c in counts:
        if c < 1 or c + cfg.manifest.n_target_classes > total:
            raise CapacityError(f"{c} source classes plus {cfg.manifest.n_target_classes} target exceed the catalog")
    out = Path(out_dir)
    cache = Path(cache_dir) if cache_dir is not None else out / "_cache"
    cells = [
        replace(
            cfg,
            seed=s,
            manifest=replace(cfg.manifest, n_source_classes=c),
            out_dir=str(out / f"n{c}" / f"seed{s}"),
        )
        for c in counts
        for s in seeds
    ]
    _prewarm_pretraining(cells, cache)
    table = _table("source_size", "n_source_classes", counts, seeds, _map_cells(cells, cache))
    table.write(out)
    return table
