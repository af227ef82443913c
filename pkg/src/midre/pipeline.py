"""Config-driven experiment pipelines.

A run goes data -> evaluation model -> target model -> decoder -> attack ->
metrics/feature analysis. Trained models are cached under content hashes of
everything that determines them, so sweep cells share the evaluation model
and decoder and reruns skip finished stages.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import multiprocessing
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
import torch
import yaml

from . import attacks, featspace, metrics, nn, synthdata
from .erasing import ErasePolicy, FillKind, FillStrategy, Scheme
from .errors import ConfigError, MidreError

log = logging.getLogger(__name__)

DEFAULT_CONFIG: dict[str, Any] = {
    "seed": 0,
    "repeats": 3,
    "output": "runs/default",
    "cache": None,
    "dataset": {
        "num_identities": 32,
        "samples_per_identity": 20,
        "width": 32,
        "height": 32,
        "channels": 3,
        "test_per_identity": 4,
        "seed": None,
    },
    "target": {"arch": "ClassifierSmall",
               "train": {"epochs": 100, "batch_size": 64, "lr": 1e-3, "optimizer": "adam",
                         "weight_decay": 0.0, "epoch_budget_fraction": 1.0}},
    "eval": {"arch": "ClassifierEval",
             "train": {"epochs": 40, "batch_size": 64, "lr": 1e-3, "optimizer": "adam"}},
    "decoder": {"latent_dim": 64,
                "train": {"epochs": 150, "batch_size": 64, "lr": 1e-3, "kl_weight": 0.01}},
    "policy": {"scheme": "NoDefense"},
    "attack": {"strategy": "LatentSpace", "restarts": 8, "steps": 300, "step_size": 0.05,
               "lambda_tv": 1e-3, "lambda_l2": 1e-4, "adaptive": False, "adaptive_policy": None,
               "samples_per_identity": 1},
    "metrics": {"knn": True, "ffd": True, "featspace": True, "featspace_identities": None,
                "analysis_policy": None},
}


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def set_key(cfg: dict, dotted: str, value: Any) -> None:
    """Apply one ``--set a.b.c=value`` override; ``value`` is parsed as YAML."""
    if isinstance(value, str):
        value = yaml.safe_load(value) if value != "" else ""
    node = cfg
    parts = dotted.split(".")
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            node[p] = {}
        node = node[p]
    node[parts[-1]] = value


def load_config(path: Optional[str] = None, overrides: Sequence[str] = (), **top) -> "ExperimentConfig":
    raw: dict[str, Any] = {}
    if path:
        try:
            raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
    cfg = deep_merge(DEFAULT_CONFIG, raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        k, v = item.split("=", 1)
        set_key(cfg, k.strip(), v)
    for k, v in top.items():
        if v is not None:
            cfg[k] = v
    return ExperimentConfig.from_dict(cfg)


def _digest(obj: Any) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _file_sha(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class ExperimentConfig:
    raw: dict[str, Any]
    policy: ErasePolicy
    attack: attacks.AttackConfig
    target_train: nn.TrainConfig
    eval_train: nn.TrainConfig
    decoder_train: nn.TrainConfig
    samples_per_attack: int = 1
    output: Path = field(default_factory=lambda: Path("runs/default"))

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ExperimentConfig":
        d = deep_merge(DEFAULT_CONFIG, d)
        unknown = set(d) - set(DEFAULT_CONFIG)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if int(d["repeats"]) < 1:
            raise ConfigError("repeats must be >= 1")
        ds = d["dataset"]
        if ds["num_identities"] < 2 or ds["samples_per_identity"] <= ds["test_per_identity"]:
            raise ConfigError("dataset too small for the requested train/test split")
        policy = ErasePolicy.from_dict(d["policy"])
        atk = dict(d["attack"])
        spi = int(atk.pop("samples_per_identity", 1))
        if spi < 1:
            raise ConfigError("attack.samples_per_identity must be >= 1")
        atk["seed"] = int(d["seed"])
        attack_cfg = attacks.AttackConfig.from_dict(atk)
        return cls(
            raw=d, policy=policy, attack=attack_cfg,
            target_train=nn.TrainConfig.from_dict(d["target"]["train"]),
            eval_train=nn.TrainConfig.from_dict(d["eval"]["train"]),
            decoder_train=nn.TrainConfig.from_dict(d["decoder"]["train"]),
            samples_per_attack=spi,
            output=Path(d["output"]),
        )

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def data_seed(self) -> int:
        s = self.raw["dataset"].get("seed")
        return self.seed if s is None else int(s)

    def with_overrides(self, **changes) -> "ExperimentConfig":
        raw = copy.deepcopy(self.raw)
        for k, v in changes.items():
            set_key(raw, k, v)
        return ExperimentConfig.from_dict(raw)


STAGES = ("data", "train", "attack", "eval")


class StageError(MidreError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def _arch(name: str, in_shape, num_classes: int) -> nn.ArchSpec:
    if name == "ClassifierSmall":
        return nn.ArchSpec.classifier_small(in_shape, num_classes)
    if name == "ClassifierEval":
        return nn.ArchSpec.classifier_eval(in_shape, num_classes)
    raise ConfigError(f"unknown classifier arch {name!r}")


def resolve_fill(policy: ErasePolicy, train: synthdata.ImageBatch) -> ErasePolicy:
    """ChannelMean without explicit means takes the training split's means."""
    if policy.fill.kind is FillKind.CHANNEL_MEAN and policy.fill.channel_means is None:
        return policy.with_fill(FillStrategy(FillKind.CHANNEL_MEAN, channel_means=synthdata.channel_means(train)))
    return policy


class Pipeline:
    """One experiment cell; every stage is cached on disk by content hash."""

    def __init__(self, config: ExperimentConfig, cache_dir: Optional[Path] = None):
        self.config = config
        self.out = Path(config.output)
        self.cache = Path(cache_dir or config.raw.get("cache") or self.out / "cache")
        self.written: dict[str, str] = {}
        self.stages: list[dict[str, str]] = []

    # -- stages ---------------------------------------------------------

    def dataset(self) -> synthdata.DatasetBundle:
        ds = self.config.raw["dataset"]
        key = _digest({"v": 2, **ds, "seed": self.config.data_seed})
        path = self.cache / f"data-{key}"
        if (path / "private" / "meta.json").exists():
            bundle = synthdata.load_dataset(path)
        else:
            bundle = synthdata.generate_synthfaces(
                ds["num_identities"], ds["samples_per_identity"],
                (ds["width"], ds["height"], ds["channels"]), self.config.data_seed)
            synthdata.save_dataset(bundle, path)
        self._record(path, "data")
        self._data_key = key
        return bundle

    def splits(self, bundle):
        return synthdata.split_train_test(bundle.private, self.config.raw["dataset"]["test_per_identity"])

    def _cached_model(self, stage: str, key_obj: dict, build) -> tuple[nn.TrainedModel, str]:
        key = _digest(key_obj)
        path = self.cache / f"{stage}-{key}.pt"
        if path.exists():
            model = nn.load_checkpoint(path)
        else:
            model = build()
            tmp = path.with_suffix(".tmp")
            nn.save_checkpoint(model, tmp)
            tmp.replace(path)
        self._record(path, stage)
        return model, key

    def eval_model(self, train, test) -> tuple[nn.TrainedModel, str]:
        cfg = self.config
        arch = _arch(cfg.raw["eval"]["arch"], train.data.shape[1:], int(train.labels.max()) + 1)
        seed = cfg.seed + 100

        def build():
            m = nn.build_model(arch, seed)
            return nn.train_classifier(m, train, test, ErasePolicy.no_defense(), cfg.eval_train, seed)

        return self._cached_model("eval", {"data": self._data_key, "arch": arch.to_dict(),
                                           "train": cfg.eval_train.to_dict(), "seed": seed}, build)

    def target_model(self, train, test, policy: ErasePolicy) -> tuple[nn.TrainedModel, str]:
        cfg = self.config
        arch = _arch(cfg.raw["target"]["arch"], train.data.shape[1:], int(train.labels.max()) + 1)
        seed = cfg.seed + 300

        def build():
            m = nn.build_model(arch, seed)
            return nn.train_classifier(m, train, test, policy, cfg.target_train, seed)

        return self._cached_model("target", {"data": self._data_key, "arch": arch.to_dict(),
                                             "train": cfg.target_train.to_dict(), "policy": policy.to_dict(),
                                             "seed": seed}, build)

    def decoder(self, bundle) -> tuple[nn.TrainedModel, str]:
        cfg = self.config
        arch = nn.ArchSpec.decoder(bundle.public.data.shape[1:], cfg.raw["decoder"]["latent_dim"])
        seed = cfg.seed + 200
        return self._cached_model(
            "decoder", {"data": self._data_key, "arch": arch.to_dict(), "train": cfg.decoder_train.to_dict(),
                        "seed": seed},
            lambda: nn.train_decoder(bundle.public, arch, cfg.decoder_train, seed))

    # -- bookkeeping ----------------------------------------------------

    def _record(self, path: Path, stage: str) -> None:
        files = [path] if path.is_file() else sorted(p for p in path.rglob("*") if p.is_file())
        for f in files:
            try:
                name = str(f.relative_to(self.out))
            except ValueError:
                name = str(f)
            self.written[name] = _file_sha(f)
        self.stages.append({"stage": stage, "status": "ok"})

    def _write_json(self, name: str, obj: Any) -> Path:
        path = self.out / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        self._record(path, name)
        return path

    def _write_manifest(self, status: str, failed_stage: Optional[str] = None, error: str = "") -> Path:
        path = self.out / "manifest.json"
        files = {}
        if path.exists():
            # keep entries from earlier commands on the same output directory
            try:
                files = json.loads(path.read_text(encoding="utf-8")).get("files", {})
            except (OSError, json.JSONDecodeError):
                files = {}
            files = {k: v for k, v in files.items() if (self.out / k).exists() or Path(k).exists()}
        files.update(self.written)
        manifest = {"status": status, "files": dict(sorted(files.items())), "stages": self.stages}
        if failed_stage:
            manifest["failed_stage"] = failed_stage
            manifest["error"] = error
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    # -- full run -------------------------------------------------------

    def attack(self, T, G, t_key: str, train) -> tuple[attacks.AttackCollection, str]:
        atk = self.config.attack
        if atk.adaptive:
            atk = copy.copy(atk)
            atk.adaptive_policy = resolve_fill(atk.adaptive_policy, train)
        labels = sorted(set(int(l) for l in train.labels))
        key = _digest({"target": t_key, "attack": atk.to_dict(), "labels": labels,
                       "k": self.config.samples_per_attack})
        path = self.cache / f"attack-{key}.npz"
        if path.exists():
            coll = attacks.load_archive(path)
        else:
            coll = attacks.attack_all(T, G, labels, atk, self.config.samples_per_attack, target_id=t_key)
            tmp = path.with_suffix(".tmp")
            attacks.save_archive(coll, tmp)
            tmp.replace(path)
        self._record(path, "attack-archive")
        coll.save(self.out / "reconstructions")
        self._record(self.out / "reconstructions", "attack")
        return coll, atk.digest()

    def run(self, until: str = "eval", analysis_only: bool = False) -> dict[str, Any]:
        """Execute stages up to ``until`` ("data", "train", "attack" or "eval").

        ``analysis_only`` skips the attack metrics and writes only the
        feature-space outputs.
        """
        if until not in STAGES:
            raise ConfigError(f"unknown stage {until!r}")
        torch.set_num_threads(1)
        self.out.mkdir(parents=True, exist_ok=True)
        stage = "gen-data"
        report: dict[str, Any] = {}
        try:
            bundle = self.dataset()
            train, test = self.splits(bundle)
            policy = resolve_fill(self.config.policy, train)
            if until != "data":
                stage = "train-eval"
                E, e_key = self.eval_model(train, test)
                stage = "train-target"
                T, t_key = self.target_model(train, test, policy)
                stage = "train-decoder"
                needs_decoder = self.config.attack.strategy is attacks.Strategy.LATENT
                G, g_key = self.decoder(bundle) if needs_decoder else (None, None)
                report = {"acc": nn.accuracy(T, test), "eval_acc": nn.accuracy(E, test)}
            if until in ("attack", "eval"):
                stage = "attack"
                coll, a_key = self.attack(T, G, t_key, train)
            if until == "eval":
                stage = "analyze" if analysis_only else "eval"
                provenance = {"data": self._data_key, "eval": e_key, "target": t_key, "decoder": g_key,
                              "attack": a_key, "policy": policy.to_dict(), "seed": self.config.seed}
                if analysis_only:
                    analysis = self.analysis_policy(policy, train)
                    report = self.feature_analysis(T, bundle.private, analysis, coll)
                else:
                    report = self.evaluate(E, T, coll, bundle, train, test, policy, provenance)
        except Exception as e:  # noqa: BLE001 - surfaced with the stage name
            self._write_manifest("FAILED", stage, f"{type(e).__name__}: {e}")
            if isinstance(e, ConfigError):
                raise
            raise StageError(stage, e) from e
        self._write_manifest("ok")
        return report

    def evaluate(self, E, T, coll: attacks.AttackCollection, bundle, train, test, policy,
                 provenance: dict) -> dict[str, Any]:
        mcfg = self.config.raw["metrics"]
        recon = coll.as_batch()
        acc = nn.accuracy(T, test)
        att, ci = metrics.attack_accuracy(E, recon)
        feats_recon = nn.extract_features(E, recon)
        feats_priv = nn.extract_features(E, bundle.private)
        knn = float(metrics.nearest_same_identity(feats_recon, feats_priv).mean()) if mcfg["knn"] else 0.0
        ffd = metrics.frechet_feature_distance(feats_recon, feats_priv) if mcfg["ffd"] else 0.0
        rep = metrics.MetricsReport(acc=acc, att_acc=att, att_acc_ci=ci, knn_dist=knn, ffd=ffd,
                                    provenance=provenance)
        rep.provenance["failed_labels"] = sorted(coll.failed)
        if mcfg["featspace"]:
            analysis = self.analysis_policy(policy, train)
            fs = self.feature_analysis(T, bundle.private, analysis, coll)
            rep.hull_iou_recon_priv = fs["pooled"]["recon_priv"]
            rep.hull_iou_recon_re = fs["pooled"]["recon_re_priv"]
            rep.hull_iou_re_priv = fs["pooled"]["re_priv_priv"]
        out = rep.to_dict()
        self._write_json("metrics.json", out)
        return out

    def analysis_policy(self, policy: ErasePolicy, train) -> ErasePolicy:
        """Erasing used to produce erased-private images for the feature analysis.

        Defaults to the target's own policy, or a_e = 0.4 random erasing when
        the target is undefended or not region-based.
        """
        raw = self.config.raw["metrics"].get("analysis_policy")
        if raw:
            return resolve_fill(ErasePolicy.from_dict(raw), train)
        if policy.scheme in (Scheme.RANDOM_ERASE, Scheme.FIXED_ERASE):
            return ErasePolicy(Scheme.RANDOM_ERASE, policy.a_lo, policy.a_hi, policy.aspect, fill=policy.fill)
        return resolve_fill(ErasePolicy(Scheme.RANDOM_ERASE, 0.4, 0.4), train)

    def feature_analysis(self, T, private, analysis: ErasePolicy, coll: attacks.AttackCollection) -> dict:
        # every restart's final candidate is one MI reconstruction of its identity
        data = np.concatenate([r.candidates for r in coll.results])
        labels = np.concatenate([np.full(len(r.candidates), r.label) for r in coll.results])
        recon = synthdata.ImageBatch(data, labels)
        idents = self.config.raw["metrics"].get("featspace_identities")
        if idents is None:
            idents = sorted(set(int(l) for l in labels))
        rep = featspace.overlap_report(T, private, analysis, recon, idents, seed=self.config.seed,
                                       keep_projection=True)
        rows = []
        for ident, proj in rep.pop("projections").items():
            for (x, y), g in zip(proj.points, proj.groups):
                rows.append((f"{x:.6f}", f"{y:.6f}", g, ident))
        path = self.out / "projection.csv"
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["x", "y", "group", "identity"])
            w.writerows(rows)
        self._record(path, "projection")
        rep["per_identity"] = {str(k): v for k, v in rep["per_identity"].items()}
        rep["analysis_policy"] = analysis.to_dict()
        self._write_json("featspace.json", rep)
        return rep


def run_pipeline(config: ExperimentConfig, cache_dir: Optional[Path] = None) -> dict[str, Any]:
    return Pipeline(config, cache_dir).run()


# --- sweeps ----------------------------------------------------------------

def _cell(args) -> dict[str, Any]:
    raw, cache = args
    cfg = ExperimentConfig.from_dict(raw)
    try:
        rep = run_pipeline(cfg, Path(cache))
        return {"ok": True, "acc": rep["acc"], "att_acc": rep["att_acc"], "knn_dist": rep["knn_dist"],
                "hull_iou_recon_priv": rep["hull_iou_recon_priv"], "hull_iou_recon_re": rep["hull_iou_recon_re"]}
    except MidreError as e:
        log.error("cell %s failed: %s", cfg.output, e)
        return {"ok": False, "error": str(e)}


def _run_cells(cells: list[tuple[dict, str]], jobs: int) -> list[dict[str, Any]]:
    if jobs <= 1:
        return [_cell(c) for c in cells]
    ctx = multiprocessing.get_context("spawn")
    with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as ex:
        return list(ex.map(_cell, cells))


def point_policy(value: float, base: ErasePolicy) -> ErasePolicy:
    """Erasing with a_e pinned to ``value``; 0 means no erasing at all."""
    if value == 0:
        return ErasePolicy.no_defense()
    return ErasePolicy(Scheme.RANDOM_ERASE, value, value, base.aspect, fill=base.fill)


def range_policy(value: float, base: ErasePolicy) -> ErasePolicy:
    if value == 0:
        return ErasePolicy.no_defense()
    return ErasePolicy(Scheme.RANDOM_ERASE, min(base.a_lo, value), value, base.aspect, fill=base.fill)


def _base_fill_policy(config: ExperimentConfig) -> ErasePolicy:
    p = config.policy
    if p.scheme is Scheme.NO_DEFENSE:
        return ErasePolicy(Scheme.RANDOM_ERASE, 0.1, 0.4, fill=p.fill)
    return p


def _write_csv(path: Path, rows: list[dict[str, Any]], columns: Sequence[str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in columns})


def _median(vals: list[float]) -> Optional[float]:
    vals = [v for v in vals if v is not None]
    return statistics.median(vals) if vals else None


def trend_verdict(medians_att: list[float], medians_acc: list[float]) -> dict[str, Any]:
    att_drop = medians_att[0] - medians_att[-1]
    acc_drop = medians_acc[0] - medians_acc[-1]
    return {
        "att_acc_non_increasing": all(b <= a for a, b in zip(medians_att, medians_att[1:])),
        "att_acc_strictly_decreasing": all(b < a for a, b in zip(medians_att, medians_att[1:])),
        "att_acc_total_drop_points": 100 * att_drop,
        "acc_total_drop_points": 100 * acc_drop,
    }


SUMMARY_COLUMNS = ("policy", "a_h", "seed", "acc", "att_acc", "knn_dist", "hull_iou_recon_priv",
                   "hull_iou_recon_re", "status")


def sweep_ae(config: ExperimentConfig, values: Sequence[float], repeats: Optional[int] = None,
             mode: str = "point", jobs: int = 1) -> dict[str, Any]:
    """One pipeline cell per (value, seed); writes ``summary.csv`` and ``sweep.json``.

    ``mode="point"`` pins a_e to each value; ``mode="range"`` trains with
    a_e drawn from [a_lo, value].
    """
    if mode not in ("point", "range"):
        raise ConfigError(f"unknown sweep mode {mode!r}")
    for v in values:
        if not 0.0 <= v <= 1.0:
            raise ConfigError(f"sweep value {v} outside [0, 1]")
    repeats = repeats or int(config.raw["repeats"])
    base = _base_fill_policy(config)
    make = point_policy if mode == "point" else range_policy
    out, cache = config.output, config.raw.get("cache") or str(config.output / "cache")
    cells, keys = [], []
    for v in values:
        pol = make(v, base)
        for r in range(repeats):
            seed = config.seed + r
            raw = copy.deepcopy(config.raw)
            raw.update(seed=seed, policy=pol.to_dict(), output=str(out / "cells" / f"ae{v:g}_seed{seed}"))
            cells.append((raw, cache))
            keys.append((pol.scheme.value, v, seed))
    results = _run_cells(cells, jobs)
    rows = []
    for (name, v, seed), res in zip(keys, results):
        rows.append({"policy": name, "a_h": v, "seed": seed, "status": "ok" if res["ok"] else "FAILED",
                     **{k: res.get(k) for k in SUMMARY_COLUMNS if k in res}})
    _write_csv(out / "summary.csv", rows, SUMMARY_COLUMNS)
    med_att = [_median([r["att_acc"] for r in rows if r["a_h"] == v and r["status"] == "ok"]) for v in values]
    med_acc = [_median([r["acc"] for r in rows if r["a_h"] == v and r["status"] == "ok"]) for v in values]
    summary = {"values": list(values), "mode": mode, "median_att_acc": med_att, "median_acc": med_acc,
               "rows": rows}
    if None not in med_att and None not in med_acc and len(values) > 1:
        summary["verdict"] = trend_verdict(med_att, med_acc)
    (out / "sweep.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return summary


SCHEMES = ("RE", "FE", "EE")
SCHEME_COLUMNS = ("scheme", "concealment", "seed", "acc", "att_acc", "status")


def scheme_policy(scheme: str, level: float, base: ErasePolicy) -> ErasePolicy:
    """Matched-concealment policy: RE/FE pin a_e to ``level``, EE blanks that fraction of images."""
    if level == 0:
        return ErasePolicy.no_defense()
    if scheme == "RE":
        return ErasePolicy(Scheme.RANDOM_ERASE, level, level, base.aspect, fill=base.fill)
    if scheme == "FE":
        return ErasePolicy(Scheme.FIXED_ERASE, level, level, base.aspect, fill=base.fill)
    if scheme == "EE":
        return ErasePolicy(Scheme.ENTIRE_ERASE, ee_fraction=level, fill=base.fill)
    raise ConfigError(f"unknown scheme {scheme!r}")


def compare_schemes(config: ExperimentConfig, levels: Sequence[float], repeats: Optional[int] = None,
                    schemes: Sequence[str] = SCHEMES, jobs: int = 1) -> dict[str, Any]:
    """Acc/AttAcc for each erasure scheme at matched concealment levels; writes ``schemes.csv``."""
    repeats = repeats or int(config.raw["repeats"])
    base = _base_fill_policy(config)
    out, cache = config.output, config.raw.get("cache") or str(config.output / "cache")
    cells, keys = [], []
    for sch in schemes:
        for lv in levels:
            if not 0.0 <= lv <= 1.0:
                raise ConfigError(f"concealment level {lv} outside [0, 1]")
            pol = scheme_policy(sch, lv, base)
            for r in range(repeats):
                seed = config.seed + r
                raw = copy.deepcopy(config.raw)
                raw.update(seed=seed, policy=pol.to_dict(),
                           output=str(out / "cells" / f"{sch}{lv:g}_seed{seed}"))
                cells.append((raw, cache))
                keys.append((sch, lv, seed))
    results = _run_cells(cells, jobs)
    rows = [{"scheme": s, "concealment": lv, "seed": seed, "status": "ok" if res["ok"] else "FAILED",
             "acc": res.get("acc"), "att_acc": res.get("att_acc")}
            for (s, lv, seed), res in zip(keys, results)]
    _write_csv(out / "schemes.csv", rows, SCHEME_COLUMNS)
    table = []
    for sch in schemes:
        for lv in levels:
            sel = [r for r in rows if r["scheme"] == sch and r["concealment"] == lv and r["status"] == "ok"]
            table.append({"scheme": sch, "concealment": lv,
                          "median_acc": _median([r["acc"] for r in sel]),
                          "median_att_acc": _median([r["att_acc"] for r in sel])})
    summary = {"levels": list(levels), "schemes": list(schemes), "rows": rows, "table": table}
    (out / "schemes.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return summary
