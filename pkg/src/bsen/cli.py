"""Command-line entry point: ``bsen {synth,train,extract,classify,roi,report,selfcheck}``.

Settings resolve as flags > ``--config`` TOML file > defaults. Exit codes:
0 success, 1 usage or configuration error, 2 data error or failed self-check.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .checkpoint import CheckpointError, canonical_json, load_checkpoint, save_checkpoint
from .classify import FoldPlan, LeakageGuard, cross_validate, stratified_folds
from .errors import ConfigError, DataError
from .features import Extractor, FeatureVector, extract_features, read_feature_table, write_feature_table
from .model import BehaviorTest, BsenConfig
from .pipeline import (EXTRACTORS, NEURAL, ExperimentConfig, baseline_features, checkpoint_name,
                       prepare_cohort, train_fold_models)
from .roi import discriminative_report
from .synth import SynthSpec, generate_cohort
from .volume_io import LABELS, Atlas, Volume3D, load_atlas, load_manifest, pad_volume

log = logging.getLogger("bsen")

TABLE_ORDER = ("ICA", "PCA", "CAE", "BSEN_CDR", "BSEN_MMSE", "BSEN_Fusion")
FLAG_KEYS = ("seed", "alpha", "epochs", "batch_size", "lr_stage1", "lr_stage2", "folds", "extractors",
             "fusion_weights", "stats_correction", "alpha_level", "behavior", "window", "input_dims")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# parsing helpers


def _ints(text: str, n: int, what: str) -> tuple:
    try:
        vals = tuple(int(v) for v in str(text).split(","))
    except ValueError:
        raise UsageError(f"{what}: expected {n} comma-separated integers, got {text!r}") from None
    if len(vals) != n:
        raise UsageError(f"{what}: expected {n} comma-separated integers, got {text!r}")
    return vals


def _floats(text, n: int, what: str) -> tuple:
    if isinstance(text, (list, tuple)):
        vals = tuple(float(v) for v in text)
    else:
        try:
            vals = tuple(float(v) for v in str(text).split(","))
        except ValueError:
            raise UsageError(f"{what}: expected {n} comma-separated numbers, got {text!r}") from None
    if len(vals) != n:
        raise UsageError(f"{what}: expected {n} comma-separated numbers, got {text!r}")
    return vals


def _extractor_list(value) -> List[str]:
    items = value if isinstance(value, (list, tuple)) else str(value).split(",")
    out = []
    for item in items:
        key = item.strip().upper()
        if key in ("FUSION", "BSEN_FUSION"):
            key = "BSEN_Fusion"
        if key not in TABLE_ORDER:
            raise UsageError(f"unknown extractor {item!r}; choose from ica,pca,cae,bsen_cdr,bsen_mmse,fusion")
        out.append(key)
    return out


def _resolve(args) -> Dict[str, object]:
    """Merge defaults < TOML file < flags into one flat settings dict."""
    settings: Dict[str, object] = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise DataError(f"config file not found: {path}")
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise UsageError(f"{path}: invalid TOML ({exc})") from None
        unknown = set(data) - set(FLAG_KEYS)
        if unknown:
            raise UsageError(f"{path}: unknown key(s) {sorted(unknown)}")
        settings.update(data)
    for key in FLAG_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            settings[key] = val
    return settings


def _infer_dims(dataset) -> tuple:
    vol = dataset.volume(dataset.ids[0])
    dims = vol.dims if hasattr(vol, "dims") else vol.data.shape[-3:]
    return tuple(int(-(-d // 8) * 8) for d in dims)


def build_config(settings: Dict[str, object], dataset=None) -> ExperimentConfig:
    m = BsenConfig()
    if "input_dims" in settings:
        dims = settings["input_dims"]
        m.input_dims = tuple(dims) if isinstance(dims, (list, tuple)) else _ints(dims, 3, "--input-dims")
    elif dataset is not None:
        m.input_dims = _infer_dims(dataset)
    for key in ("seed", "epochs", "batch_size"):
        if key in settings:
            setattr(m, key, int(settings[key]))
    for key in ("alpha", "lr_stage1", "lr_stage2"):
        if key in settings:
            setattr(m, key, float(settings[key]))
    cfg = ExperimentConfig(model=m)
    if "window" in settings:
        w = settings["window"]
        cfg.window = tuple(w) if isinstance(w, (list, tuple)) else _ints(w, 2, "--window")
    if "folds" in settings:
        cfg.folds = int(settings["folds"])
    if "fusion_weights" in settings:
        cfg.fusion_weights = _floats(settings["fusion_weights"], 2, "--fusion-weights")
    if "stats_correction" in settings:
        cfg.correction = str(settings["stats_correction"])
    if "alpha_level" in settings:
        cfg.alpha_level = float(settings["alpha_level"])
    behavior = str(settings.get("behavior", "both")).lower()
    if behavior not in ("cdr", "mmse", "both"):
        raise UsageError(f"--behavior must be cdr, mmse or both, got {behavior!r}")
    neural = ["CAE"] + [f"BSEN_{b.upper()}" for b in (("cdr", "mmse") if behavior == "both" else (behavior,))]
    cfg.extractors = tuple(e for e in EXTRACTORS if e in ("PCA", "ICA") or e in neural)
    if m.alpha < 0 or m.delta <= 0:
        raise ConfigError("alpha must be >= 0")
    cfg.validate()
    return cfg


def _stamp(cfg: ExperimentConfig) -> str:
    return f"config_hash={cfg.hash()} seed={cfg.seed}"


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _require(path: Optional[str], flag: str) -> Path:
    if not path:
        raise UsageError(f"missing required flag {flag}")
    p = Path(path)
    if not p.exists():
        raise DataError(f"{flag}: file not found: {p}")
    return p


def _out(args) -> Path:
    if not args.out:
        raise UsageError("missing required flag --out")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_run(out: Path):
    run_path = out / "run_config.json"
    if not run_path.is_file():
        raise DataError(f"{run_path} not found; run `bsen train` with this --out first")
    run = json.loads(run_path.read_text())
    cfg = ExperimentConfig.from_dict(run["config"])
    plan = FoldPlan([list(f) for f in run["folds"]["folds"]], run["folds"]["seed"])
    return cfg, plan


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    out = _out(args)
    spec = SynthSpec(seed=args.seed if args.seed is not None else 0)
    if args.dims:
        spec.dims = _ints(args.dims, 3, "--dims")
    if args.nt:
        spec.nt = args.nt
    if args.subjects:
        spec.n_per_class = _ints(args.subjects, 3, "--subjects")
    if args.noise_sd is not None:
        spec.noise_sd = args.noise_sd
    if args.subject_sd is not None:
        spec.subject_sd = args.subject_sd
    if args.regions:
        spec.n_regions = args.regions
    try:
        spec.validate()
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    cohort = generate_cohort(spec)
    manifest = cohort.write(out)
    print(f"wrote {len(cohort.dataset)} subjects to {manifest}")
    return 0


def cmd_train(args) -> int:
    dataset = load_manifest(_require(args.manifest, "--manifest"))
    out = _out(args)
    cfg = build_config(_resolve(args), dataset)
    plan = stratified_folds(dataset, cfg.folds, cfg.seed)
    prepared = prepare_cohort(dataset, cfg)
    names = [e for e in cfg.extractors if e in NEURAL]
    guard = LeakageGuard()
    log_entries = []
    for i in range(plan.k):
        train_ids, test_ids = plan.split(i)
        guard.begin_fold(i, test_ids)
        models = train_fold_models(dataset, prepared, train_ids, cfg, names, guard)
        for name, fm in models.items():
            path = out / "checkpoints" / checkpoint_name(i, name)
            digest = save_checkpoint(fm.model, path, fm.centers, fm.behavior_test, fm.epochs_done,
                                     extra={"fold": i, "experiment_hash": cfg.hash()})
            log_entries.append({"fold": i, "model": name, "checkpoint": path.name, "payload_sha256": digest,
                                "history": fm.history})
            print(f"fold {i} {name}: {path}")
    _write_json(out / "run_config.json", {"config": cfg.to_dict(), "config_hash": cfg.hash(), "seed": cfg.seed,
                                          "manifest": str(Path(args.manifest).resolve()),
                                          "folds": plan.to_dict()})
    _write_json(out / "train_log.json", {"config_hash": cfg.hash(), "seed": cfg.seed, "runs": log_entries})
    return 0


def _fold_features(dataset, cfg: ExperimentConfig, plan: FoldPlan, out: Path, prepared=None):
    """Feature blocks per fold from saved checkpoints (neural) and fresh PCA/ICA fits."""
    prepared = prepare_cohort(dataset, cfg) if prepared is None else prepared
    blocks = []
    for i in range(plan.k):
        train_ids, test_ids = plan.split(i)
        feats = baseline_features(prepared, train_ids, test_ids, cfg, i, cfg.extractors)
        for name in (e for e in cfg.extractors if e in NEURAL):
            ckpt = out / "checkpoints" / checkpoint_name(i, name)
            if not ckpt.is_file():
                raise DataError(f"missing checkpoint {ckpt}; rerun `bsen train`")
            model, _, _ = load_checkpoint(ckpt)
            feats[name] = tuple(extract_features(model, np.stack([prepared.averages[s] for s in ids]))
                                for ids in (train_ids, test_ids))
        blocks.append(feats)
    return blocks


def cmd_extract(args) -> int:
    dataset = load_manifest(_require(args.manifest, "--manifest"))
    out = _out(args)
    cfg, plan = _load_run(out)
    blocks = _fold_features(dataset, cfg, plan, out)
    for i, feats in enumerate(blocks):
        train_ids, test_ids = plan.split(i)
        for name, (x_tr, x_te) in feats.items():
            rows = [FeatureVector(s, v, Extractor(name)) for s, v in zip(train_ids + test_ids, np.vstack([x_tr, x_te]))]
            path = out / "features" / f"fold{i}_{name.lower()}.tsv"
            write_feature_table(path, rows, header_comment=f"{_stamp(cfg)} fold={i} n_train={len(train_ids)}")
    print(f"wrote features for {plan.k} folds to {out / 'features'}")
    return 0


def _read_fold_features(out: Path, plan: FoldPlan, names: Sequence[str]):
    blocks = []
    for i in range(plan.k):
        train_ids, test_ids = plan.split(i)
        feats = {}
        for name in names:
            path = out / "features" / f"fold{i}_{name.lower()}.tsv"
            if not path.is_file():
                raise DataError(f"missing feature table {path}; run `bsen extract` first")
            table = {fv.subject_id: fv.values for fv in read_feature_table(path)}
            feats[name] = (np.stack([table[s] for s in train_ids]), np.stack([table[s] for s in test_ids]))
        blocks.append(feats)
    return blocks


def recall_table_rows(table: Dict[str, Dict[str, float]], columns: Sequence[str]) -> List[List[str]]:
    rows = [["class"] + list(columns)]
    for key in [lab.value for lab in LABELS] + ["UAR"]:
        rows.append([key] + [f"{table[c][key]:.2f}" for c in columns])
    return rows


def cmd_classify(args) -> int:
    dataset = load_manifest(_require(args.manifest, "--manifest"))
    out = _out(args)
    cfg, plan = _load_run(out)
    stamp = _stamp(cfg)  # hash of the training run; report options are recorded alongside
    if args.fusion_weights:
        cfg.fusion_weights = _floats(args.fusion_weights, 2, "--fusion-weights")
    wanted = _extractor_list(args.extractors) if args.extractors else list(TABLE_ORDER)
    names = [e for e in EXTRACTORS if e in wanted or (e in ("BSEN_CDR", "BSEN_MMSE") and "BSEN_Fusion" in wanted)]
    missing = [e for e in names if e not in cfg.extractors]
    if missing:
        raise DataError(f"extractor(s) {missing} were not trained in this run")
    blocks = _read_fold_features(out, plan, names)
    cv = cross_validate(dataset, plan, lambda i, tr, te, guard: blocks[i],
                        fusion=("BSEN_CDR", "BSEN_MMSE") if "BSEN_Fusion" in wanted else None,
                        fusion_weights=cfg.fusion_weights)
    table = cv.table()
    columns = [c for c in TABLE_ORDER if c in wanted and c in table]
    rows = recall_table_rows(table, columns)
    (out / "classification.tsv").write_text(
        f"# {stamp}\n" + "\n".join("\t".join(r) for r in rows) + "\n", encoding="utf-8")
    recall_lines = ["\t".join(r) for r in [("extractor", "fold", "class", "recall")] + cv.recall_rows(columns)]
    (out / "recalls.tsv").write_text(f"# {stamp}\n" + "\n".join(recall_lines) + "\n", encoding="utf-8")
    _write_json(out / "confusion.json", {"run": stamp, "fusion_weights": list(cfg.fusion_weights),
                                         "pooled": {k: cv.pooled[k].to_dict() for k in columns},
                                         "per_fold": {k: [cm.to_dict() for cm in cv.per_fold[k]] for k in columns}})
    md = [f"# Classification ({plan.k}-fold CV, pooled)", "", f"- {stamp}",
          f"- fusion weights: {cfg.fusion_weights[0]:g}, {cfg.fusion_weights[1]:g}", "",
          "| " + " | ".join(rows[0]) + " |", "|" + "---|" * len(rows[0])]
    md += ["| " + " | ".join(r) + " |" for r in rows[1:]]
    (out / "classification.md").write_text("\n".join(md) + "\n", encoding="utf-8")
    print("\n".join("\t".join(r) for r in rows))
    return 0


def cmd_roi(args) -> int:
    dataset = load_manifest(_require(args.manifest, "--manifest"))
    atlas_path = _require(args.atlas, "--atlas")
    names_path = Path(args.atlas_names) if args.atlas_names else atlas_path.with_name("atlas_names.tsv")
    out = _out(args)
    cfg, plan = _load_run(out)
    stamp = _stamp(cfg)
    if args.stats_correction:
        cfg.correction = args.stats_correction
    if args.alpha_level is not None:
        cfg.alpha_level = args.alpha_level
    atlas = load_atlas(atlas_path, _require(str(names_path), "--atlas-names"))
    if atlas.dims != cfg.model.input_dims:
        # atlas is on the raw data grid; pad it exactly like the volumes
        atlas = Atlas(pad_volume(atlas.label_volume, cfg.model.input_dims), atlas.names)
    prepared = prepare_cohort(dataset, cfg)
    recons: Dict[str, Dict[str, Volume3D]] = {}
    for name in (e for e in cfg.extractors if e in NEURAL):
        recons[name] = {}
        for i in range(plan.k):
            _, test_ids = plan.split(i)
            model, _, _ = load_checkpoint(out / "checkpoints" / checkpoint_name(i, name))
            rec = model.reconstruct(np.stack([prepared.averages[s] for s in test_ids])[:, None])
            recons[name].update({s: Volume3D(rec[j, 0]) for j, s in enumerate(test_ids)})
    report = discriminative_report(recons, dataset, atlas, cfg.alpha_level, cfg.correction,
                                   header={"run": stamp})
    report.write(out / "roi", header_comment=stamp)
    print(f"wrote {out / 'roi' / 'roi_report.md'}")
    return 0


def cmd_report(args) -> int:
    out = _out(args)
    cfg, plan = _load_run(out)
    parts = ["# BSEN run report", "", f"- {_stamp(cfg)}", f"- folds: {plan.k}", ""]
    for name in ("classification.md", "roi/roi_report.md"):
        path = out / name
        if path.is_file():
            parts.append(path.read_text(encoding="utf-8"))
        else:
            parts.append(f"_{name} not found; run the corresponding command._\n")
    (out / "report.md").write_text("\n".join(parts), encoding="utf-8")
    print(f"wrote {out / 'report.md'}")
    return 0


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_selfcheck
    checks = run_selfcheck(args.seed or 0)
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name}: {c.value:.3g} (limit {c.limit:g})")
    return 0 if all(c.passed for c in checks) else 2


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bsen", description="Behavior-score-embedded encoder pipeline")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, training=False):
        sp.add_argument("--manifest")
        sp.add_argument("--out")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--config", help="TOML file with defaults for any flag (underscored keys)")
        if training:
            sp.add_argument("--behavior", choices=["cdr", "mmse", "both"])
            sp.add_argument("--alpha", type=float, help="contrastive loss weight")
            sp.add_argument("--epochs", type=int)
            sp.add_argument("--batch-size", type=int)
            sp.add_argument("--lr-stage1", type=float)
            sp.add_argument("--lr-stage2", type=float)
            sp.add_argument("--folds", type=int)
            sp.add_argument("--window", help="start,end time window (1-based, inclusive)")
            sp.add_argument("--input-dims", help="padded x,y,z (multiples of 8)")

    s = sub.add_parser("synth", help="generate a synthetic cohort")
    s.add_argument("--out")
    s.add_argument("--seed", type=int)
    s.add_argument("--dims")
    s.add_argument("--nt", type=int)
    s.add_argument("--subjects", help="HC,MCI,AD counts")
    s.add_argument("--noise-sd", type=float)
    s.add_argument("--subject-sd", type=float, help="subject-field sd in units of --noise-sd")
    s.add_argument("--regions", type=int)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train CAE and BSEN models per fold")
    common(t, training=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("extract", help="write per-fold feature tables")
    common(e)
    e.set_defaults(func=cmd_extract)

    c = sub.add_parser("classify", help="SVM cross-validation, per-class recall and UAR table")
    common(c)
    c.add_argument("--extractors", help="comma list of ica,pca,cae,bsen_cdr,bsen_mmse,fusion")
    c.add_argument("--fusion-weights", help="w1,w2 for BSEN_CDR,BSEN_MMSE")
    c.set_defaults(func=cmd_classify)

    r = sub.add_parser("roi", help="HC vs AD ROI statistics on reconstructions")
    common(r)
    r.add_argument("--atlas")
    r.add_argument("--atlas-names")
    r.add_argument("--stats-correction", choices=["none", "holm", "bonferroni"])
    r.add_argument("--alpha-level", type=float)
    r.set_defaults(func=cmd_roi)

    rep = sub.add_parser("report", help="combine classification and ROI reports")
    rep.add_argument("--out")
    rep.add_argument("--seed", type=int)
    rep.set_defaults(func=cmd_report)

    sc = sub.add_parser("selfcheck", help="gradient checks and oracle tests")
    sc.add_argument("--seed", type=int)
    sc.set_defaults(func=cmd_selfcheck)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if not args.command:
            raise UsageError("bsen: choose a command: synth, train, extract, classify, roi, report, selfcheck")
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
