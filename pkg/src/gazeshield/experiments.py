"""Experiment runners behind the CLI.

Each runner takes a resolved config and returns ``{relative path: bytes}``
for the files it emits; the CLI writes them atomically.  Reports hold no
wall-clock data, so a rerun with the same config, data and seed gives
byte-identical files.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import re
from pathlib import Path

import numpy as np

from . import FEATURE_NAMES, __version__
from . import assign as assign_mod
from . import cluster, federated, iforest, nn, trees
from .data import DataError, Dataset, LabelMap, SyntheticConfig, encode_labels, generate_synthetic, load_dataset
from .metrics import evaluate
from .preprocess import fit_scaler, pool_zscore, random_stratified_split, split_by_level, stratified_kfold
from .vault import DUMMY_PATTERN, Vault, VaultKeys

log = logging.getLogger(__name__)

Artifacts = dict[str, bytes]


def dump_json(doc) -> bytes:
    return (json.dumps(doc, indent=2, allow_nan=False) + "\n").encode("utf-8")


def _csv_bytes(rows) -> bytes:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue().encode("utf-8")


# data


def load_data(cfg: dict) -> tuple[Dataset, dict]:
    """Dataset named by the config (CSV file or synthetic generator) plus a summary block."""
    data = cfg["data"]
    if data.get("csv"):
        result = load_dataset(data["csv"], data.get("columns"))
        ds = result.dataset
        summary = {"source": "csv", "file": Path(data["csv"]).name,
                   "n_invalid": result.n_invalid, "n_duplicates": result.n_duplicates}
    else:
        syn = dict(data["synthetic"])
        syn["levels"] = tuple(syn["levels"])
        if syn.get("diagnosis_assignment") is not None:
            syn["diagnosis_assignment"] = {int(k): v for k, v in syn["diagnosis_assignment"].items()}
        try:
            ds = generate_synthetic(SyntheticConfig(seed=cfg["seed"], **syn))
        except ValueError as exc:
            raise DataError(f"synthetic config: {exc}") from None
        summary = {"source": "synthetic", "n_invalid": 0, "n_duplicates": 0}
    summary["n_rows"] = len(ds)
    summary["sha256"] = hashlib.sha256(ds.to_csv()).hexdigest()
    return ds, summary


def run_synth(cfg: dict) -> Artifacts:
    if cfg["data"].get("csv"):
        raise DataError("synth generates data; drop data.csv / --data")
    ds, summary = load_data(cfg)
    body = ds.to_csv()
    provenance = {
        "kind": "gazeshield.synth_provenance",
        "version": __version__,
        "seed": cfg["seed"],
        "synthetic": cfg["data"]["synthetic"],
        "dataset": summary,
    }
    return {"dataset.csv": body, "provenance.json": dump_json(provenance)}


# scenarios 1-3


def _fit_model(kind: str, params: dict, X, y, n_classes: int, seed: int):
    if kind == "rf":
        return trees.fit_forest(X, y, n_estimators=params["n_estimators"], max_depth=params["max_depth"],
                                min_samples_split=params["min_samples_split"], seed=seed, n_classes=n_classes)
    return trees.fit_tree(X, y, trees.TreeConfig(max_depth=params["max_depth"],
                                                 min_samples_split=params["min_samples_split"], seed=seed),
                          n_classes=n_classes)


def _classification(command: str, target: str, ds: Dataset, data_summary: dict, cfg: dict,
                    section: dict, plan) -> Artifacts:
    seed = cfg["seed"]
    X, y, labels = encode_labels(ds, target)
    tr, te = plan.train, plan.test
    scaler = fit_scaler(X[tr], section["scaler"])
    Xtr, Xte = scaler.transform(X[tr]), scaler.transform(X[te])
    try:
        folds = stratified_kfold(y[tr], k=section["cv_folds"], seed=seed)
    except ValueError as exc:
        raise DataError(f"cross-validation folds: {exc}") from None
    out: Artifacts = {}
    models = {}
    for kind in section["models"]:
        params = section[kind]
        cv = []
        for f in range(folds.k):
            ftr, fva = folds.split(f)
            m = _fit_model(kind, params, Xtr[ftr], y[tr][ftr], len(labels), seed)
            cv.append(float(np.mean(m.predict(Xtr[fva]) == y[tr][fva])))
        model = _fit_model(kind, params, Xtr, y[tr], len(labels), seed)
        report = evaluate(y[te], model.predict(Xte), labels.labels)
        imp = trees.feature_importance(model)
        models[kind] = {
            "test": report.to_dict(),
            "cv_accuracy": cv,
            "cv_mean": float(np.mean(cv)),
            "feature_importance": {name: float(v) for name, v in zip(FEATURE_NAMES, imp)},
        }
        out[f"confusion_{kind}.csv"] = report.confusion_csv().encode("utf-8")
        out[f"importance_{kind}.csv"] = _csv_bytes(
            [["feature", "importance"], *[[n, repr(float(v))] for n, v in zip(FEATURE_NAMES, imp)]])
        log.info("%s %s: test accuracy %.4f, cv mean %.4f", command, kind, report.accuracy, np.mean(cv))
    doc = {
        "kind": "gazeshield.classification_report",
        "command": command,
        "target": target,
        "config": {"seed": seed, command: section, "data": cfg["data"]},
        "dataset": data_summary,
        "split": {"description": plan.description, "n_train": len(tr), "n_test": len(te),
                  "n_excluded": plan.n_excluded},
        "scaler": scaler.kind,
        "labels": list(labels.labels),
        "models": models,
    }
    out["report.json"] = dump_json(doc)
    return out


def _level_plan(ds: Dataset, section: dict):
    present = set(np.unique(ds.game_level).tolist())
    missing = sorted((set(section["train_levels"]) | set(section["test_levels"])) - present)
    if missing:
        raise DataError(f"dataset has no rows for level(s) {missing}")
    try:
        return split_by_level(ds, section["train_levels"], section["test_levels"])
    except ValueError as exc:
        raise DataError(str(exc)) from None


def run_scenario1(cfg: dict, ds: Dataset, summary: dict) -> Artifacts:
    """Diagnosis prediction trained on some game levels, tested on the rest."""
    if np.any(ds.diagnosis == ""):
        raise DataError("diagnosis labels are missing")
    sec = cfg["scenario1"]
    return _classification("scenario1", "diagnosis", ds, summary, cfg, sec, _level_plan(ds, sec))


def run_scenario2(cfg: dict, ds: Dataset, summary: dict) -> Artifacts:
    """Student re-identification across game levels."""
    sec = cfg["scenario2"]
    return _classification("scenario2", "student_id", ds, summary, cfg, sec, _level_plan(ds, sec))


def run_scenario3(cfg: dict, ds: Dataset, summary: dict) -> Artifacts:
    """Student re-identification on a stratified random split."""
    sec = cfg["scenario3"]
    _, y, _ = encode_labels(ds, "student_id")
    try:
        plan = random_stratified_split(y, sec["train_frac"], cfg["seed"])
    except ValueError as exc:
        raise DataError(str(exc)) from None
    return _classification("scenario3", "student_id", ds, summary, cfg, sec, plan)


def gap_report(s2: dict, s3: dict, model: str) -> dict | None:
    """Random-split minus cross-level accuracy, if both reports used the same data and model."""
    if s2["dataset"]["sha256"] != s3["dataset"]["sha256"]:
        return None
    if model not in s2["models"] or model not in s3["models"]:
        return None
    a2 = s2["models"][model]["test"]["accuracy"]
    a3 = s3["models"][model]["test"]["accuracy"]
    return {"kind": "gazeshield.gap_report", "model": model, "dataset_sha256": s2["dataset"]["sha256"],
            "accuracy_scenario2": a2, "accuracy_scenario3": a3, "gap": a3 - a2}


# scenario 4


def run_scenario4(cfg: dict, ds: Dataset, summary: dict) -> Artifacts:
    """Hold out the highest-id student and run every id-assignment strategy on its samples."""
    sec = cfg["scenario4"]
    seed = cfg["seed"]
    ids = ds.student_ids
    if len(ids) < 2:
        raise DataError("scenario 4 needs at least 2 students")
    held = max(ids)
    known = ds.student_id != held
    Xk, idk, Xn = ds.features[known], ds.student_id[known], ds.features[~known]
    scaler = fit_scaler(Xk, "zscore")
    Zk, Zn = scaler.transform(Xk), scaler.transform(Xn)

    lo, hi = sec["k_range"]
    ks = [k for k in range(lo, hi + 1) if k < len(Zk)]
    if not ks:
        raise DataError("k range leaves no valid cluster count")
    models = cluster.fit_kmeans_range(Zk, ks, seed=seed, n_init=sec["n_init"])
    sil = {k: cluster.silhouette(Zk, models[k].labels) for k in ks}
    best_k = max(ks, key=lambda k: (sil[k], -k))  # highest silhouette, lowest k on ties
    km = models[best_k]
    tau = cluster.novelty_threshold(Zk, km, sec["novelty_percentile"], sec["novelty_tau"])
    ifs = sec["iforest"]
    forest = iforest.isolation_forest_fit(Zk, ifs["n_trees"], ifs["subsample_size"], seed, ifs["threshold"])
    ctx = assign_mod.AssignmentContext(Zk, idk, km, tau, forest, sec["confidence_threshold"])

    queries, tally = [], {s: {"new_id": 0, "matched": 0, "matched_ids": {}} for s in assign_mod.STRATEGIES}
    for i in range(len(Zn)):
        decisions = assign_mod.all_strategies(Zn[i], ctx, raw_features=Xn[i])
        queries.append({"index": i, "decisions": [d.to_dict() for d in decisions]})
        for d in decisions:
            t = tally[d.strategy]
            t[d.outcome] += 1
            if not d.is_new:
                t["matched_ids"][str(d.student_id)] = t["matched_ids"].get(str(d.student_id), 0) + 1
    n = len(Zn)
    for t in tally.values():
        t["new_fraction"] = t["new_id"] / n
        t["matched_ids"] = dict(sorted(t["matched_ids"].items(), key=lambda kv: int(kv[0])))
    scores = cluster.novelty_scores(Zn, km)

    pca = cluster.pca_fit(Zk, 2)
    pca_rows = [["student_id", "role", "pc1", "pc2"]]
    for role, Z, sids in (("known", Zk, idk), ("new", Zn, np.full(len(Zn), held))):
        for sid, (p1, p2) in zip(sids, pca.project(Z)):
            pca_rows.append([int(sid), role, repr(float(p1)), repr(float(p2))])
    curve = [(k, models[k].wcss) for k in ks]
    doc = {
        "kind": "gazeshield.assignment_report",
        "config": {"seed": seed, "scenario4": sec, "data": cfg["data"]},
        "dataset": summary,
        "held_out_id": int(held),
        "known_ids": [int(i) for i in ids if i != held],
        "selected_k": best_k,
        "wcss": {str(k): w for k, w in curve},
        "silhouette": {str(k): sil[k] for k in ks},
        "novelty": {"tau": tau.tau, "percentile": tau.percentile, "manual": tau.manual,
                    "held_out_exceed_fraction": float(np.mean(scores > tau.tau)),
                    "held_out_median_score": float(np.median(scores))},
        "pca_explained_variance_ratio": [float(r) for r in pca.explained_variance_ratio],
        "summary": tally,
        "queries": queries,
    }
    return {
        "decisions.json": dump_json(doc),
        "wcss.csv": cluster.curve_csv(curve, sil).encode("utf-8"),
        "pca.csv": _csv_bytes(pca_rows),
    }


# phase 2


def open_vault(path, passphrase: str, iterations: int) -> tuple[Vault, VaultKeys, bool]:
    """Load the vault at ``path`` (unlocking it) or create a new one there."""
    path = Path(path)
    if path.exists():
        vault = Vault.load(path)
        return vault, vault.unlock(passphrase), False
    vault, keys = Vault.create(passphrase, iterations=iterations)
    return vault, keys, True


def _redacted_data_config(data: dict) -> dict:
    # the diagnosis map and clone source are keyed by true ids
    data = copy.deepcopy(data)
    syn = data.get("synthetic", {})
    for key in ("diagnosis_assignment", "clone_of"):
        if syn.get(key) is not None:
            syn[key] = "<redacted>"
    return data


def run_phase2(cfg: dict, ds: Dataset, summary: dict, vault: Vault, keys: VaultKeys) -> Artifacts:
    """Dummy-labelled federated training and evaluation; true ids stay on this side of the vault."""
    sec = cfg["phase2"]
    seed = cfg["seed"]
    if sec["rotate_epoch"]:
        vault.rotate_epoch()
    dummy_of = vault.issue_many(ds.student_ids, keys)
    labels = LabelMap.fit(dummy_of.values())
    y = labels.encode([dummy_of[int(s)] for s in ds.student_id])
    plan = _level_plan(ds, sec)
    tr, te = plan.train, plan.test
    try:
        raw_clients = federated.partition_clients(ds.features[tr], y[tr], sec["n_clients"], seed)
    except ValueError as exc:
        raise DataError(f"client partition: {exc}") from None
    # each client shares only its count and feature moments
    scaler = pool_zscore([fit_scaler(c.X, "zscore") for c in raw_clients])
    clients = [federated.ClientDataset(c.client_id, scaler.transform(c.X), c.y, c.indices) for c in raw_clients]
    out: Artifacts = {}

    def checkpoint(rec, weights):
        out[f"weights/round_{rec.round_index:02d}.gzw"] = weights.to_bytes({"round": rec.round_index})

    result = federated.run_federated(clients, scaler.transform(ds.features[te]), y[te], n_rounds=sec["rounds"],
                                     n_folds=sec["folds"], epochs=sec["epochs"], seed=seed,
                                     num_classes=len(labels), mode=sec["aggregation"], on_round=checkpoint)
    report = evaluate(y[te], result.final_predictions, labels.labels)
    out["confusion.csv"] = report.confusion_csv().encode("utf-8")
    out["progression.csv"] = result.progression_csv().encode("utf-8")
    records = [r.to_dict() for r in result.records]
    doc = {
        "kind": "gazeshield.phase2_report",
        "config": {"seed": seed, "phase2": {k: v for k, v in sec.items() if k != "vault"},
                   "data": _redacted_data_config(cfg["data"])},
        "dataset": {k: v for k, v in summary.items()},
        "epoch": vault.epoch,
        "split": {"description": plan.description, "n_train": len(tr), "n_test": len(te)},
        "client_sizes": [c.size for c in clients],
        "rounds": records,
        "final_test_accuracy": records[-1]["test_accuracy"],
        "evaluation": report.to_dict(),
    }
    out["report.json"] = dump_json(doc)
    audit = privacy_audit(out, ds.student_ids, labels.labels)
    out["privacy_audit.json"] = dump_json(audit)
    return out


# privacy audit

_ID_FIELDS = ("student_id", "true_id")


def _walk_json(node, path, hits, tokens):
    if isinstance(node, dict):
        for k, v in node.items():
            if k in tokens or k in _ID_FIELDS:
                hits.append(f"{path}/<key>")
            _walk_json(v, f"{path}/{k}", hits, tokens)
    elif isinstance(node, list):
        for i, v in enumerate(node):
            _walk_json(v, f"{path}/{i}", hits, tokens)
    elif isinstance(node, str) and node in tokens:
        hits.append(path)


def _word_hits(blob: bytes, tokens) -> int:
    # whole-token matches: not adjacent to letters, digits or underscore
    return sum(len(re.findall(rb"(?<![A-Za-z0-9_])" + re.escape(t.encode()) + rb"(?![A-Za-z0-9_])", blob))
               for t in tokens)


def privacy_audit(files: Artifacts, true_ids, labels) -> dict:
    """Check emitted artifacts for true ids in label-bearing positions.

    JSON keys and string values, CSV headers, the row labels of confusion matrices, and
    weight-container headers must never equal a true id or name an id
    field.  Whole-token occurrences anywhere in text files are counted as
    well; with small integer ids these also hit ordinary numbers (round
    counts, confusion cells), so they are reported but do not fail the audit.
    """
    tokens = {str(int(i)) for i in true_ids}
    entries, violations = [], 0
    for name in sorted(files):
        blob = files[name]
        hits: list[str] = []
        if name.endswith(".json"):
            _walk_json(json.loads(blob), "", hits, tokens)
            text_hits = _word_hits(blob, tokens)
        elif name.endswith(".csv"):
            rows = list(csv.reader(io.StringIO(blob.decode("utf-8"))))
            cells = [("header", c) for c in rows[0]] if rows else []
            if rows and rows[0] and rows[0][0] == "true\\pred":  # label-indexed rows
                cells += [(f"row{i}", r[0]) for i, r in enumerate(rows[1:], 1) if r]
            hits += [where for where, c in cells if c in tokens or c in _ID_FIELDS]
            text_hits = _word_hits(blob, tokens)
        elif name.endswith(".gzw"):
            layout = nn.ModelWeights.from_bytes(blob).layout
            hits += [n for n, _ in layout if n in tokens]
            text_hits = 0
        else:
            hits.append("<unrecognised artifact type>")
            text_hits = 0
        violations += len(hits)
        entries.append({"file": name, "label_field_violations": len(hits), "locations": hits,
                        "whole_token_occurrences": text_hits})
    return {
        "kind": "gazeshield.privacy_audit",
        "n_true_ids_checked": len(tokens),
        "labels_all_dummy_format": all(DUMMY_PATTERN.match(l) for l in labels),
        "label_overlap_with_true_ids": sum(l in tokens for l in labels),
        "files": entries,
        "violations": violations,
        "passed": violations == 0 and all(DUMMY_PATTERN.match(l) for l in labels),
    }
