"""Stage-by-stage pipeline over a data directory and a work directory.

Every stage reads the artifacts of the previous ones from disk, so stages can
be run one at a time from the command line or all at once with
:func:`run_pipeline`. Each stage writes ``manifest_<stage>.json`` with the
resolved configuration, its seeds and the scan ids it consumed.
"""
from __future__ import annotations

import csv
import itertools
import json
import logging
import shutil
import time
from pathlib import Path

import numpy as np
import torch

from . import cascade, ctdata, evaluation, fprtrain, mining, sampler, segnet
from .config import PipelineConfig
from .fprnet import ClassifierConfig, build_classifier, ensemble_predict

log = logging.getLogger(__name__)

STAGES = ("synth", "sample", "train-seg", "mine", "detect", "train-clf", "evaluate")


def configure_torch(threads: int) -> None:
    torch.set_num_threads(max(1, threads))
    torch.use_deterministic_algorithms(True)


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_split(data_dir: Path) -> dict[str, list[str]]:
    path = data_dir / "split.csv"
    if not path.exists():
        raise FileNotFoundError(f"{path}: no split file; run `synth` first")
    split: dict[str, list[str]] = {"train": [], "test": []}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            split.setdefault(row["split"], []).append(row["scan_id"])
    return split


class Pipeline:
    """Holds the configuration, the two directories and a small scan cache."""

    def __init__(self, config: PipelineConfig, data_dir, work_dir):
        self.config = config
        self.data_dir = Path(data_dir)
        self.work_dir = Path(work_dir)
        self._scans: dict[str, tuple[ctdata.Volume, np.ndarray, list]] = {}
        self._annotations: dict[str, list] | None = None
        configure_torch(config.runtime.threads)

    # ------------------------------------------------------------------ io

    def _manifest(self, stage: str, **extra) -> None:
        ctdata.ensure_dir(self.work_dir)
        payload = {"stage": stage, "config": self.config.to_text(), **extra}
        _write_json(self.work_dir / f"manifest_{stage}.json", payload)

    def split(self) -> dict[str, list[str]]:
        return _read_split(self.data_dir)

    def annotations(self) -> dict[str, list]:
        if self._annotations is None:
            by_scan: dict[str, list] = {}
            for ann in ctdata.load_annotations(self.data_dir / "annotations.csv"):
                by_scan.setdefault(ann.scan_id, []).append(ann)
            self._annotations = by_scan
        return self._annotations

    def scan(self, scan_id: str):
        if scan_id not in self._scans:
            volume = ctdata.load_volume(self.data_dir / "volumes" / f"{scan_id}.mhd", scan_id)
            self._scans[scan_id] = (volume, ctdata.normalize_hu(volume), self.annotations().get(scan_id, []))
        return self._scans[scan_id]

    def _require(self, name: str) -> Path:
        path = self.work_dir / name
        if not path.exists():
            raise FileNotFoundError(f"{path}: missing; run the earlier stages first")
        return path

    # -------------------------------------------------------------- stages

    def synth(self) -> list[str]:
        """Generate the phantom dataset with a fixed train/test split."""
        d = self.config.data
        out = ctdata.ensure_dir(self.data_dir)
        vol_dir = ctdata.ensure_dir(out / "volumes")
        spec = ctdata.PhantomSpec(shape=d.shape, nodule_count=d.nodule_count, diameter_mm=d.diameter_mm)
        anns, rows, seeds = [], [], []
        for i in range(d.n_train + d.n_test):
            seed = d.seed * 1000 + i
            scan_id = f"phantom-{i:03d}"
            ph = ctdata.generate_phantom(spec.with_seed(seed), scan_id)
            ctdata.save_volume(ph.volume, vol_dir / f"{scan_id}.mhd")
            anns.extend(ph.annotations)
            rows.append((scan_id, "train" if i < d.n_train else "test"))
            seeds.append(seed)
        ctdata.write_annotations(anns, out / "annotations.csv")
        with open(out / "split.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["scan_id", "split"])
            writer.writerows(rows)
        _write_json(out / "manifest.json", {
            "stage": "synth", "config": self.config.to_text(), "phantom_seeds": seeds,
            "scan_ids": [r[0] for r in rows],
        })
        self._annotations = None
        self._scans.clear()
        return [r[0] for r in rows]

    def sample(self) -> list[sampler.SampleCenter]:
        s = self.config.sampling
        spec = sampler.PatchSpec(size=s.patch_size)
        centers = []
        train = self.split()["train"]
        for i, scan_id in enumerate(train):
            volume, normalized, anns = self.scan(scan_id)
            centers += sampler.sample_scan(volume, normalized, anns, patch_spec=spec, strategy=s.strategy,
                                           budget_scale=s.budget_scale, seed=s.seed * 1000 + i)
        if len(centers) > s.max_patches:
            keep = np.random.default_rng(s.seed).choice(len(centers), s.max_patches, replace=False)
            centers = [centers[i] for i in np.sort(keep)]
        ctdata.ensure_dir(self.work_dir)
        sampler.write_centers(centers, self.work_dir / "samples.csv")
        self._manifest("sample", seed=s.seed, scan_ids=train, n_samples=len(centers))
        return centers

    def _seg_spec(self) -> segnet.SegTrainSpec:
        g = self.config.segmentation
        return segnet.SegTrainSpec(lr=g.lr, finetune_lr=g.finetune_lr, batch_size=g.batch_size,
                                   max_epochs=g.max_epochs, patience=g.patience,
                                   val_fraction=g.val_fraction, seed=g.seed)

    def _patches(self, rows) -> list[segnet.TrainingPatch]:
        """Training patches for ``(scan_id, z, y, x)`` rows."""
        out = []
        size = self.config.sampling.patch_size
        for scan_id, z, y, x in rows:
            volume, normalized, anns = self.scan(scan_id)
            mask = self._mask(scan_id)
            out.append(segnet.extract_training_patch(normalized, mask, (z, y, x), size))
        return out

    def _mask(self, scan_id: str) -> np.ndarray:
        key = ("mask", scan_id)
        if key not in self._scans:
            volume, _, anns = self.scan(scan_id)
            self._scans[key] = ctdata.rasterize_annotations(volume, anns).astype(bool)
        return self._scans[key]

    def train_seg(self):
        centers = sampler.read_centers(self._require("samples.csv"))
        patches = self._patches([(c.scan_id, c.z, c.y, c.x) for c in centers])
        torch.manual_seed(self.config.segmentation.seed)
        model = segnet.build_seg_model()
        model, history = segnet.train_segmentation(model, patches, self._seg_spec())
        segnet.save_checkpoint(model, self.work_dir / "seg_initial.pt", "segmentation", model.config)
        history.write_csv(self.work_dir / "seg_history.csv")
        # until mining runs, the initial model is the stage-1 model
        shutil.copyfile(self.work_dir / "seg_initial.pt", self.work_dir / "seg.pt")
        self._manifest("train-seg", seed=self.config.segmentation.seed,
                       scan_ids=sorted({c.scan_id for c in centers}), n_patches=len(patches))
        return model, history

    def mine(self):
        m = self.config.mining
        model = segnet.load_seg_model(self._require("seg_initial.pt"))
        train = self.split()["train"]
        if not m.hard_mining:
            shutil.copyfile(self.work_dir / "seg_initial.pt", self.work_dir / "seg.pt")
            self._manifest("mine", enabled=False, scan_ids=[])
            return model, None
        policy = mining.HardMiningPolicy(threshold=m.threshold, overlap=m.overlap,
                                         patch_size=self.config.sampling.patch_size, rounds=m.rounds)
        centers = sampler.read_centers(self._require("samples.csv"))
        originals = self._patches([(c.scan_id, c.z, c.y, c.x) for c in centers])
        positives = [p for p in originals if p.positive]
        spec = self._seg_spec()
        history = None
        for round_ in range(m.rounds):
            mined = mining.mine_hard_samples(model, (self.scan(s) for s in train), policy,
                                             seed=m.seed + round_, batch_size=self.config.segmentation.infer_batch)
            rng = np.random.default_rng(m.seed + round_)
            if len(mined.negatives) > m.max_negatives:
                keep = np.sort(rng.choice(len(mined.negatives), m.max_negatives, replace=False))
                mined.negatives = [mined.negatives[i] for i in keep]
            if len(mined.positives) > m.max_positives:
                keep = np.sort(rng.choice(len(mined.positives), m.max_positives, replace=False))
                mined.positives = [mined.positives[i] for i in keep]
            mining.write_mined(mined, self.work_dir / "mined.csv")
            rows = [(c.scan_id, c.z, c.y, c.x) for c in mined.negatives + mined.positives]
            patches = self._patches(rows) + positives
            model, history = mining.finetune_segmentation(model, patches, spec)
        segnet.save_checkpoint(model, self.work_dir / "seg.pt", "segmentation", model.config)
        history.write_csv(self.work_dir / "seg_finetune_history.csv")
        mined_ids = sorted({c.scan_id for c in mined.negatives + mined.positives})
        self._manifest("mine", enabled=True, seed=m.seed, scan_ids=mined_ids, n_negatives=len(mined.negatives),
                       n_positives=len(mined.positives))
        return model, history

    def detect(self) -> dict[str, dict]:
        """Cascade over both splits; writes candidates and first- vs second-pass statistics."""
        model = segnet.load_seg_model(self._require("seg.pt"))
        stats = {}
        split = self.split()
        for name in ("train", "test"):
            cands, first, anns = {}, {}, {}
            for scan_id in split[name]:
                volume, normalized, scan_anns = self.scan(scan_id)
                det = cascade.detect(model, volume, normalized, batch_size=self.config.segmentation.infer_batch)
                cands[scan_id] = det.candidates
                first[scan_id] = det.first_candidates
                anns[scan_id] = scan_anns
            cascade.write_candidates([c for s in split[name] for c in cands[s]],
                                     self.work_dir / f"candidates_{name}.csv")
            fp1, sens1 = evaluation.fp_per_scan(first, anns)
            fp2, sens2 = evaluation.fp_per_scan(cands, anns)
            stats[name] = {"first_fp_per_scan": fp1, "first_sensitivity": sens1,
                           "second_fp_per_scan": fp2, "second_sensitivity": sens2,
                           "first_candidates": sum(map(len, first.values())),
                           "second_candidates": sum(map(len, cands.values()))}
        with open(self.work_dir / "cascade_stats.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            cols = ["first_candidates", "first_fp_per_scan", "first_sensitivity",
                    "second_candidates", "second_fp_per_scan", "second_sensitivity"]
            writer.writerow(["split"] + cols)
            for name, row in stats.items():
                writer.writerow([name] + [f"{row[c]:.6f}" if isinstance(row[c], float) else row[c] for c in cols])
        self._manifest("detect", scan_ids=split["train"] + split["test"])
        return stats

    def _candidate_cubes(self, candidates) -> np.ndarray:
        cubes = []
        for c in candidates:
            volume, normalized, _ = self.scan(c.scan_id)
            cubes.append(fprtrain.extract_cube(normalized, ctdata.world_to_voxel(volume, c.center_world)))
        return np.stack(cubes) if cubes else np.zeros((0, 40, 40, 40), np.float32)

    def _label_candidates(self, candidates):
        """Hit rule labels plus the matched nodule diameter in voxels (0 for negatives)."""
        labels, diam = [], []
        for c in candidates:
            volume, _, anns = self.scan(c.scan_id)
            hit = 0.0
            for a in anns:
                if np.linalg.norm(np.subtract(c.center_world, a.center_world)) <= a.diameter_mm / 2:
                    hit = a.diameter_mm / float(np.mean(volume.spacing))
                    break
            labels.append(int(hit > 0))
            diam.append(hit)
        return np.array(labels), np.array(diam)

    def classifier_dataset(self) -> tuple[fprtrain.LabeledPatches, list, list[str]]:
        """Stage-1 training candidates, minority class balanced by geometric augmentation, plus mask swaps."""
        k = self.config.classifier
        rng = np.random.default_rng(k.seed)
        candidates = cascade.read_candidates(self._require("candidates_train.csv"))
        labels, diam = self._label_candidates(candidates)
        pos_idx = np.nonzero(labels == 1)[0]
        neg_idx = np.nonzero(labels == 0)[0]
        if len(pos_idx) == 0 or len(neg_idx) == 0:
            raise ValueError("classifier training needs stage-1 candidates of both classes")
        if len(neg_idx) > k.max_negatives:
            neg_idx = np.sort(rng.choice(neg_idx, k.max_negatives, replace=False))
        pos = self._candidate_cubes([candidates[i] for i in pos_idx])
        neg = self._candidate_cubes([candidates[i] for i in neg_idx])
        if len(pos) <= len(neg):
            pos_set, neg_set = _augment_to(pos, len(neg), rng), neg
        else:
            pos_set, neg_set = pos, _augment_to(neg, len(pos), rng)
        records = []
        patches, lab = [pos_set, neg_set], [np.ones(len(pos_set), int), np.zeros(len(neg_set), int)]
        if k.random_mask:
            new_pos, new_neg, records = fprtrain.random_mask_swap(
                pos, neg, diam[pos_idx], fprtrain.MaskSwapSpec(seed=k.seed))
            patches += [new_pos, new_neg]
            lab += [np.ones(len(new_pos), int), np.zeros(len(new_neg), int)]
        data = fprtrain.LabeledPatches(np.concatenate(patches), np.concatenate(lab))
        used = sorted({candidates[i].scan_id for i in np.concatenate([pos_idx, neg_idx])})
        return data, records, used

    def _clf_config(self, variant: str) -> ClassifierConfig:
        k = self.config.classifier
        return ClassifierConfig(variant=variant, pooling=k.pooling, width=k.width)

    def _clf_spec(self, offset: int = 0) -> fprtrain.ClfTrainSpec:
        k = self.config.classifier
        return fprtrain.ClfTrainSpec(lr=k.lr, decay=k.decay, momentum=k.momentum, epochs=k.epochs,
                                     batch_size=k.batch_size, seed=k.seed + offset)

    def train_clf(self, variants=None):
        variants = tuple(variants or self.config.classifier.variants)
        data, records, used = self.classifier_dataset()
        fprtrain.write_swap_manifest(records, self.work_dir / "swap_manifest.csv")
        models = {}
        for i, variant in enumerate(self.config.classifier.variants):
            if variant not in variants:
                continue
            torch.manual_seed(self.config.classifier.seed + i)
            model = build_classifier(self._clf_config(variant))
            model, history = fprtrain.train_classifier(model, data, self._clf_spec(i))
            fprtrain.save_classifier(model, self.work_dir / f"clf_{variant}.pt")
            history.write_csv(self.work_dir / f"clf_{variant}_history.csv",
                              columns=("epoch", "lr", "train_loss", "train_acc"))
            models[variant] = model
        self._manifest("train-clf", seed=self.config.classifier.seed, scan_ids=used, variants=list(variants),
                       n_patches=len(data), n_positive=int(data.labels.sum()), n_swapped=len(records))
        return models

    def evaluate(self) -> dict:
        """Score test candidates with every classifier and the ensemble; write FROC and CPM reports."""
        cfg = self.config
        split = self.split()
        candidates = cascade.read_candidates(self._require("candidates_test.csv"))
        cubes = self._candidate_cubes(candidates)
        per_variant = {}
        for variant in cfg.classifier.variants:
            model = fprtrain.load_classifier(self._require(f"clf_{variant}.pt"))
            per_variant[variant] = fprtrain.predict(model, cubes) if len(cubes) else np.zeros(0)
        ens = ensemble_predict([per_variant[v] for v in cfg.classifier.variants], cfg.ensemble.weights)
        ens = np.clip(ens, 0.0, 1.0)
        for c, p in zip(candidates, ens):
            c.clf_prob = float(p)
        cascade.write_candidates(candidates, self.work_dir / "candidates_test_scored.csv")

        anns = self.annotations()
        reports = {}
        sources = {**{v: per_variant[v] for v in cfg.classifier.variants}, "ensemble": ens}
        for name, probs in sources.items():
            curve = evaluation.compute_froc(_scored_scans(split["test"], anns, candidates, probs))
            curve.write_csv(self.work_dir / f"froc_{name}.csv")
            reports[name] = (curve, evaluation.compute_cpm(curve, label=name))
        shutil.copyfile(self.work_dir / "froc_ensemble.csv", self.work_dir / "froc.csv")
        text = format_cpm_table([r for _, r in reports.values()])
        (self.work_dir / "cpm_report.txt").write_text(text, encoding="utf-8")
        summary = {name: {"cpm": rep.cpm, "sensitivities": list(rep.sensitivities),
                          "sensitivity_at_4": evaluation.sensitivity_at(curve, 4.0)}
                   for name, (curve, rep) in reports.items()}
        _write_json(self.work_dir / "summary.json", summary)
        self._manifest("evaluate", scan_ids=split["test"])
        return summary

    def run(self, stages=STAGES) -> dict:
        timings = {}
        result = None
        for stage in stages:
            t0 = time.perf_counter()
            log.info("stage %s", stage)
            result = getattr(self, stage.replace("-", "_"))()
            timings[stage] = round(time.perf_counter() - t0, 1)
        _write_json(self.work_dir / "timings.json", timings)
        return result


def _augment_to(cubes: np.ndarray, target: int, rng: np.random.Generator) -> np.ndarray:
    """Up to ``target`` cubes drawn from the 10 geometric variants of each input cube.

    Identity copies come first, so the originals always survive the cut.
    """
    augmented = np.concatenate([np.stack(fprtrain.geometric_augment(c)) for c in cubes])
    ident = np.arange(0, len(augmented), 10)
    order = np.concatenate([ident, rng.permutation(np.setdiff1d(np.arange(len(augmented)), ident))])
    return augmented[order[:max(len(cubes), min(len(augmented), target))]]


def _scored_scans(scan_ids, annotations, candidates, probs):
    by_scan: dict[str, list[int]] = {s: [] for s in scan_ids}
    for i, c in enumerate(candidates):
        by_scan.setdefault(c.scan_id, []).append(i)
    scans = []
    for s in scan_ids:
        idx = by_scan[s]
        centers = np.array([candidates[i].center_world for i in idx], dtype=float).reshape(-1, 3)
        scans.append(evaluation.ScoredScan(s, annotations.get(s, []), centers, np.asarray(probs)[idx]))
    return scans


def format_cpm_table(reports) -> str:
    header = "# FROC sampled by linear interpolation between operating points, clamped at the curve ends\n"
    rates = reports[0].rates
    names = [r.label for r in reports]
    w = max(len("Method"), *(len(n) for n in names))
    lines = ["Method".ljust(w) + "".join(f"{r:>8g}" for r in rates) + f"{'CPM':>8}"]
    for r in reports:
        lines.append(r.label.ljust(w) + "".join(f"{s:8.3f}" for s in r.sensitivities) + f"{r.cpm:8.3f}")
    return header + "\n".join(lines) + "\n"


def evaluate_files(candidates_path, annotations_path, out_dir, score: str = "clf_prob") -> tuple:
    """Evaluate a candidates CSV against an annotation CSV (scans = those with annotations or candidates)."""
    candidates = cascade.read_candidates(candidates_path)
    by_scan: dict[str, list] = {}
    for ann in ctdata.load_annotations(annotations_path):
        by_scan.setdefault(ann.scan_id, []).append(ann)
    scan_ids = sorted(set(by_scan) | {c.scan_id for c in candidates})
    probs = np.array([c.score(score) for c in candidates], dtype=float)
    curve = evaluation.compute_froc(_scored_scans(scan_ids, by_scan, candidates, probs))
    report = evaluation.compute_cpm(curve, label=score)
    out = ctdata.ensure_dir(out_dir)
    curve.write_csv(out / "froc.csv")
    (out / "cpm_report.txt").write_text(format_cpm_table([report]), encoding="utf-8")
    return curve, report


# --------------------------------------------------------------------------
# Ablation

ABLATION_AXES = {
    "classifier.pooling": ("max", "central", "dual"),
    "mining.hard_mining": ("false", "true"),
    "classifier.random_mask": ("false", "true"),
}
STAGE1_KEYS = ("sampling.", "segmentation.", "mining.", "data.")
STAGE1_FILES = ("samples.csv", "seg_initial.pt", "seg.pt", "seg_history.csv", "seg_finetune_history.csv",
                "mined.csv", "candidates_train.csv", "candidates_test.csv", "cascade_stats.csv")


def ablate(config: PipelineConfig, data_dir, work_dir, axes: dict[str, tuple[str, ...]] | None = None) -> Path:
    """Run every flag combination over a shared dataset; writes ``ablation.csv``.

    Combinations that share stage-1 settings reuse the stage-1 artifacts of
    the first run with those settings.
    """
    axes = axes or ABLATION_AXES
    work = ctdata.ensure_dir(work_dir)
    if not (Path(data_dir) / "split.csv").exists():
        Pipeline(config, data_dir, work).synth()
    keys = list(axes)
    stage1_runs: dict[tuple, Path] = {}
    rows = []
    for values in itertools.product(*(axes[k] for k in keys)):
        overrides = dict(zip(keys, values))
        cfg = config.with_overrides(overrides)
        tag = "_".join(f"{k.split('.')[-1]}-{v}" for k, v in overrides.items())
        run_dir = ctdata.ensure_dir(work / tag)
        pipe = Pipeline(cfg, data_dir, run_dir)
        key = tuple((k, v) for k, v in overrides.items() if k.startswith(STAGE1_KEYS))
        if key in stage1_runs:
            for name in STAGE1_FILES:
                src = stage1_runs[key] / name
                if src.exists():
                    shutil.copyfile(src, run_dir / name)
            summary = pipe.run(("train-clf", "evaluate"))
        else:
            summary = pipe.run(STAGES[1:])
            stage1_runs[key] = run_dir
        ens = summary["ensemble"]
        rows.append([tag, *values, *(f"{s:.6f}" for s in ens["sensitivities"]), f"{ens['cpm']:.6f}"])
    out = work / "ablation.csv"
    with open(out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", *keys, *(f"{r:g}" for r in evaluation.FP_RATES), "cpm"])
        writer.writerows(rows)
    return out


def run_pipeline(config: PipelineConfig, data_dir, work_dir) -> dict:
    pipe = Pipeline(config, data_dir, work_dir)
    return pipe.run(STAGES)

