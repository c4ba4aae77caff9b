"""End-to-end experiment orchestration with content-addressed, resumable stages.

Stage outputs live in ``<cache_dir>/<stage>-<hash>/`` where the hash covers the
stage's config subtree, its seed and the hashes of its upstream stages. A stage
directory is complete when it holds a ``DONE`` file; a failed stage keeps its
partial outputs next to a ``FAILED`` file and is recomputed on the next run.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import shutil
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable

import numpy as np

from . import data as datasets
from . import defenses, plotting
from .config import SWEEP_AXES, ConfigError, ExperimentConfig, content_hash, dump_config, validate_config
from .core import LabeledImageSet, PoisonPlan, TriggerPattern, l0_norm, linf_norm
from .metrics import (MetricsRow, attack_success_rate, benign_accuracy, mean_perceptual_distance, mean_ssim,
                      write_metrics_csv)
from .models import Classifier, train_classifier
from .poisoning import (BlendTransform, PatchStamp, amplify_trigger, baseline_blended_trigger,
                        baseline_patch_trigger, baseline_random_trigger, export_poisoned_dataset,
                        make_poison_plan, poison_test_set, poison_training_set)
from .synthesis import SynthesisConfig, sparse_baseline_trace, synthesize_trigger

log = logging.getLogger(__name__)

ATTACK_NAMES = {"siba": "SIBA", "sparse": "Sparse", "random": "Random", "badnets": "BadNets", "blended": "Blended"}


class StageFailed(RuntimeError):
    def __init__(self, stage: str, path: Path, cause: BaseException):
        self.stage, self.path, self.cause = stage, path, cause
        super().__init__(f"stage {stage} failed ({type(cause).__name__}: {cause}); partial results in {path}")


@dataclass
class RunResult:
    out_dir: Path
    rows: list[MetricsRow] = field(default_factory=list)
    events: list[tuple[str, str]] = field(default_factory=list)

    @property
    def cache_hits(self) -> int:
        return sum(1 for _, status in self.events if status == "hit")

    @property
    def computed(self) -> int:
        return sum(1 for _, status in self.events if status == "computed")


def _write_if_changed(path: Path, text: str) -> bool:
    if path.exists() and path.read_text() == text:
        return False
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return True


def load_attack(stage_dir: Path):
    """Trigger or poisoning transform stored by the trigger stage."""
    if (stage_dir / "trigger.siba").exists():
        return TriggerPattern.load(stage_dir / "trigger.siba")
    with np.load(stage_dir / "transform.npz") as z:
        if str(z["kind"]) == "patch":
            return PatchStamp(z["patch"], int(z["top"]), int(z["left"]))
        return BlendTransform(z["pattern"], float(z["transparency"]))


class Pipeline:
    def __init__(self, config: ExperimentConfig, out_dir, cache_dir=None, resume: bool = False):
        self.config = config.resolved()
        self.out_dir = Path(out_dir)
        self.cache_dir = Path(cache_dir) if cache_dir else self.out_dir / "stages"
        self.resume = resume
        self.result = RunResult(self.out_dir)
        self._data: tuple[LabeledImageSet, LabeledImageSet] | None = None
        self._keys: dict[str, str] = {}
        self._resolved: set[Path] = set()
        self._models: dict[str, Classifier] = {}

    # -- bookkeeping --------------------------------------------------------
    def prepare(self) -> None:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        frozen = self.out_dir / "config.resolved.yaml"
        text = dump_config(self.config)
        if frozen.exists() and frozen.read_text() != text:
            if not self.resume:
                raise ConfigError([("<out-dir>", f"{self.out_dir} holds a run of a different config; "
                                                 "use a new --out-dir or pass --resume")])
            stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S")
            frozen.rename(frozen.with_name(f"config.resolved.{stamp}.yaml"))
        _write_if_changed(frozen, text)

    def _stage(self, name: str, parts, compute: Callable[[Path], None]) -> Path:
        key = content_hash(name, parts)
        self._keys[name] = key
        final = self.cache_dir / f"{name}-{key}"
        if (final / "DONE").exists():
            if final not in self._resolved:  # repeat lookups within one run are not cache hits
                log.info("cache hit: %s", final.name)
                self.result.events.append((name, "hit"))
                self._resolved.add(final)
            return final
        tmp = self.cache_dir / f".{final.name}.tmp-{os.getpid()}"
        shutil.rmtree(tmp, ignore_errors=True)
        tmp.mkdir(parents=True)
        log.info("running stage %s", final.name)
        try:
            compute(tmp)
        except Exception as exc:
            (tmp / "FAILED").write_text(traceback.format_exc())
            shutil.rmtree(final, ignore_errors=True)
            os.replace(tmp, final)
            self.result.events.append((name, "failed"))
            raise StageFailed(name, final, exc) from exc
        (tmp / "DONE").write_text(json.dumps({"stage": name, "key": key, "inputs": parts},
                                             indent=1, sort_keys=True, default=str))
        if (final / "DONE").exists():
            shutil.rmtree(tmp)  # a concurrent worker finished the same stage first
        else:
            shutil.rmtree(final, ignore_errors=True)
            os.replace(tmp, final)
        self.result.events.append((name, "computed"))
        self._resolved.add(final)
        return final

    # -- data ---------------------------------------------------------------
    def data(self) -> tuple[LabeledImageSet, LabeledImageSet]:
        if self._data is None:
            d = self.config.data
            if d.dataset == "cifar10":
                train = datasets.load_cifar10(d.root, train=True)
                test = datasets.load_cifar10(d.root, train=False)
            elif d.dataset == "imagefolder":
                if d.root is None:
                    raise ConfigError([("data.root", "required for imagefolder datasets")])
                train = datasets.load_image_folder(Path(d.root) / "train")
                test = datasets.load_image_folder(Path(d.root) / "test", train.class_names)
            else:
                s = d.synthetic
                kw = dict(num_classes=s.num_classes, height=s.height, width=s.width,
                          channels=s.channels, noise=s.noise, seed=self.config.seed)
                train = datasets.make_synthetic_dataset(per_class=s.train_per_class, split="train", **kw)
                test = datasets.make_synthetic_dataset(per_class=s.test_per_class, split="test", **kw)
            if d.train_limit and d.train_limit < len(train):
                train = train.fraction(d.train_limit / len(train), seed=self.config.seed)
            if d.test_limit and d.test_limit < len(test):
                test = test.fraction(d.test_limit / len(test), seed=self.config.seed)
            self._data = (train, test)
        return self._data

    def _data_parts(self):
        return (self.config.data.model_dump(mode="json"), self.config.seed)

    def _model(self, stage_dir: Path) -> Classifier:
        key = str(stage_dir)
        if key not in self._models:
            self._models[key] = Classifier.load(stage_dir / "model.pt", device=self.config.device)
        return self._models[key]

    # -- stages -------------------------------------------------------------
    def surrogate_data(self) -> LabeledImageSet:
        train, _ = self.data()
        frac = self.config.surrogate.data_fraction
        return train if frac >= 1.0 else train.fraction(frac, seed=self.config.seeds.surrogate)

    def surrogate(self) -> Path:
        cfg = self.config
        parts = (self._data_parts(), cfg.surrogate.model_dump(mode="json"), cfg.seeds.surrogate)

        def compute(out: Path):
            _, test = self.data()
            model = train_classifier(self.surrogate_data(), cfg.surrogate.to_train_config(cfg.seeds.surrogate),
                                     test=test, device=cfg.device, progress=True)
            model.save(out / "model.pt")

        return self._stage("surrogate", parts, compute)

    def _synthesis_config(self) -> SynthesisConfig:
        a = self.config.attack
        return SynthesisConfig(batch_size=a.batch_size, step_size=a.step_size, iterations=a.iterations,
                               mask_update_period=min(a.mask_update_period, max(a.iterations, 1)),
                               k_budget=a.k, eps_budget=a.eps, label_rule=a.label_rule.build(),
                               seed=self.config.seeds.synthesis, spatial_grouping=a.spatial_grouping)

    def trigger(self) -> Path:
        cfg, a = self.config, self.config.attack
        train, test = self.data()
        shape = train.shape
        upstream = None
        if a.method in ("siba", "sparse"):
            upstream = self.surrogate().name
        relevant = {
            "siba": ("label_rule", "k", "eps", "step_size", "iterations", "mask_update_period",
                     "batch_size", "spatial_grouping"),
            "sparse": ("label_rule", "k", "eps", "step_size", "iterations", "mask_update_period",
                       "batch_size", "spatial_grouping"),
            "random": ("k", "eps"),
            "badnets": ("patch_size", "patch_style"),
            "blended": ("blend_transparency",),
        }[a.method]
        attack_parts = {k: v for k, v in a.model_dump(mode="json").items() if k in relevant}
        parts = (a.method, attack_parts, upstream, self._data_parts(), cfg.seeds.synthesis)

        def compute(out: Path):
            if a.method in ("siba", "sparse"):
                surrogate = self._model(self.cache_dir / upstream)
                run = synthesize_trigger if a.method == "siba" else sparse_baseline_trace
                trace = run(surrogate, self.surrogate_data(), self._synthesis_config())
                trace.final_trigger.save(out / "trigger.siba")
                trace.write_csv(out / "loss_trace.csv")
                with open(out / "mask_updates.csv", "w") as fh:
                    fh.write("iteration\n" + "".join(f"{i}\n" for i in trace.mask_update_iterations))
                if trace.losses:
                    plotting.plot_loss_trace(trace.losses, trace.mask_update_iterations, out / "loss_trace.png")
                attack = trace.final_trigger
            elif a.method == "random":
                attack = baseline_random_trigger(shape, a.k, a.eps, seed=cfg.seeds.synthesis)
                attack.save(out / "trigger.siba")
            elif a.method == "badnets":
                attack = baseline_patch_trigger(shape, a.patch_size, a.patch_style)
                np.savez(out / "transform.npz", kind="patch", patch=attack.patch, top=attack.top, left=attack.left)
            else:
                attack = baseline_blended_trigger(shape, None, a.blend_transparency, seed=cfg.seeds.synthesis)
                np.savez(out / "transform.npz", kind="blend", pattern=attack.pattern,
                         transparency=attack.transparency)
            sample = test.images[0]
            plotting.plot_trigger(getattr(attack, "values", attack.apply(sample) - sample), sample,
                                  attack.apply(sample), out / "trigger.png")

        return self._stage("trigger", parts, compute)

    def poison(self, export_images: bool = False) -> Path:
        cfg, a = self.config, self.config.attack
        trigger_dir = self.trigger()
        parts = (trigger_dir.name, a.poisoning_rate, a.label_rule.model_dump(mode="json"), cfg.seeds.poison)

        def compute(out: Path):
            train, _ = self.data()
            plan = make_poison_plan(train, a.poisoning_rate, a.label_rule.build(), load_attack(trigger_dir),
                                    seed=cfg.seeds.poison)
            poisoned = poison_training_set(train, plan)
            datasets.save_npz(poisoned, out / "poisoned_train.npz")
            np.save(out / "poisoned_indices.npy", plan.sorted_indices())
            with open(out / "manifest.csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["index", "original_label", "new_label", "poisoned_flag"])
                flags = plan.poisoned_indices
                for i, (y0, y1) in enumerate(zip(train.labels, poisoned.labels)):
                    writer.writerow([i, int(y0), int(y1), int(i in flags)])

        out = self._stage("poison", parts, compute)
        export_dir = self.out_dir / "poisoned_dataset"
        if export_images and not (export_dir / "manifest.csv").exists():
            train, _ = self.data()
            plan = PoisonPlan(frozenset(np.load(out / "poisoned_indices.npy").tolist()), a.label_rule.build(),
                              load_attack(trigger_dir), a.poisoning_rate, len(train))
            export_poisoned_dataset(train, datasets.load_npz(out / "poisoned_train.npz"), plan, export_dir)
        return out

    def victim(self) -> Path:
        cfg = self.config
        poison_dir = self.poison()
        parts = (poison_dir.name, cfg.victim.model_dump(mode="json"), cfg.seeds.victim)

        def compute(out: Path):
            _, test = self.data()
            poisoned = datasets.load_npz(poison_dir / "poisoned_train.npz")
            model = train_classifier(poisoned, cfg.victim.to_train_config(cfg.seeds.victim), test=test,
                                     device=cfg.device, progress=True)
            model.save(out / "model.pt")

        return self._stage("victim", parts, compute)

    def clean_model(self) -> Path:
        cfg = self.config
        parts = (self._data_parts(), cfg.victim.model_dump(mode="json"), cfg.seeds.victim)

        def compute(out: Path):
            train, test = self.data()
            model = train_classifier(train, cfg.victim.to_train_config(cfg.seeds.victim), test=test,
                                     device=cfg.device, progress=True)
            model.save(out / "model.pt")

        return self._stage("clean", parts, compute)

    def poisoned_test(self, attack=None) -> LabeledImageSet:
        _, test = self.data()
        attack = attack if attack is not None else load_attack(self.trigger())
        return poison_test_set(test, attack, self.config.attack.label_rule.build())

    def evaluate(self) -> list[MetricsRow]:
        cfg, ev = self.config, self.config.evaluation
        victim_dir, trigger_dir = self.victim(), self.trigger()
        clean_dir = self.clean_model() if ev.clean_baseline else None
        parts = (victim_dir.name, trigger_dir.name, clean_dir and clean_dir.name,
                 ev.model_dump(mode="json"), cfg.experiment_id)

        def compute(out: Path):
            _, test = self.data()
            attack = load_attack(trigger_dir)
            victim = self._model(victim_dir)
            ptest = self.poisoned_test(attack)
            n = min(len(test), ev.ssim_samples or len(test))
            clean_imgs = test.images[:n]
            poisoned_imgs = attack.apply(clean_imgs)
            if isinstance(attack, TriggerPattern):
                l0, linf = l0_norm(attack.values), linf_norm(attack.values)
            else:
                diff = (poisoned_imgs - clean_imgs).reshape(n, -1)
                l0 = int(np.count_nonzero(diff, axis=1).max())
                linf = float(np.abs(diff).max())
            arch = cfg.victim.architecture
            name = ATTACK_NAMES[cfg.attack.method]
            rows = [MetricsRow(cfg.experiment_id, name, arch, benign_accuracy(victim, test),
                               attack_success_rate(victim, ptest), l0, linf,
                               mean_ssim(clean_imgs, poisoned_imgs),
                               mean_perceptual_distance(clean_imgs, poisoned_imgs))]
            if clean_dir is not None:
                clean = self._model(clean_dir)
                rows.insert(0, MetricsRow(cfg.experiment_id, "No Attack", arch, benign_accuracy(clean, test),
                                          attack_success_rate(clean, ptest)))
            if isinstance(attack, TriggerPattern):
                for eps_test in ev.eps_test:
                    amp = amplify_trigger(attack, eps_test)
                    amp_imgs = amp.apply(clean_imgs)
                    rows.append(MetricsRow(cfg.experiment_id, f"{name}@eps_test={eps_test:.6g}", arch,
                                           benign_accuracy(victim, test),
                                           attack_success_rate(victim, self.poisoned_test(amp)),
                                           l0_norm(amp.values), linf_norm(amp.values),
                                           mean_ssim(clean_imgs, amp_imgs),
                                           mean_perceptual_distance(clean_imgs, amp_imgs)))
            write_metrics_csv(rows, out / "metrics.csv")

        stage = self._stage("evaluate", parts, compute)
        rows = [MetricsRow(**_parse_row(r)) for r in _read_rows(stage / "metrics.csv")]
        _write_if_changed(self.out_dir / "metrics.csv", (stage / "metrics.csv").read_text())
        self.result.rows = rows
        return rows

    def defend(self, names=None) -> dict[str, Path]:
        cfg, dcfg = self.config, self.config.defenses
        names = list(names if names is not None else dcfg.enabled)
        victim_dir, trigger_dir = self.victim(), self.trigger()
        seed = cfg.seeds.defense
        outputs = {}
        for name in names:
            section = getattr(dcfg, name).model_dump(mode="json")
            parts = (victim_dir.name, trigger_dir.name, name, section, seed)
            outputs[name] = self._stage(f"defense_{name}", parts,
                                        lambda out, n=name: self._run_defense(n, out, victim_dir, trigger_dir))
        summary = self.out_dir / "defenses"
        summary.mkdir(parents=True, exist_ok=True)
        for name, stage in outputs.items():
            for f in stage.iterdir():
                if f.suffix in (".csv", ".png") and not (summary / f.name).exists():
                    shutil.copy2(f, summary / f.name)
        return outputs

    def _run_defense(self, name: str, out: Path, victim_dir: Path, trigger_dir: Path) -> None:
        cfg, dcfg = self.config, self.config.defenses
        train, test = self.data()
        victim = self._model(victim_dir)
        ptest = self.poisoned_test(load_attack(trigger_dir))
        rng = np.random.default_rng(cfg.seeds.defense)

        def pick(ds, n):
            return ds.subset(np.sort(rng.permutation(len(ds))[:min(n, len(ds))]))

        if name in ("strip", "scale_up"):
            section = dcfg.strip if name == "strip" else dcfg.scale_up
            p_sub, b_sub = pick(ptest, section.n_samples), pick(test, section.n_samples)
            hits = victim.predict(p_sub.images) == p_sub.labels
            if name == "strip":
                sp = defenses.strip_entropies(victim, p_sub.images, test, section.n_overlays, section.blend,
                                              seed=cfg.seeds.defense)
                sb = defenses.strip_entropies(victim, b_sub.images, test, section.n_overlays, section.blend,
                                              seed=cfg.seeds.defense + 1)
                # Threshold at a 1% false-rejection rate on benign inputs.
                report = defenses.detection_report(sp, sb, float(np.quantile(sb, 0.01)), "low", hits)
                plotting.plot_score_histograms(sb, sp, out / "strip_hist.png", "entropy")
            else:
                sp = defenses.scale_up_scores(victim, p_sub.images, section.scales)
                sb = defenses.scale_up_scores(victim, b_sub.images, section.scales)
                report = defenses.detection_report(sp, sb, section.threshold, "high", hits)
                plotting.plot_score_histograms(sb, sp, out / "scale_up_hist.png", "consistency score")
            report.write_csv(out / f"{name}.csv", defense=name)
            _write_summary(out / f"{name}_summary.csv", name, {
                "TPR": report.tpr, "FPR": report.fpr, "AUROC": report.auroc, "ASR": report.post_defense_asr,
                "best_TPR_at_FPR_0.1": defenses.best_tpr_at_fpr(sp, sb, 0.1, "low" if name == "strip" else "high")})
        elif name == "fine_prune":
            section = dcfg.fine_prune
            clean_train = self._clean_validation(train, section.validation_fraction)
            n = victim.feature_channels
            steps = section.steps or sorted(set(np.linspace(0, n, 17).astype(int).tolist()))
            curve = defenses.fine_prune(victim, clean_train, ptest, steps, clean_test=test)
            defenses.write_curve_csv(curve, out / "fine_prune_curve.csv")
            plotting.plot_fine_pruning(curve, out / "fine_prune_curve.png")
        elif name == "neural_cleanse":
            section = dcfg.neural_cleanse
            result = defenses.neural_cleanse(victim, pick(test, section.probe_size), section.lr, section.reg_coef,
                                             section.epochs, section.batch_size, seed=cfg.seeds.defense)
            result.write_csv(out / "neural_cleanse.csv")
            plotting.plot_anomaly_indices(result.anomaly, out / "neural_cleanse.png")
            _write_summary(out / "neural_cleanse_summary.csv", name,
                           {"max_anomaly_index": result.max_anomaly, "flagged": int(result.flagged)})

    def _clean_validation(self, train: LabeledImageSet, fraction: float) -> LabeledImageSet:
        return train.fraction(fraction, seed=self.config.seeds.defense)

    # -- entry points -------------------------------------------------------
    def run(self, with_defenses: bool = True) -> RunResult:
        self.prepare()
        if self.config.attack.method in ("siba", "sparse"):
            self.surrogate()
        self.evaluate()
        if with_defenses and self.config.defenses.enabled:
            self.defend()
        return self.result


def _write_summary(path: Path, defense: str, values: dict) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["defense", "metric", "value"])
        for k, v in values.items():
            writer.writerow([defense, k, "n/a" if v is None else f"{v:.6g}"])


def _read_rows(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _parse_row(raw: dict) -> dict:
    out = {}
    for key, value in raw.items():
        if key in ("experiment_id", "attack", "model"):
            out[key] = value
        elif value == "n/a":
            out[key] = None
        elif key == "L0":
            out[key] = int(value)
        else:
            out[key] = float(value)
    return out


# -- multi-run drivers ---------------------------------------------------------

def _run_point(args) -> tuple[str, list[dict], list[tuple[str, str]]]:
    cfg_dict, point_dir, cache_dir, resume = args
    result = Pipeline(validate_config(cfg_dict), point_dir, cache_dir, resume).run(with_defenses=False)
    return str(point_dir), [r.__dict__ for r in result.rows], result.events


def _run_points(points, jobs: int) -> list[tuple[str, list[dict], list]]:
    if jobs <= 1 or len(points) <= 1:
        return [_run_point(p) for p in points]
    # The first point populates shared upstream stages before fanning out.
    first = _run_point(points[0])
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return [first, *pool.map(_run_point, points[1:])]


def _attack_row(rows: list[dict]) -> dict:
    return next(r for r in rows if r["attack"] != "No Attack")


def run_ablation(config: ExperimentConfig, out_dir, jobs: int = 1, resume: bool = False) -> Path:
    """One pipeline per value of the single swept axis; stages shared through one cache."""
    if not config.sweep:
        raise ConfigError([("sweep", "ablation needs a sweep with exactly one axis")])
    (axis, values), = config.sweep.items()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_if_changed(out_dir / "config.resolved.yaml", dump_config(config.resolved()))
    base = config.resolved()
    points = []
    for value in values:
        cfg = base.with_override(SWEEP_AXES[axis], value)
        points.append((cfg.to_dict(), out_dir / "points" / f"{axis}={value}", out_dir / "stages", resume))
    results = _run_points(points, jobs)
    all_rows, sweep_rows = [], []
    for value, (_, rows, _) in zip(values, results):
        all_rows += rows
        r = _attack_row(rows)
        sweep_rows.append((value, r["BA"], r["ASR"]))
    path = out_dir / f"ablation_{axis}.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([axis, "BA", "ASR"])
        writer.writerows((v, f"{ba:.6g}", f"{asr:.6g}") for v, ba, asr in sweep_rows)
    write_metrics_csv([MetricsRow(**r) for r in all_rows], out_dir / "metrics.csv")
    plotting.plot_sweep(axis, [v for v, _, _ in sweep_rows], [b for _, b, _ in sweep_rows],
                        [a for _, _, a in sweep_rows], out_dir / f"ablation_{axis}.png")
    return path


def run_transfer_grid(config: ExperimentConfig, out_dir, architectures=None, jobs: int = 1,
                      resume: bool = False) -> Path:
    """Surrogate x victim architecture matrix of (BA, ASR)."""
    archs = list(architectures or (config.transfer.architectures if config.transfer else []))
    if len(archs) < 2:
        raise ConfigError([("transfer.architectures", "need at least two architectures")])
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base = config.resolved()
    _write_if_changed(out_dir / "config.resolved.yaml", dump_config(base))
    points, cells = [], []
    for s in archs:
        for v in archs:
            cfg = base.with_override(("surrogate", "architecture"), s).with_override(("victim", "architecture"), v)
            points.append((cfg.to_dict(), out_dir / "points" / f"{s}__{v}", out_dir / "stages", resume))
            cells.append((s, v))
    results = _run_points(points, jobs)
    matrix_ba = np.zeros((len(archs), len(archs)))
    matrix_asr = np.zeros_like(matrix_ba)
    all_rows = []
    path = out_dir / "transfer_matrix.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["surrogate", "victim", "BA", "ASR"])
        for (s, v), (_, rows, _) in zip(cells, results):
            all_rows += rows
            r = _attack_row(rows)
            matrix_ba[archs.index(s), archs.index(v)] = r["BA"]
            matrix_asr[archs.index(s), archs.index(v)] = r["ASR"]
            writer.writerow([s, v, f"{r['BA']:.6g}", f"{r['ASR']:.6g}"])
    write_metrics_csv([MetricsRow(**r) for r in all_rows], out_dir / "metrics.csv")
    plotting.plot_transfer_matrix(archs, matrix_asr, out_dir / "transfer_asr.png", "ASR (%)")
    plotting.plot_transfer_matrix(archs, matrix_ba, out_dir / "transfer_ba.png", "BA (%)")
    return path


def run_experiment(config_path, out_dir, seed: int | None = None, device: str | None = None,
                   resume: bool = False) -> RunResult:
    from .config import load_config

    config = load_config(config_path)
    updates = {}
    if seed is not None:
        updates["seed"] = seed
    if device is not None:
        updates["device"] = device
    if updates:
        config = validate_config({**config.to_dict(), **updates})
    return Pipeline(config, out_dir, resume=resume).run()
