"""Command-line entry point: every stage runnable alone or as one pipeline.

Runs are driven by a flat KEY=VALUE config file; --set flags override file
keys, and a single master seed fans out to per-stage seeds. Every run writes
its resolved config and a machine-readable summary beside its artifacts.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import augment, diffusion, knowledge, schedule, stats, synth, trainer
from .core import (
    ClassRegistry,
    Manifest,
    derive_seed,
    load_manifest,
    load_registry,
    save_manifest,
    save_registry,
)

log = logging.getLogger(__name__)

SUMMARY_SCHEMA_VERSION = 1

# Every config key, with its default. Values are int/float/str; booleans are
# "true"/"false". Override via file (KEY=VALUE lines) or --set KEY=VALUE.
DEFAULTS = {
    "seed": 0,
    # synthetic world
    "world.num_train": 2000,
    "world.num_test": 500,
    "world.image_size": 64,
    # head/tail partition: "frequency" uses partition.threshold; "explicit"
    # uses the comma-separated partition.tail_names
    "partition.policy": "frequency",
    "partition.threshold": 0.1,
    "partition.tail_names": "",
    # classifier training / fine-tuning
    "train.epochs": 10,
    "train.batch_size": 32,
    "train.learning_rate": 0.002,
    "train.loss": "bce",
    "train.focal_gamma": 2.0,
    "train.focal_alpha": 0.25,
    "train.base_width": 24,
    "finetune.epochs": 10,
    "schedule.beta": 0.5,
    # generation
    "gen.cam_threshold": 0.5,
    "gen.dilation_radius": 2,  # at the 64px reference resolution; scales with world.image_size
    "gen.entangle_threshold": 0.5,
    "gen.max_mask_fraction": 0.5,
    "gen.retain_mode": "threshold",
    "gen.inpainter": "oracle",  # "oracle" or "diffusion"
    "gen.debug_dump": 0,  # dump activation/mask PNGs for the first N emitted records
    # knowledge backend: "true" (synthetic ground truth), "matrix", "zero", "llm"
    "knowledge.backend": "true",
    "knowledge.matrix_path": "",
    "knowledge.endpoint": "",
    "knowledge.model": "",
    "knowledge.api_key_env": "TAILAUG_LLM_API_KEY",
    "knowledge.cache_path": "",
    "knowledge.max_retries": 3,
    "knowledge.fallback_matrix_path": "",
    # toy diffusion generator (gen.inpainter=diffusion)
    "diffusion.timesteps": 200,
    "diffusion.train_epochs": 5,
    "diffusion.batch_size": 32,
    "diffusion.learning_rate": 0.002,
    # evaluation
    "eval.threshold": 0.5,
}


def _parse_value(raw: str):
    raw = raw.strip()
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    if raw.lower() in ("true", "false"):
        return raw.lower() == "true"
    return raw


def load_config(path: str | Path | None, overrides: list[str] | None = None, seed: int | None = None) -> dict:
    cfg = dict(DEFAULTS)
    if path is not None:
        for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected KEY=VALUE, got {line!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in DEFAULTS:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            cfg[key] = _parse_value(value)
    for item in overrides or []:
        if "=" not in item:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        if key not in DEFAULTS:
            raise ValueError(f"unknown config key {key!r}")
        cfg[key] = _parse_value(value)
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def write_resolved_config(cfg: dict, out_dir: Path) -> None:
    lines = [f"{k}={cfg[k]}" for k in sorted(cfg)]
    (out_dir / "resolved_config.txt").write_text("\n".join(lines) + "\n")


def _write_summary(out_dir: Path, body: dict) -> None:
    body = {"schema_version": SUMMARY_SCHEMA_VERSION, **body}
    (out_dir / "summary.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def _partition_for(cfg: dict, manifest) -> stats.HeadTailPartition:
    class_stats = stats.compute_class_stats(manifest)
    if cfg["partition.policy"] == "explicit":
        names = [n.strip() for n in str(cfg["partition.tail_names"]).split(",") if n.strip()]
        return stats.partition_head_tail(class_stats, manifest.registry, tail_names=names)
    return stats.partition_head_tail(class_stats, manifest.registry, threshold=cfg["partition.threshold"])


def _world_config(cfg: dict) -> synth.SynthWorldConfig:
    return synth.default_world_config(
        seed=derive_seed(cfg["seed"], "world"), image_size=cfg["world.image_size"]
    )


def _train_config(cfg: dict, *, epochs_key: str = "train.epochs", seed_label: str = "classifier") -> trainer.TrainConfig:
    return trainer.TrainConfig(
        epochs=cfg[epochs_key],
        batch_size=cfg["train.batch_size"],
        learning_rate=cfg["train.learning_rate"],
        loss=cfg["train.loss"],
        focal_gamma=cfg["train.focal_gamma"],
        focal_alpha=cfg["train.focal_alpha"],
        image_size=cfg["world.image_size"],
        base_width=cfg["train.base_width"],
        seed=derive_seed(cfg["seed"], seed_label),
    )


def _generation_config(cfg: dict) -> augment.GenerationConfig:
    from .cam import scale_dilation_radius

    # gen.dilation_radius is specified at the 64px reference resolution
    return augment.GenerationConfig(
        cam_threshold=cfg["gen.cam_threshold"],
        dilation_radius=scale_dilation_radius(cfg["gen.dilation_radius"], 64, cfg["world.image_size"]),
        entangle_threshold=cfg["gen.entangle_threshold"],
        max_mask_fraction=cfg["gen.max_mask_fraction"],
        retain_mode=cfg["gen.retain_mode"],
        seed=derive_seed(cfg["seed"], "generation"),
    )


def _knowledge_backend(cfg: dict, registry: ClassRegistry, world_cfg: synth.SynthWorldConfig | None):
    kind = cfg["knowledge.backend"]
    if kind == "true":
        if world_cfg is None:
            raise ValueError("knowledge.backend=true needs a synthetic world")
        return knowledge.MatrixBackend(synth.true_entanglement_matrix(world_cfg))
    if kind == "zero":
        return knowledge.ZeroBackend()
    if kind == "matrix":
        if not cfg["knowledge.matrix_path"]:
            raise ValueError("knowledge.backend=matrix needs knowledge.matrix_path")
        matrix = knowledge.EntanglementMatrix.load(cfg["knowledge.matrix_path"], registry)
        return knowledge.MatrixBackend(matrix)
    if kind == "llm":
        llm_cfg = knowledge.LLMConfig(
            endpoint=cfg["knowledge.endpoint"],
            model=cfg["knowledge.model"],
            api_key_env=cfg["knowledge.api_key_env"],
            max_retries=cfg["knowledge.max_retries"],
        )
        cache = knowledge.ScoreCache(cfg["knowledge.cache_path"] or None)
        backend = knowledge.LLMBackend(llm_cfg, cache=cache)
        if cfg["knowledge.fallback_matrix_path"]:
            fallback = knowledge.MatrixBackend(
                knowledge.EntanglementMatrix.load(cfg["knowledge.fallback_matrix_path"], registry)
            )
            return _FallbackBackend(backend, fallback)
        return backend
    raise ValueError(f"unknown knowledge.backend {kind!r}")


class _FallbackBackend:
    """LLM backend that falls back to a fixed matrix when transport fails."""

    def __init__(self, primary, fallback):
        self.primary = primary
        self.fallback = fallback

    def query(self, pairs):
        try:
            return self.primary.query(pairs)
        except knowledge.KnowledgeBackendError as exc:
            log.warning("knowledge backend failed (%s); using fallback matrix", exc)
            return self.fallback.query(pairs)


def cmd_synth(cfg: dict, out_dir: Path) -> dict:
    world_cfg = _world_config(cfg)
    train_manifest, _ = synth.generate_synthetic_dataset(world_cfg, out_dir, cfg["world.num_train"], "train")
    test_manifest, _ = synth.generate_synthetic_dataset(world_cfg, out_dir, cfg["world.num_test"], "test")
    save_manifest(train_manifest, out_dir / "manifest_train.csv")
    save_manifest(test_manifest, out_dir / "manifest_test.csv")
    save_registry(world_cfg.registry, out_dir / "registry.json")
    synth.true_entanglement_matrix(world_cfg).save(out_dir / "entanglement_true.json")
    return {"train_records": len(train_manifest), "test_records": len(test_manifest)}


def cmd_stats(cfg: dict, manifest_path: Path, registry_path: Path, out_path: Path | None) -> dict:
    registry = load_registry(registry_path)
    manifest = load_manifest(manifest_path, registry)
    class_stats = stats.compute_class_stats(manifest)
    partition = _partition_for(cfg, manifest)
    rows = stats.stats_report(class_stats, registry, partition)
    report = {"total_samples": class_stats.total_samples, "classes": rows}
    text = json.dumps(report, indent=2, sort_keys=True)
    if out_path is not None:
        out_path.write_text(text + "\n")
    else:
        print(text)
    return report


def cmd_train_gen(cfg: dict, normals_path: Path, registry_path: Path, out_path: Path) -> dict:
    registry = load_registry(registry_path)
    normals = load_manifest(normals_path, registry)
    dconfig = diffusion.DiffusionConfig(
        image_size=cfg["world.image_size"],
        timesteps=cfg["diffusion.timesteps"],
        train_epochs=cfg["diffusion.train_epochs"],
        batch_size=cfg["diffusion.batch_size"],
        learning_rate=cfg["diffusion.learning_rate"],
    )
    ckpt = diffusion.train_normal_generator(normals, dconfig, derive_seed(cfg["seed"], "generator"))
    ckpt.save(out_path)
    return {"generator_id": ckpt.generator_id, "train_losses": list(ckpt.train_losses)}


def cmd_train_classifier(cfg: dict, manifest_path: Path, registry_path: Path, out_path: Path) -> dict:
    registry = load_registry(registry_path)
    manifest = load_manifest(manifest_path, registry)
    tcfg = _train_config(cfg)
    ckpt = trainer.train_classifier(tcfg, trainer.constant_provider(manifest), registry)
    ckpt.save(out_path)
    return {"train_log": list(ckpt.train_log)}


def _load_world_for_oracle(cfg: dict, world_dir: Path) -> tuple[synth.GroundTruthStore, synth.SynthWorldConfig]:
    store = synth.GroundTruthStore.load(world_dir / "ground_truth_train")
    return store, _world_config(cfg)


def cmd_generate(
    cfg: dict,
    manifest_path: Path,
    registry_path: Path,
    classifier_path: Path,
    out_dir: Path,
    world_dir: Path | None,
    generator_path: Path | None,
) -> dict:
    registry = load_registry(registry_path)
    manifest = load_manifest(manifest_path, registry)
    classifier = trainer.ClassifierCheckpoint.load(classifier_path)
    partition = _partition_for(cfg, manifest)
    world_cfg = None
    if cfg["gen.inpainter"] == "oracle":
        if world_dir is None:
            raise ValueError("gen.inpainter=oracle needs --world pointing at the synth output")
        store, world_cfg = _load_world_for_oracle(cfg, world_dir)
        inpainter = synth.OracleInpainter(store)
    elif cfg["gen.inpainter"] == "diffusion":
        if generator_path is None:
            raise ValueError("gen.inpainter=diffusion needs --generator")
        inpainter = augment.DiffusionInpainter(diffusion.GeneratorCheckpoint.load(generator_path))
    else:
        raise ValueError(f"unknown gen.inpainter {cfg['gen.inpainter']!r}")
    if cfg["knowledge.backend"] == "true" and world_cfg is None:
        world_cfg = _world_config(cfg)
    backend = _knowledge_backend(cfg, registry, world_cfg)
    augmented, provenance = augment.run_generation(
        manifest, classifier.handle(), inpainter, backend, partition, _generation_config(cfg), out_dir
    )
    if cfg["gen.debug_dump"] > 0:
        _dump_cam_debug(cfg, manifest, classifier, provenance, out_dir)
    counts: dict[str, int] = {}
    for line in provenance:
        counts[line["status"]] = counts.get(line["status"], 0) + 1
    return {"emitted": len(augmented), "inputs": len(manifest), "status_counts": counts}


def _dump_cam_debug(cfg: dict, manifest, classifier, provenance, out_dir: Path) -> None:
    """Activation maps as grayscale PNGs and masks as 1-bit PNGs, for inspection."""
    from . import cam as cam_mod
    from .core import load_image

    debug_dir = out_dir / "debug"
    debug_dir.mkdir(exist_ok=True)
    handle = classifier.handle()
    by_id = {r.id: r for r in manifest}
    emitted = [line for line in provenance if line["status"] == "emitted"]
    radius = cam_mod.scale_dilation_radius(cfg["gen.dilation_radius"], 64, cfg["world.image_size"])
    for line in emitted[: cfg["gen.debug_dump"]]:
        record = by_id[line["source_id"]]
        image = load_image(record.image_path)
        for k in line["inpainted_classes"]:
            activation = cam_mod.grad_cam(handle, image, k)
            mask = cam_mod.cam_to_mask(activation, cfg["gen.cam_threshold"], radius)
            cam_mod.save_activation_png(activation, debug_dir / f"{record.id}_class{k:02d}_cam.png")
            cam_mod.save_mask_png(mask, debug_dir / f"{record.id}_class{k:02d}_mask.png")


def cmd_finetune(
    cfg: dict,
    manifest_path: Path,
    augmented_paths: list[Path],
    registry_path: Path,
    init_path: Path,
    out_path: Path,
) -> dict:
    registry = load_registry(registry_path)
    d_o = load_manifest(manifest_path, registry)
    # Several augmentation sources concatenate into one set before the shuffle.
    aug_records = []
    for p in augmented_paths:
        aug_records.extend(load_manifest(p, registry, split_tag="augmented").records)
    d_i = Manifest(registry=registry, records=tuple(aug_records), split_tag="augmented")
    sched = schedule.ProgressiveSchedule(
        beta=cfg["schedule.beta"],
        total_augmented=len(d_i),
        ordering_seed=derive_seed(cfg["seed"], "ordering"),
    )
    provider = lambda epoch: schedule.build_epoch_dataset(d_o, d_i, epoch, sched)
    tcfg = _train_config(cfg, epochs_key="finetune.epochs", seed_label="finetune")
    init = trainer.ClassifierCheckpoint.load(init_path)
    ckpt = trainer.train_classifier(tcfg, provider, registry, init_from=init)
    ckpt.save(out_path)
    return {"augmented_total": len(d_i), "train_log": list(ckpt.train_log)}


def cmd_evaluate(
    cfg: dict,
    checkpoint_path: Path,
    test_path: Path,
    registry_path: Path,
    train_path: Path | None,
    out_path: Path | None,
) -> dict:
    registry = load_registry(registry_path)
    test = load_manifest(test_path, registry, split_tag="test")
    partition_source = load_manifest(train_path, registry) if train_path is not None else test
    partition = _partition_for(cfg, partition_source)
    ckpt = trainer.ClassifierCheckpoint.load(checkpoint_path)
    report = trainer.evaluate(ckpt, test, partition, threshold=cfg["eval.threshold"])
    body = report.to_json_dict()
    if out_path is not None:
        out_path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    return body


def cmd_report(run_dir: Path) -> dict:
    """Render plots and a per-class Markdown table from a pipeline summary."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    summary = json.loads((run_dir / "summary.json").read_text())
    dist = summary["class_distribution"]
    names = [row["class"] for row in dist]
    counts = [row["count"] for row in dist]
    colors = ["tab:red" if row["group"] == "tail" else "tab:blue" for row in dist]
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.bar(names, counts, color=colors)
    ax.set_ylabel("positive samples")
    ax.set_title("class distribution (tail in red)")
    plt.xticks(rotation=45, ha="right")
    fig.tight_layout()
    fig.savefig(run_dir / "class_distribution.png")
    plt.close(fig)

    baseline = summary["baseline_eval"]["per_class"]
    treated = summary["finetuned_eval"]["per_class"]
    deltas = [t["f1"] - b["f1"] for b, t in zip(baseline, treated)]
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.bar(names, deltas, color=colors)
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.set_ylabel("F1 delta (fine-tuned - baseline)")
    ax.set_title("per-class F1 change")
    plt.xticks(rotation=45, ha="right")
    fig.tight_layout()
    fig.savefig(run_dir / "f1_delta.png")
    plt.close(fig)

    lines = [
        "| Class | Group | Baseline F1 | Fine-tuned F1 | Delta |",
        "|---|---|---|---|---|",
    ]
    for row, b, t, d in zip(dist, baseline, treated, deltas):
        lines.append(
            f"| {row['class']} | {row['group']} | {b['f1'] * 100:.2f} | {t['f1'] * 100:.2f} | {d * 100:+.2f} |"
        )
    lines.append(
        f"| macro | all | {summary['baseline_eval']['macro_f1'] * 100:.2f} "
        f"| {summary['finetuned_eval']['macro_f1'] * 100:.2f} "
        f"| {(summary['finetuned_eval']['macro_f1'] - summary['baseline_eval']['macro_f1']) * 100:+.2f} |"
    )
    (run_dir / "report.md").write_text("\n".join(lines) + "\n")
    return {"report": str(run_dir / "report.md")}


def cmd_pipeline(cfg: dict, out_dir: Path) -> dict:
    """All stages end to end on the synthetic world."""
    world_dir = out_dir / "world"
    stage = "synth"
    try:
        world_summary = cmd_synth(cfg, world_dir)
        world_cfg = _world_config(cfg)
        registry = world_cfg.registry
        d_o = load_manifest(world_dir / "manifest_train.csv", registry)
        test = load_manifest(world_dir / "manifest_test.csv", registry, split_tag="test")

        stage = "stats"
        class_stats = stats.compute_class_stats(d_o)
        partition = _partition_for(cfg, d_o)
        distribution = stats.stats_report(class_stats, registry, partition)

        stage = "train-classifier"
        baseline = trainer.train_classifier(_train_config(cfg), trainer.constant_provider(d_o), registry)
        baseline.save(out_dir / "classifier_baseline.ckpt")

        stage = "evaluate-baseline"
        baseline_eval = trainer.evaluate(baseline, test, partition, threshold=cfg["eval.threshold"])

        stage = "generate"
        if cfg["gen.inpainter"] == "diffusion":
            normals = [r for r in d_o if not r.labels.any()]
            normals_manifest = Manifest(registry=registry, records=tuple(normals), split_tag="train")
            dconfig = diffusion.DiffusionConfig(
                image_size=cfg["world.image_size"],
                timesteps=cfg["diffusion.timesteps"],
                train_epochs=cfg["diffusion.train_epochs"],
                batch_size=cfg["diffusion.batch_size"],
                learning_rate=cfg["diffusion.learning_rate"],
            )
            gen_ckpt = diffusion.train_normal_generator(normals_manifest, dconfig, derive_seed(cfg["seed"], "generator"))
            gen_ckpt.save(out_dir / "generator.ckpt")
            inpainter = augment.DiffusionInpainter(gen_ckpt)
        else:
            store = synth.GroundTruthStore.load(world_dir / "ground_truth_train")
            inpainter = synth.OracleInpainter(store)
        backend = _knowledge_backend(cfg, registry, world_cfg)
        d_i, provenance = augment.run_generation(
            d_o, baseline.handle(), inpainter, backend, partition, _generation_config(cfg), out_dir / "generation"
        )
        status_counts: dict[str, int] = {}
        for line in provenance:
            status_counts[line["status"]] = status_counts.get(line["status"], 0) + 1

        stage = "finetune"
        sched = schedule.ProgressiveSchedule(
            beta=cfg["schedule.beta"],
            total_augmented=len(d_i),
            ordering_seed=derive_seed(cfg["seed"], "ordering"),
        )
        provider = lambda epoch: schedule.build_epoch_dataset(d_o, d_i, epoch, sched)
        finetuned = trainer.train_classifier(
            _train_config(cfg, epochs_key="finetune.epochs", seed_label="finetune"),
            provider,
            registry,
            init_from=baseline,
        )
        finetuned.save(out_dir / "classifier_finetuned.ckpt")

        stage = "evaluate-finetuned"
        finetuned_eval = trainer.evaluate(finetuned, test, partition, threshold=cfg["eval.threshold"])
        delta = trainer.compare_reports(baseline_eval, finetuned_eval)
    except Exception:
        log.error("pipeline failed during stage %r", stage)
        raise PipelineStageError(stage)

    summary = {
        "world": world_summary,
        "class_distribution": distribution,
        "generation": {"emitted": len(d_i), "inputs": len(d_o), "status_counts": status_counts},
        "schedule": {
            "beta": cfg["schedule.beta"],
            "per_epoch_included": [
                schedule.included_count(n, sched) for n in range(cfg["finetune.epochs"])
            ],
        },
        "baseline_eval": baseline_eval.to_json_dict(),
        "finetuned_eval": finetuned_eval.to_json_dict(),
        "delta": delta.to_json_dict(),
    }
    _write_summary(out_dir, summary)
    cmd_report(out_dir)
    return summary


class PipelineStageError(RuntimeError):
    def __init__(self, stage: str):
        super().__init__(f"pipeline failed during stage {stage!r}")
        self.stage = stage


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tailaug", description=__doc__)
    parser.add_argument("--config", type=Path, default=None, help="KEY=VALUE config file")
    parser.add_argument("--seed", type=int, default=None, help="master seed (overrides config)")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    parser.add_argument("--out", type=Path, default=Path("runs/run0"), help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", help="generate the synthetic train/test world")

    p = sub.add_parser("stats", help="class frequencies and head/tail split")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--registry", type=Path, required=True)
    p.add_argument("--report", type=Path, default=None, help="write JSON here instead of stdout")

    p = sub.add_parser("train-gen", help="train the normal-image diffusion generator")
    p.add_argument("--normals", type=Path, required=True)
    p.add_argument("--registry", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)

    p = sub.add_parser("train-classifier", help="train the baseline classifier")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--registry", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)

    p = sub.add_parser("generate", help="synthesize the augmented set")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--registry", type=Path, required=True)
    p.add_argument("--classifier", type=Path, required=True)
    p.add_argument("--world", type=Path, default=None, help="synth output dir (oracle inpainter)")
    p.add_argument("--generator", type=Path, default=None, help="generator checkpoint (diffusion inpainter)")

    p = sub.add_parser("finetune", help="fine-tune with the progressive schedule")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--augmented", type=Path, required=True, action="append")
    p.add_argument("--registry", type=Path, required=True)
    p.add_argument("--init", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)

    p = sub.add_parser("evaluate", help="per-class F1 report on a test manifest")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--test", type=Path, required=True)
    p.add_argument("--registry", type=Path, required=True)
    p.add_argument("--train-manifest", type=Path, default=None, help="manifest for the head/tail split")
    p.add_argument("--report", type=Path, default=None)

    p = sub.add_parser("report", help="plots and Markdown table for a pipeline run")
    p.add_argument("--run", type=Path, required=True)

    sub.add_parser("pipeline", help="all stages end to end on the synthetic world")
    return parser


def run_command(argv: list[str]) -> int:
    """Parse and execute; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set, args.seed)
        out_dir: Path = args.out
        out_dir.mkdir(parents=True, exist_ok=True)
        if args.command == "synth":
            summary = cmd_synth(cfg, out_dir)
            _write_summary(out_dir, {"synth": summary})
        elif args.command == "stats":
            cmd_stats(cfg, args.manifest, args.registry, args.report)
        elif args.command == "train-gen":
            summary = cmd_train_gen(cfg, args.normals, args.registry, args.checkpoint)
            _write_summary(out_dir, {"train_gen": summary})
        elif args.command == "train-classifier":
            summary = cmd_train_classifier(cfg, args.manifest, args.registry, args.checkpoint)
            _write_summary(out_dir, {"train_classifier": summary})
        elif args.command == "generate":
            summary = cmd_generate(
                cfg, args.manifest, args.registry, args.classifier, out_dir, args.world, args.generator
            )
            _write_summary(out_dir, {"generate": summary})
        elif args.command == "finetune":
            summary = cmd_finetune(cfg, args.manifest, args.augmented, args.registry, args.init, args.checkpoint)
            _write_summary(out_dir, {"finetune": summary})
        elif args.command == "evaluate":
            summary = cmd_evaluate(cfg, args.checkpoint, args.test, args.registry, args.train_manifest, args.report)
            if args.report is None:
                print(json.dumps(summary, indent=2, sort_keys=True))
        elif args.command == "report":
            cmd_report(args.run)
        elif args.command == "pipeline":
            cmd_pipeline(cfg, out_dir)
        else:  # pragma: no cover - argparse enforces the choices
            parser.error(f"unknown subcommand {args.command!r}")
        write_resolved_config(cfg, out_dir)
    except PipelineStageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> int:
    return run_command(sys.argv[1:])


if __name__ == "__main__":
    raise SystemExit(main())
