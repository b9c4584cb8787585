import argparse
import dataclasses
import logging
import os
import shutil
import statistics
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from dotenv import load_dotenv
from PIL import Image

from .backbone import build_backbone
from .bench import bench_latency, compare_traces, count_params, write_report
from .checkpoint import CONTROL_PREFIX, load_archive, load_checkpoint, save_checkpoint
from .conditioners import BaseConditioner, get_conditioner
from .config import (
    DEFAULT_CONFIG_PATH,
    ConfigError,
    RunConfig,
    apply_env,
    config_from_record,
    config_record,
    dump_config,
    get_env_var,
    load_config,
)
from .datagen import SampleCache, as_tensors, load_split, write_split
from .diffusion import (
    NoiseSchedule,
    PredictionKind,
    ShapeMismatchError,
    ancestral_sample,
    log_summary,
    make_schedule,
    respace,
)
from .finetune import (
    ConvergenceTrace,
    TrainConfig,
    TrainData,
    TrainingDivergedError,
    adherence,
    format_threshold_step,
    select_trainable,
    train,
)
from .lora import lora_attach, load_adapter

logger = logging.getLogger(__name__)

CHECKPOINT_FILE = "checkpoint.safetensors"
TRACE_FILE = "trace.csv"
RESOLVED_CONFIG_FILE = "config.resolved.yml"
REPORTS_DIR = "reports"
# RuntimeError covers torch kernel failures such as dtype or device mismatches.
LIBRARY_ERRORS = (ConfigError, ValueError, KeyError, OSError, RuntimeError, TrainingDivergedError)


class Stage:
    """Tracks the step a command is in so failures can name it."""

    def __init__(self) -> None:
        self.name = "setup"

    def __call__(self, name: str) -> None:
        self.name = name
        logger.debug(f"Stage: {name}")


def setup_logging(debug: bool) -> None:
    level_name = "DEBUG" if debug else (get_env_var("LOG_LEVEL") or "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level_name, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """File values, then CONTROLLAB_* environment, then command-line flags."""
    path = args.config or get_env_var("CONFIG") or DEFAULT_CONFIG_PATH
    cfg = apply_env(load_config(path))
    if args.outdir:
        cfg = dataclasses.replace(cfg, outdir=args.outdir)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def resolve_sample_config(recorded: RunConfig, args: argparse.Namespace) -> RunConfig:
    """
    Model sections always come from the checkpoint. The `sample` section and
    outdir follow the usual order: config file, then environment, then flags.
    """
    cfg = recorded
    path = args.config or get_env_var("CONFIG")
    if path:
        file_cfg = load_config(path)
        cfg = dataclasses.replace(cfg, sample=file_cfg.sample, outdir=file_cfg.outdir)
    cfg = apply_env(cfg)
    if args.outdir:
        cfg = dataclasses.replace(cfg, outdir=args.outdir)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, sample=dataclasses.replace(cfg.sample, seed=args.seed))
    return cfg


@contextmanager
def staged_dir(target: str) -> Iterator[str]:
    """
    Yields a scratch directory next to `target` and moves it into place only
    when the block succeeds, so a failed command leaves nothing behind.
    """
    parent = os.path.dirname(os.path.abspath(target))
    os.makedirs(parent, exist_ok=True)
    staging = tempfile.mkdtemp(prefix=".staging-", dir=parent)
    try:
        yield staging
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    if os.path.exists(target):
        shutil.rmtree(target)
    os.replace(staging, target)
    logger.info(f"Wrote outputs to {target}")


def build_schedule(cfg: RunConfig) -> NoiseSchedule:
    sched = make_schedule(cfg.diffusion.T, cfg.diffusion.beta_start, cfg.diffusion.beta_end, cfg.diffusion.schedule)
    log_summary(sched)
    return sched


def load_data(cfg: RunConfig) -> TrainData:
    ds = cfg.dataset
    cache = SampleCache(ds.cache_dir) if ds.cache_dir else None
    images, controls, _ = as_tensors(load_split(ds.seed, ds.train_count, ds.size, ds.kind, cache))
    _, heldout_controls, heldout_masks = as_tensors(
        load_split(ds.heldout_seed, ds.heldout_count, ds.size, ds.kind, cache)
    )
    return TrainData(images, controls, heldout_controls, heldout_masks)


def build_conditioner(cfg: RunConfig, architecture: str, load_pretrained: bool = True) -> BaseConditioner:
    backbone, _, _ = build_backbone(cfg.backbone, cfg.seed)
    if architecture != "base" and load_pretrained:
        if cfg.backbone_checkpoint:
            if not os.path.isfile(cfg.backbone_checkpoint):
                raise ConfigError(
                    f"backbone_checkpoint '{cfg.backbone_checkpoint}' does not exist. "
                    f"Run 'controllab pretrain' first; compare pretrains on its own when the file is missing."
                )
            archive = load_checkpoint(cfg.backbone_checkpoint, backbone)
            if any(n.startswith(CONTROL_PREFIX) for n in archive.tensors):
                raise ConfigError(f"'{cfg.backbone_checkpoint}' is not a backbone-only checkpoint.")
            logger.info(f"Loaded pretrained backbone from {cfg.backbone_checkpoint}")
        else:
            logger.warning("No backbone_checkpoint configured; control training starts from a random backbone.")
    return get_conditioner(
        architecture,
        backbone,
        cfg.seed,
        extractor_cfg=cfg.extractor,
        cross_norm_cfg=cfg.cross_norm,
        controlnet_cfg=cfg.controlnet,
    )


def run_training(
    cfg: RunConfig, train_cfg: TrainConfig, run_dir: str, data: TrainData, sched: NoiseSchedule
) -> ConvergenceTrace:
    """Trains one run and writes checkpoint, trace and resolved config into run_dir."""
    resolved = dataclasses.replace(cfg, train=train_cfg)
    conditioner = build_conditioner(resolved, train_cfg.architecture)
    trace = train(train_cfg, conditioner, data, sched)
    save_checkpoint(os.path.join(run_dir, CHECKPOINT_FILE), conditioner.modules(), config_record(resolved))
    trace.write_csv(os.path.join(run_dir, TRACE_FILE))
    dump_config(resolved, os.path.join(run_dir, RESOLVED_CONFIG_FILE))
    return trace


def _fail(command: str, stage: Stage, error: Exception) -> int:
    logger.error(f"{command} failed during {stage.name}: {error}")
    return 1


def cmd_train(args: argparse.Namespace) -> int:
    stage = Stage()
    try:
        stage("config")
        cfg = resolve_config(args)
        stage("dataset")
        data = load_data(cfg)
        sched = build_schedule(cfg)
        stage("training")
        with staged_dir(os.path.join(cfg.outdir, cfg.run_name)) as run_dir:
            run_training(cfg, cfg.train, run_dir, data, sched)
    except LIBRARY_ERRORS as e:
        return _fail("train", stage, e)
    return 0


def cmd_pretrain(args: argparse.Namespace) -> int:
    stage = Stage()
    try:
        stage("config")
        cfg = resolve_config(args)
        stage("dataset")
        data = load_data(cfg)
        sched = build_schedule(cfg)
        stage("pretraining")
        target = args.out or os.path.join(cfg.outdir, "pretrain")
        with staged_dir(target) as run_dir:
            run_training(cfg, cfg.pretrain, run_dir, data, sched)
    except LIBRARY_ERRORS as e:
        return _fail("pretrain", stage, e)
    return 0


def read_control_dir(directory: str, size: int) -> torch.Tensor:
    paths = sorted(p for p in os.listdir(directory) if p.lower().endswith(".png"))
    if not paths:
        raise ValueError(f"No PNG control maps found in {directory}.")
    maps = []
    for name in paths:
        with Image.open(os.path.join(directory, name)) as img:
            arr = np.asarray(img.convert("L"))
        if arr.shape != (size, size):
            raise ShapeMismatchError(f"Control '{name}' is {arr.shape}, expected ({size}, {size}).")
        maps.append((arr > 127).astype(np.float32))
    return torch.from_numpy(np.stack(maps))[:, None]


def to_png(image: torch.Tensor, path: str) -> None:
    """Maps [-1, 1] linearly onto 8-bit grayscale."""
    arr = ((image.detach().cpu().clamp(-1.0, 1.0) + 1.0) * 127.5).round().to(torch.uint8).numpy()
    Image.fromarray(arr[0], mode="L").save(path)


def cmd_sample(args: argparse.Namespace) -> int:
    stage = Stage()
    try:
        stage("checkpoint")
        archive = load_archive(args.checkpoint)
        cfg = resolve_sample_config(config_from_record(archive.config), args)
        architecture = cfg.train.architecture
        conditioner = build_conditioner(cfg, architecture, load_pretrained=False)
        conditioner.load_state(archive)

        stage("controls")
        count = args.count or cfg.sample.count
        if args.controls == "heldout":
            ds = cfg.dataset
            _, controls, masks = as_tensors(load_split(ds.heldout_seed, count, ds.size, ds.kind))
        else:
            controls = read_control_dir(args.controls, cfg.dataset.size)[:count]
            masks = controls

        handle = None
        if args.lora:
            stage("lora")
            handle = lora_attach(
                load_adapter(args.lora), conditioner.registry(), dict(conditioner.named_parameters())
            )

        stage("sampling")
        seed = cfg.sample.seed
        sched, timesteps = respace(build_schedule(cfg), args.steps or cfg.sample.steps)
        shape = (controls.shape[0], cfg.backbone.in_channels, cfg.backbone.image_size, cfg.backbone.image_size)
        control = None if architecture == "base" else controls
        try:
            samples = ancestral_sample(
                conditioner,
                shape,
                sched,
                timesteps,
                PredictionKind(cfg.train.prediction_kind),
                torch.Generator().manual_seed(seed),
                control=control,
            )
        finally:
            if handle is not None:
                handle.detach()

        stage("writing")
        target = args.out or os.path.join(cfg.outdir, cfg.run_name, "samples")
        with staged_dir(target) as out_dir:
            rows = []
            for i in range(samples.shape[0]):
                name = f"sample_{i:03d}.png"
                to_png(samples[i], os.path.join(out_dir, name))
                rows.append((name, adherence(samples[i], masks[i])))
            frame = pd.DataFrame(rows, columns=["image", "adherence"])
            write_report(frame, out_dir, "adherence")
        logger.info(f"Mean adherence over {len(rows)} samples: {frame['adherence'].mean():.3f}")
    except LIBRARY_ERRORS as e:
        return _fail("sample", stage, e)
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    stage = Stage()
    try:
        stage("config")
        cfg = resolve_config(args)
        stage("build")
        conditioners: Dict[str, BaseConditioner] = {}
        trainable: Dict[str, set] = {}
        for label in ("base", "controlnet", "controlnext"):
            conditioner = build_conditioner(cfg, label, load_pretrained=False)
            train_cfg = dataclasses.replace(cfg.train, architecture=label)
            trainable[label] = set() if label == "base" else select_trainable(train_cfg, conditioner)
            conditioners[label] = conditioner
        stage("params")
        params = count_params(
            [(label, c.registry(), trainable[label]) for label, c in conditioners.items()]
        )

        stage("latency")
        ds, bb = cfg.dataset, cfg.backbone
        generator = torch.Generator().manual_seed(cfg.seed)
        x_t = torch.randn((cfg.bench.batch_size, bb.in_channels, bb.image_size, bb.image_size), generator=generator)
        _, controls, _ = as_tensors(load_split(ds.heldout_seed, cfg.bench.batch_size, ds.size, ds.kind))
        t = cfg.bench.timestep
        closures = [
            (label, (lambda c=c: c.denoise(x_t, t, controls)))
            for label, c in conditioners.items()
        ]
        latency = bench_latency(closures, iters=cfg.bench.iters, warmup=cfg.bench.warmup)

        stage("reports")
        with staged_dir(args.out or os.path.join(cfg.outdir, "bench")) as out_dir:
            reports = os.path.join(out_dir, REPORTS_DIR)
            write_report(params.to_frame(), reports, "params")
            write_report(latency.to_frame(), reports, "latency")
    except LIBRARY_ERRORS as e:
        return _fail("bench", stage, e)
    return 0


def _compare_job(record: Dict[str, Any], run_dir: str, threads: Optional[int]) -> str:
    """One compare sub-run; module-level so worker processes can pickle it."""
    if threads:
        torch.set_num_threads(threads)
    cfg = config_from_record(record)
    os.makedirs(run_dir, exist_ok=True)
    run_training(cfg, cfg.train, run_dir, load_data(cfg), build_schedule(cfg))
    return os.path.join(run_dir, TRACE_FILE)


def _unique_labels(architectures: Sequence[str]) -> List[Tuple[str, str]]:
    seen: Dict[str, int] = {}
    labels = []
    for arch in architectures:
        seen[arch] = seen.get(arch, 0) + 1
        labels.append((arch, arch if seen[arch] == 1 else f"{arch}-{seen[arch]}"))
    return labels


def median_threshold(steps: Sequence[Optional[int]]) -> float:
    return float(statistics.median(float("inf") if s is None else s for s in steps))


def verdict_line(medians: Dict[str, float]) -> str:
    parts = ", ".join(
        f"{label}={'never' if m == float('inf') else f'{m:g}'}" for label, m in medians.items()
    )
    best = min(medians, key=lambda label: medians[label])
    tied = [label for label, m in medians.items() if m == medians[best]]
    winner = "tie" if len(tied) > 1 else best
    return f"verdict: median steps_to_threshold {parts}; fastest: {winner}"


def cmd_compare(args: argparse.Namespace) -> int:
    stage = Stage()
    try:
        stage("config")
        cfg = resolve_config(args)
        parallel = args.parallel or int(get_env_var("PARALLEL") or 1)
        target = args.out or os.path.join(cfg.outdir, "compare")
        if not cfg.backbone_checkpoint or not os.path.isfile(cfg.backbone_checkpoint):
            stage("pretrain")
            pretrain_target = os.path.join(cfg.outdir, "pretrain")
            with staged_dir(pretrain_target) as pretrain_dir:
                run_training(cfg, cfg.pretrain, pretrain_dir, load_data(cfg), build_schedule(cfg))
            cfg = dataclasses.replace(
                cfg, backbone_checkpoint=os.path.join(pretrain_target, CHECKPOINT_FILE)
            )

        with staged_dir(target) as out_dir:
            jobs = []
            for seed in cfg.compare.seeds:
                for arch, label in _unique_labels(cfg.compare.architectures):
                    run_cfg = cfg.with_seed(seed).with_architecture(arch)
                    run_cfg = dataclasses.replace(run_cfg, run_name=f"{label}-seed{seed}")
                    jobs.append((label, seed, config_record(run_cfg), os.path.join(out_dir, run_cfg.run_name)))

            stage("training")
            if parallel > 1:
                logger.info(f"Running {len(jobs)} sub-runs on {parallel} worker processes.")
                with ProcessPoolExecutor(max_workers=parallel) as pool:
                    futures = [pool.submit(_compare_job, record, run_dir, 1) for _, _, record, run_dir in jobs]
                    trace_paths = [f.result() for f in futures]
            else:
                trace_paths = [_compare_job(record, run_dir, None) for _, _, record, run_dir in jobs]

            stage("report")
            threshold = cfg.train.adherence_threshold
            traces = [
                (f"{label}/seed{seed}", ConvergenceTrace.read_csv(path, threshold))
                for (label, seed, _, _), path in zip(jobs, trace_paths)
            ]
            compare_traces(traces, os.path.join(out_dir, REPORTS_DIR))
            per_label: Dict[str, List[Optional[int]]] = {}
            for (label, _, _, _), (_, trace) in zip(jobs, traces):
                per_label.setdefault(label, []).append(trace.steps_to_threshold)
            medians = {label: median_threshold(steps) for label, steps in per_label.items()}
            line = verdict_line(medians)
            with open(os.path.join(out_dir, REPORTS_DIR, "verdict.txt"), "w", encoding="utf-8") as f:
                f.write(line + "\n")
            for label, steps in per_label.items():
                logger.info(f"{label}: steps to threshold per seed {[format_threshold_step(s) for s in steps]}")
        print(line)
    except LIBRARY_ERRORS as e:
        return _fail("compare", stage, e)
    return 0


def cmd_gen_data(args: argparse.Namespace) -> int:
    stage = Stage()
    try:
        stage("config")
        cfg = resolve_config(args)
        ds = cfg.dataset
        stage("generate")
        target = args.out or os.path.join(cfg.outdir, "data")
        with staged_dir(target) as out_dir:
            for split, seed, count in (
                ("train", ds.seed, ds.train_count),
                ("heldout", ds.heldout_seed, ds.heldout_count),
            ):
                samples = load_split(seed, count, ds.size, ds.kind)
                checksum = write_split(os.path.join(out_dir, f"{split}.safetensors"), samples)
                logger.info(f"Split '{split}': {count} samples, checksum {checksum[:12]}.")
                if args.png:
                    png_dir = os.path.join(out_dir, f"{split}_controls")
                    os.makedirs(png_dir)
                    for s in samples:
                        to_png(s.control[0] * 2.0 - 1.0, os.path.join(png_dir, f"control_{s.index:05d}.png"))
    except LIBRARY_ERRORS as e:
        return _fail("gen-data", stage, e)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="YAML run config (default: $CONTROLLAB_CONFIG or config.yml).")
    common.add_argument("--outdir", default=None, help="Output root; overrides the config and $CONTROLLAB_OUTDIR.")
    common.add_argument("--seed", type=int, default=None, help="Seed for initialization, batches and sampling.")
    common.add_argument("--parallel", type=int, default=None, help="Worker processes for compare.")
    common.add_argument("--debug", action="store_true", help="Log at DEBUG level.")

    parser = argparse.ArgumentParser(
        prog="controllab", description="Toy ControlNet vs ControlNeXt diffusion lab."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="Train one control architecture.")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("pretrain", parents=[common], help="Pretrain the unconditional backbone.")
    p.add_argument("--out", default=None, help="Run directory (default: <outdir>/pretrain).")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("sample", parents=[common], help="Sample images from a checkpoint.")
    p.add_argument("checkpoint", help="Checkpoint written by train or pretrain.")
    p.add_argument("--controls", default="heldout", help="'heldout' or a directory of PNG masks.")
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--steps", type=int, default=None, help="Respaced sampling steps.")
    p.add_argument("--lora", default=None, help="LoRA adapter archive to attach while sampling.")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("bench", parents=[common], help="Parameter and latency reports.")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("compare", parents=[common], help="Convergence comparison over seeds.")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("gen-data", parents=[common], help="Write the synthetic dataset splits.")
    p.add_argument("--out", default=None)
    p.add_argument("--png", action="store_true", help="Also write the control maps as PNG files.")
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    setup_logging(args.debug)
    return int(args.func(args))


if __name__ == "__main__":
    sys.exit(main())
