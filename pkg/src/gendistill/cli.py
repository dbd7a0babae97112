"""Command line entry point: ``gendistill {distill,augment,evaluate,report,grid,train,testset}``.

Exit status is 0 on success, 2 when a wall-clock budget cut a run short
(the balanced partial output is kept) and 1 for every other failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__
from .backends import (
    DEFAULT_TEMPLATE,
    BackendUnavailable,
    ExternalBackend,
    GenerationConfig,
    PromptTemplate,
    StubBackend,
    ToyStudentBackend,
)
from .core import (
    BudgetSpec,
    DatasetError,
    DatasetSpec,
    DistilledDataset,
    LabeledImages,
    LabelRegistry,
    builtin_dataset_spec,
    import_cifar100,
    import_image_directory,
    load_distilled,
    read_cifar100_file,
    save_distilled,
)
from .evaluator import CHALLENGE_REPEATS, ConvNetSpec, EvalReport, LabelSpaceMismatch, TrainConfig, repeat_evaluate
from .generation import BudgetExceededError, distill_dataset, timing_report
from .pda import AugmentationSpec, ExpansionPlan, expand_dataset

log = logging.getLogger("gendistill")

CONFIG_VERSION = 1
EXIT_OK, EXIT_FAIL, EXIT_BUDGET = 0, 1, 2
DEFAULT_IPC = {"cifar100": 20, "tinyimagenet": 10}
DEVICE_ENV = "GENDISTILL_DEVICE"


def resolve_device() -> str | None:
    """Device for the external backend; unset means let the backend choose."""
    return os.environ.get(DEVICE_ENV) or None


def write_config_echo(out: Path, command: str, args: argparse.Namespace) -> Path:
    skip = {"func", "config", "command", "verbose"}
    payload = {
        "version": CONFIG_VERSION,
        "gendistill": __version__,
        "command": command,
        "args": {k: v for k, v in vars(args).items() if k not in skip},
    }
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.json"
    path.write_text(json.dumps(payload, indent=2, default=str), encoding="utf-8")
    return path


def load_config_file(path: str | Path) -> dict:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, dict) or "version" not in data:
        raise ValueError(f"{path}: config files need a top-level 'version' key")
    if data["version"] > CONFIG_VERSION:
        raise ValueError(f"{path}: config version {data['version']} is newer than supported {CONFIG_VERSION}")
    return data


def load_split(path: str | Path, registry: LabelRegistry | None = None, resolution: int | None = None) -> LabeledImages:
    """Open a labeled evaluation split.

    Accepts a ``cifar-100-binary`` directory (uses ``test.bin``), a single
    CIFAR-100 ``.bin`` file, a directory in the distilled layout (with a
    manifest) or a directory of per-class image folders.
    """
    p = Path(path)
    if p.is_file():
        return read_cifar100_file(p)
    if not p.is_dir():
        raise FileNotFoundError(p)
    if (p / "test.bin").is_file():
        return import_cifar100(p, splits=("test",))["test"]
    if (p / "manifest.json").is_file():
        return load_distilled(p).as_store()
    if registry is None or resolution is None:
        raise ValueError("an image-folder split needs the class registry and resolution of the distilled set")
    return import_image_directory(p, DatasetSpec(p.name, resolution, registry))


# ---------------------------------------------------------------- commands


def _dataset_spec(args) -> DatasetSpec:
    spec = builtin_dataset_spec(args.dataset, args.classes_file, args.num_classes)
    if args.resolution:
        spec = DatasetSpec(spec.name, args.resolution, spec.registry)
    return spec


def _backend(args, template: PromptTemplate, registry: LabelRegistry):
    if args.backend == "stub":
        return StubBackend()
    if args.backend == "toy":
        if not args.checkpoint:
            raise FileNotFoundError("the toy backend needs --checkpoint (see `gendistill train`)")
        return ToyStudentBackend.from_checkpoint(args.checkpoint, template, registry)
    return ExternalBackend(args.model_id, device=resolve_device(), precision=args.precision)


def cmd_distill(args) -> int:
    out = Path(args.out)
    spec = _dataset_spec(args)
    ipc = args.ipc if args.ipc is not None else DEFAULT_IPC.get(spec.name, 10)
    template = PromptTemplate(args.template)
    try:
        backend = _backend(args, template, spec.registry)
    except (FileNotFoundError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_FAIL
    native = args.native_resolution
    if native is None:
        native = getattr(backend, "resolution", None) or (512 if args.backend == "external" else 2 * spec.resolution)
    gen_cfg = GenerationConfig(args.num_inference_steps, args.guidance_scale, args.seed, native,
                               args.precision, args.batch_size)
    aug = AugmentationSpec(spec.resolution, seed=args.seed) if args.pda else None
    # with PDA, generate at the crop-source size and let the expansion crop down to the target
    gen_spec = DatasetSpec(spec.name, aug.source_size, spec.registry) if aug else spec
    budget = BudgetSpec(args.budget_seconds, ipc, spec.num_classes)

    status = EXIT_OK
    try:
        ds = distill_dataset(gen_spec, budget, backend, template, gen_cfg, workers=args.workers)
        report = ds.metadata.pop("timing_report")
    except BudgetExceededError as exc:
        ds, report = exc.partial, exc.report.to_dict()
        ds.metadata.pop("timing_report", None)
        log.error("%s", exc)
        status = EXIT_BUDGET
    except BackendUnavailable as exc:
        log.error("%s", exc)
        return EXIT_FAIL

    if aug is not None:
        t0 = time.perf_counter()
        ds = expand_dataset(ds, aug, ExpansionPlan(args.factor), workers=args.workers)
        report["phases"]["augmentation"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    save_distilled(ds, out)
    report["phases"]["saving"] = time.perf_counter() - t0
    report["total"] = sum(report["phases"].values())
    report["within_budget"] = not report["aborted"] and report["total"] <= report["budget_seconds"]
    (out / "timing.json").write_text(timing_report(report), encoding="utf-8")
    write_config_echo(out, "distill", args)
    print(timing_report(report))
    print(f"{spec.name}: {len(ds)} images, {ds.num_classes} classes, ipc {ds.ipc} -> {out}")
    return status


def cmd_augment(args) -> int:
    ds = load_distilled(args.distilled)
    size = args.size or ds.resolution
    aug = AugmentationSpec(size, seed=args.seed)
    out_ds = expand_dataset(ds, aug, ExpansionPlan(args.factor), workers=args.workers)
    save_distilled(out_ds, args.out)
    write_config_echo(Path(args.out), "augment", args)
    print(f"ipc {ds.ipc} -> {out_ds.ipc} ({len(out_ds)} images) -> {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ds = load_distilled(args.distilled)
    test = load_split(args.test, ds.registry, ds.resolution)
    if args.mode == "challenge":
        cfg = TrainConfig.challenge(args.seed)
    else:
        cfg = TrainConfig.desk(args.epochs, args.seed, args.batch_size)
    repeats = args.repeats if args.repeats is not None else CHALLENGE_REPEATS
    report = repeat_evaluate(ds, test, cfg, repeats, ConvNetSpec(), dataset_name=args.dataset_name,
                             label=args.label)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "report.json")
    write_config_echo(out, "evaluate", args)
    from .plotting import curves_figure

    curves_figure({f"run {i + 1}": c for i, c in enumerate(report.loss_curves)}, out / "loss_curves.png",
                  ylabel="cross-entropy")
    print(f"{report.label or report.dataset}\tIPC {report.ipc}\t{report.formatted}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .plotting import accuracy_figure

    reports = [EvalReport.load(p) for p in args.reports]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = out / "table.tsv"
    with open(table, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(["model", "dataset", "ipc", "accuracy", "repeats", "mode"])
        for r in reports:
            w.writerow([r.label or r.dataset, r.dataset, r.ipc, r.formatted, len(r.per_run_acc), r.mode])
    accuracy_figure(reports, out / "accuracy.png")
    sys.stdout.write(table.read_text(encoding="utf-8"))
    return EXIT_OK


def cmd_grid(args) -> int:
    from .plotting import image_grid

    ds = load_distilled(args.distilled)
    rows, cols = image_grid(ds, args.classes, args.factor, args.out)
    print(f"{cols} classes x {rows} images -> {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .plotting import add_history_figure
    from .toydata import two_class_blobs
    from .trainer import AddConfig, history_csv, read_history_csv, save_checkpoint, train

    out = Path(args.out)
    if args.data == "blobs":
        store = two_class_blobs(args.per_class, args.resolution, seed=args.seed)
    else:
        store = load_distilled(args.data).as_store()
    cfg = AddConfig(steps=args.steps, batch_size=args.batch_size, lr_g=args.lr, lr_d=args.lr, seed=args.seed,
                    t_student=tuple(args.t_student), weighting=args.weighting, gamma=args.gamma,
                    lambda_distill=args.lambda_distill, student_init=args.student_init,
                    teacher_steps=args.teacher_steps, extractor_steps=args.extractor_steps, checkpoint_every=args.checkpoint_every, out_dir=str(out))
    result = train(cfg, store)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "student.pt", result.models, cfg, store)
    (out / "history.csv").write_text(history_csv(result.history), encoding="utf-8")
    if result.history:
        add_history_figure(read_history_csv(out / "history.csv"), out / "add_losses.png")
    write_config_echo(out, "train", args)
    (out / "classes.txt").write_text("\n".join(store.registry.class_names) + "\n", encoding="utf-8")
    print(f"trained {cfg.steps} steps -> {out / 'student.pt'}")
    return EXIT_OK


def cmd_testset(args) -> int:
    from .toydata import texture_store

    spec = _dataset_spec(args)
    store = texture_store(spec.registry, args.per_class, spec.resolution, args.seed)
    ds = DistilledDataset(store.images.quantized(), store.labels, ("generated",) * len(store), args.per_class,
                          spec.registry, metadata={"dataset": spec.name, "kind": "procedural-test"})
    save_distilled(ds, args.out)
    print(f"{len(ds)} test images -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _add_dataset_args(p):
    p.add_argument("--dataset", default="cifar100", help="cifar100, tinyimagenet or a custom name")
    p.add_argument("--classes-file", help="one class name per line (required for real Tiny-ImageNet names)")
    p.add_argument("--num-classes", type=int, help="class count for custom datasets without a classes file")
    p.add_argument("--resolution", type=int, help="override the dataset resolution")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gendistill", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=func)
        p.add_argument("--config", help="JSON config file with a 'version' key; its 'args' become defaults")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    p = add("distill", cmd_distill, "generate a distilled dataset from class-label prompts")
    _add_dataset_args(p)
    p.add_argument("--ipc", type=int, help="images per class to generate (default: 20 cifar100, 10 tinyimagenet)")
    p.add_argument("--budget-seconds", type=float, default=600.0)
    p.add_argument("--backend", choices=("toy", "stub", "external"), default="external")
    p.add_argument("--checkpoint", help="student checkpoint for the toy backend")
    p.add_argument("--model-id", default="stabilityai/sdxl-turbo", help="external backend model id")
    p.add_argument("--template", default=DEFAULT_TEMPLATE)
    p.add_argument("--num-inference-steps", type=int, default=1)
    p.add_argument("--guidance-scale", type=float, default=0.0)
    p.add_argument("--precision", choices=("full", "half"), default="half")
    p.add_argument("--native-resolution", type=int)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--pda", action=argparse.BooleanOptionalAction, default=True,
                   help="expand with post data augmentation (default on)")
    p.add_argument("--factor", type=int, default=5)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)

    p = add("augment", cmd_augment, "expand a saved distilled dataset with post data augmentation")
    p.add_argument("--distilled", required=True)
    p.add_argument("--factor", type=int, default=5)
    p.add_argument("--size", type=int, help="crop size (default: the dataset resolution)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)

    p = add("evaluate", cmd_evaluate, "train ConvNetD3-W128 on a distilled set and test it")
    p.add_argument("--distilled", required=True)
    p.add_argument("--test", required=True, help="cifar-100-binary dir, .bin file, manifest dir or class-folder dir")
    p.add_argument("--repeats", type=int)
    p.add_argument("--mode", choices=("challenge", "desk"), default="challenge")
    p.add_argument("--epochs", type=int, default=50, help="desk mode only")
    p.add_argument("--batch-size", type=int, default=256, help="desk mode only")
    p.add_argument("--dataset-name")
    p.add_argument("--label", default="")
    p.add_argument("--out", required=True)

    p = add("report", cmd_report, "tabulate evaluation reports and plot them")
    p.add_argument("--reports", nargs="+", required=True)
    p.add_argument("--out", required=True)

    p = add("grid", cmd_grid, "dump a classes x copies image grid")
    p.add_argument("--distilled", required=True)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--factor", type=int, default=5)
    p.add_argument("--out", required=True)

    p = add("train", cmd_train, "train a desk-scale one-step student with adversarial diffusion distillation")
    p.add_argument("--data", default="blobs", help="'blobs' (2-class toy) or a distilled-layout directory")
    p.add_argument("--per-class", type=int, default=256)
    p.add_argument("--resolution", type=int, default=8)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--t-student", type=int, nargs="+", default=[250, 500, 750, 999])
    p.add_argument("--weighting", choices=("exponential", "sds"), default="exponential")
    p.add_argument("--gamma", type=float, default=1e-5)
    p.add_argument("--lambda-distill", type=float, default=1.0)
    p.add_argument("--student-init", choices=("teacher", "scratch"), default="teacher")
    p.add_argument("--teacher-steps", type=int, default=1500)
    p.add_argument("--extractor-steps", type=int, default=200)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("testset", cmd_testset, "write a procedural held-out split matching stub-backend classes")
    _add_dataset_args(p)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--out", required=True)

    parser._subparsers_map = sub.choices  # used by main() to apply config-file defaults
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        data = load_config_file(known.config)
        command = next((a for a in argv if a in parser._subparsers_map), None)
        if command is not None and data.get("command", command) != command:
            raise ValueError(f"config is for {data['command']!r}, not {command!r}")
        sub = parser._subparsers_map.get(command)
        if sub is not None:
            given = {k: v for k, v in data.get("args", {}).items() if k in {a.dest for a in sub._actions}}
            for action in sub._actions:
                if action.dest in given:
                    action.required = False
            sub.set_defaults(**given)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except SystemExit as exc:
        # argparse exits 2 on usage errors; 2 is reserved for budget-partial runs
        return EXIT_OK if exc.code in (0, None) else EXIT_FAIL
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (DatasetError, LabelSpaceMismatch, FileNotFoundError, ValueError, BackendUnavailable) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
