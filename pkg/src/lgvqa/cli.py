"""Command-line entry point.

Exit codes are fixed for scripting: 0 success, 2 configuration error,
3 data error, 4 partial failure.  Every command takes --config pointing at a
JSON file whose keys mirror the flags; explicit flags win over the file,
the file wins over built-in defaults.  Guided modes resolve their cache from
--guidance-cache or, failing that, $LGVQA_CACHE_DIR/guidance.jsonl.
"""

from __future__ import annotations

import functools
import json
import logging
import os
import sys
from pathlib import Path

import click
from click.core import ParameterSource

from .backends import (
    BASE_TEXT_LEN,
    EXTENDED_TEXT_LEN,
    DualEncoderBackend,
    ToyDualEncoder,
    ToyFusionBackend,
    extend_positional_table,
    load_checkpoint,
    save_checkpoint,
)
from .core import read_instances, write_instances
from .data import (
    load_aokvqa,
    load_iconqa,
    load_scienceqa,
    load_vsr,
    synth_dataset,
)
from .errors import ConfigError, DataError, GenerationInputError, LgvqaError
from .evalreport import (
    accuracy,
    compare_modes,
    join_with_instances,
    render_comparison,
    render_reference_rows,
    render_report,
)
from .guidance import (
    GuidanceCache,
    GuidanceKind,
    ingest_detection_file,
    ingest_scene_graph_file,
    parse_kinds,
    serialize_objects,
    serialize_scene_graph,
    stub_generator,
)
from .scoring import GUIDED_MODES, ScoringMode, evaluate_instances, read_predictions, write_predictions
from .training import TrainConfig, default_learning_rate, train, write_metrics_csv

logger = logging.getLogger(__name__)

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_PARTIAL = 4

ADAPTERS = ("canonical", "aokvqa", "scienceqa", "vsr", "iconqa")
DEFAULT_CACHE_NAME = "guidance.jsonl"


def _fail(code: int, message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def handled(fn):
    """Map package errors onto the documented exit codes."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            _fail(EXIT_CONFIG, str(exc))
        except (DataError, LgvqaError, OSError, json.JSONDecodeError) as exc:
            _fail(EXIT_DATA, str(exc))
    return wrapper


def merged_params(ctx: click.Context, params: dict) -> dict:
    """Apply precedence: CLI flag > config file > built-in default."""
    config_path = params.pop("config", None)
    if not config_path:
        return params
    try:
        file_values = json.loads(Path(config_path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {config_path}: invalid JSON: {exc}") from exc
    if not isinstance(file_values, dict):
        raise ConfigError(f"config file {config_path}: expected a JSON object")
    unknown = set(file_values) - set(params)
    if unknown:
        raise ConfigError(
            f"config file {config_path}: unknown keys: {', '.join(sorted(unknown))}")
    out = {}
    for name, value in params.items():
        if ctx.get_parameter_source(name) == ParameterSource.COMMANDLINE:
            out[name] = value
        elif name in file_values:
            out[name] = file_values[name]
        else:
            out[name] = value
    return out


def load_dataset(path: str, adapter: str, guidance_store=None):
    if adapter == "canonical":
        return read_instances(path)
    if adapter == "aokvqa":
        return load_aokvqa(path, rationale_store=guidance_store)
    if adapter == "scienceqa":
        return load_scienceqa(path, lecture_store=guidance_store)
    if adapter == "vsr":
        return load_vsr(path)
    if adapter == "iconqa":
        return load_iconqa(path)
    raise ConfigError(f"unknown adapter {adapter!r}; choose from {ADAPTERS}")


def resolve_backend(spec: str, seed: int):
    if spec == "toy-dual":
        return ToyDualEncoder(seed=seed)
    if spec == "toy-fusion":
        return ToyFusionBackend(seed=seed)
    if spec.startswith("plugin:"):
        raise ConfigError(
            f"backend {spec!r}: plugin adapters are provided by separate "
            f"packages; this package ships toy-dual and toy-fusion")
    if Path(spec).exists():
        return load_checkpoint(spec)
    raise ConfigError(
        f"unknown backend {spec!r}: expected toy-dual, toy-fusion, "
        f"plugin:<name> or a checkpoint path")


def prepare_backend_for_mode(backend, mode: ScoringMode):
    """Extend a base-length dual encoder when guidance is concatenated."""
    if (mode == ScoringMode.GUIDED_CONCAT
            and isinstance(backend, DualEncoderBackend)
            and backend.max_text_len == BASE_TEXT_LEN):
        logger.info("extending positional table %d -> %d for guided text",
                    BASE_TEXT_LEN, EXTENDED_TEXT_LEN)
        return extend_positional_table(backend, EXTENDED_TEXT_LEN)
    return backend


def resolve_cache_path(explicit: str | None, required: bool) -> Path | None:
    if explicit:
        return Path(explicit)
    env_dir = os.environ.get("LGVQA_CACHE_DIR")
    if env_dir:
        return Path(env_dir) / DEFAULT_CACHE_NAME
    if required:
        raise ConfigError(
            "a guided mode needs --guidance-cache (or LGVQA_CACHE_DIR)")
    return None


def resolve_mode(value: str) -> ScoringMode:
    try:
        return ScoringMode(value)
    except ValueError:
        raise ConfigError(
            f"unknown mode {value!r}; choose from "
            f"{', '.join(m.value for m in ScoringMode)}")


def _load_bundle_store(mode: ScoringMode, cache_flag: str | None):
    if mode not in GUIDED_MODES:
        return None
    path = resolve_cache_path(cache_flag, required=True)
    return GuidanceCache.load(path).bundle_store()


def _write_reports(out_dir: Path, records, instances, paper_ref: str | None = None):
    entries = join_with_instances(records, instances)
    report = accuracy(entries)
    payload = report.to_dict()
    text = render_report(report)
    if paper_ref:
        from .evalreport import load_reference
        payload["reference"] = load_reference(paper_ref)
        text += "\n\n" + render_reference_rows(paper_ref)
    (out_dir / "report.json").write_text(
        json.dumps(payload, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    (out_dir / "report.txt").write_text(text + "\n", encoding="utf-8")
    return report


def common_options(fn):
    for option in reversed([
        click.option("--dataset", required=True, help="dataset file path"),
        click.option("--adapter", default="canonical", show_default=True,
                     help=f"dataset adapter: {', '.join(ADAPTERS)}"),
        click.option("--seed", default=0, show_default=True, type=int),
        click.option("--out-dir", default="out", show_default=True),
        click.option("--config", default=None,
                     help="JSON file of flag values (flags override it)"),
    ]):
        fn = option(fn)
    return fn


@click.group()
def main():
    """Language-guided multi-choice visual question answering."""
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--n", default=32, show_default=True, type=int)
@click.option("--n-choices", default=4, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", required=True, help="output JSONL path")
@handled
def synth(n, n_choices, seed, out):
    """Write a deterministic synthetic dataset in the canonical JSONL format."""
    instances = synth_dataset(seed=seed, n=n, n_choices=n_choices)
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    write_instances(out, instances)
    click.echo(f"wrote {len(instances)} instances to {out}")


@main.command("zero-shot")
@common_options
@click.option("--backend", default="toy-dual", show_default=True)
@click.option("--mode", default="zero_shot", show_default=True)
@click.option("--guidance-kinds", default=None,
              help="preset (all, cso, csol) or comma list; defaults to every "
                   "kind present in the cache")
@click.option("--guidance-cache", default=None)
@click.pass_context
@handled
def cmd_zero_shot(ctx, **params):
    """Score a dataset without training and report accuracy."""
    params = merged_params(ctx, params)
    mode = resolve_mode(params["mode"])
    kinds = parse_kinds(params["guidance_kinds"]) \
        if params["guidance_kinds"] else None
    bundle_store = _load_bundle_store(mode, params["guidance_cache"])
    instances = load_dataset(params["dataset"], params["adapter"])
    backend = resolve_backend(params["backend"], params["seed"])
    backend = prepare_backend_for_mode(backend, mode)

    out_dir = Path(params["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    records = evaluate_instances(backend, instances, bundle_store=bundle_store,
                                 mode=mode, guidance_kinds=kinds)
    write_predictions(out_dir / "predictions.jsonl", records)
    report = _write_reports(out_dir, records, instances)
    click.echo(f"overall accuracy: {report.overall.accuracy:.2f} "
               f"({report.overall.correct}/{report.overall.n})")
    click.echo(f"artifacts: {out_dir}/predictions.jsonl, "
               f"{out_dir}/report.json, {out_dir}/report.txt")


@main.command("train")
@common_options
@click.option("--backend", default="toy-dual", show_default=True)
@click.option("--mode", default="unguided", show_default=True)
@click.option("--guidance-kinds", default=None,
              help="preset (all, cso, csol) or comma list; defaults to every "
                   "kind present in the cache")
@click.option("--guidance-cache", default=None)
@click.option("--lr", default=None, type=float,
              help="defaults to 5e-2 (toy-dual), 1e-2 (toy-fusion), 3e-6 otherwise")
@click.option("--batch-size", default=8, show_default=True, type=int)
@click.option("--epochs", default=8, show_default=True, type=int)
@click.option("--weight-decay", default=0.0, show_default=True, type=float)
@click.option("--val-dataset", default=None, help="optional validation file")
@click.pass_context
@handled
def cmd_train(ctx, **params):
    """Fine-tune a backend with choice cross-entropy and save a checkpoint."""
    params = merged_params(ctx, params)
    mode = resolve_mode(params["mode"])
    kinds = parse_kinds(params["guidance_kinds"]) \
        if params["guidance_kinds"] else None
    bundle_store = _load_bundle_store(mode, params["guidance_cache"])
    instances = load_dataset(params["dataset"], params["adapter"])
    val_instances = None
    if params["val_dataset"]:
        val_instances = load_dataset(params["val_dataset"], params["adapter"])
    backend = resolve_backend(params["backend"], params["seed"])
    backend = prepare_backend_for_mode(backend, mode)

    lr = params["lr"]
    if lr is None:
        lr = default_learning_rate(backend)
    config = TrainConfig(batch_size=params["batch_size"], epochs=params["epochs"],
                         learning_rate=lr, weight_decay=params["weight_decay"],
                         mode=mode, guidance_kinds=kinds, seed=params["seed"])
    result = train(backend, instances, config, bundle_store=bundle_store,
                   val_dataset=val_instances)

    out_dir = Path(params["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.backend, out_dir / "checkpoint.npz")
    write_metrics_csv(out_dir / "metrics.csv", result.history)
    eval_set = val_instances if val_instances else instances
    records = evaluate_instances(result.backend, eval_set,
                                 bundle_store=bundle_store, mode=mode,
                                 guidance_kinds=kinds)
    write_predictions(out_dir / "predictions.jsonl", records)
    report = _write_reports(out_dir, records, eval_set)
    last = result.history[-1]
    click.echo(f"trained {config.epochs} epochs ({last.step} steps), "
               f"final mean loss {last.mean_loss:.4f}, "
               f"train acc {last.train_acc:.2f}")
    click.echo(f"eval accuracy: {report.overall.accuracy:.2f} "
               f"({report.overall.correct}/{report.overall.n})")
    click.echo(f"artifacts: {out_dir}/checkpoint.npz, {out_dir}/metrics.csv, "
               f"{out_dir}/predictions.jsonl, {out_dir}/report.json, "
               f"{out_dir}/report.txt")


@main.command("guidance")
@common_options
@click.option("--kinds", default="rationale", show_default=True,
              help="kinds to generate with the stub generator")
@click.option("--generator", default="stub", show_default=True)
@click.option("--guidance-cache", default=None)
@click.option("--overwrite", is_flag=True, default=False)
@click.option("--scene-graphs", default=None,
              help="triplet JSONL to ingest as scene_graph guidance")
@click.option("--detections", default=None,
              help="detection JSONL to ingest as objects guidance")
@click.pass_context
@handled
def cmd_guidance(ctx, **params):
    """Populate the guidance cache from the stub generator and ingest files."""
    params = merged_params(ctx, params)
    if params["generator"] != "stub":
        raise ConfigError(
            f"generator {params['generator']!r}: only the deterministic stub "
            f"ships with this package; plugins register their own command")
    cache_path = resolve_cache_path(params["guidance_cache"], required=True)
    cache_path.parent.mkdir(parents=True, exist_ok=True)
    cache = GuidanceCache.load(cache_path) if cache_path.exists() \
        else GuidanceCache(cache_path)
    instances = load_dataset(params["dataset"], params["adapter"],
                             guidance_store=cache)
    overwrite = params["overwrite"]
    failed: list[tuple[str, str, str]] = []
    counts: dict[str, int] = {}

    ingested_kinds = set()
    if params["scene_graphs"]:
        ingested_kinds.add(GuidanceKind.SCENE_GRAPH)
        by_image = ingest_scene_graph_file(params["scene_graphs"])
        for instance in instances:
            triplets = by_image.get(instance.image_ref)
            if triplets is None:
                failed.append((instance.id, "scene_graph", "image not in triplet file"))
                continue
            text = serialize_scene_graph(triplets)
            if text is None:
                logger.warning("no triplets for %s; scene_graph entry absent",
                               instance.id)
                continue
            cache.put(instance.id, GuidanceKind.SCENE_GRAPH, text,
                      source="plugin:ingest", overwrite=overwrite)
            counts["scene_graph"] = counts.get("scene_graph", 0) + 1

    if params["detections"]:
        ingested_kinds.add(GuidanceKind.OBJECTS)
        by_image = ingest_detection_file(params["detections"])
        for instance in instances:
            detections = by_image.get(instance.image_ref)
            if detections is None:
                failed.append((instance.id, "objects", "image not in detection file"))
                continue
            if not detections.labels:
                logger.warning("no detections for %s; objects entry absent",
                               instance.id)
                continue
            cache.put(instance.id, GuidanceKind.OBJECTS,
                      serialize_objects(detections),
                      source="plugin:ingest", overwrite=overwrite)
            counts["objects"] = counts.get("objects", 0) + 1

    for kind in parse_kinds(params["kinds"]):
        if kind in ingested_kinds:
            continue
        generator = stub_generator(kind, seed=params["seed"])
        for instance in instances:
            try:
                text = generator.generate(instance.image_ref, instance.question, None)
            except GenerationInputError as exc:
                failed.append((instance.id, kind.value, str(exc)))
                continue
            cache.put(instance.id, kind, text, source="stub", overwrite=overwrite)
            counts[kind.value] = counts.get(kind.value, 0) + 1

    cache.save()
    for kind_name in sorted(counts):
        click.echo(f"{kind_name}: {counts[kind_name]} entries")
    click.echo(f"cache: {cache_path} ({len(cache)} entries total)")
    if failed:
        click.echo(f"{len(failed)} failures:", err=True)
        for instance_id, kind_name, reason in failed:
            click.echo(f"  {instance_id} [{kind_name}]: {reason}", err=True)
        sys.exit(EXIT_PARTIAL)


@main.command("eval")
@common_options
@click.option("--predictions", required=True, help="predictions JSONL path")
@click.option("--paper-ref", default=None,
              help="append published reference rows for this benchmark")
@click.pass_context
@handled
def cmd_eval(ctx, **params):
    """Aggregate a prediction file into an accuracy report."""
    params = merged_params(ctx, params)
    records = read_predictions(params["predictions"])
    instances = load_dataset(params["dataset"], params["adapter"])
    out_dir = Path(params["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    report = _write_reports(out_dir, records, instances,
                            paper_ref=params["paper_ref"])
    click.echo(render_report(report))
    if params["paper_ref"]:
        click.echo("")
        click.echo(render_reference_rows(params["paper_ref"]))
    click.echo(f"artifacts: {out_dir}/report.json, {out_dir}/report.txt")


@main.command("compare")
@common_options
@click.option("--predictions", multiple=True, required=True,
              help="two or more prediction files (one mode each)")
@click.option("--baseline", default="unguided", show_default=True)
@click.option("--paper-ref", default=None)
@click.pass_context
@handled
def cmd_compare(ctx, **params):
    """Compare prediction files per mode against the no-guidance baseline."""
    params = merged_params(ctx, params)
    instances = load_dataset(params["dataset"], params["adapter"])
    reports = {}
    for path in params["predictions"]:
        records = read_predictions(path)
        if not records:
            raise DataError(f"{path}: empty prediction file")
        mode = records[0].mode
        if mode in reports:
            raise ConfigError(f"two prediction files carry mode {mode!r}")
        reports[mode] = accuracy(join_with_instances(records, instances))
    comparison = compare_modes(reports, baseline=params["baseline"])

    out_dir = Path(params["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = comparison.to_dict()
    text = render_comparison(comparison)
    if params["paper_ref"]:
        from .evalreport import load_reference
        payload["reference"] = load_reference(params["paper_ref"])
        text += "\n\n" + render_reference_rows(params["paper_ref"])
    (out_dir / "comparison.json").write_text(
        json.dumps(payload, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    (out_dir / "comparison.txt").write_text(text + "\n", encoding="utf-8")
    click.echo(text)
    click.echo(f"artifacts: {out_dir}/comparison.json, {out_dir}/comparison.txt")


if __name__ == "__main__":
    main()
