"""Command-line interface: single-image analysis, batch processing,
adapter evaluation against a labels table, and the HTTP service."""

from __future__ import annotations

import csv
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import click

from .config import AppConfig, load_config
from .errors import AdapterError, BadParams, FundustrackError, ValidationError
from .evaluation import LabelsTable, adapter_predictor, evaluate_labels
from .grading import METRIC_NAMES, STUB_ADAPTER_ID
from .imaging import decode_image
from .pipeline import AllAdaptersFailed, analyze_image


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="TOML config file.")
@click.option("--adapter", "adapter_id", default=None,
              help="Run only this adapter id from the config (default: all configured).")
@click.option("--workers", type=click.IntRange(1, 64), default=4,
              help="Parallel images for batch/evaluate.")
@click.option("--format", "output_format", type=click.Choice(["json", "csv"]),
              default="json", help="Output format where a choice exists (evaluate).")
@click.pass_context
def main(ctx, config_path, adapter_id, workers, output_format):
    try:
        config = load_config(config_path)
    except BadParams as exc:
        raise click.ClickException(str(exc))
    ctx.obj = {
        "config": config,
        "adapter_id": adapter_id,
        "workers": workers,
        "format": output_format,
    }


def _adapters(obj) -> tuple:
    config: AppConfig = obj["config"]
    if obj["adapter_id"] is None:
        return config.adapters
    return (config.adapter_by_id(obj["adapter_id"]),)


def _analyze_file(path: Path, config: AppConfig, adapters):
    image = decode_image(path.read_bytes())
    return analyze_image(image, config.pipeline, adapters, str(path))


@main.command()
@click.argument("image_path", type=click.Path(path_type=Path))
@click.pass_obj
def analyze(obj, image_path):
    """Analyze one fundus photograph and print its metrics document."""
    try:
        data = image_path.read_bytes()
    except OSError as exc:
        click.echo(f"cannot read {image_path}: {exc}", err=True)
        sys.exit(1)
    try:
        image = decode_image(data)
    except FundustrackError as exc:
        click.echo(f"cannot decode {image_path}: {exc}", err=True)
        sys.exit(1)
    try:
        analysis = analyze_image(
            image, obj["config"].pipeline, _adapters(obj), str(image_path)
        )
    except (AllAdaptersFailed, AdapterError, ValidationError) as exc:
        click.echo(f"adapter failure: {exc}", err=True)
        sys.exit(2)
    click.echo(json.dumps(analysis.document(), sort_keys=True, indent=2))


@main.command()
@click.argument("directory", type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.pass_obj
def batch(obj, directory):
    """Analyze every decodable image in a directory; CSV on stdout."""
    config: AppConfig = obj["config"]
    adapters = _adapters(obj)
    paths = sorted(p for p in directory.iterdir() if p.is_file())

    def work(path: Path):
        try:
            return path.name, _analyze_file(path, config, adapters), None
        except FundustrackError as exc:
            return path.name, None, str(exc)

    with ThreadPoolExecutor(max_workers=obj["workers"]) as pool:
        outcomes = list(pool.map(work, paths))

    writer = csv.writer(sys.stdout, lineterminator="\r\n")
    writer.writerow(("filename",) + METRIC_NAMES)
    processed = 0
    for name, analysis, error in sorted(outcomes, key=lambda o: o[0]):
        if error is not None:
            click.echo(f"skipping {name}: {error}", err=True)
            continue
        flat = analysis.flat_metrics
        writer.writerow(
            [name] + ["" if flat[m] is None else flat[m] for m in METRIC_NAMES]
        )
        processed += 1
    if processed == 0:
        click.echo("no images processed", err=True)
        sys.exit(1)


@main.command()
@click.argument("labels_csv", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--images", "image_root", type=click.Path(file_okay=False, path_type=Path),
              default=None, help="Image directory (default: alongside the labels file).")
@click.pass_obj
def evaluate(obj, labels_csv, image_root):
    """Evaluate a grading adapter against labelled images: per-task confusion
    matrices (4x4 retinopathy, 3x3 edema) and accuracies."""
    try:
        table = LabelsTable.from_csv(labels_csv.read_text(encoding="utf-8"))
    except BadParams as exc:
        click.echo(f"malformed labels: {exc}", err=True)
        sys.exit(1)
    root = image_root or labels_csv.parent
    missing = [r.filename for r in table.rows if not (root / r.filename).exists()]
    if missing:
        click.echo(f"missing images: {', '.join(sorted(missing)[:5])}", err=True)
        sys.exit(1)

    adapters = _adapters(obj)
    spec = adapters[0]
    if spec.id == STUB_ADAPTER_ID:
        config = obj["config"]

        def predict(filename):
            analysis = _analyze_file(root / filename, config, (spec,))
            return analysis.metrics.retinopathy_grade, analysis.metrics.edema_risk

    else:
        predict = adapter_predictor(spec, root)

    if obj["workers"] > 1:
        results = {}
        with ThreadPoolExecutor(max_workers=obj["workers"]) as pool:
            def fetch(row):
                try:
                    return row.filename, predict(row.filename), None
                except FundustrackError as exc:
                    return row.filename, None, exc

            for name, value, error in pool.map(fetch, table.rows):
                results[name] = (value, error)

        def cached(filename):
            value, error = results[filename]
            if error is not None:
                raise error
            return value

        report = evaluate_labels(table, cached)
    else:
        report = evaluate_labels(table, predict)

    if obj["format"] == "csv":
        writer = csv.writer(sys.stdout, lineterminator="\r\n")
        writer.writerow(["task", "true_label", "predicted_label", "count"])
        for task, matrix in (("retinopathy", report.retinopathy), ("edema", report.edema)):
            for true_label in range(matrix.k):
                for pred in range(matrix.k):
                    writer.writerow([task, true_label, pred, int(matrix.counts[true_label, pred])])
        click.echo(
            f"retinopathy accuracy {report.retinopathy.accuracy:.6f}, "
            f"edema accuracy {report.edema.accuracy:.6f}, "
            f"failures {len(report.failures)}",
            err=True,
        )
    else:
        click.echo(json.dumps(report.to_dict(), sort_keys=True, indent=2))


@main.command()
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=None, help="Override the configured port.")
@click.pass_obj
def serve(obj, host, port):
    """Launch the HTTP service."""
    import uvicorn

    from .service import create_app

    config: AppConfig = obj["config"]
    app = create_app(config)
    uvicorn.run(app, host=host, port=port if port is not None else config.port)


if __name__ == "__main__":
    main()
