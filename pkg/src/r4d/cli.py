"""Command-line entry point: ``r4d <subcommand> [options]``.

Exit codes: 0 success, 2 bad usage or input, 3 file-system failure,
4 numeric failure (training divergence). Every output file is written
atomically, and all randomness comes from ``--seed``.
"""

import csv
import io
import json
import logging
import sys

import click
import numpy as np

from .datamodel import read_dataset, read_predictions, write_dataset, write_predictions
from .diffcore import atomic_write_text
from .evaluation import suites
from .evaluation.metrics import compute_metrics, per_range_breakdown
from .kvconfig import load_dataclass
from .model import R4DModel
from .records import InputError, PredictionRecord
from .scenesim import SceneSpec, generate_dataset
from .training import DivergenceError, TrainConfig, baseline_config, train

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
HISTORY_DELIMITER = "\t"


class SuiteFailure(Exception):
    """Some rows of a suite failed; their tables were still written."""

    def __init__(self, message, numeric):
        super().__init__(message)
        self.numeric = numeric


def _load_train_config(path, seed):
    cfg = load_dataclass(TrainConfig, path) if path else TrainConfig()
    return cfg.with_(seed=seed) if seed is not None else cfg


def _parse_edges(text):
    if text is None:
        return None
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise InputError(f"--breakdown expects comma-separated numbers, got {text!r}") from None


def history_text(history):
    """Training history as tab-delimited text, one row per epoch."""
    if not history:
        return ""
    buf = io.StringIO()
    keys = list(history[0])
    w = csv.writer(buf, delimiter=HISTORY_DELIMITER, lineterminator="\n")
    w.writerow(keys)
    for row in history:
        w.writerow(["" if row.get(k) is None else repr(row[k]) if isinstance(row[k], float) else row[k]
                    for k in keys])
    return buf.getvalue()


def _report_rows(name, report, edges, pred, gt):
    rows = [suites.ResultRow(name, report)]
    if edges:
        for label, rep in per_range_breakdown(pred, gt, edges).rows():
            rows.append(suites.ResultRow(f"{name}{label}", rep))
    return rows


def _write_table(path, rows):
    text = suites.results_table(rows)
    if path:
        atomic_write_text(path, text)
    click.echo(text, nl=False)


def _finish_suite(rows, out):
    _write_table(out, rows)
    failed = [r for r in rows if not r.ok]
    for r in failed:
        click.echo(f"row {r.config} failed: {r.error}", err=True)
    if failed:
        numeric = any(r.error.startswith("DivergenceError") for r in failed)
        raise SuiteFailure(f"{len(failed)} of {len(rows)} rows failed", numeric)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log training progress to stderr.")
def cli(verbose):
    """Reference-based long-range distance estimation on synthetic scenes."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s")


@cli.command("gen-data")
@click.option("--spec", "spec_path", type=click.Path(dir_okay=False), help="SceneSpec key = value file.")
@click.option("--scenes", type=int, required=True, help="Number of scenes.")
@click.option("--seed", type=int, help="Overrides the scene spec seed.")
@click.option("--start-index", type=int, default=0, show_default=True, help="First scene index of the stream.")
@click.option("--regime", type=click.Choice(["day", "dawn_dusk", "night"]), help="Overrides the scene spec regime.")
@click.option("--split-tag", default="train", show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def gen_data(spec_path, scenes, seed, start_index, regime, split_tag, out):
    """Generate a synthetic dataset and its distance summary (OUT.summary.json)."""
    spec = load_dataclass(SceneSpec, spec_path) if spec_path else SceneSpec()
    changes = {k: v for k, v in (("seed", seed), ("regime", regime)) if v is not None}
    spec = spec.with_(**changes) if changes else spec
    if scenes < 1:
        raise InputError("--scenes must be at least 1")
    ds = generate_dataset(spec, scenes, start_index, split_tag)
    write_dataset(out, ds)
    atomic_write_text(out + ".summary.json", json.dumps(ds.stats, indent=2, sort_keys=True) + "\n")
    st = ds.stats
    click.echo(
        f"{st['n_scenes']} scenes, {st['n_targets']} targets in "
        f"[{st['min_target_distance_m']:.2f}, {st['max_target_distance_m']:.2f}] m, "
        f"{st['n_references']} references -> {out}"
    )


@cli.command("train")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="TrainConfig key = value file.")
@click.option("--train", "train_path", required=True, type=click.Path(dir_okay=False))
@click.option("--val", "val_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Checkpoint path.")
@click.option("--history", type=click.Path(dir_okay=False), help="Defaults to OUT.history.tsv.")
@click.option("--seed", type=int, help="Overrides the config's seed.")
@click.option("--baseline", is_flag=True, help="Train the direct-regression baseline instead.")
def train_cmd(config_path, train_path, val_path, out, history, seed, baseline):
    """Train a model and write the best-by-validation checkpoint."""
    cfg = _load_train_config(config_path, seed)
    if baseline:
        cfg = baseline_config(cfg)
    train_set, val_set = _read_inputs(train_path, val_path)
    result = train(train_set, val_set, cfg, progress=lambda row: logging.info(
        "epoch %d loss %.4f val abs_rel %.5f", row["epoch"], row["train_loss"], row["val_abs_rel"]))
    result.model.save(out, {"train_config": cfg.as_dict(), "best_epoch": result.best_epoch})
    atomic_write_text(history or out + ".history.tsv", history_text(result.history))
    click.echo(f"best epoch {result.best_epoch}: {result.best_val.summary()}")


def _read_inputs(*paths):
    out = []
    for p in paths:
        try:
            out.append(read_dataset(p))
        except FileNotFoundError:
            raise InputError(f"input file not found: {p}") from None
    return out


def _checkpoint(path):
    try:
        model, meta = R4DModel.load(path)
    except FileNotFoundError:
        raise InputError(f"checkpoint not found: {path}") from None
    max_refs = meta.get("train_config", {}).get("max_refs", TrainConfig.max_refs)
    return model, max_refs


def _prediction_records(model, dataset, max_refs):
    packed, (preds, weights, _) = model.predict_dataset(dataset, max_refs)
    records = []
    for t in range(packed.n_targets):
        lo, hi = packed.target_pstart[t], packed.target_pstart[t + 1]
        att = [(int(r), float(w)) for r, w in zip(packed.pair_ref[lo:hi], weights[lo:hi])] if hi > lo else None
        records.append(PredictionRecord(packed.scene_ids[packed.target_scene[t]], int(packed.target_object[t]),
                                        float(preds[t]), att))
    return packed, preds, records


@cli.command("eval")
@click.option("--checkpoint", required=True, type=click.Path(dir_okay=False))
@click.option("--data", required=True, type=click.Path(dir_okay=False))
@click.option("--pred-out", type=click.Path(dir_okay=False), help="Prediction file with attention weights.")
@click.option("--results", type=click.Path(dir_okay=False), help="Results-table output.")
@click.option("--max-refs", type=int, help="Defaults to the value the checkpoint was trained with.")
@click.option("--breakdown", help="Comma-separated range edges, e.g. 80,150,220,300.")
def eval_cmd(checkpoint, data, pred_out, results, max_refs, breakdown):
    """Evaluate a checkpoint on a dataset."""
    edges = _parse_edges(breakdown)
    model, trained_refs = _checkpoint(checkpoint)
    (dataset,) = _read_inputs(data)
    packed, preds, records = _prediction_records(model, dataset, trained_refs if max_refs is None else max_refs)
    if pred_out:
        write_predictions(pred_out, records)
    report = compute_metrics(preds, packed.target_label)
    _write_table(results, _report_rows("eval", report, edges, preds, packed.target_label))


@cli.command("metrics")
@click.option("--pred", "pred_path", required=True, type=click.Path(dir_okay=False))
@click.option("--gt", "gt_path", required=True, type=click.Path(dir_okay=False), help="Dataset with labels.")
@click.option("--results", type=click.Path(dir_okay=False))
@click.option("--breakdown", help="Comma-separated range edges, e.g. 80,150,220,300.")
def metrics_cmd(pred_path, gt_path, results, breakdown):
    """Score an external prediction file against a labeled dataset."""
    edges = _parse_edges(breakdown)
    try:
        records = read_predictions(pred_path)
    except FileNotFoundError:
        raise InputError(f"prediction file not found: {pred_path}") from None
    (dataset,) = _read_inputs(gt_path)
    labels = {(s.scene_id, t.object_id): t.label_distance_m for s in dataset for t in s.targets}
    gt = []
    for r in records:
        key = (r.scene_id, r.target_id)
        if key not in labels:
            raise InputError(f"prediction for unknown target {r.scene_id}/{r.target_id}")
        gt.append(labels[key])
    pred = np.array([r.predicted_distance_m for r in records])
    gt = np.array(gt)
    _write_table(results, _report_rows("metrics", compute_metrics(pred, gt), edges, pred, gt))


def _suite_inputs(config_path, train_path, val_path, seed):
    cfg = _load_train_config(config_path, seed)
    train_set, val_set = _read_inputs(train_path, val_path)
    return cfg, train_set, val_set


def _progress(row):
    state = row.report.summary() if row.ok else f"failed: {row.error}"
    logging.info("%s: %s", row.config, state)


_suite_options = [
    click.option("--config", "config_path", type=click.Path(dir_okay=False)),
    click.option("--train", "train_path", required=True, type=click.Path(dir_okay=False)),
    click.option("--val", "val_path", required=True, type=click.Path(dir_okay=False)),
    click.option("--out", type=click.Path(dir_okay=False), help="Results-table output."),
    click.option("--seed", type=int),
]


def suite_options(fn):
    for opt in reversed(_suite_options):
        fn = opt(fn)
    return fn


@cli.command("ablate")
@suite_options
@click.option("--suite", type=click.Choice(sorted(suites.SUITES)), default="embeddings", show_default=True)
def ablate(config_path, train_path, val_path, out, seed, suite):
    """Run an ablation grid with a shared seed."""
    cfg, train_set, val_set = _suite_inputs(config_path, train_path, val_path, seed)
    _finish_suite(suites.ablation_suite(train_set, val_set, cfg, suite, progress=_progress), out)


def _grid(text, cast, default):
    if text is None:
        return default
    try:
        return tuple(cast(v) for v in text.split(","))
    except ValueError:
        raise InputError(f"bad grid {text!r}") from None


@cli.command("sweep-sigma")
@suite_options
@click.option("--grid", help="Comma-separated sigma values in meters.")
def sweep_sigma(config_path, train_path, val_path, out, seed, grid):
    """Train once per augmentation sigma."""
    cfg, train_set, val_set = _suite_inputs(config_path, train_path, val_path, seed)
    sigmas = _grid(grid, float, suites.SIGMA_GRID)
    _finish_suite(suites.sigma_sweep(train_set, val_set, cfg, sigmas, progress=_progress), out)


@cli.command("sweep-refs")
@suite_options
@click.option("--grid", help="Comma-separated reference caps.")
def sweep_refs(config_path, train_path, val_path, out, seed, grid):
    """Train once per reference cap and time inference per target."""
    cfg, train_set, val_set = _suite_inputs(config_path, train_path, val_path, seed)
    refs = _grid(grid, int, suites.REFS_GRID)
    _finish_suite(suites.refs_sweep(train_set, val_set, cfg, refs, progress=_progress), out)


@cli.command("domain-shift")
@click.option("--config", "config_path", type=click.Path(dir_okay=False))
@click.option("--train", "train_path", required=True, type=click.Path(dir_okay=False), help="Day-only training set.")
@click.option("--val", "val_specs", multiple=True, required=True,
              help="REGIME=PATH, repeated; must include day.")
@click.option("--out", type=click.Path(dir_okay=False))
@click.option("--seed", type=int)
def domain_shift(config_path, train_path, val_specs, out, seed):
    """Train R4D and the baseline on day scenes, evaluate on each regime."""
    cfg = _load_train_config(config_path, seed)
    regime_paths = {}
    for item in val_specs:
        regime, sep, path = item.partition("=")
        if not sep:
            raise InputError(f"--val expects REGIME=PATH, got {item!r}")
        regime_paths[regime] = path
    if "day" not in regime_paths:
        raise InputError("--val must include day=PATH")
    (train_set,) = _read_inputs(train_path)
    regime_sets = dict(zip(regime_paths, _read_inputs(*regime_paths.values())))
    rows = []
    for name, c in (("r4d", cfg), ("baseline", baseline_config(cfg))):
        result = train(train_set, regime_sets["day"], c)
        shift = suites.domain_shift_eval(result.model, regime_sets, c.max_refs)
        rows.extend(shift.rows(prefix=f"{name}/"))
        for regime in regime_sets:
            click.echo(f"{name} {regime}: degradation {100 * shift.degradation(regime):+.2f}%", err=True)
    _write_table(out, rows)


@cli.command("dump-attention")
@click.option("--checkpoint", required=True, type=click.Path(dir_okay=False))
@click.option("--data", required=True, type=click.Path(dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Prediction records with attention.")
@click.option("--plot-data", type=click.Path(dir_okay=False), help="JSONL with target box, reference boxes, weights.")
@click.option("--max-refs", type=int)
def dump_attention(checkpoint, data, out, plot_data, max_refs):
    """Write per-target attention weights over references."""
    model, trained_refs = _checkpoint(checkpoint)
    (dataset,) = _read_inputs(data)
    packed, _, records = _prediction_records(model, dataset, trained_refs if max_refs is None else max_refs)
    write_predictions(out, records)
    if plot_data:
        scenes = {s.scene_id: s for s in dataset}
        lines = []
        for r in records:
            scene = scenes[r.scene_id]
            att = r.attention or []
            lines.append(json.dumps({
                "scene_id": r.scene_id,
                "target_id": r.target_id,
                "target_box": list(scene.get(r.target_id).bbox),
                "predicted_distance_m": r.predicted_distance_m,
                "reference_ids": [a for a, _ in att],
                "reference_boxes": [list(scene.get(a).bbox) for a, _ in att],
                "weights": [w for _, w in att],
            }, separators=(",", ":")))
        atomic_write_text(plot_data, "\n".join(lines) + ("\n" if lines else ""))
    click.echo(f"{len(records)} targets -> {out}")


def main(argv=None):
    """Run the CLI and return its exit code."""
    try:
        cli.main(args=argv, prog_name="r4d", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.Abort:
        click.echo("aborted", err=True)
        return EXIT_USAGE
    except click.ClickException as exc:
        exc.show()
        return EXIT_USAGE
    except DivergenceError as exc:
        click.echo(f"error: training diverged at {exc}", err=True)
        return EXIT_NUMERIC
    except SuiteFailure as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_NUMERIC if exc.numeric else EXIT_USAGE
    except ValueError as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_USAGE
    except OSError as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_IO
    return EXIT_OK


def entry_point():
    sys.exit(main())


if __name__ == "__main__":
    entry_point()
