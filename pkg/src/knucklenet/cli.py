"""``knucklenet`` command line: synth, train, embed, match, eval, fuse."""

from __future__ import annotations

import csv
import json
import logging
import sys
from pathlib import Path

import click
import numpy as np
import torch

from . import config as config_mod
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import COMPONENTS, SynthConfig, generate_synthetic, load_manifest
from .errors import ConfigError, KnuckleError
from .fusion import AlignedScores, FusionWeights, fit_normalizers, fuse_values, select_weights
from .metrics import ScoreSet, compute_di, crr_from_matrix, emit_report, eer
from .network import count_parameters
from .network import build_network
from .pipeline import ScoreTable, embed_samples, evaluate_table, match, network_samples, training_pool
from .trainer import LossTrace, train

log = logging.getLogger("knucklenet")


def _setup_logging(quiet: bool) -> None:
    root = logging.getLogger()
    for h in list(root.handlers):
        root.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root.addHandler(handler)
    root.setLevel(logging.WARNING if quiet else logging.INFO)


def _run_config(config_path, overrides, print_config: bool):
    cfg = config_mod.load_config(config_path, overrides)
    if print_config:
        click.echo(config_mod.dump(cfg), nl=False)
        raise click.exceptions.Exit(0)
    return cfg


def _log_run(cfg, parameter_count=None) -> None:
    log.info("seed=%d config_hash=%s parameters=%s", cfg.seed, config_mod.config_hash(cfg),
             "n/a" if parameter_count is None else parameter_count)


config_option = click.option("--config", "config_path", type=click.Path(dir_okay=False),
                             help="Run config file (section.key = json value).")
print_config_option = click.option("--print-config", is_flag=True,
                                   help="Print the effective config and exit.")
component_option = click.option("--component", type=click.Choice(COMPONENTS), default=None,
                                 help="Finger component to use (default from config).")
seed_option = click.option("--seed", type=int, default=None, help="Run seed (overrides config).")


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--threads", type=int, default=None, help="Cap torch worker threads.")
@click.option("--quiet", is_flag=True, help="Only log warnings and errors.")
def cli(threads, quiet):
    """Finger dorsal image matching with a triplet-trained embedding network."""
    _setup_logging(quiet)
    if threads is not None:
        if threads < 1:
            raise ConfigError("--threads must be >= 1")
        torch.set_num_threads(threads)


@cli.command()
@click.option("--identities", type=int, default=50, show_default=True)
@click.option("--samples", type=int, default=5, show_default=True)
@click.option("--height", type=int, default=SynthConfig.height, show_default=True)
@click.option("--width", type=int, default=SynthConfig.width, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
def synth(identities, samples, height, width, seed, out):
    """Render a synthetic finger dataset and its manifest."""
    cfg = SynthConfig(identities=identities, samples_per_identity=samples, height=height, width=width, seed=seed)
    manifest, _ = generate_synthetic(cfg, out)
    log.info("seed=%d wrote %d images to %s", seed, len(manifest), out)


@cli.command("train")
@config_option
@click.option("--manifest", type=click.Path(dir_okay=False), default=None)
@click.option("--out", "checkpoint", type=click.Path(dir_okay=False), default=None,
              help="Output checkpoint path.")
@seed_option
@click.option("--epochs", type=int, default=None)
@click.option("--batch-triplets", type=int, default=None)
@component_option
@click.option("--checkpoint-every", type=int, default=None, help="Also save a checkpoint every N epochs.")
@click.option("--trace", type=click.Path(dir_okay=False), default=None, help="Loss trace CSV path.")
@click.option("--export-augmented", type=click.Path(file_okay=False), default=None)
@print_config_option
def train_cmd(config_path, manifest, checkpoint, seed, epochs, batch_triplets, component,
              checkpoint_every, trace, export_augmented, print_config):
    """Train an embedding network on the gallery split of a manifest."""
    cfg = _run_config(config_path, {
        "paths.manifest": manifest, "paths.checkpoint": checkpoint, "seed": seed,
        "training.epochs": epochs, "training.batch_triplets": batch_triplets,
        "protocol.component": component}, print_config)
    manifest = cfg.paths.get("manifest")
    checkpoint = cfg.paths.get("checkpoint")
    if not manifest:
        raise ConfigError("train needs --manifest (or paths.manifest)")
    if not checkpoint:
        raise ConfigError("train needs --out (or paths.checkpoint)")
    pool = training_pool(load_manifest(manifest), cfg, export_augmented)
    meta = {"seed": cfg.seed, "config_hash": config_mod.config_hash(cfg), "component": cfg.component}
    ckpt = Path(checkpoint)

    def on_epoch(epoch, params, margin):
        if checkpoint_every and epoch % checkpoint_every == 0 and epoch != cfg.training.epochs:
            save_checkpoint(params, ckpt.with_name(f"{ckpt.stem}.epoch{epoch:04d}{ckpt.suffix}"),
                            {**meta, "epoch": epoch, "beta": margin.beta})

    _log_run(cfg, count_parameters(build_network(cfg.network, cfg.seed)))
    params, loss_trace = train(pool, cfg.network, cfg.training, on_epoch=on_epoch)
    save_checkpoint(params, ckpt, {**meta, "epoch": cfg.training.epochs,
                                   "beta": float(loss_trace.betas[-1]) if len(loss_trace) else None})
    trace_path = Path(trace) if trace else ckpt.with_suffix(".loss.csv")
    loss_trace.to_csv(trace_path)
    log.info("wrote %s and %s", ckpt, trace_path)


@cli.command()
@click.option("--checkpoint", type=click.Path(dir_okay=False), required=True)
@click.option("--manifest", type=click.Path(dir_okay=False), required=True)
@component_option
@config_option
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def embed(checkpoint, manifest, component, config_path, out):
    """Write one CSV row of embedding values per manifest entry."""
    params, _ = load_checkpoint(checkpoint)
    cfg = _with_network(config_mod.load_config(config_path, {"protocol.component": component}), params)
    _log_run(cfg, count_parameters(params))
    m = load_manifest(manifest)
    entries = m.filter(cfg.component).entries
    emb = embed_samples(params, network_samples(m, cfg))
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "subject", "component", "index", *[f"e{k}" for k in range(emb.shape[1])]])
        for e, row in zip(entries, emb):
            w.writerow([e.path, e.subject, e.component, e.index, *[repr(float(x)) for x in row]])


def _with_network(cfg, params):
    from dataclasses import replace

    return replace(cfg, network=params.config)


@cli.command("match")
@click.option("--checkpoint", type=click.Path(dir_okay=False), required=True)
@click.option("--manifest", type=click.Path(dir_okay=False), required=True)
@component_option
@config_option
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Score CSV path.")
@print_config_option
def match_cmd(checkpoint, manifest, component, config_path, out, print_config):
    """Score every probe against every gallery sample (score CSV)."""
    cfg = _run_config(config_path, {"protocol.component": component}, print_config)
    params, _ = load_checkpoint(checkpoint)
    cfg = _with_network(cfg, params)
    _log_run(cfg, count_parameters(params))
    table = match(params, load_manifest(manifest), cfg)
    table.to_csv(out)


@cli.command("eval")
@click.option("--scores", type=click.Path(dir_okay=False), default=None, help="Score CSV from `match`.")
@click.option("--checkpoint", type=click.Path(dir_okay=False), default=None)
@click.option("--manifest", type=click.Path(dir_okay=False), default=None)
@component_option
@config_option
@click.option("--trace", type=click.Path(dir_okay=False), default=None, help="Loss trace CSV to copy into the report dir.")
@click.option("--out", type=click.Path(file_okay=False), required=True, help="Report directory.")
@print_config_option
def eval_cmd(scores, checkpoint, manifest, component, config_path, trace, out, print_config):
    """EER / CRR / DI report from a score CSV, or end to end from checkpoint + manifest."""
    cfg = _run_config(config_path, {"protocol.component": component}, print_config)
    n_params = None
    if checkpoint:
        params, _ = load_checkpoint(checkpoint)
        n_params = count_parameters(params)
        cfg = _with_network(cfg, params)
    if scores:
        table = ScoreTable.from_csv(scores)
    elif checkpoint and manifest:
        table = match(params, load_manifest(manifest), cfg)
    else:
        raise ConfigError("eval needs --scores, or --checkpoint together with --manifest")
    _log_run(cfg, n_params)
    report, roc = evaluate_table(table, cfg.protocol.name, n_params)
    emit_report(report, roc, out, LossTrace.from_csv(trace) if trace else None)
    click.echo(f"EER {report.eer:.4f}%  CRR {report.crr:.2f}%  DI {report.di:.4f}  "
               f"genuine {report.genuine_count}  impostor {report.impostor_count}")


def _parse_weights(text: str) -> dict[str, float]:
    out = {}
    for part in text.split(","):
        name, sep, value = part.partition("=")
        if not sep:
            raise ConfigError(f"--weights expects name=value pairs, got {part!r}")
        try:
            out[name.strip()] = float(value)
        except ValueError:
            raise ConfigError(f"--weights: {value!r} is not a number") from None
    return out


def _aligned(tables: list[ScoreTable], names: list[str]) -> tuple[AlignedScores, ScoreTable]:
    ref = tables[0]
    aligned = [ref] + [t.aligned_to(ref) for t in tables[1:]]
    mask = ref.genuine_mask.ravel()
    return AlignedScores({n: t.matrix.ravel() for n, t in zip(names, aligned)}, mask), ref


def _fused_report(values: np.ndarray, ref: ScoreTable, weights: dict, names: list[str]) -> dict:
    mask = ref.genuine_mask.ravel()
    s = ScoreSet(values[mask], values[~mask])
    m = values.reshape(ref.matrix.shape)
    return {"weights": {n: weights[n] for n in names}, "eer": eer(s),
            "crr": crr_from_matrix(m, ref.gallery_subjects, ref.probe_subjects), "di": compute_di(s),
            "genuine_count": int(mask.sum()), "impostor_count": int((~mask).sum())}


@cli.command("fuse")
@click.argument("scores", nargs=-1, type=click.Path(dir_okay=False))
@click.option("--names", default=None, help="Comma-separated modality names (default: file stems).")
@click.option("--weights", default=None, help="Fixed weights, e.g. major=0.3,nail=0.7.")
@click.option("--search", is_flag=True, help="Grid-search weights on the given (validation) scores.")
@click.option("--grid-step", type=float, default=0.05, show_default=True)
@click.option("--test", "test_scores", multiple=True, type=click.Path(dir_okay=False),
              help="Test score CSVs, same modality order; normalized with validation statistics.")
@click.option("--out", type=click.Path(file_okay=False), required=True)
def fuse_cmd(scores, names, weights, search, grid_step, test_scores, out):
    """Weighted-sum score fusion of two or more aligned score CSVs."""
    if len(scores) < 2:
        raise click.UsageError("fuse needs at least two score CSVs")
    if bool(weights) == bool(search):
        raise click.UsageError("give exactly one of --weights or --search")
    names = names.split(",") if names else [Path(p).stem for p in scores]
    if len(names) != len(scores) or len(set(names)) != len(names):
        raise ConfigError("--names must list one distinct name per score file")
    aligned, ref = _aligned([ScoreTable.from_csv(p) for p in scores], names)
    if search:
        chosen = select_weights(aligned, grid_step)
    else:
        chosen = FusionWeights.of(_parse_weights(weights))
    normalizers = fit_normalizers(aligned)
    fused = fuse_values(aligned, chosen, normalizers)
    w = chosen.as_dict()
    result = {"validation": _fused_report(fused, ref, w, names),
              "single": {n: eer(aligned.score_set(n)) for n in names},
              "normalization": {n: [normalizers[n].lo, normalizers[n].hi] for n in names}}
    outdir = Path(out)
    outdir.mkdir(parents=True, exist_ok=True)
    ScoreTable(ref.probe_keys, ref.gallery_keys, fused.reshape(ref.matrix.shape)).to_csv(outdir / "fused.csv")
    if test_scores:
        if len(test_scores) != len(scores):
            raise ConfigError("--test must give one score CSV per modality")
        t_aligned, t_ref = _aligned([ScoreTable.from_csv(p) for p in test_scores], names)
        t_fused = fuse_values(t_aligned, chosen, normalizers)
        result["test"] = _fused_report(t_fused, t_ref, w, names)
        ScoreTable(t_ref.probe_keys, t_ref.gallery_keys, t_fused.reshape(t_ref.matrix.shape)).to_csv(
            outdir / "fused_test.csv")
    (outdir / "fusion.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    v = result["validation"]
    click.echo(f"weights {json.dumps(v['weights'], sort_keys=True)}  EER {v['eer']:.4f}%  CRR {v['crr']:.2f}%")


def dispatch(argv=None) -> int:
    """Run the CLI; returns the exit code instead of exiting."""
    try:
        cli.main(args=list(argv) if argv is not None else None, prog_name="knucklenet", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("error: aborted", err=True)
        return 1
    except KnuckleError as exc:
        click.echo(f"error: {exc.error_class}: {exc}", err=True)
        return 1
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
