"""Command-line entry point: synth, diffuse, train, eval, sweep."""
from __future__ import annotations

import csv
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path

import click
import numpy as np

from . import __version__
from .diffusion import DiffusionError, build_diffusion, load_diffusion, save_diffusion
from .encoders import EncoderError
from .graph import (
    GraphError, align_attributes, load_graph, load_structure, read_vocabulary, select_labeled_per_class, write_graph,
)
from .synth import SbmSpec, generate_pair
from .trainer import (
    AblationFlags, ConfigError, Domain, TrainConfig, divergence_diagnostic, domain_entropies, embed_nodes,
    eval_seed, evaluate, load_checkpoint, run_experiment,
)

log = logging.getLogger("graphda")

SIDES = ("source", "target")
KINDS = ("edges", "attrs", "labels")
VALIDATION_ERRORS = (ConfigError, GraphError, DiffusionError, EncoderError, click.UsageError)


class CliError(click.ClickException):
    exit_code = 1


def dataset_paths(directory) -> dict:
    d = Path(directory)
    return {f"{side}_{kind}": d / f"{side}_{kind}.txt" for side in SIDES for kind in KINDS}


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    config: dict
    flags: dict
    paths: dict
    seed: int
    version: str = __version__
    started: str = field(default_factory=_now)
    finished: str = ""

    def write(self, path) -> None:
        self.finished = _now()
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


# ------------------------------------------------------------------ config

def _parse_value(name, raw, kind):
    raw = raw.strip()
    if kind is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    try:
        if kind is tuple:
            return tuple(int(v) for v in raw.replace(",", " ").split())
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from None


_FIELD_KINDS = {f.name: type(f.default) for f in fields(TrainConfig)}


def read_config_file(path) -> tuple[dict, list]:
    """Flat ``key = value`` file; returns config overrides and ablation names."""
    values, ablate = {}, []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            key = key.strip().replace("-", "_")
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            if key == "ablate":
                ablate = [a for a in val.replace(",", " ").split() if a]
                continue
            if key not in _FIELD_KINDS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = _parse_value(key, val, _FIELD_KINDS[key])
    return values, ablate


def write_config_file(config: TrainConfig, flags_names, path) -> None:
    with open(path, "w") as fh:
        for k, v in config.as_dict().items():
            fh.write(f"{k} = {','.join(map(str, v)) if isinstance(v, list) else v}\n")
        if flags_names:
            fh.write(f"ablate = {','.join(flags_names)}\n")


def build_config(config_path, overrides: dict, ablate) -> tuple[TrainConfig, AblationFlags, list]:
    values, names = ({}, []) if config_path is None else read_config_file(config_path)
    values.update({k: v for k, v in overrides.items() if v is not None})
    if ablate:
        names = list(ablate)
    config = TrainConfig(**values)
    config.validate()
    return config, AblationFlags.parse(names), names


# ------------------------------------------------------------------- data

def _resolve_paths(data, explicit: dict) -> dict:
    paths = dataset_paths(data) if data else {}
    paths.update({k: Path(v) for k, v in explicit.items() if v is not None})
    missing = [f"{s}_{k}" for s in SIDES for k in KINDS if f"{s}_{k}" not in paths]
    if missing:
        raise CliError(f"missing input files: {', '.join(missing)} (give --data or the per-file flags)")
    for key, p in paths.items():
        if not p.is_file():
            raise CliError(f"{key}: no such file {p}")
    return paths


def load_pair(paths: dict):
    vocab = align_attributes(read_vocabulary(paths["source_attrs"]), read_vocabulary(paths["target_attrs"]))
    src = load_graph(paths["source_edges"], paths["source_attrs"], paths["source_labels"], vocab, "source")
    tgt = load_graph(paths["target_edges"], paths["target_attrs"], paths["target_labels"], vocab, "target")
    classes = max(src.num_classes, tgt.num_classes)
    if src.num_classes != classes:
        src = load_graph(paths["source_edges"], paths["source_attrs"], paths["source_labels"], vocab,
                         "source", num_classes=classes)
    if tgt.num_classes != classes:
        tgt = load_graph(paths["target_edges"], paths["target_attrs"], paths["target_labels"], vocab,
                         "target", num_classes=classes)
    return src, tgt, vocab


def cache_path(edges_path, alpha, topk) -> Path:
    p = Path(edges_path)
    return p.with_name(f"{p.stem}.ppr-a{alpha!r}-s{topk}.txt")


def cached_diffusion(graph, edges_path, alpha, topk, renormalize=False, force=False, warn_missing=True):
    path = cache_path(edges_path, alpha, topk)
    if path.exists() and not force:
        dm = load_diffusion(path)
        if dm.num_nodes != graph.num_nodes:
            raise DiffusionError(f"{path}: cache covers {dm.num_nodes} nodes, graph has {graph.num_nodes}")
    else:
        if warn_missing and not path.exists():
            log.warning("diffusion cache %s missing; computing it now", path)
        dm = build_diffusion(graph, alpha, topk)
        save_diffusion(dm, path)
    return dm.renormalized() if renormalize else dm


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def write_embeddings(path, nodes, emb) -> None:
    header = ["node_id"] + [f"v_{i}" for i in range(1, emb.shape[1] + 1)]
    _write_csv(path, header, ([int(v)] + [repr(float(x)) for x in row] for v, row in zip(nodes, emb)))


def _prepare_out(out, force) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not force:
        raise CliError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_float_list(text) -> list:
    try:
        return [float(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise click.BadParameter(f"expected a comma-separated list of numbers, got {text!r}") from None


def _parse_int_list(text) -> list:
    out = []
    for part in text.replace(",", " ").split():
        lo, sep, hi = part.partition("-")
        try:
            out.extend(range(int(lo), int(hi) + 1) if sep else [int(lo)])
        except ValueError:
            raise click.BadParameter(f"expected integers or ranges like 0-4, got {text!r}") from None
    return out


# ---------------------------------------------------------------- commands

@click.group()
@click.version_option(__version__)
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def cli(verbose):
    """Graph domain adaptation toolkit."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


@cli.command()
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--nodes", default=SbmSpec.num_nodes, show_default=True)
@click.option("--classes", default=SbmSpec.num_classes, show_default=True)
@click.option("--intra", default=SbmSpec.intra_prob, show_default=True)
@click.option("--inter", default=SbmSpec.inter_prob, show_default=True)
@click.option("--attr-dim", default=SbmSpec.attr_dim, show_default=True)
@click.option("--strength", default=SbmSpec.prototype_strength, show_default=True)
@click.option("--noise", default=SbmSpec.noise, show_default=True)
@click.option("--shift", default=SbmSpec.domain_shift, show_default=True)
@click.option("--label-noise", default=SbmSpec.label_noise, show_default=True)
@click.option("--seed", default=0, show_default=True)
def synth(out, nodes, classes, intra, inter, attr_dim, strength, noise, shift, label_noise, seed):
    """Write a synthetic source/target pair in the loader's file format."""
    spec = SbmSpec(nodes, classes, intra, inter, attr_dim, strength, noise, shift, label_noise, seed)
    spec.validate()
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        raise CliError(f"output directory {out} is not empty")
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("synth", spec.as_dict(), {}, {}, seed)
    src, tgt, vocab = generate_pair(spec)
    paths = dataset_paths(out)
    for side, graph in zip(SIDES, (src, tgt)):
        write_graph(graph, vocab.union_names, *(paths[f"{side}_{k}"] for k in KINDS))
    manifest.paths = {k: str(v) for k, v in paths.items()}
    manifest.write(out / "manifest.json")
    click.echo(f"wrote {out}")


@cli.command()
@click.option("--data", type=click.Path(file_okay=False), help="Dataset directory written by synth.")
@click.option("--source-edges", type=click.Path(dir_okay=False))
@click.option("--target-edges", type=click.Path(dir_okay=False))
@click.option("--alpha", default=0.1, show_default=True)
@click.option("--topk", default=20, show_default=True)
@click.option("--force", is_flag=True, help="Recompute even if a cache exists.")
def diffuse(data, source_edges, target_edges, alpha, topk, force):
    """Precompute the diffusion caches for both graphs."""
    base = dataset_paths(data) if data else {}
    todo = {"source": source_edges or base.get("source_edges"), "target": target_edges or base.get("target_edges")}
    todo = {k: Path(v) for k, v in todo.items() if v is not None}
    if not todo:
        raise CliError("give --data or at least one --source-edges/--target-edges")
    if not 0 < alpha < 1:
        raise CliError(f"alpha must lie in (0, 1), got {alpha}")
    for side, edges_path in todo.items():
        target = cache_path(edges_path, alpha, topk)
        if target.exists() and not force:
            click.echo(f"skip {side}: cache {target} exists (use --force to rebuild)")
            continue
        save_diffusion(build_diffusion(load_structure(edges_path), alpha, topk), target)
        click.echo(f"wrote {target}")


def _data_options(fn):
    opts = [click.option("--data", type=click.Path(file_okay=False), help="Dataset directory written by synth.")]
    for side in SIDES:
        for kind in KINDS:
            opts.append(click.option(f"--{side}-{kind}", type=click.Path(dir_okay=False)))
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def _explicit(kw) -> dict:
    return {f"{s}_{k}": kw.pop(f"{s}_{k}") for s in SIDES for k in KINDS}


def _train_options(fn):
    opts = [
        click.option("--config", "config_path", type=click.Path(dir_okay=False, exists=True),
                     help="Flat key = value config file."),
        click.option("--alpha", type=float), click.option("--topk", type=int),
        click.option("--n", type=int, help="Labeled target nodes per class."),
        click.option("--seed", type=int), click.option("--epochs", type=int),
        click.option("--iterations", type=int), click.option("--batch-size", type=int),
        click.option("--eta0", type=float), click.option("--lambda1", type=float),
        click.option("--lambda2-max", type=float), click.option("--lambda3", type=float),
        click.option("--temperature", type=float), click.option("--weight-decay", type=float),
        click.option("--sample-sizes", help="Comma-separated, one per layer."),
        click.option("--layer-dims", help="Comma-separated, one per layer."),
        click.option("--ablate", multiple=True, type=click.Choice(["cl", "gv", "lv", "da"]),
                     help="Drop a component; repeatable."),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def _overrides(kw) -> dict:
    out = {}
    for key in ("alpha", "topk", "n", "seed", "epochs", "iterations", "batch_size", "eta0", "lambda1",
                "lambda2_max", "lambda3", "temperature", "weight_decay"):
        out[key] = kw.pop(key)
    for key in ("sample_sizes", "layer_dims"):
        raw = kw.pop(key)
        out[key] = None if raw is None else _parse_value(key, raw, tuple)
    return out


def prepare_domains(paths, config: TrainConfig, force_diffusion=False):
    src, tgt, _ = load_pair(paths)
    tgt = tgt.with_labeled(select_labeled_per_class(tgt, config.n, config.seed))
    dms = [cached_diffusion(g, paths[f"{s}_edges"], config.alpha, config.topk, config.renormalize, force_diffusion)
           for s, g in zip(SIDES, (src, tgt))]
    return src, tgt, dms[0], dms[1]


@cli.command()
@_data_options
@_train_options
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--force", is_flag=True, help="Allow writing into a non-empty output directory.")
@click.option("--embeddings", is_flag=True, help="Also dump target embeddings to embeddings.csv.")
def train(out, force, embeddings, config_path, ablate, data, **kw):
    """Train one model and write report, checkpoint and manifest."""
    paths = _resolve_paths(data, _explicit(kw))
    config, flags, names = build_config(config_path, _overrides(kw), ablate)
    out = _prepare_out(out, force)
    manifest = RunManifest("train", config.as_dict(), asdict(flags), {k: str(v) for k, v in paths.items()},
                           config.seed)
    src, tgt, src_dm, tgt_dm = prepare_domains(paths, config)
    report = run_experiment(src, tgt, config, flags, src_dm, tgt_dm, checkpoint_path=out / "model.ckpt")
    report.write_csv(out / "report.csv")
    _write_csv(out / "diagnostics.csv", ["epoch", "gamma", "source_frac", "target_frac", "bound"],
               ([d["epoch"]] + [repr(d[k]) for k in ("gamma", "source_frac", "target_frac", "bound")]
                for d in report.diagnostics))
    write_config_file(config, names, out / "config.txt")
    if embeddings:
        emb = embed_nodes(report.model, Domain(tgt, tgt_dm), np.arange(tgt.num_nodes), config,
                          eval_seed(config))
        write_embeddings(out / "embeddings.csv", np.arange(tgt.num_nodes), emb)
    result = {"variant": flags.label(), "accuracy": report.accuracy,
              "per_class": {str(c): a for c, a in report.per_class.items()}}
    (out / "result.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    manifest.write(out / "manifest.json")
    click.echo(f"accuracy={report.accuracy!r} variant={flags.label()}")


@cli.command("eval")
@click.option("--checkpoint", required=True, type=click.Path(dir_okay=False, exists=True))
@_data_options
@click.option("--gamma", "gammas", default="0,0.25,0.5,1.0", show_default=True,
              help="Comma-separated entropy thresholds (nats).")
@click.option("--embeddings", type=click.Path(dir_okay=False), help="Write target embeddings CSV here.")
def eval_cmd(checkpoint, data, gammas, embeddings, **kw):
    """Accuracy, per-class breakdown and the entropy-threshold diagnostic."""
    paths = _resolve_paths(data, _explicit(kw))
    model, config, flags = load_checkpoint(checkpoint)
    grid = _parse_float_list(gammas)
    if any(g < 0 for g in grid):
        raise CliError("gamma values must be nonnegative")
    src, tgt, src_dm, tgt_dm = prepare_domains(paths, config)
    source, target = Domain(src, src_dm), Domain(tgt, tgt_dm)
    result = evaluate(model, target, config)
    click.echo(f"accuracy={result.accuracy!r} variant={flags.label()}")
    for c in sorted(result.per_class):
        click.echo(f"class={c} n={result.counts[c]} accuracy={result.per_class[c]!r}")
    hs, ht = domain_entropies(model, source, target, config)
    for g in grid:
        d = divergence_diagnostic(hs, ht, g)
        click.echo(f"gamma={g!r} source_frac={d['source_frac']!r} target_frac={d['target_frac']!r} "
                   f"bound={d['bound']!r}")
    if embeddings:
        nodes = np.arange(tgt.num_nodes)
        write_embeddings(embeddings, nodes, embed_nodes(model, target, nodes, config, eval_seed(config)))


def _sweep_job(job):
    paths, config_dict, names = job
    config = TrainConfig.from_dict(config_dict)
    flags = AblationFlags.parse(names)
    src, tgt, src_dm, tgt_dm = prepare_domains({k: Path(v) for k, v in paths.items()}, config)
    report = run_experiment(src, tgt, config, flags, src_dm, tgt_dm)
    return flags.label(), config.n, config.seed, report.accuracy


VARIANTS = {"full": [], "-cl": ["cl"], "-gv": ["gv"], "-lv": ["lv"], "-da": ["da"]}


@cli.command()
@_data_options
@_train_options
@click.option("--variants", default="full,-cl,-da", show_default=True,
              help=f"Comma-separated subset of {','.join(VARIANTS)}.")
@click.option("--seeds", default="0-4", show_default=True, help="Seeds, e.g. 0-4 or 1,3,5.")
@click.option("--n-values", default=None, help="Label budgets to sweep; defaults to the config's n.")
@click.option("--jobs", default=1, show_default=True, help="Worker processes.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--force", is_flag=True)
def sweep(variants, seeds, n_values, jobs, out, force, config_path, ablate, data, **kw):
    """Run variants x seeds x label budgets; write runs.csv and summary.csv."""
    paths = _resolve_paths(data, _explicit(kw))
    overrides = _overrides(kw)
    base, _, _ = build_config(config_path, overrides, ablate)
    chosen = [v.strip().lower() for v in variants.split(",") if v.strip()]
    unknown = [v for v in chosen if v not in VARIANTS]
    if unknown:
        raise CliError(f"unknown variants {unknown}; choose from {list(VARIANTS)}")
    seed_list = _parse_int_list(seeds)
    budgets = _parse_int_list(n_values) if n_values else [base.n]
    out = _prepare_out(out, force)
    # build caches once up front so workers only read them
    src, tgt, _ = load_pair(paths)
    for side, g in zip(SIDES, (src, tgt)):
        cached_diffusion(g, paths[f"{side}_edges"], base.alpha, base.topk)
    str_paths = {k: str(v) for k, v in paths.items()}
    jobs_list = []
    for v in chosen:
        for n in budgets:
            for s in seed_list:
                cfg = TrainConfig(**{**base.as_dict(), "n": n, "seed": s})
                jobs_list.append((str_paths, cfg.as_dict(), list(ablate) + VARIANTS[v]))
    manifest = RunManifest("sweep", base.as_dict(), {"variants": chosen, "n_values": budgets, "seeds": seed_list},
                           str_paths, base.seed)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_job, jobs_list))
    else:
        results = [_sweep_job(j) for j in jobs_list]
    _write_csv(out / "runs.csv", ["variant", "n", "seed", "accuracy"],
               ([v, n, s, repr(a)] for v, n, s, a in results))
    groups = {}
    for v, n, _, a in results:
        groups.setdefault((v, n), []).append(a)
    summary = []
    for (v, n), accs in groups.items():
        accs = np.array(accs)
        se = float(accs.std(ddof=1) / math.sqrt(accs.size)) if accs.size > 1 else float("nan")
        summary.append([v, n, accs.size, repr(float(accs.mean())), repr(se)])
        click.echo(f"variant={v} n={n} runs={accs.size} mean={accs.mean():.4f} se={se:.4f}")
    _write_csv(out / "summary.csv", ["variant", "n", "runs", "mean_accuracy", "std_error"], summary)
    manifest.write(out / "manifest.json")


def _emit_error(kind, message, code):
    click.echo(json.dumps({"error": kind, "exit_code": code, "message": message}), err=True)
    return code


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="graphda", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        return _emit_error("aborted", "interrupted", 2)
    except (CliError, click.UsageError) as exc:
        return _emit_error("validation", exc.format_message(), 1)
    except VALIDATION_ERRORS as exc:
        return _emit_error("validation", str(exc), 1)
    except Exception as exc:  # noqa: BLE001 - anything else is a runtime failure
        log.debug("runtime failure", exc_info=True)
        return _emit_error("runtime", f"{type(exc).__name__}: {exc}", 2)
    return 0
