"""Command line entry point: ``blur <command> --config experiment.yaml``.

Every command writes into one output directory: the resolved config
(``config.yaml``), a ``manifest.json`` listing inputs and produced files
with their hashes, and the command's CSV/genome outputs.  Data files carry
no timestamps, so reruns with the same config and seed at ``--threads 1``
are byte-identical.
"""

from __future__ import annotations

import csv
import functools
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from . import __version__
from .analysis import (
    constant_metric_probe,
    fd_noise,
    log_gap,
    random_probe_states,
    symmetry_gap,
    update_jacobian,
    write_matrix_csv,
)
from .config import ConfigError, ExperimentConfig, load_config
from .errors import BlurError
from .genome import decode, encode, save_genome
from .inner_loop import arch_for_task, run_episode, sgd_reference
from .meta_es import accuracy_fitness, cma_es_optimize, load_es_state, save_es_state
from .network import init_synapses

log = logging.getLogger("blur")

EPISODE_HEADER = ("step", "train_acc", "eval_acc", "max_norm")
EVAL_HEADER = ("task", "unroll_steps", "episode", "eval_acc", "diverged")
SGD_HEADER = ("task", "lr", "step", "train_acc", "eval_acc")


def _fmt(x):
    if x is None or (isinstance(x, float) and np.isnan(x)):
        return ""
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Run:
    """Output directory bookkeeping for one command invocation."""

    def __init__(self, command, cfg: ExperimentConfig, out, threads):
        self.command = command
        self.cfg = cfg
        self.saved = cfg.portable().dump()
        self.out = Path(out)
        self.threads = threads
        self.out.mkdir(parents=True, exist_ok=True)
        self.files = []
        (self.out / "config.yaml").write_text(self.saved)

    def path(self, name):
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        if name not in self.files:
            self.files.append(name)
        return p

    def finish(self, extra=None):
        manifest = {
            "command": self.command,
            "package_version": __version__,
            "seed": self.cfg.seed,
            "threads": self.threads,
            "config_sha256": hashlib.sha256(self.saved.encode()).hexdigest(),
            "files": {name: _sha256(self.out / name) for name in sorted(self.files)
                      if (self.out / name).exists()},
        }
        if extra:
            manifest.update(extra)
        (self.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        click.echo(f"wrote {self.out}")


def _prepare(command, config, seed, threads, out):
    cfg = load_config(config)
    if seed is not None:
        cfg.seed = seed
    if out is None:
        out = cfg.base / cfg.output_dir if cfg.output_dir else Path("runs") / f"{Path(config).stem}-{command}"
    return Run(command, cfg, out, threads)


def common_options(fn):
    fn = click.option("--out", type=click.Path(file_okay=False), default=None,
                      help="Output directory (default: config output_dir or runs/<name>-<command>).")(fn)
    fn = click.option("--threads", type=click.IntRange(min=1), default=1, show_default=True,
                      help="Worker threads; 1 gives bit-exact reproducibility.")(fn)
    fn = click.option("--seed", type=click.IntRange(min=0), default=None,
                      help="Override the config's global seed.")(fn)
    fn = click.option("--config", "config", required=True, type=click.Path(dir_okay=False),
                      help="Experiment config (YAML).")(fn)
    return fn


def _guarded(fn):
    """Turn library errors into a clean non-zero exit."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ConfigError, BlurError, OSError) as err:
            raise click.ClickException(str(err)) from err

    return wrapper


@click.group()
@click.option("-v", "--verbose", count=True, help="Log progress (-v info, -vv debug).")
@click.version_option(__version__)
def main(verbose):
    """Meta-learn and analyse bidirectional learned update rules."""
    level = logging.WARNING if verbose == 0 else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


@main.command("echo-config")
@click.option("--config", "config", required=True, type=click.Path(dir_okay=False))
@_guarded
def echo_config(config):
    """Print the config in canonical form (re-parses to the same structure)."""
    click.echo(load_config(config).dump(), nl=False)


@main.command("meta-train")
@common_options
@click.option("--resume/--no-resume", default=False,
              help="Continue from es_state.json in the output directory.")
@_guarded
def meta_train(config, seed, threads, out, resume):
    """Optimize a genome with CMA-ES over the config's tasks."""
    run = _prepare("meta-train", config, seed, threads, out)
    cfg = run.cfg
    g0 = cfg.build_genome()
    layout = cfg.genome.layout(g0)
    tasks = cfg.build_tasks()
    arch = cfg.architecture.build()
    es_cfg = cfg.es.build(cfg.unroll.build(), cfg.seed, threads)
    dtype = np.dtype(cfg.es.dtype).type
    fitness = accuracy_fitness(tasks, arch, es_cfg, layout, dtype)

    state_path = run.path("es_state.json")
    state = None
    if resume and state_path.exists():
        state = load_es_state(state_path)
        if state.get("config_sha256") != _config_hash(cfg):
            raise click.ClickException("es_state.json belongs to a different config; refusing to resume")
        click.echo(f"resuming after generation {state['history']['generation'][-1]}")

    def snapshot(generation, st, history, best_x):
        last = generation + 1 == es_cfg.generations
        if (generation + 1) % cfg.es.snapshot_every == 0 or last:
            name = f"snapshots/gen{generation + 1:05d}.json"
            save_genome(decode(best_x, layout), run.path(name), layout)
            history.snapshots.append(name)
            st["history"] = history.to_dict()
            st["config_sha256"] = _config_hash(cfg)
            save_es_state(state_path, st)
            history.write_csv(run.path("history.csv"))
        return False

    if state is not None:
        for name in state["history"]["snapshots"]:
            run.path(name)
    best, history = cma_es_optimize(fitness, encode(g0, layout), es_cfg,
                                    decode_fn=lambda x: decode(x, layout), callback=snapshot,
                                    resume=state)
    save_genome(best, run.path("best_genome.json"), layout)
    history.write_csv(run.path("history.csv"))
    run.finish({"generations": len(history.generation),
                "best_fitness": history.best[-1] if history.best else None,
                "evaluations": history.evaluations[-1] if history.evaluations else 0})
    click.echo(f"best fitness {history.best[-1]:.4f}" if history.best else "no generations run")


def _config_hash(cfg):
    """Hash of everything that shapes the ES trajectory (extending generations is allowed)."""
    d = cfg.to_dict()
    d.pop("output_dir", None)
    d["es"].pop("generations", None)
    return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()


@main.command()
@common_options
@_guarded
def train(config, seed, threads, out):
    """Run one learning episode per task with the configured genome."""
    run = _prepare("train", config, seed, threads, out)
    cfg = run.cfg
    genome = cfg.build_genome()
    save_genome(genome, run.path("genome.json"))
    unroll = cfg.unroll.build(cfg.seed)
    steps = unroll.unroll_steps
    summary = {}
    for task in cfg.build_tasks():
        arch = arch_for_task(cfg.architecture.build(), task)
        syn0 = init_synapses(arch, genome.num_states, unroll.synapse_seed)
        _, report = run_episode(genome, arch, task, unroll, synapses=syn0,
                                eval_at=range(steps + 1), input_scale=cfg.eval.input_scale)
        init_norm = max(float(n.max()) for n in syn0.column_norms())
        rows = [(0, None, report.eval_trace.get(0), init_norm)]
        for t in range(steps):
            rows.append((t + 1, report.train_accuracy[t], report.eval_trace.get(t + 1),
                         float(np.nanmax(report.norm_max[t]))))
        _write_csv(run.path(f"episode_{task.name}.csv"), EPISODE_HEADER, rows)
        summary[task.name] = {"eval_accuracy": report.eval_accuracy, "diverged": report.diverged}
        click.echo(f"{task.name}: eval accuracy {report.eval_accuracy:.4f}"
                   + (" (diverged)" if report.diverged else ""))
    run.finish({"tasks": summary})


@main.command("eval")
@common_options
@_guarded
def eval_cmd(config, seed, threads, out):
    """Accuracy of the configured genome across eval tasks and unroll counts."""
    run = _prepare("eval", config, seed, threads, out)
    cfg = run.cfg
    genome = cfg.build_genome()
    unrolls = sorted(set(cfg.eval.unrolls))
    rows = []
    for task in cfg.build_tasks("eval_tasks"):
        arch = arch_for_task(cfg.architecture.build(), task)
        for episode in range(cfg.eval.episodes):
            unroll = replace(cfg.unroll.build(cfg.seed + episode), unroll_steps=max(unrolls))
            _, report = run_episode(genome, arch, task, unroll, eval_at=unrolls,
                                    input_scale=cfg.eval.input_scale)
            for u in unrolls:
                diverged = report.diverged and report.diverged_at is not None and report.diverged_at < u
                rows.append((task.name, u, episode, report.eval_trace[u], int(diverged)))
    _write_csv(run.path("eval.csv"), EVAL_HEADER, rows)
    for task_name in dict.fromkeys(r[0] for r in rows):
        accs = " ".join(f"{r[1]}:{r[3]:.3f}" for r in rows if r[0] == task_name and r[2] == 0)
        click.echo(f"{task_name}: {accs}")
    run.finish()


@main.command("baseline-sgd")
@common_options
@_guarded
def baseline_sgd(config, seed, threads, out):
    """Plain SGD over a learning-rate grid, one accuracy curve per rate."""
    run = _prepare("baseline-sgd", config, seed, threads, out)
    cfg = run.cfg
    s = cfg.sgd
    eval_at = list(range(0, s.steps + 1, s.eval_every))
    rows = []
    for task in cfg.build_tasks("eval_tasks"):
        arch = arch_for_task(cfg.architecture.build(), task)
        for lr in s.learning_rates:
            _, trace = sgd_reference(arch, task, lr, s.momentum, s.steps, cfg.seed,
                                     batch_size=cfg.unroll.batch_size, activation_kind=s.activation,
                                     loss=s.loss, eval_batches=cfg.unroll.eval_batches,
                                     eval_at=eval_at)
            for step in eval_at:
                train_acc = trace.train[step - 1] if step >= 1 else None
                rows.append((task.name, lr, step, train_acc, trace.eval[step]))
            click.echo(f"{task.name} lr={lr:g}: final eval accuracy {trace.eval[eval_at[-1]]:.4f}")
    _write_csv(run.path("sgd.csv"), SGD_HEADER, rows)
    run.finish()


@main.command()
@common_options
@click.option("--mode", type=click.Choice(["jacobian", "metric"]), required=True)
@_guarded
def analyze(config, seed, threads, out, mode):
    """Jacobian symmetry gap or constant-metric probe of the update rule."""
    run = _prepare(f"analyze-{mode}", config, seed, threads, out)
    cfg = run.cfg
    a = cfg.analysis
    genome = cfg.build_genome()
    task = cfg.build_tasks()[a.task]
    arch = arch_for_task(cfg.architecture.build(), task)
    syn_seed = cfg.seed if a.synapse_seed is None else a.synapse_seed
    batch = next(task.streams(a.batch_size, cfg.seed)[0])
    if mode == "jacobian":
        syn = init_synapses(arch, genome.num_states, syn_seed)
        jac = update_jacobian(genome, arch, syn, batch, a.h, threads)
        gap, max_gap = symmetry_gap(jac)
        noise = fd_noise(genome, arch, syn, batch, a.h, threads)
        write_matrix_csv(run.path("jacobian.csv"), jac.Q)
        write_matrix_csv(run.path("gap.csv"), gap)
        write_matrix_csv(run.path("log_gap.csv"), log_gap(gap))
        _write_csv(run.path("coords.csv"), ("index", "layer", "channel", "i", "j"),
                   [(n, *c) for n, c in enumerate(jac.coords)])
        text = (f"weights: {jac.dim}\nh: {a.h!r}\nmax symmetry gap: {max_gap!r}\n"
                f"finite-difference noise estimate: {noise!r}\n"
                f"gap / noise: {max_gap / noise if noise > 0 else float('inf')!r}\n")
        run.path("summary.txt").write_text(text)
        click.echo(text, nl=False)
        run.finish({"max_gap": max_gap, "fd_noise": noise})
    else:
        states = random_probe_states(arch, genome.num_states, a.probes + 1, syn_seed)
        result = constant_metric_probe(genome, arch, states, batch, a.tol, a.check_tol, a.h)
        text = result.summary()
        run.path("metric.txt").write_text(text)
        click.echo(text, nl=False)
        run.finish({"pd_survivors": result.pd_survivors, "identity_survives": result.identity_survives})


if __name__ == "__main__":  # pragma: no cover
    main()
