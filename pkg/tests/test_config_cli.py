import csv
import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from blur.cli import main
from blur.config import ConfigError, dumps, load_config, loads
from blur.genome import load_genome, random_init, save_genome

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

SMALL = """\
version: 1
seed: 3
genome: {source: random, num_states: 2, scale: 0.1, activation: tanh}
architecture: {hidden: [4], synapse_stabilizer: oja}
tasks:
  - {kind: boolean, op: and}
eval_tasks:
  - {kind: boolean, op: xor}
unroll: {unroll_steps: 3, eval_batches: 2, batch_size: 16}
es: {population: 4, sigma0: 0.2, generations: 3, snapshot_every: 2}
eval: {unrolls: [1, 5, 10]}
sgd: {learning_rates: [0.01, 0.1, 1.0, 10.0], steps: 4, eval_every: 2}
analysis: {task: 0, batch_size: 16, probes: 2}
"""


def _write(tmp_path, text=SMALL, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(text)
    return path


def _run(*args):
    result = CliRunner().invoke(main, [str(a) for a in args])
    return result


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# -- config ---------------------------------------------------------------------------------


def test_config_roundtrip():
    cfg = loads(SMALL)
    again = loads(dumps(cfg))
    assert again.to_dict() == cfg.to_dict()
    assert dumps(again) == dumps(cfg)


@pytest.mark.parametrize("name", sorted(p.name for p in CONFIGS.glob("*.yaml")))
def test_shipped_configs_parse(name):
    cfg = load_config(CONFIGS / name)
    assert loads(dumps(cfg), base_dir=CONFIGS).to_dict() == cfg.to_dict()


def test_unknown_key_reports_line():
    text = SMALL.replace("unroll: {", "unrol: {")
    with pytest.raises(ConfigError) as info:
        loads(text)
    assert info.value.line == 9
    assert "unrol" in str(info.value)


def test_bad_value_reports_line():
    text = SMALL.replace("synapse_stabilizer: oja", "synapse_stabilizer: glue")
    with pytest.raises(ConfigError) as info:
        loads(text)
    assert info.value.line == 4


def test_version_required():
    with pytest.raises(ConfigError):
        loads(SMALL.replace("version: 1", "version: 2"))


def test_yaml_syntax_error():
    with pytest.raises(ConfigError):
        loads("version: 1\ntasks: [\n")


def test_missing_genome_file(tmp_path):
    text = SMALL.replace("source: random,", "source: file, path: nowhere.json,")
    with pytest.raises(ConfigError):
        loads(text, base_dir=tmp_path)


def test_state_count_must_fit_backward_mode():
    text = SMALL.replace("num_states: 2", "num_states: 1").replace(
        "hidden: [4]", "hidden: [4], backward_mode: mult_second_state_only")
    with pytest.raises(ConfigError):
        loads(text)


# -- commands -------------------------------------------------------------------------------------


def test_echo_config_reparses(tmp_path):
    result = _run("echo-config", "--config", _write(tmp_path))
    assert result.exit_code == 0
    assert loads(result.output).to_dict() == loads(SMALL).to_dict()


def test_invalid_config_nonzero_exit(tmp_path):
    path = _write(tmp_path, SMALL.replace("seed: 3", "seed: -1"))
    result = _run("train", "--config", path, "--out", tmp_path / "o")
    assert result.exit_code != 0
    assert "cfg.yaml" in result.output


def test_train_zero_unrolls(tmp_path):
    path = _write(tmp_path, SMALL.replace("unroll_steps: 3", "unroll_steps: 0"))
    result = _run("train", "--config", path, "--out", tmp_path / "o")
    assert result.exit_code == 0, result.output
    rows = _rows(tmp_path / "o" / "episode_and.csv")
    assert rows[0] == ["step", "train_acc", "eval_acc", "max_norm"]
    assert len(rows) == 2 and rows[1][0] == "0" and rows[1][1] == ""


def test_train_writes_manifest_and_config(tmp_path):
    out = tmp_path / "o"
    assert _run("train", "--config", _write(tmp_path), "--out", out).exit_code == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "train" and manifest["seed"] == 3
    assert "episode_and.csv" in manifest["files"]
    assert load_config(out / "config.yaml").to_dict()["seed"] == 3
    assert len(_rows(out / "episode_and.csv")) == 1 + 4


def test_eval_three_rows_per_task(tmp_path):
    out = tmp_path / "o"
    result = _run("eval", "--config", _write(tmp_path), "--out", out)
    assert result.exit_code == 0, result.output
    rows = _rows(out / "eval.csv")
    assert rows[0] == ["task", "unroll_steps", "episode", "eval_acc", "diverged"]
    assert [r[1] for r in rows[1:]] == ["1", "5", "10"]
    assert {r[0] for r in rows[1:]} == {"xor"}


def test_eval_uses_saved_genome(tmp_path):
    save_genome(random_init(2, 9, 0.2), tmp_path / "g.json")
    path = _write(tmp_path, SMALL.replace("source: random,", "source: file, path: g.json,"))
    out = tmp_path / "o"
    assert _run("eval", "--config", path, "--out", out).exit_code == 0
    saved = load_config(out / "config.yaml")
    assert saved.genome.source == "file"
    assert Path(saved.genome.path) == tmp_path / "g.json"


def test_baseline_sgd_one_curve_per_lr(tmp_path):
    out = tmp_path / "o"
    result = _run("baseline-sgd", "--config", _write(tmp_path), "--out", out)
    assert result.exit_code == 0, result.output
    rows = _rows(out / "sgd.csv")[1:]
    lrs = sorted({float(r[1]) for r in rows})
    assert lrs == [0.01, 0.1, 1.0, 10.0]
    assert max(lrs) / min(lrs) == pytest.approx(1e3)
    for lr in lrs:
        assert [r[2] for r in rows if float(r[1]) == lr] == ["0", "2", "4"]


def test_meta_train_outputs_and_resume(tmp_path):
    path = _write(tmp_path)
    full, part = tmp_path / "full", tmp_path / "part"
    assert _run("meta-train", "--config", path, "--out", full).exit_code == 0
    for name in ("history.csv", "best_genome.json", "es_state.json", "snapshots/gen00002.json",
                 "snapshots/gen00003.json"):
        assert (full / name).exists(), name
    load_genome(full / "best_genome.json")
    assert len(_rows(full / "history.csv")) == 1 + 3

    short = _write(tmp_path, SMALL.replace("generations: 3", "generations: 2"), "short.yaml")
    assert _run("meta-train", "--config", short, "--out", part).exit_code == 0
    result = _run("meta-train", "--config", path, "--out", part, "--resume")
    assert result.exit_code == 0, result.output
    assert "resuming" in result.output
    for name in ("history.csv", "best_genome.json"):
        assert (part / name).read_bytes() == (full / name).read_bytes()


def test_resume_refuses_other_config(tmp_path):
    out = tmp_path / "o"
    assert _run("meta-train", "--config", _write(tmp_path), "--out", out).exit_code == 0
    other = _write(tmp_path, SMALL.replace("sigma0: 0.2", "sigma0: 0.3"), "other.yaml")
    result = _run("meta-train", "--config", other, "--out", out, "--resume")
    assert result.exit_code != 0


def test_analyze_jacobian(tmp_path):
    out = tmp_path / "o"
    result = _run("analyze", "--config", _write(tmp_path), "--out", out, "--mode", "jacobian")
    assert result.exit_code == 0, result.output
    n = 2 * (3 * 4 + 5 * 2)
    assert len(_rows(out / "jacobian.csv")) == n
    assert len(_rows(out / "coords.csv")) == n + 1
    assert "max symmetry gap" in (out / "summary.txt").read_text()


def test_analyze_metric_guard(tmp_path):
    path = _write(tmp_path, SMALL.replace("hidden: [4]", "hidden: [20]"))
    result = _run("analyze", "--config", path, "--out", tmp_path / "o", "--mode", "metric")
    assert result.exit_code != 0
    assert "too many" in result.output


@pytest.mark.parametrize("command", [["train"], ["eval"], ["baseline-sgd"], ["meta-train"],
                                     ["analyze", "--mode", "jacobian"]])
def test_commands_byte_identical_reruns(tmp_path, command):
    path = _write(tmp_path)
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        result = _run(command[0], "--config", path, "--out", out, *command[1:])
        assert result.exit_code == 0, result.output
    files = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*") if p.is_file())
    assert files
    for rel in files:
        assert (outs[0] / rel).read_bytes() == (outs[1] / rel).read_bytes(), rel


def test_seed_flag_overrides(tmp_path):
    out = tmp_path / "o"
    assert _run("train", "--config", _write(tmp_path), "--out", out, "--seed", "11").exit_code == 0
    assert json.loads((out / "manifest.json").read_text())["seed"] == 11
