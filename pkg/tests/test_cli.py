import json

import numpy as np
import pytest
import yaml

from convluna import cli
from convluna.config import ExperimentConfig, apply_overrides, dump_experiment, load_experiment, parse_experiment, to_dict
from convluna.diagnostics import compare_treatments, read_table
from convluna.errors import ConfigError
from convluna.training import read_metrics

TINY = {
    "model": {"arch": "convluna", "blocks": 1, "d": 8, "h": 2, "mlp_dim": 8, "memory_size": 2, "vocab_size": 8, "max_len": 16, "filter": {"kind": "maxpool", "kernel": 2, "stride": 1}},
    "train": {"total_steps": 6, "warmup_steps": 2, "batch_size": 4, "eval_every": 3, "snapshot_every": 2},
    "task": {"kind": "marker", "min_len": 16, "max_len": 16, "vocab_size": 8, "n_train": 32, "n_val": 16},
    "run_name": "tiny",
}


@pytest.fixture
def config(tmp_path):
    def write(extra=None, name="cfg.yaml"):
        data = json.loads(json.dumps(TINY))
        for dotted, value in (extra or {}).items():
            node = data
            *head, last = dotted.split(".")
            for key in head:
                node = node.setdefault(key, {})
            node[last] = value
        path = tmp_path / name
        path.write_text(yaml.safe_dump(data))
        return path

    return write


class TestConfig:
    def test_round_trip(self, config):
        cfg = load_experiment(config())
        again = parse_experiment(dump_experiment(cfg))
        assert again == cfg and to_dict(again) == to_dict(cfg)

    def test_defaults_round_trip(self):
        cfg = ExperimentConfig()
        assert parse_experiment(dump_experiment(cfg)) == cfg

    @pytest.mark.parametrize("bad", [{"model.widht": 3}, {"train.extra": 1}, {"surprise": True}, {"model.filter.size": 2}])
    def test_unknown_keys_rejected_with_path(self, config, bad):
        key = next(iter(bad))
        with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
            load_experiment(config(bad))

    def test_type_errors(self, config):
        with pytest.raises(ConfigError, match="model.d"):
            load_experiment(config({"model.d": "wide"}))

    def test_overrides(self, config):
        cfg = load_experiment(config(), ["train.seed=4", "model.filter.kind=conv", "seeds=[1, 2]"])
        assert cfg.train.seed == 4 and cfg.model.filter.kind == "conv" and cfg.seeds == [1, 2]

    def test_bad_override(self):
        with pytest.raises(ConfigError):
            apply_overrides({}, ["novalue"])


class TestRun:
    def test_zero_steps(self, config, tmp_path):
        out = tmp_path / "out"
        assert cli.main(["run", "--config", str(config({"train.total_steps": 0})), "--output", str(out)]) == 0
        run = out / "tiny" / "seed0"
        assert read_metrics(run / "metrics.jsonl") == []
        for rel in ("config.yaml", "checkpoints/init.ckpt", "checkpoints/final.ckpt", "report/summary.json"):
            assert (run / rel).exists()

    def test_same_seed_identical_logs(self, config, tmp_path):
        path = str(config())
        for name in ("a", "b"):
            assert cli.main(["run", "--config", path, "--output", str(tmp_path / name)]) == 0
        a, b = (tmp_path / n / "tiny" / "seed0" for n in ("a", "b"))
        assert (a / "metrics.jsonl").read_bytes() == (b / "metrics.jsonl").read_bytes()
        assert (a / "checkpoints/final.ckpt").read_bytes() == (b / "checkpoints/final.ckpt").read_bytes()

    def test_env_output_root_and_seed_flag(self, config, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "env"))
        assert cli.main(["run", "--config", str(config()), "--seed", "3"]) == 0
        assert (tmp_path / "env" / "tiny" / "seed3" / "report" / "summary.json").exists()

    def test_refuses_to_overwrite_then_resumes(self, config, tmp_path, capsys):
        out = str(tmp_path / "out")
        assert cli.main(["run", "--config", str(config()), "--output", out]) == 0
        run = tmp_path / "out" / "tiny" / "seed0"
        before = (run / "metrics.jsonl").read_bytes()
        assert cli.main(["run", "--config", str(config()), "--output", out]) == 2
        assert "completed" in capsys.readouterr().err
        assert (run / "metrics.jsonl").read_bytes() == before
        assert cli.main(["run", "--config", str(config({"train.total_steps": 9})), "--output", out, "--resume"]) == 0
        steps = [r["step"] for r in read_metrics(run / "metrics.jsonl")]
        assert max(steps) == 9 and (run / "metrics.jsonl").read_bytes().startswith(before)

    def test_config_error_exit_code(self, config, tmp_path, capsys):
        assert cli.main(["run", "--config", str(config({"model.heads": 2})), "--output", str(tmp_path)]) == 3
        assert "model.heads" in capsys.readouterr().err

    def test_input_error_exit_code(self, config, tmp_path):
        bad = tmp_path / "bad.tsv"
        bad.write_text("1 2 99\t0\n")
        path = config({"task.kind": "file-ingest", "task.train_path": str(bad)})
        assert cli.main(["run", "--config", str(path), "--output", str(tmp_path / "o")]) == 4

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numeric_failure_keeps_partial_artifacts(self, config, tmp_path):
        path = config({"train.base_lr": 1e30, "train.warmup_steps": 1, "train.total_steps": 20})
        assert cli.main(["run", "--config", str(path), "--output", str(tmp_path / "o")]) == 5
        records = read_metrics(tmp_path / "o" / "tiny" / "seed0" / "metrics.jsonl")
        assert records[-1]["metric"] == "nan_abort"

    def test_suite_layout(self, config, tmp_path):
        path = config({"seeds": [0, 1, 2, 3, 4], "memory_sizes": [1, 2, 4], "train.total_steps": 1, "train.warmup_steps": 1})
        assert cli.main(["run", "--config", str(path), "--output", str(tmp_path / "o")]) == 0
        runs = sorted(p.parent for p in (tmp_path / "o").rglob("summary.json"))
        assert len(runs) == 15
        assert {r.relative_to(tmp_path / "o").as_posix() for r in runs} == {f"tiny/m{m}/seed{s}/report" for m in (1, 2, 4) for s in range(5)}


def fake_run(root, arch, memory, seed, acc):
    run = root / f"{arch}-m{memory}-s{seed}"
    (run / "report").mkdir(parents=True)
    cfg = ExperimentConfig()
    cfg.model = type(cfg.model)(arch=arch, memory_size=memory)
    cfg.train = type(cfg.train)(seed=seed)
    (run / "config.yaml").write_text(dump_experiment(cfg))
    (run / "report" / "summary.json").write_text(json.dumps({"final_val_accuracy": acc, "best_val_accuracy": acc}))
    return run


class TestCompare:
    def test_matches_direct_call(self, tmp_path, capsys):
        rng = np.random.default_rng(0)
        scores = {arch: rng.uniform(0.4, 0.9, size=(5, 3)) for arch in ("convluna", "luna")}
        for arch, mat in scores.items():
            for i, seed in enumerate(range(5)):
                for j, m in enumerate((1, 16, 256)):
                    fake_run(tmp_path / "runs", arch, m, seed, float(mat[i, j]))
        out = tmp_path / "cmp"
        assert cli.main(["compare", str(tmp_path / "runs"), "--output", str(out)]) == 0
        direct = compare_treatments({f"{a}/marker": scores[a] for a in sorted(scores)}, [1, 16, 256], list(range(5)))
        rows = read_table(out / "friedman.tsv")
        assert [r["hypothesis"] for r in rows] == ["convluna/marker", "luna/marker"]
        for row, h in zip(rows, direct.hypotheses):
            assert float(row["chi2"]) == h.chi2 and float(row["p_raw"]) == h.p_raw and float(row["p_holm"]) == h.p_holm
        assert len(read_table(out / "scores.tsv")) == 30

    def test_perfect_fixture(self, tmp_path):
        for seed in range(3):
            for j, m in enumerate((1, 16, 256)):
                fake_run(tmp_path / "runs", "convluna", m, seed, 0.5 + 0.1 * j)
        assert cli.main(["compare", str(tmp_path / "runs"), "--output", str(tmp_path / "c")]) == 0
        row = read_table(tmp_path / "c" / "friedman.tsv")[0]
        assert float(row["chi2"]) == 6.0 and abs(float(row["p_raw"]) - 0.049787) < 1e-5

    def test_identical_accuracies(self, tmp_path):
        for seed in range(3):
            for m in (1, 16):
                fake_run(tmp_path / "runs", "luna", m, seed, 0.7)
        assert cli.main(["compare", str(tmp_path / "runs"), "--output", str(tmp_path / "c")]) == 0
        assert float(read_table(tmp_path / "c" / "friedman.tsv")[0]["p_holm"]) == 1.0

    def test_ragged_is_usage_error(self, tmp_path):
        for seed, m in [(0, 1), (1, 1), (0, 16)]:
            fake_run(tmp_path / "runs", "luna", m, seed, 0.5)
        assert cli.main(["compare", str(tmp_path / "runs"), "--output", str(tmp_path / "c")]) == 2
        assert not (tmp_path / "c").exists()


class TestDiagnose:
    def test_one_row_per_snapshot(self, config, tmp_path):
        path = config({"train.total_steps": 50, "train.warmup_steps": 5, "train.eval_every": 25, "train.snapshot_every": 10})
        assert cli.main(["run", "--config", str(path), "--output", str(tmp_path / "o")]) == 0
        run = tmp_path / "o" / "tiny" / "seed0"
        n_snaps = len(list((run / "snapshots").glob("*.ckpt")))
        assert n_snaps == 10
        assert cli.main(["diagnose", str(run)]) == 0
        assert len(read_table(run / "report" / "degradation.tsv")) == n_snaps
        assert len(read_table(run / "report" / "attention_entropy.tsv")) == 2
        assert len(read_table(run / "report" / "memory_heatmap.tsv")) == 2 * 8

    def test_identical_rows_snapshot(self, tmp_path):
        from convluna.diagnostics import MemorySnapshot, save_snapshot

        save_snapshot(MemorySnapshot(5, 0, np.ones((3, 4))), tmp_path / "run" / "snapshots" / "s.ckpt")
        assert cli.main(["diagnose", str(tmp_path / "run")]) == 0
        row = read_table(tmp_path / "run" / "report" / "degradation.tsv")[0]
        assert float(row["mean_pairwise_cosine"]) == pytest.approx(1.0, abs=1e-12)

    def test_no_snapshots(self, tmp_path):
        (tmp_path / "run").mkdir()
        assert cli.main(["diagnose", str(tmp_path / "run"), "--output", str(tmp_path / "rep")]) == 2
        assert not (tmp_path / "rep").exists()
