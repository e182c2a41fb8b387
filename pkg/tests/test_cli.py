"""Config parsing, the run/sweep/report commands, and artifact emission."""
from __future__ import annotations

import json

import pytest

from fedmentor.cli import (
    EXIT_CONFIG,
    EXIT_OK,
    EXIT_RUNTIME,
    execute_run,
    main,
    run_command,
    sweep_command,
)
from fedmentor.config import (
    ConfigError,
    RunConfig,
    build_experiment,
    config_from_dict,
    load_config,
)
from fedmentor.federation import metrics_csv_lines, run_training
from fedmentor.lora import serialize
from fedmentor.reference import run_plain_fedavg


def write_config(tmp_path, text: str):
    path = tmp_path / "config.yaml"
    path.write_text(text)
    return path


class TestConfigParsing:
    def test_empty_file_yields_defaults(self, tmp_path):
        cfg = load_config(write_config(tmp_path, ""))
        assert cfg == RunConfig()
        assert cfg.budgets.entries == {"IRF": 0.5, "Dreaddit": 2.0, "MultiWD": 1.5}
        assert cfg.strategy.kind == "domain_aware"

    def test_round_trip_through_echo(self, tmp_path):
        cfg = load_config(
            write_config(
                tmp_path,
                "seed: 9\nrounds: 3\nstrategy: {kind: uniform, eps_glob: 1.0}\n"
                "data:\n  scale: 0.05\n  overrides:\n    IRF: {rotation_angle: 0.4}\n",
            )
        )
        assert config_from_dict(cfg.to_dict()) == cfg

    def test_unknown_top_level_key(self, tmp_path):
        with pytest.raises(ConfigError, match="unknown keys.*bogus"):
            load_config(write_config(tmp_path, "bogus: 1\n"))

    def test_unknown_nested_key_names_section(self, tmp_path):
        with pytest.raises(ConfigError, match="model: unknown keys"):
            load_config(write_config(tmp_path, "model: {depth: 3}\n"))

    def test_type_errors_name_field(self, tmp_path):
        with pytest.raises(ConfigError, match="rounds"):
            load_config(write_config(tmp_path, "rounds: many\n"))
        with pytest.raises(ConfigError, match="learning_rate"):
            load_config(write_config(tmp_path, "learning_rate: fast\n"))

    def test_strategy_validation_surfaces_as_config_error(self, tmp_path):
        with pytest.raises(ConfigError, match="strategy"):
            load_config(write_config(tmp_path, "strategy: {kind: uniform}\n"))

    def test_domain_aware_requires_budgets_for_all_domains(self, tmp_path):
        text = "budgets:\n  entries: {Dreaddit: 2.0}\n"
        with pytest.raises(ConfigError, match="missing budgets.*IRF"):
            load_config(write_config(tmp_path, text))

    def test_unknown_threshold_metric(self, tmp_path):
        with pytest.raises(ConfigError, match="thresholds.bert"):
            load_config(write_config(tmp_path, "thresholds: {bert: 0.5}\n"))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_config(tmp_path / "absent.yaml")

    def test_invalid_yaml(self, tmp_path):
        with pytest.raises(ConfigError, match="not valid YAML"):
            load_config(write_config(tmp_path, "a: [unclosed\n"))

    def test_rank_must_fit_model(self, tmp_path):
        with pytest.raises(ConfigError, match="model.rank"):
            load_config(write_config(tmp_path, "model: {rank: 99}\n"))


class TestBuildExperiment:
    def test_client_ids_follow_sorted_domains(self):
        exp = build_experiment(RunConfig())
        assert [(c.id, c.domain) for c in exp.clients] == [
            (0, "Dreaddit"), (1, "IRF"), (2, "MultiWD"),
        ]

    def test_domain_order_in_config_is_irrelevant(self):
        a = build_experiment(config_from_dict({"data": {"domains": ["IRF", "Dreaddit", "MultiWD"]}}))
        b = build_experiment(config_from_dict({"data": {"domains": ["MultiWD", "IRF", "Dreaddit"]}}))
        for ca, cb in zip(a.clients, b.clients):
            assert ca.id == cb.id and ca.domain == cb.domain
            assert serialize(ca.adapters) == serialize(cb.adapters)

    def test_uniform_strategy_budgets(self):
        cfg = config_from_dict({"strategy": {"kind": "uniform", "eps_glob": 1.0}})
        exp = build_experiment(cfg)
        assert all(exp.server.budgets.epsilon(d) == 1.0 for d in cfg.data.domains)

    def test_utility_threshold_strategy_sets_all_thresholds(self):
        cfg = config_from_dict({"strategy": {"kind": "utility_threshold", "tau": 0.0}})
        exp = build_experiment(cfg)
        assert exp.server.thresholds == {"accuracy": 0.0, "neg_eval_loss": 0.0}

    def test_single_client_config(self):
        cfg = config_from_dict({"data": {"domains": ["Dreaddit"]}})
        exp = build_experiment(cfg)
        assert len(exp.clients) == 1
        assert exp.clients[0].domain == "Dreaddit"


class TestRunCommand:
    def test_artifacts_written(self, tmp_path):
        cfg_path = write_config(tmp_path, "rounds: 2\ndata: {scale: 0.02}\n")
        run_dir = run_command(cfg_path, out=str(tmp_path / "out"))
        assert (run_dir / "metrics.csv").exists()
        assert (run_dir / "summary.json").exists()
        assert (run_dir / "adapters.bin").exists()
        summary = json.loads((run_dir / "summary.json").read_text())
        assert summary["rounds_completed"] == 2
        assert len(summary["final_adapters_sha256"]) == 64

    def test_metrics_has_one_row_per_round(self, tmp_path):
        cfg_path = write_config(tmp_path, "rounds: 3\ndata: {scale: 0.02}\n")
        run_dir = run_command(cfg_path, out=str(tmp_path / "out"))
        lines = (run_dir / "metrics.csv").read_text().strip().splitlines()
        assert len(lines) == 4  # header + 3 rounds

    def test_reruns_never_overwrite(self, tmp_path):
        cfg_path = write_config(tmp_path, "rounds: 1\ndata: {scale: 0.02}\n")
        d1 = run_command(cfg_path, out=str(tmp_path / "out"))
        d2 = run_command(cfg_path, out=str(tmp_path / "out"))
        assert d1 != d2
        assert d1.exists() and d2.exists()

    def test_same_seed_byte_identical_outputs(self, tmp_path):
        cfg_path = write_config(tmp_path, "rounds: 2\nseed: 5\ndata: {scale: 0.02}\n")
        d1 = run_command(cfg_path, out=str(tmp_path / "out"))
        d2 = run_command(cfg_path, out=str(tmp_path / "out"))
        assert (d1 / "metrics.csv").read_bytes() == (d2 / "metrics.csv").read_bytes()
        assert (d1 / "adapters.bin").read_bytes() == (d2 / "adapters.bin").read_bytes()
        assert (d1 / "summary.json").read_bytes() == (d2 / "summary.json").read_bytes()

    def test_off_strategy_reproduces_reference_path(self, tmp_path):
        cfg = config_from_dict(
            {"rounds": 3, "strategy": {"kind": "off"}, "data": {"scale": 0.02}}
        )
        exp = build_experiment(cfg)
        server, records, _ = run_training(exp.server, exp.clients, cfg.rounds)
        ref_adapters, ref_records, _ = run_plain_fedavg(
            exp.backbone, list(exp.clients), exp.server.global_adapters, cfg.seed,
            cfg.rounds, budgets_echo=dict(exp.server.budgets.entries),
        )
        assert serialize(server.global_adapters) == serialize(ref_adapters)
        assert metrics_csv_lines(records) == metrics_csv_lines(ref_records)

    def test_uniform_budget_appears_in_metrics(self, tmp_path):
        cfg_path = write_config(
            tmp_path,
            "rounds: 1\ndata: {scale: 0.02}\nstrategy: {kind: uniform, eps_glob: 1.0}\n",
        )
        run_dir = run_command(cfg_path, out=str(tmp_path / "out"))
        lines = (run_dir / "metrics.csv").read_text().strip().splitlines()
        header = lines[0].split(",")
        row = lines[1].split(",")
        budgets = {
            h.removeprefix("budget_"): float(v)
            for h, v in zip(header, row)
            if h.startswith("budget_")
        }
        assert budgets == {"Dreaddit": 0.9, "IRF": 0.9, "MultiWD": 0.9}  # 1.0 after one decay

    def test_static_noise_strategy_runs(self, tmp_path):
        cfg_path = write_config(
            tmp_path,
            "rounds: 2\ndata: {scale: 0.02}\nstrategy: {kind: static_noise, sigma: 0.008}\n",
        )
        run_dir = run_command(cfg_path, out=str(tmp_path / "out"))
        lines = (run_dir / "metrics.csv").read_text().strip().splitlines()
        assert len(lines) == 3


class TestSweepCommand:
    def test_three_values_three_rows(self, tmp_path):
        cfg_path = write_config(tmp_path, "rounds: 1\ndata: {scale: 0.02}\n")
        sweep_dir = sweep_command(cfg_path, "IRF", [0.1, 0.5, 1.0], out=str(tmp_path / "out"))
        lines = (sweep_dir / "sweep.csv").read_text().strip().splitlines()
        assert len(lines) == 4  # header + one per eps
        assert (sweep_dir / "eps-0.1" / "adapters.bin").exists()

    def test_single_value_sweep_equals_plain_run(self, tmp_path):
        seed_cfg = "rounds: 2\nseed: 3\ndata: {scale: 0.02}\n"
        cfg_path = write_config(tmp_path, seed_cfg)
        sweep_dir = sweep_command(cfg_path, "IRF", [0.5], out=str(tmp_path / "sweep"))
        run_dir = run_command(cfg_path, out=str(tmp_path / "plain"))
        assert (sweep_dir / "eps-0.5" / "adapters.bin").read_bytes() == (
            run_dir / "adapters.bin"
        ).read_bytes()

    def test_empty_values_rejected(self, tmp_path):
        cfg_path = write_config(tmp_path, "")
        with pytest.raises(ConfigError, match="at least one value"):
            sweep_command(cfg_path, "IRF", [], out=str(tmp_path / "out"))

    def test_unknown_domain_rejected(self, tmp_path):
        cfg_path = write_config(tmp_path, "")
        with pytest.raises(ConfigError, match="no budget"):
            sweep_command(cfg_path, "Nope", [0.5], out=str(tmp_path / "out"))


class TestReportCommand:
    def test_report_prints_rounds_and_totals(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path, "rounds: 8\ndata: {scale: 0.02}\n")
        run_dir = run_command(cfg_path, out=str(tmp_path / "out"))
        capsys.readouterr()
        assert main(["report", str(run_dir)]) == EXIT_OK
        out = capsys.readouterr().out
        assert "rounds: 8" in out
        # budget trace final value follows the 0.9^R analytic form
        assert f"{2.0 * 0.9**8:.4f}" in out
        lines = (run_dir / "metrics.csv").read_text().strip().splitlines()
        total = sum(int(row.split(",")[lines[0].split(",").index("total_comm_bytes")])
                    for row in lines[1:])
        assert f"total communication: {total} bytes" in out

    def test_plot_csv_emitted(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path, "rounds: 2\ndata: {scale: 0.02}\n")
        run_dir = run_command(cfg_path, out=str(tmp_path / "out"))
        plot = tmp_path / "plot.csv"
        assert main(["report", str(run_dir), "--plot-csv", str(plot)]) == EXIT_OK
        assert plot.exists()
        capsys.readouterr()

    def test_missing_run_dir_names_path(self, tmp_path, capsys):
        missing = tmp_path / "nowhere"
        assert main(["report", str(missing)]) == EXIT_RUNTIME
        err = capsys.readouterr().err
        assert "summary.json" in err


class TestMainExitCodes:
    def test_success(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path, "rounds: 1\ndata: {scale: 0.02}\n")
        code = main(["run", "--config", str(cfg_path), "--out", str(tmp_path / "out")])
        capsys.readouterr()
        assert code == EXIT_OK

    def test_config_error_exit_code(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path, "rounds: -3\n")
        code = main(["run", "--config", str(cfg_path), "--out", str(tmp_path / "out")])
        err = capsys.readouterr().err
        assert code == EXIT_CONFIG
        assert "rounds" in err

    def test_cli_overrides_apply(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path, "rounds: 5\nseed: 1\ndata: {scale: 0.02}\n")
        code = main([
            "run", "--config", str(cfg_path), "--rounds", "2", "--seed", "7",
            "--out", str(tmp_path / "out"),
        ])
        capsys.readouterr()
        assert code == EXIT_OK
        run_dirs = list((tmp_path / "out").iterdir())
        assert len(run_dirs) == 1
        assert "seed7" in run_dirs[0].name
        summary = json.loads((run_dirs[0] / "summary.json").read_text())
        assert summary["rounds_completed"] == 2
        assert summary["config"]["seed"] == 7

    def test_config_echo_rerun_identical(self, tmp_path):
        # Echoing the parsed config back out and re-running matches exactly.
        cfg = config_from_dict({"rounds": 2, "seed": 11, "data": {"scale": 0.02}})
        echoed = config_from_dict(cfg.to_dict())
        d1 = tmp_path / "a"
        d2 = tmp_path / "b"
        d1.mkdir()
        d2.mkdir()
        execute_run(cfg, d1)
        execute_run(echoed, d2)
        assert (d1 / "metrics.csv").read_bytes() == (d2 / "metrics.csv").read_bytes()
        assert (d1 / "adapters.bin").read_bytes() == (d2 / "adapters.bin").read_bytes()
