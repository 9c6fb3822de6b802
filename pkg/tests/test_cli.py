import json
from pathlib import Path

import pytest

from edgeseg.cli import main
from edgeseg.pipeline import ExperimentConfig, read_results_csv

TINY_CONFIG = {
    "labelled_fraction": 0.1,
    "unlabelled_fraction": 0.6,
    "image_size": [32, 32],
    "shots": [1, 3],
    "n_selections": 2,
    "encoder_channels": [4, 8],
    "bottleneck_channels": 16,
    "epochs": 2,
    "batch_size": 4,
    "finetune_epochs": 2,
    "synthetic_count": 10,
    "target_count": 8,
}


def write_config(tmp_path, **extra):
    cfg = dict(TINY_CONFIG)
    cfg["out_dir"] = str(tmp_path / "out")
    cfg.update(extra)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestPrepare:
    def test_synthetic_prepare_deterministic(self, tmp_path):
        cfg = write_config(tmp_path)
        assert main(["prepare", "--config", str(cfg), "--synthetic", "--seed", "7"]) == 0
        first = tree_bytes(tmp_path / "out" / "data")
        assert main(["prepare", "--config", str(cfg), "--synthetic", "--seed", "7"]) == 0
        assert tree_bytes(tmp_path / "out" / "data") == first

    def test_ten_percent_split_counts(self, tmp_path, capsys):
        cfg = write_config(tmp_path, synthetic_count=20)
        main(["prepare", "--config", str(cfg), "--synthetic"])
        out = capsys.readouterr().out
        assert "source_a: 2 labelled, 18 unlabelled" in out

    def test_missing_masks_directory_exits_2(self, tmp_path, capsys):
        data = tmp_path / "ds"
        (data / "images").mkdir(parents=True)
        (data / "images" / "a.png").write_bytes(b"")
        cfg = write_config(tmp_path, source_roots=[str(data)], target_root=str(data))
        code = main(["prepare", "--config", str(cfg)])
        assert code == 2
        assert "error" in capsys.readouterr().err


class TestExperiment:
    @pytest.fixture(scope="class")
    @staticmethod
    def prepared(tmp_path_factory):
        tmp_path = tmp_path_factory.mktemp("exp")
        cfg = write_config(tmp_path)
        assert main(["prepare", "--config", str(cfg), "--synthetic"]) == 0
        return tmp_path, cfg

    def test_unknown_method_exits_2(self, prepared, capsys):
        _, cfg = prepared
        # argparse rejects invalid choices with exit code 2
        with pytest.raises(SystemExit) as exc:
            main(["experiment", "--config", str(cfg), "--method", "bogus"])
        assert exc.value.code == 2

    def test_experiment_without_prepare_exits_2(self, tmp_path):
        cfg = write_config(tmp_path)
        assert main(["experiment", "--config", str(cfg)]) == 2

    def test_full_run_and_resume(self, prepared):
        tmp_path, cfg = prepared
        assert main(["experiment", "--config", str(cfg), "--method", "supervised", "--unlabelled-fraction", "0"]) == 0
        config = ExperimentConfig.from_json(cfg, {"method": "supervised", "unlabelled_fraction": 0})
        saved = json.loads((Path(config.out_dir) / "prepare_config.json").read_text())
        config.source_roots, config.target_root = saved["source_roots"], saved["target_root"]
        run_dir = config.run_dir()
        results = read_results_csv(run_dir / "results.csv")
        # shots {1,3} x 2 selections
        assert len(results) == 4
        assert (run_dir / "config.json").exists()
        assert (run_dir / "history.csv").exists()
        first = (run_dir / "results.csv").read_bytes()
        # rerun: resume skips completed episodes, CSV unchanged
        assert main(["experiment", "--config", str(cfg), "--method", "supervised", "--unlabelled-fraction", "0"]) == 0
        assert (run_dir / "results.csv").read_bytes() == first


class TestReport:
    def test_report_over_two_runs(self, tmp_path):
        cfg = write_config(tmp_path)
        assert main(["prepare", "--config", str(cfg), "--synthetic"]) == 0
        assert main(["experiment", "--config", str(cfg), "--method", "supervised", "--unlabelled-fraction", "0"]) == 0
        assert main(["experiment", "--config", str(cfg), "--method", "edge_joint"]) == 0
        runs = sorted((tmp_path / "out" / "runs").iterdir())
        assert len(runs) == 2
        report_dir = tmp_path / "report"
        assert main(["report", *map(str, runs), "--out", str(report_dir)]) == 0
        table = (report_dir / "comparison_table.md").read_text()
        assert "supervised" in table and "edge_joint" in table
        assert (report_dir / "shot_curves.png").exists()
        assert (report_dir / "shot_curves.csv").exists()
        overlays = list(report_dir.glob("overlay_*.png"))
        assert len(overlays) == 2

    def test_report_without_runs_errors(self, tmp_path):
        assert main(["report", str(tmp_path / "nope"), "--out", str(tmp_path / "r")]) == 2
