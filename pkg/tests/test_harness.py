import csv
import io
import json
import math

import numpy as np
import pytest

from tempdistill import harness as H
from tempdistill import losses as L
from tempdistill import scene as S


def tiny(**overrides):
    raw = dict(t_stu=2, t_tea=4, num_queries=4, channels=3, height=4, width=4, seed=3,
               epochs=2, batch_size=2, train_scenes=3, test_scenes=2, num_objects=3, teacher_epochs=2)
    raw.update(overrides)
    return H.config_from_dict(raw)


class TestConfig:
    def test_defaults_follow_the_toy_setup(self):
        cfg = H.TrainConfig()
        assert (cfg.distill.t_tea, cfg.distill.t_stu) == (8, 4)
        assert cfg.lr == 2e-4 and cfg.cosine
        assert (cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay) == (0.9, 0.999, 1e-8, 0.01)

    @pytest.mark.parametrize("raw", [
        dict(epochs=0), dict(lr=0.0), dict(lr=-1e-3), dict(batch_size=0), dict(num_objects=40),
        dict(t_stu=4, t_tea=4, alpha_rc_bev=1.0), dict(t_stu=2, t_tea=4, alpha_trd=1.0),
        dict(unknown_key=1), dict(epochs="many"),
    ])
    def test_invalid(self, raw):
        with pytest.raises(H.ConfigError):
            H.config_from_dict(raw)

    def test_yaml_roundtrip_and_override(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("seed: 4\nepochs: 3\nt_stu: 2\nt_tea: 4\n")
        cfg = H.load_config(path, seed=9)
        assert cfg.seed == 9 and cfg.epochs == 3
        assert H.config_from_dict(cfg.to_dict()) == cfg

    def test_unreadable(self, tmp_path):
        with pytest.raises(H.ConfigError):
            H.load_config(tmp_path / "missing.yaml")
        bad = tmp_path / "bad.yaml"
        bad.write_text("- a\n- b\n")
        with pytest.raises(H.ConfigError):
            H.load_config(bad)


class TestTraining:
    def test_one_epoch_one_scene(self):
        rep = H.train_distill(tiny(epochs=1, train_scenes=1, test_scenes=1, batch_size=1))
        assert len(rep.epochs) == 1
        assert all(math.isfinite(v) for v in rep.epochs[0].values())
        assert all(math.isfinite(v) for v in rep.final.values())

    def test_teacher_stays_frozen(self):
        rep = H.train_distill(tiny())
        assert rep.teacher_checksum_before == rep.teacher_checksum_after
        assert rep.max_bookkeeping_error < 1e-12

    def test_loss_decomposition(self):
        rep = H.train_distill(tiny())
        for row in rep.epochs:
            parts = sum(row[k] for k in L.COMPONENTS if k in row)
            assert abs(row["distill_total"] - parts) < 1e-12
            assert abs(row["total"] - row["task"] - row["distill_total"]) < 1e-12

    def test_partial_mode_reports_only_permitted_terms(self):
        rep = H.train_distill(tiny())
        assert rep.mode == L.PARTIAL_FRAMES
        assert rep.components == ["rc_bev", "rc_pv", "dc"]
        assert all("trd" not in row for row in rep.epochs)

    def test_full_mode_reports_only_permitted_terms(self):
        rep = H.train_distill(tiny(t_stu=3, t_tea=3))
        assert rep.mode == L.FULL_FRAMES
        assert rep.components == ["dc", "trd"]
        assert all("rc_bev" not in row and "rc_pv" not in row for row in rep.epochs)

    def test_zero_weights_equal_task_only_training(self):
        cfg = tiny(alpha_rc_bev=0.0, alpha_rc_pv=0.0, alpha_dc=0.0)
        rep = H.train_distill(cfg)
        # train the same student by hand on the task loss alone
        data, _, _, tr_stu, _ = H._data_and_obs(cfg)
        student = H.init_student(cfg)
        t_in = cfg.distill.t_stu

        def sample_loss(i, epoch):
            _, _, pred = H._task_step(student.encoder, student.decoder, tr_stu[i], data.train[i], t_in)
            loss = S.task_loss(pred, data.train[i])
            return loss, {"task": loss.item()}

        H._train_loop(cfg, [student.encoder, student.decoder], data.train, tr_stu, sample_loss,
                      cfg.epochs, cfg.lr, tag=H._STUDENT_ENC)
        manual = H.checksum(S.param_arrays(student.encoder) + S.param_arrays(student.decoder))
        assert rep.student_checksum == manual
        assert rep.components == []

    def test_baseline_config(self):
        base = H.baseline_config(tiny())
        assert all(v == 0.0 for v in base.distill.alphas.values())


class TestOutputs:
    def test_identical_configs_identical_metric_files(self, tmp_path):
        a = H.train_distill(tiny(), out_root=tmp_path)
        H._TEACHER_CACHE.clear()
        H._OBS_CACHE.clear()
        b = H.train_distill(tiny(), out_root=tmp_path)
        assert a.run_dir != b.run_dir
        fa = (tmp_path / a.run_dir / "metrics.json").read_bytes()
        fb = (tmp_path / b.run_dir / "metrics.json").read_bytes()
        assert fa == fb

    def test_run_directory_contents(self, tmp_path):
        rep = H.train_distill(tiny(), out_root=tmp_path)
        curves, summary = H.summarize_run(rep.run_dir)
        rows = list(csv.DictReader(io.StringIO(curves.read_text())))
        assert len(rows) == 2 and set(rows[0]) == {"epoch", "task", "rc_bev", "rc_pv", "dc", "distill_total", "total"}
        info = json.loads(summary.read_text())
        assert info["teacher_frozen"] and info["mode"] == L.PARTIAL_FRAMES
        metrics = json.loads(open(f"{rep.run_dir}/metrics.json").read())
        assert metrics["final"] == rep.final

    def test_never_overwrites(self, tmp_path):
        rep = H.train_distill(tiny())
        first = H.write_run(rep, tmp_path, "same")
        second = H.write_run(rep, tmp_path, "same")
        assert first != second and first.exists() and second.exists()

    def test_output_root_env(self, monkeypatch, tmp_path):
        monkeypatch.setenv(H.OUTPUT_ENV, str(tmp_path))
        assert H.default_output_root() == str(tmp_path)


class TestAblation:
    def test_default_grids(self):
        assert H.DEFAULT_GRIDS["mask-ratio"] == [0.4, 0.5, 0.6, 0.75, 0.9]
        assert H.DEFAULT_GRIDS["frame-count"] == [2, 4, 8]

    def test_single_point_equals_direct_run(self, tmp_path):
        base = tiny()
        rows, path = H.run_ablation("mask-ratio", grid=[0.75], base=base, out_root=tmp_path)
        direct = H.train_distill(H.ablation_config(base, "mask-ratio", 0.75))
        assert len(rows) == 1
        assert rows[0]["alignment_mse"] == direct.final["alignment_mse"]
        assert rows[0]["mean_velocity_error"] == direct.final["mean_velocity_error"]
        table = list(csv.DictReader(io.StringIO(path.read_text())))
        assert [r["value"] for r in table] == ["0.75"]

    def test_loss_component_grid_points(self):
        base = tiny()
        cfg = H.ablation_config(base, "loss-components", "bev+dc")
        assert cfg.distill.alpha_rc_pv == 0.0 and cfg.distill.alpha_rc_bev > 0 and cfg.distill.alpha_dc > 0
        assert all(v == 0 for v in H.ablation_config(base, "loss-components", "").distill.alphas.values())

    def test_frame_count_keeps_teacher(self):
        cfg = H.ablation_config(tiny(t_tea=8, t_stu=4), "frame-count", 8)
        assert cfg.distill.t_stu == 8 and cfg.distill.mode == L.FULL_FRAMES

    @pytest.mark.parametrize("kind,grid", [("nope", None), ("mask-ratio", [])])
    def test_rejects(self, kind, grid):
        with pytest.raises(ValueError):
            H.run_ablation(kind, grid=grid, base=tiny())

    def test_text_table(self):
        rows = [{"kind": "mask-ratio", "value": 0.5, "mode": "partial-frames", "alignment_mse": 1.0,
                 "mean_position_error": 0.5, "mean_velocity_error": 2.0, "final_total_loss": 3.0}]
        text = H.format_table_text(rows)
        assert "0.5" in text and "partial-frames" in text
