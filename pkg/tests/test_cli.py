import json

import numpy as np

from tvo.cli import main


def run(argv):
    return main(argv)


def test_check_identity_posterior_matched_toy(capsys):
    assert run(["check-identity", "--model", "toy", "--seed", "3", "--match-posterior"]) == 0
    out = capsys.readouterr().out
    residual = float(out.split("residual=")[1].split()[0])
    assert residual < 1e-12


def test_check_identity_random_instances_pass_at_default_grid():
    assert run(["check-identity", "--model", "toy", "--seed", "4"]) == 0
    assert run(["check-identity", "--model", "gaussian", "--seed", "4"]) == 0


def test_check_identity_coarse_grid_report_only(capsys):
    code = run(["check-identity", "--model", "toy", "--seed", "5", "--grid", "2",
                "--report-only"])
    assert code == 0  # visible residual, no exit failure in report mode
    out = capsys.readouterr().out
    assert "residual=" in out


def test_check_gradients_all_networks_pass(capsys):
    assert run(["check-gradients", "--networks", "8", "--seed", "1"]) == 0
    assert "PASS" in capsys.readouterr().out


def test_unknown_flag_exits_with_config_error_code(capsys):
    assert run(["train", "--no-such-flag"]) == 2


def test_help_exits_zero(capsys):
    assert run(["train", "--help"]) == 0
    assert "--beta1" in capsys.readouterr().out


def test_missing_checkpoint_is_io_error(tmp_path):
    assert run(["eval", "--model", "toy", "--dataset", "synthetic-toy", "--d-x", "2",
                "--m-latent", "2", "--checkpoint", str(tmp_path / "missing.tvom")]) == 3


def test_reparam_on_discrete_model_is_config_error(tmp_path):
    code = run(["diagnose-grad-std", "--estimator", "reparam", "--model", "toy",
                "--dataset", "synthetic-toy", "--d-x", "2", "--m-latent", "2",
                "--S", "4", "--reps", "2", "--out", str(tmp_path / "g.csv")])
    assert code == 2


def test_diagnose_minimal_run_emits_one_row(tmp_path):
    out = tmp_path / "g.csv"
    code = run(["diagnose-grad-std", "--estimator", "cov", "--model", "toy",
                "--dataset", "synthetic-toy", "--d-x", "2", "--m-latent", "2",
                "--S", "4", "--reps", "2", "--K", "1", "--seed", "3",
                "--out", str(out)])
    assert code == 0
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "estimator,S,K,beta1,iteration,avg_std"
    assert len(lines) == 2
    assert lines[1].startswith("cov,4,1,")


def test_diagnose_multiple_estimators_and_sizes(tmp_path):
    out = tmp_path / "grid.csv"
    code = run(["diagnose-grad-std", "--estimator", "reparam,cov", "--model",
                "conjugate-gaussian", "--dataset", "gaussian", "--S-list", "5,10",
                "--reps", "4", "--K", "1", "--seed", "3", "--out", str(out),
                "--format", "jsonl"])
    assert code == 0
    lines = out.read_text().strip().splitlines()
    assert len(lines) == 5  # header + 2 estimators x 2 sizes
    records = [json.loads(line) for line in (tmp_path / "grid.jsonl").read_text().splitlines()]
    assert {r["estimator"] for r in records} == {"reparam", "cov"}
    assert {r["S"] for r in records} == {5, 10}


def test_export_curve_posterior_matched_is_flat(tmp_path):
    out = tmp_path / "curve.csv"
    # checkpoint the posterior-matched proposal so the curve runs on it
    from tvo.models import save_checkpoint
    from tvo.trainer import RunConfig, build_dataset, build_model

    config = RunConfig(model="toy", dataset="synthetic-toy", d_x=2, m_latent=2,
                       seed=6, generator_seed=999)
    data = build_dataset(config)
    model = build_model(config, data)
    params = model.posterior_proposal(model.init_params(6))
    ck = tmp_path / "post.tvom"
    save_checkpoint(ck, params)
    code = run(["export-curve", "--model", "toy", "--dataset", "synthetic-toy",
                "--d-x", "2", "--m-latent", "2", "--seed", "6",
                "--checkpoint", str(ck), "--betas", "0,0.25,0.5,0.75,1",
                "--eval-items", "16", "--eval-samples", "64", "--out", str(out)])
    assert code == 0
    rows = np.genfromtxt(out, delimiter=",", names=True)
    g = rows["g_estimate"]
    assert np.max(g) - np.min(g) < 1e-10


def test_export_curve_endpoints_match_eval_estimates(tmp_path, capsys):
    curve_path = tmp_path / "curve.csv"
    args = ["--model", "toy", "--dataset", "synthetic-toy", "--d-x", "2",
            "--m-latent", "2", "--seed", "8", "--eval-items", "16",
            "--eval-samples", "64"]
    assert run(["export-curve", *args, "--betas", "0,1", "--out", str(curve_path)]) == 0
    capsys.readouterr()
    assert run(["eval", *args, "--K", "1"]) == 0
    out = capsys.readouterr().out
    metrics = dict(line.split() for line in out.strip().splitlines())
    rows = np.genfromtxt(curve_path, delimiter=",", names=True)
    assert float(metrics["elbo"]) == rows["g_estimate"][0]
    assert float(metrics["eubo"]) == rows["g_estimate"][1]


def test_trained_sbn_curve_nondecreasing_within_noise(tmp_path):
    train_out = tmp_path / "run"
    sbn_args = ["--model", "sbn", "--dataset", "synthetic-sbn", "--d-x", "16",
                "--d-z", "6", "--seed", "9", "--train-items", "128", "--test-items", "32"]
    assert run(["train", *sbn_args, "--S", "8", "--K", "2", "--beta1", "0.3",
                "--lr", "3e-3", "--iters", "200", "--batch", "8",
                "--out", str(train_out)]) == 0
    curve_path = tmp_path / "curve.csv"
    assert run(["export-curve", *sbn_args,
                "--checkpoint", str(train_out / "checkpoint.tvom"),
                "--grid", "9", "--eval-items", "32", "--eval-samples", "500",
                "--out", str(curve_path)]) == 0
    rows = np.genfromtxt(curve_path, delimiter=",", names=True)
    g, se = rows["g_estimate"], rows["std_error"]
    for i in range(len(g) - 1):
        assert g[i + 1] - g[i] >= -2.0 * np.hypot(se[i], se[i + 1])


def test_diagnose_crn_flag_switches_estimator_path(tmp_path):
    args = ["diagnose-grad-std", "--estimator", "cov", "--model", "toy",
            "--dataset", "synthetic-toy", "--d-x", "2", "--m-latent", "2",
            "--S", "4", "--reps", "3", "--K", "2", "--beta1", "0.3", "--seed", "3"]
    assert run(args + ["--crn", "on", "--out", str(tmp_path / "on.csv")]) == 0
    assert run(args + ["--crn", "off", "--out", str(tmp_path / "off.csv")]) == 0
    on = (tmp_path / "on.csv").read_text().splitlines()[1]
    off = (tmp_path / "off.csv").read_text().splitlines()[1]
    assert on != off  # reuse on/off really changes the sampling plan


def test_cli_seeded_runs_are_byte_identical(tmp_path):
    args = ["train", "--model", "toy", "--dataset", "synthetic-toy", "--d-x", "2",
            "--m-latent", "2", "--S", "6", "--K", "2", "--beta1", "0.3",
            "--iters", "30", "--batch", "8", "--seed", "4", "--train-items", "32",
            "--test-items", "16", "--eval-interval", "10", "--eval-samples", "32",
            "--single-thread"]
    assert run(args + ["--out", str(tmp_path / "r1")]) == 0
    assert run(args + ["--out", str(tmp_path / "r2")]) == 0
    assert (tmp_path / "r1" / "metrics.csv").read_bytes() == \
        (tmp_path / "r2" / "metrics.csv").read_bytes()


def test_config_file_overrides_flags(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment line\nS=12\nbeta1=0.05\n")
    out = tmp_path / "g.csv"
    code = run(["diagnose-grad-std", "--estimator", "cov", "--model", "toy",
                "--dataset", "synthetic-toy", "--d-x", "2", "--m-latent", "2",
                "--S", "4", "--reps", "2", "--K", "1", "--seed", "3",
                "--config", str(cfg), "--out", str(out)])
    assert code == 0
    line = out.read_text().strip().splitlines()[1]
    assert line.startswith("cov,12,1,0.05")  # file values win over --S 4


def test_config_file_unknown_key_rejected(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("frobnicate=1\n")
    assert run(["eval", "--model", "toy", "--dataset", "synthetic-toy", "--d-x", "2",
                "--m-latent", "2", "--config", str(cfg)]) == 2


def test_sweep_cli_single_cell(tmp_path):
    code = run(["sweep", "--model", "toy", "--dataset", "synthetic-toy", "--d-x", "2",
                "--m-latent", "2", "--S", "4", "--K", "1", "--iters", "10",
                "--batch", "4", "--seed", "2", "--train-items", "16",
                "--test-items", "8", "--out", str(tmp_path / "sw")])
    assert code == 0
    assert (tmp_path / "sw" / "sweep.csv").exists()
