//! End-to-end tests of the compiled binary: every subcommand plus the
//! exit-code contract (2 missing input, 3 bad config, 4 checkpoint
//! mismatch, 5 verification failure).

use std::path::Path;
use std::process::{Command, Output};

fn trajcast(args: &[&str], extra: &[String]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trajcast"))
        .args(args)
        .args(extra)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_code(out: &Output, want: i32) {
    assert_eq!(
        out.status.code(),
        Some(want),
        "stdout:\n{}\nstderr:\n{}",
        stdout(out),
        stderr(out)
    );
}

/// Widths small enough that train/eval finish in milliseconds.
fn tiny_config() -> Vec<String> {
    [
        "model.d_embed=3",
        "model.gru_hidden=4",
        "model.lstm_hidden=3",
        "model.noise_dim=2",
        "model.modalities=2",
        "model.conv_channels=[2,2,2]",
        "model.roi_bins=2",
        "model.roi_span_m=6",
        "raster.width_px=16",
        "raster.height_px=16",
        "raster.width_m=20",
        "raster.height_m=20",
        "train.batch_size=2",
        "train.steps=3",
        "train.checkpoint_every=3",
        "train.seed=7",
    ]
    .iter()
    .flat_map(|s| ["--set".to_string(), s.to_string()])
    .collect()
}

fn gen_data(dir: &Path) {
    let out = trajcast(
        &[
            "gen",
            "--template",
            "ego",
            "--count",
            "2",
            "--pedestrians",
            "2",
            "--t-obs",
            "3",
            "--t-pred",
            "5",
            "--seed",
            "11",
            "--out",
            dir.to_str().unwrap(),
        ],
        &[],
    );
    assert_code(&out, 0);
}

#[test]
fn gen_writes_scenarios_and_maps() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data);
    assert!(data.join("egoplan_0000.json").is_file());
    assert!(data.join("egoplan_0000_map.json").is_file());
    assert!(data.join("egoplan_0001.json").is_file());
}

#[test]
fn full_pipeline_train_eval_predict() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data);
    let run = tmp.path().join("run");
    let cfg = tiny_config();

    let out = trajcast(
        &[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--run-dir",
            run.to_str().unwrap(),
        ],
        &cfg,
    );
    assert_code(&out, 0);
    assert!(run.join("final.bin").is_file());
    assert!(run.join("ckpt_3.bin").is_file());
    assert!(run.join("log.csv").is_file());
    assert!(run.join("config.json").is_file());
    assert!(run.join("summary.json").is_file());

    let metrics = tmp.path().join("metrics.csv");
    let out = trajcast(
        &[
            "eval",
            "--data",
            data.to_str().unwrap(),
            "--checkpoint",
            run.join("final.bin").to_str().unwrap(),
            "--out",
            metrics.to_str().unwrap(),
        ],
        &cfg,
    );
    assert_code(&out, 0);
    let text = stdout(&out);
    assert!(text.contains("ADE"), "eval output: {text}");
    assert!(text.contains("best_of_k_per_agent"), "eval output: {text}");
    let csv = std::fs::read_to_string(&metrics).unwrap();
    assert!(csv.starts_with("scenario_id,agents,ade,fde\n"));
    assert!(csv.lines().last().unwrap().starts_with("TOTAL,"));

    let pred = tmp.path().join("pred.csv");
    let out = trajcast(
        &[
            "predict",
            "--data",
            data.to_str().unwrap(),
            "--checkpoint",
            run.join("final.bin").to_str().unwrap(),
            "--out",
            pred.to_str().unwrap(),
        ],
        &cfg,
    );
    assert_code(&out, 0);
    let csv = std::fs::read_to_string(&pred).unwrap();
    let lines: Vec<&str> = csv.trim_end().lines().collect();
    assert_eq!(lines[0], "scenario_id,agent_id,modality,t,x,y");
    // 2 scenarios x 2 predicted agents x 2 modalities x 2 future frames
    assert_eq!(lines.len(), 1 + 2 * 2 * 2 * 2);
}

#[test]
fn training_is_deterministic_across_processes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data);
    let cfg = tiny_config();
    let mut checkpoints = Vec::new();
    for name in ["run_a", "run_b"] {
        let run = tmp.path().join(name);
        let out = trajcast(
            &[
                "train",
                "--data",
                data.to_str().unwrap(),
                "--run-dir",
                run.to_str().unwrap(),
            ],
            &cfg,
        );
        assert_code(&out, 0);
        checkpoints.push(std::fs::read(run.join("final.bin")).unwrap());
    }
    assert_eq!(checkpoints[0], checkpoints[1], "same seed, same bytes");
}

#[test]
fn eval_runs_closed_form_baselines() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data);
    for baseline in ["linear", "kalman_cv"] {
        let out = trajcast(
            &[
                "eval",
                "--data",
                data.to_str().unwrap(),
                "--baseline",
                baseline,
            ],
            &[],
        );
        assert_code(&out, 0);
        assert!(stdout(&out).contains("ADE"));
    }
}

#[test]
fn rasterize_writes_pgm() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data);
    let pgm = tmp.path().join("map.pgm");
    let out = trajcast(
        &[
            "rasterize",
            "--scenario",
            data.join("egoplan_0000.json").to_str().unwrap(),
            "--out",
            pgm.to_str().unwrap(),
            "--set",
            "raster.width_px=32",
            "--set",
            "raster.height_px=32",
        ],
        &[],
    );
    assert_code(&out, 0);
    let text = std::fs::read_to_string(&pgm).unwrap();
    assert!(text.starts_with("P2\n32 32\n255\n"), "pgm header: {text:.40}");
    assert!(text.contains("255"), "some lane pixels must be set");
}

#[test]
fn missing_data_directory_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = trajcast(
        &[
            "train",
            "--data",
            tmp.path().join("nope").to_str().unwrap(),
            "--run-dir",
            tmp.path().join("run").to_str().unwrap(),
        ],
        &[],
    );
    assert_code(&out, 2);
    assert!(stderr(&out).contains("not found"));
}

#[test]
fn bad_override_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data);
    let out = trajcast(
        &[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--run-dir",
            tmp.path().join("run").to_str().unwrap(),
            "--set",
            "model.d_embed=0",
        ],
        &[],
    );
    assert_code(&out, 3);

    let out = trajcast(
        &[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--run-dir",
            tmp.path().join("run").to_str().unwrap(),
            "--set",
            "no.such.key=1",
        ],
        &[],
    );
    assert_code(&out, 3);
}

#[test]
fn unknown_template_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = trajcast(
        &[
            "gen",
            "--template",
            "roundabout",
            "--out",
            tmp.path().join("data").to_str().unwrap(),
        ],
        &[],
    );
    assert_code(&out, 3);
}

#[test]
fn checkpoint_model_mismatch_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data);
    let run = tmp.path().join("run");
    let out = trajcast(
        &[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--run-dir",
            run.to_str().unwrap(),
        ],
        &tiny_config(),
    );
    assert_code(&out, 0);

    // evaluating under default widths must refuse the tiny checkpoint
    let out = trajcast(
        &[
            "eval",
            "--data",
            data.to_str().unwrap(),
            "--checkpoint",
            run.join("final.bin").to_str().unwrap(),
        ],
        &[],
    );
    assert_code(&out, 4);
    assert!(stderr(&out).contains("does not fit"));
}

#[test]
fn missing_checkpoint_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data);
    let out = trajcast(
        &[
            "eval",
            "--data",
            data.to_str().unwrap(),
            "--checkpoint",
            tmp.path().join("nope.bin").to_str().unwrap(),
        ],
        &[],
    );
    assert_code(&out, 2);
}

#[test]
fn gradcheck_passes_clean_and_catches_injected_fault() {
    let out = trajcast(&["gradcheck"], &[]);
    assert_code(&out, 0);
    assert!(stdout(&out).contains("model_end_to_end: ok"));

    let out = trajcast(&["gradcheck", "--inject-fault"], &[]);
    assert_code(&out, 5);
    assert!(stdout(&out).contains("FAIL"));
}

#[test]
fn ablate_trains_every_toggle_row() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data);
    let run = tmp.path().join("ablate");
    let out = trajcast(
        &[
            "ablate",
            "--data",
            data.to_str().unwrap(),
            "--run-dir",
            run.to_str().unwrap(),
        ],
        &tiny_config(),
    );
    assert_code(&out, 0);
    let csv = std::fs::read_to_string(run.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.trim_end().lines().collect();
    assert_eq!(lines[0], "name,toggles,final_loss,ade,fde");
    assert_eq!(lines.len(), 7, "header plus six toggle rows");
    for name in ["baseline", "v1_pf", "v2_pf_tf", "v3_emf", "v4_etf", "full"] {
        assert!(csv.contains(&format!("{name},")), "row for {name}");
        assert!(run.join(name).join("final.bin").is_file());
    }
}
