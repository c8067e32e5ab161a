//! Drives the installed binary end to end on toy configs.

use btr::checkpoint::{save_checkpoint, TrainCounters};
use btr::config::AgentConfig;
use btr::envs::{oracle_optimal_return, EnvParams, Layout, NUM_ACTIONS};
use btr::learner::Learner;
use btr::network::NetworkSpec;
use btr::rng::{stream_rng, STREAM_INIT};
use std::path::Path;
use std::process::{Command, Output};

fn btr_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_btr"))
}

fn tiny_cfg() -> AgentConfig {
    let mut cfg = AgentConfig::default();
    cfg.env = "empty3".to_string();
    cfg.render_height = 36;
    cfg.render_width = 36;
    cfg.use_impala = false;
    cfg.use_maxpool = false;
    cfg.use_spectral_norm = false;
    cfg.num_envs = 4;
    cfg.batch_size = 8;
    cfg.iqn_taus = 3;
    cfg.iqn_cos_embedding = 8;
    cfg.dueling_hidden = 16;
    cfg.replay_capacity = 1024;
    cfg.min_replay_size = 64;
    cfg.n_step = 2;
    cfg.max_episode_steps = 30;
    cfg.total_frames = 800;
    cfg.eval_interval = 400;
    cfg.eval_episodes = 4;
    cfg.target_update_period = 50;
    cfg
}

fn write_cfg(dir: &Path, cfg: &AgentConfig) -> std::path::PathBuf {
    let path = dir.join("toy.cfg");
    std::fs::write(&path, cfg.to_text()).unwrap();
    path
}

fn run_ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn train_twice_with_same_seed_gives_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_cfg(dir.path(), &tiny_cfg());
    let mut csvs = Vec::new();
    for root in ["a", "b"] {
        let out = btr_bin()
            .args(["train", "--config"])
            .arg(&cfg_path)
            .args(["--set", "master_seed=1", "--run-root"])
            .arg(dir.path().join(root))
            .output()
            .unwrap();
        let stdout = run_ok(&out);
        let run_dir = Path::new(stdout.trim());
        assert!(run_dir.join("manifest").is_file());
        csvs.push(std::fs::read(run_dir.join("metrics.csv")).unwrap());
    }
    assert!(!csvs[0].is_empty());
    assert_eq!(csvs[0], csvs[1]);
}

#[test]
fn missing_config_exits_2_with_usage_text() {
    let out = btr_bin()
        .args(["train", "--config", "/nonexistent/toy.cfg"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("Usage"), "stderr: {stderr}");
}

#[test]
fn manifest_records_ablation_flags() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_cfg();
    cfg.total_frames = 100;
    cfg.min_replay_size = 1000; // no training needed for this check
    let cfg_path = write_cfg(dir.path(), &cfg);
    let out = btr_bin()
        .args(["train", "--config"])
        .arg(&cfg_path)
        .args(["--set", "use_munchausen=false", "--run-root"])
        .arg(dir.path().join("runs"))
        .output()
        .unwrap();
    let stdout = run_ok(&out);
    let manifest = std::fs::read_to_string(Path::new(stdout.trim()).join("manifest")).unwrap();
    let doc: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    assert_eq!(doc["config"]["use_munchausen"], "false");
    assert_eq!(doc["config"]["env"], "empty3");
}

/// A network whose every weight is zero except one advantage bias acts as a
/// constant policy; on a one-row chain that policy is optimal.
fn constant_right_checkpoint(dir: &Path) -> (std::path::PathBuf, AgentConfig) {
    let mut cfg = tiny_cfg();
    cfg.env = "chain3".to_string();
    cfg.sticky_action_prob = 0.0;
    cfg.use_noisy = false;
    cfg.eval_episodes = 10;
    let spec = NetworkSpec::from_config(&cfg, NUM_ACTIONS);
    let mut init = stream_rng(0, STREAM_INIT, 0);
    let mut learner: Learner<f32> = Learner::new(spec, &cfg, &mut init).unwrap();
    learner.online.visit_params(&mut |p| {
        for v in p.w.iter_mut() {
            *v = 0.0;
        }
        if p.name == "head.adv_out.b" {
            p.w[3] = 1.0; // argmax = right everywhere
        }
    });
    let path = dir.join("right.ckpt");
    save_checkpoint(&path, &cfg, &TrainCounters::default(), &[], &mut learner).unwrap();
    (path, cfg)
}

#[test]
fn eval_of_optimal_hand_policy_checkpoint_matches_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt_path, cfg) = constant_right_checkpoint(dir.path());
    let layout = Layout::resolve(&cfg.env).unwrap();
    let params = EnvParams::from_config(&cfg);
    let oracle = oracle_optimal_return(&layout, &params, cfg.discount).unwrap();

    let scores_path = dir.path().join("scores.csv");
    let out = btr_bin()
        .args(["eval", "--checkpoint"])
        .arg(&ckpt_path)
        .args(["--episodes", "20", "--out"])
        .arg(&scores_path)
        .output()
        .unwrap();
    let stdout = run_ok(&out);
    assert!(stdout.contains("episodes 20"), "stdout: {stdout}");

    let text = std::fs::read_to_string(&scores_path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("episode,score"));
    let scores: Vec<f64> = lines
        .map(|l| l.split_once(',').unwrap().1.parse().unwrap())
        .collect();
    assert_eq!(scores.len(), 20);
    for s in &scores {
        assert!(
            (s - oracle.undiscounted).abs() < 1e-12,
            "score {s} vs oracle {}",
            oracle.undiscounted
        );
    }
}

#[test]
fn analyze_emits_one_record_row() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt_path, _) = constant_right_checkpoint(dir.path());
    let record_path = dir.path().join("record.csv");
    let out = btr_bin()
        .args(["analyze", "--checkpoint"])
        .arg(&ckpt_path)
        .args(["--episodes", "5", "--out"])
        .arg(&record_path)
        .output()
        .unwrap();
    run_ok(&out);
    let text = std::fs::read_to_string(&record_path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(
        lines[0],
        "frame,episodes,mean,iqm,ci_low,ci_high,action_gap,action_swap_pct,\
         policy_churn_pct,dormant_pct,srank,l2_total"
            .replace(' ', "")
    );
    assert_eq!(lines[1].split(',').count(), 12);
}

#[test]
fn analyze_with_mismatched_specs_names_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt_a, cfg) = constant_right_checkpoint(dir.path());

    let mut other = cfg.clone();
    other.dueling_hidden = 32;
    let spec = NetworkSpec::from_config(&other, NUM_ACTIONS);
    let mut init = stream_rng(0, STREAM_INIT, 1);
    let mut learner: Learner<f32> = Learner::new(spec, &other, &mut init).unwrap();
    let ckpt_b = dir.path().join("other.ckpt");
    save_checkpoint(&ckpt_b, &other, &TrainCounters::default(), &[], &mut learner).unwrap();

    let out = btr_bin()
        .args(["analyze", "--checkpoint"])
        .arg(&ckpt_a)
        .arg("--compare")
        .arg(&ckpt_b)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("different specs"), "stderr: {stderr}");
}

#[test]
fn plot_of_two_point_csv_is_parseable_svg_with_both_labels() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("metrics.csv");
    std::fs::write(
        &csv,
        "frame,episodes,mean,iqm,ci_low,ci_high,loss,grad_norm,epsilon,action_gap,\
         churn,dormant_pct,srank,l2_total\n\
         1000,10,1,1.2,0.9,1.5,0.1,1,0.5,0.2,3,1.5,40,25\n\
         2000,20,2,2.1,1.8,2.4,0.1,1,0.4,0.2,3,1.4,41,25\n",
    )
    .unwrap();
    let plots = dir.path().join("plots");
    let out = btr_bin()
        .args(["plot", "--metrics"])
        .arg(&csv)
        .arg("--out-dir")
        .arg(&plots)
        .output()
        .unwrap();
    run_ok(&out);

    let svg = std::fs::read_to_string(plots.join("learning_curve.svg")).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let texts: Vec<&str> = doc
        .descendants()
        .filter(|n| n.has_tag_name("text"))
        .filter_map(|n| n.text())
        .collect();
    assert!(texts.contains(&"iqm"), "labels: {texts:?}");
    assert!(texts.contains(&"mean"), "labels: {texts:?}");
    assert!(plots.join("srank.svg").is_file());
    assert!(plots.join("dormant_pct.svg").is_file());
}

#[test]
fn plot_without_destination_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("m.csv");
    std::fs::write(&csv, "x\n").unwrap();
    let out = btr_bin()
        .args(["plot", "--metrics"])
        .arg(&csv)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn resume_of_a_finished_run_is_a_clean_noop() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_cfg(dir.path(), &tiny_cfg());
    let first = btr_bin()
        .args(["train", "--config"])
        .arg(&cfg_path)
        .arg("--run-root")
        .arg(dir.path().join("runs"))
        .output()
        .unwrap();
    let run_dir = run_ok(&first).trim().to_string();
    let before = std::fs::read(Path::new(&run_dir).join("metrics.csv")).unwrap();

    let resumed = btr_bin()
        .args(["train", "--resume"])
        .arg(&run_dir)
        .output()
        .unwrap();
    run_ok(&resumed);
    let after = std::fs::read(Path::new(&run_dir).join("metrics.csv")).unwrap();
    assert_eq!(before, after, "no frames left, so no new rows");
}

#[test]
fn resume_without_a_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let fake = dir.path().join("r");
    std::fs::create_dir(&fake).unwrap();
    std::fs::write(fake.join("manifest"), "{}\n").unwrap();
    let out = btr_bin().args(["train", "--resume"]).arg(&fake).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("no checkpoint"), "stderr: {stderr}");
}
