use std::fs;
use std::path::{Path, PathBuf};

use syscall_novelty::cli::{collect_report, run_from, RunManifest, ThresholdFile};
use syscall_novelty::detect::read_metrics_csv;
use syscall_novelty::trace::{read_split, write_event_file, MarkerEvent, MarkerKind, SyscallEvent, TraceEvent};
use syscall_novelty::Error;

const SMALL: &str = r#"
seed = 3
ood_behaviors = ["latency", "mixture"]
train_count = 60
val_count = 20
test_count = 20
width = 8
heads = 2
d_e = 4
d = 8
layers = 1
max_epochs = 1
batch_size = 8
"#;

fn cli(args: &[&str]) -> Result<(), Error> {
    let mut full = vec!["syscall-novelty"];
    full.extend_from_slice(args);
    run_from(full)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// synth, train, score, calibrate and detect for one model; returns the
/// detect output directory.
fn pipeline(root: &Path, config: &Path, data: &Path, model: &str) -> PathBuf {
    let run = root.join(model);
    let (ckpt_dir, scores, cal, det) = (run.join("train"), run.join("scores"), run.join("cal"), run.join("det"));
    let c = s(config);
    cli(&["--config", c, "--model", model, "--out", s(&ckpt_dir), "train", "--data", s(data)]).unwrap();
    let ckpt = ckpt_dir.join("model.ckpt");
    cli(&["--config", c, "--out", s(&scores), "score", "--checkpoint", s(&ckpt), "--data", s(data)]).unwrap();
    cli(&["--config", c, "--out", s(&cal), "calibrate", "--scores", s(&scores)]).unwrap();
    let th = cal.join("thresholds.json");
    cli(&["--config", c, "--out", s(&det), "detect", "--scores", s(&scores), "--thresholds", s(&th)]).unwrap();
    det
}

#[test]
fn full_pipeline_for_every_model() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let config = root.join("small.toml");
    fs::write(&config, SMALL).unwrap();
    let data = root.join("data");
    cli(&["--config", s(&config), "--out", s(&data), "synth"]).unwrap();
    // 3 ID splits plus validation and test for each of 2 behaviors.
    let mut splits: Vec<_> = fs::read_dir(&data).unwrap().filter_map(|e| e.ok()).filter(|e| e.path().is_dir()).collect();
    splits.sort_by_key(|e| e.file_name());
    assert_eq!(splits.len(), 7);
    assert_eq!(RunManifest::load(&data).unwrap().seed, 3);

    let models = ["ngram", "lstm", "transformer", "longformer"];
    let dets: Vec<PathBuf> = models.iter().map(|m| pipeline(root, &config, &data, m)).collect();

    for (m, det) in models.iter().zip(&dets) {
        let rows = read_metrics_csv(&det.join("metrics.csv")).unwrap();
        assert_eq!(rows.len(), 4, "{m}: per-behavior and pooled rows for 2 behaviors");
        for r in &rows {
            assert_eq!(&r.model, m);
            assert_eq!(r.tp + r.fp + r.tn + r.fn_, 40);
            assert!((0.0..=1.0).contains(&r.auroc) && (0.0..=1.0).contains(&r.f_score));
        }
        assert!(det.join("roc_latency.csv").is_file());
        let th: ThresholdFile =
            serde_json::from_str(&fs::read_to_string(det.parent().unwrap().join("cal/thresholds.json")).unwrap())
                .unwrap();
        assert_eq!(th.per_behavior.len(), 2);
        assert_eq!(&th.model, m);
    }

    let report_dir = root.join("report");
    let mut args = vec!["--out", s(&report_dir), "report"];
    args.extend(dets.iter().map(|d| s(d)));
    cli(&args).unwrap();
    let rows = collect_report(&dets).unwrap();
    assert_eq!(rows.len(), 8);
    let text = fs::read_to_string(report_dir.join("report.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), "model,behavior,auroc,f_score,f_score_pooled");
    assert_eq!(text.lines().count(), 9);

    let delay = root.join("delay");
    let ckpt = root.join("lstm/train/model.ckpt");
    cli(&["--config", s(&config), "--out", s(&delay), "inject-delay", "--checkpoint", s(&ckpt), "--data", s(&data)])
        .unwrap();
    let curve = fs::read_to_string(delay.join("delay_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 101);
}

#[test]
fn scores_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("small.toml");
    fs::write(&config, SMALL).unwrap();
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let root = dir.path().join(run);
        let data = root.join("data");
        cli(&["--config", s(&config), "--out", s(&data), "synth"]).unwrap();
        let ckpt_dir = root.join("train");
        cli(&["--config", s(&config), "--model", "transformer", "--out", s(&ckpt_dir), "train", "--data", s(&data)])
            .unwrap();
        let scores = root.join("scores");
        let ckpt = ckpt_dir.join("model.ckpt");
        cli(&["--out", s(&scores), "score", "--checkpoint", s(&ckpt), "--data", s(&data)]).unwrap();
        outputs.push((fs::read(ckpt).unwrap(), fs::read(scores.join("test_mixture.csv")).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn configuration_errors_name_the_key_and_leave_nothing_behind() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    for (text, key) in [("dropout = 1.5", "dropout"), ("foo = 1", "foo")] {
        let config = dir.path().join("bad.toml");
        fs::write(&config, text).unwrap();
        let err = cli(&["--config", s(&config), "--out", s(&out), "synth"]).unwrap_err();
        assert!(matches!(&err, Error::Config { key: k, .. } if k == key), "{err}");
        assert!(!out.exists());
    }
    // A command that fails midway removes its staged files.
    let data = dir.path().join("data");
    fs::create_dir_all(data.join("train_id")).unwrap();
    fs::write(data.join("train_id/requests.jsonl"), "{broken\n").unwrap();
    assert!(cli(&["--model", "ngram", "--out", s(&out), "train", "--data", s(&data)]).is_err());
    assert!(!out.exists());
}

#[test]
fn ingest_delimits_an_event_file() {
    let dir = tempfile::tempdir().unwrap();
    let sys = |ts, name: &str, tid| {
        TraceEvent::Syscall(SyscallEvent {
            ts_ns: ts,
            name: name.into(),
            ret: 0,
            procname: "nginx".into(),
            tid,
            pid: 9,
            entry: false,
        })
    };
    let mk = |kind, ts, tid| TraceEvent::Marker(MarkerEvent { kind, ts_ns: ts, tid });
    let stream = vec![
        mk(MarkerKind::RequestEnter, 0, 1),
        sys(1, "accept4", 1),
        sys(5, "read", 1),
        mk(MarkerKind::RequestExit, 6, 1),
        mk(MarkerKind::RequestEnter, 7, 2),
        sys(8, "write", 2),
    ];
    let events = dir.path().join("events.jsonl");
    write_event_file(&events, &stream).unwrap();
    let out = dir.path().join("data");
    cli(&["--out", s(&out), "ingest", "--input", s(&events), "--split", "test_id"]).unwrap();
    let reqs = read_split(&out, "test_id").unwrap();
    assert_eq!(reqs.len(), 1);
    assert_eq!(reqs[0].deltas_ns, vec![0, 4]);
    assert_eq!(reqs[0].duration_ns, 6);
}
