use std::path::{Path, PathBuf};

use prosody_mpm::experiment::{CorpusSource, ExperimentConfig, Outcome, Pipeline, MANIFEST_FILE};
use prosody_mpm::model::TrainLog;
use prosody_mpm::probe::CellStatus;
use prosody_mpm::tasks::Task;
use prosody_mpm::Error;

fn smoke(out: &Path) -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml");
    let mut cfg = ExperimentConfig::load(&path).unwrap();
    cfg.out_dir = out.to_path_buf();
    cfg
}

fn read_log(p: &Pipeline, s: &str) -> TrainLog {
    serde_json::from_slice(&std::fs::read(p.train_log_path(s)).unwrap()).unwrap()
}

#[test]
fn sweep_covers_every_strategy_and_reruns_from_cache() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke(dir.path());
    cfg.strategies = ["4", "16", "128", "random"].map(String::from).to_vec();
    let p = Pipeline::new(cfg).unwrap();
    let (report, outcome) = p.sweep().unwrap();
    assert_eq!(outcome, Outcome::Complete);
    for rep in ["raw", "cwt", "mpm:4", "mpm:16", "mpm:128", "mpm:random"] {
        let rows: Vec<_> = report.rows.iter().filter(|r| r.representation == rep).collect();
        assert_eq!(rows.len(), 4 * 5, "{rep}");
        assert!(rows.iter().all(|r| r.status == CellStatus::Ok), "{rep}");
    }
    assert!(report.mean("mpm:16", prosody_mpm::probe::ProbeKind::Linear, Task::Class, "wa").is_some());

    let manifest = p.manifest().unwrap();
    let ckpt = std::fs::read(p.checkpoint_path("4")).unwrap();
    let report_text = std::fs::read_to_string(p.report_path()).unwrap();

    let again = Pipeline::new(p.config().clone()).unwrap();
    let (_, outcome) = again.sweep().unwrap();
    assert_eq!(outcome, Outcome::Complete);
    let rerun = again.manifest().unwrap();
    for (stage, record) in &manifest.stages {
        if stage != "probe" {
            assert_eq!(rerun.stages.get(stage), Some(record), "{stage} was recomputed");
        }
    }
    assert_eq!(std::fs::read(again.checkpoint_path("4")).unwrap(), ckpt);
    assert_eq!(std::fs::read_to_string(again.report_path()).unwrap(), report_text);
    for a in rerun.artifacts() {
        assert!(dir.path().join(a).exists(), "{a}");
    }
}

#[test]
fn training_is_reproducible_across_run_directories() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let pa = Pipeline::new(smoke(a.path())).unwrap();
    let pb = Pipeline::new(smoke(b.path())).unwrap();
    assert_eq!(pa.config_hash(), pb.config_hash());
    for p in [&pa, &pb] {
        p.features().unwrap();
        p.train("random").unwrap();
    }
    assert_eq!(std::fs::read(pa.checkpoint_path("random")).unwrap(), std::fs::read(pb.checkpoint_path("random")).unwrap());

    let log = read_log(&pa, "random");
    assert!(log.mask_sizes.iter().all(|m| (1..=128).contains(m)));
    assert!(log.mask_sizes.iter().any(|m| *m != log.mask_sizes[0]));
    assert!(log.mean_loss(40, 50) < log.mean_loss(0, 10), "loss did not fall: {:?}", log.losses);
}

#[test]
fn stages_refuse_to_run_without_their_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(smoke(dir.path())).unwrap();
    assert!(matches!(p.train("4"), Err(Error::MissingArtifact { stage, .. }) if stage == "features"));
    p.features().unwrap();
    assert!(matches!(p.probe(), Err(Error::MissingArtifact { stage, .. }) if stage == "train:random"));
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(manifest["config_hash"], p.config_hash());
}

#[test]
fn empty_corpora_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke(&dir.path().join("run"));
    if let CorpusSource::Synthetic(s) = &mut cfg.corpus {
        s.num_utterances = 0;
    }
    assert!(matches!(Pipeline::new(cfg.clone()), Err(Error::Config(_))));

    let audio = dir.path().join("audio");
    std::fs::create_dir_all(&audio).unwrap();
    cfg.corpus = CorpusSource::Directory { path: audio, labels: None };
    let p = Pipeline::new(cfg).unwrap();
    assert!(matches!(p.features(), Err(Error::Config(_))));
}

fn write_tone(path: &Path, seconds: f64) {
    let spec = hound::WavSpec { channels: 1, sample_rate: 16000, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let mut w = hound::WavWriter::create(path, spec).unwrap();
    let n = (seconds * 16000.0) as usize;
    for i in 0..n {
        let t = i as f64 / 16000.0;
        let envelope = (std::f64::consts::PI * 4.0 * t).sin().abs();
        let f0 = 140.0 + 20.0 * (2.0 * std::f64::consts::PI * 0.5 * t).sin();
        let s = 0.3 * envelope * (2.0 * std::f64::consts::PI * f0 * t).sin();
        w.write_sample((s * i16::MAX as f64) as i16).unwrap();
    }
    w.finalize().unwrap();
}

#[test]
fn unreadable_audio_makes_the_stage_partial() {
    let dir = tempfile::tempdir().unwrap();
    let audio = dir.path().join("audio");
    std::fs::create_dir_all(&audio).unwrap();
    write_tone(&audio.join("good.wav"), 1.5);
    std::fs::write(audio.join("broken.wav"), b"not a wave file").unwrap();
    let mut cfg = smoke(&dir.path().join("run"));
    cfg.corpus = CorpusSource::Directory { path: audio, labels: None };
    let p = Pipeline::new(cfg).unwrap();
    match p.features().unwrap() {
        Outcome::Partial(msgs) => assert!(msgs.len() == 1 && msgs[0].contains("broken.wav"), "{msgs:?}"),
        o => panic!("expected a partial outcome, got {o:?}"),
    }
    let corpus = p.load_corpus().unwrap();
    assert_eq!(corpus.records.len(), 1);
    assert_eq!(corpus.records[0].id, "good");
}
