use prosody_mpm::codec::Codebooks;
use prosody_mpm::model::{MpmCheckpoint, MpmConfig, MpmModel, TrainingMetadata};
use prosody_mpm::probe::{run_probe_grid, CellStatus, ConformerProbeSpec, FrameMatrix, GridConfig, ProbeKind, ProbeTrainConfig, Representation};
use prosody_mpm::tasks::{generate_synthetic_corpus, ClassSpec, SynthConfig, SyntheticCorpus, Task};

fn offset_corpus(n: usize) -> (SynthConfig, SyntheticCorpus) {
    let class = |pitch_offset| ClassSpec { pitch_offset, range: 1.0, rate: 1.0, declination: 0.0, wiggle: 0.0 };
    let cfg = SynthConfig { num_utterances: n, classes: vec![class(-1.0), class(1.0)], speaker_sd: 0.2, seed: 11, ..SynthConfig::default() };
    let corpus = generate_synthetic_corpus(&cfg).unwrap();
    (cfg, corpus)
}

/// Semitone pitch before per-utterance normalisation, zero when unvoiced,
/// next to the voicing flag.
fn semitone_rep(name: &str, cfg: &SynthConfig, corpus: &SyntheticCorpus) -> Representation {
    let features = corpus
        .tracks
        .iter()
        .map(|t| {
            let data: Vec<f32> = t
                .raw_pitch
                .iter()
                .zip(&t.vad)
                .flat_map(|(p, v)| {
                    let st = if *v == 1 { 12.0 * (*p as f64 / cfg.base_hz).log2() } else { 0.0 };
                    [st as f32, *v as f32]
                })
                .collect();
            Some(FrameMatrix::new(t.num_frames(), 2, data).unwrap())
        })
        .collect();
    Representation { name: name.into(), strategy: "-".into(), source: "-".into(), features }
}

fn grid(probes: Vec<ProbeKind>, steps: usize) -> GridConfig {
    GridConfig {
        seeds: vec![0],
        probes,
        conformer: ConformerProbeSpec { model_dim: 16, num_blocks: 1, num_heads: 2, feedforward_dim: 32, conv_kernel_size: 5 },
        train: ProbeTrainConfig { steps, peak_lr: 1e-2, warmup_steps: 10, ..ProbeTrainConfig::default() },
        ..GridConfig::default()
    }
}

fn mean_metric(report: &prosody_mpm::probe::EvalReport, rep: &str, task: Task, metric: &str) -> f64 {
    report.mean(rep, ProbeKind::Linear, task, metric).unwrap()
}

#[test]
fn linear_probe_recovers_a_known_answer() {
    let (cfg, corpus) = offset_corpus(300);
    let rep = semitone_rep("semitones", &cfg, &corpus);
    let report = run_probe_grid(&[rep], &[Task::Class], &corpus.labels, &grid(vec![ProbeKind::Linear], 400), "h").unwrap();
    assert_eq!(report.rows.len(), 5);
    let wa = mean_metric(&report, "semitones", Task::Class, "wa");
    assert!(wa >= 0.95, "weighted accuracy {wa}");
}

#[test]
fn permuted_labels_fall_to_chance() {
    let (cfg, corpus) = offset_corpus(300);
    let rep = semitone_rep("semitones", &cfg, &corpus);
    let report = run_probe_grid(&[rep], &[Task::PermutedClass], &corpus.labels, &grid(vec![ProbeKind::Linear], 400), "h").unwrap();
    let wa = mean_metric(&report, "semitones", Task::PermutedClass, "wa");
    assert!((wa - 0.5).abs() < 0.12, "weighted accuracy {wa}");
}

#[test]
fn both_probes_fill_a_paired_grid() {
    let (cfg, corpus) = offset_corpus(40);
    let a = semitone_rep("a", &cfg, &corpus);
    let b = semitone_rep("b", &cfg, &corpus);
    let report = run_probe_grid(&[a, b], &[Task::Class], &corpus.labels, &grid(vec![ProbeKind::Linear, ProbeKind::Conformer], 30), "h").unwrap();
    assert_eq!(report.rows.len(), 2 * 2 * 5);
    assert!(report.rows.iter().all(|r| r.status == CellStatus::Ok));
    // identical features under two names give identical cells only if the
    // splits and probe seeds are shared
    for ra in report.rows.iter().filter(|r| r.representation == "a") {
        let rb = report.rows.iter().find(|r| r.representation == "b" && r.probe == ra.probe && r.seed == ra.seed && r.fold == ra.fold).unwrap();
        assert_eq!(ra.metrics, rb.metrics);
    }
}

#[test]
fn probing_leaves_the_encoder_untouched() {
    let (_, corpus) = offset_corpus(30);
    let codebooks = Codebooks::standard(16).unwrap();
    let cfg = MpmConfig {
        num_layers: 2,
        model_dim: 8,
        num_heads: 2,
        conv_kernel_size: 3,
        feedforward_dim: 16,
        codebook_sizes: codebooks.sizes(),
        max_seq_frames: 600,
        extraction_layer: 1,
    };
    let ckpt = MpmCheckpoint::new(MpmModel::new(cfg.clone(), 5).unwrap(), TrainingMetadata::default(), codebooks.clone()).unwrap();
    let before = ckpt.to_bytes().unwrap();
    let tokens: Vec<_> = corpus.tracks.iter().map(|t| codebooks.tokenize(t)).collect();
    let extract = |c: &MpmCheckpoint| -> Vec<Vec<f32>> { tokens.iter().map(|t| c.model.extract_representations(t, None).unwrap()).collect() };
    let feats = extract(&ckpt);
    let rep = Representation {
        name: "mpm".into(),
        strategy: "4".into(),
        source: "-".into(),
        features: feats.iter().zip(&tokens).map(|(f, t)| Some(FrameMatrix::new(t.num_frames(), cfg.model_dim, f.clone()).unwrap())).collect(),
    };
    run_probe_grid(&[rep], &[Task::Class, Task::Syllable], &corpus.labels, &grid(vec![ProbeKind::Linear], 20), "h").unwrap();
    assert_eq!(ckpt.to_bytes().unwrap(), before);
    assert_eq!(extract(&ckpt), feats);
}
