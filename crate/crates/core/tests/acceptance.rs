//! Acceptance checks, one PASS/FAIL line each. Runs with a single worker.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::FftPlanner;

use prosody_mpm::codec::{Codebooks, TokenTrack};
use prosody_mpm::cwt::{cwt_column, CwtConfig};
use prosody_mpm::experiment::{raw_features, ExperimentConfig, Pipeline};
use prosody_mpm::mask::{sample_mask_plan, MaskConfig};
use prosody_mpm::model::{evaluate_masked, grad_check, mpm_loss, tiny_config, train_mpm, MpmCheckpoint, MpmConfig, MpmModel, TrainConfig, TrainLog};
use prosody_mpm::par;
use prosody_mpm::probe::{run_probe_grid, EvalReport, FrameMatrix, GridConfig, ProbeKind, ProbeTrainConfig, Representation};
use prosody_mpm::tasks::corpora::EMOTIONS;
use prosody_mpm::tasks::{
    count_syllables_from_frames, f1_binary, generate_synthetic_corpus, kfold_split, parse_phn, parse_ravdess_id, parse_timit_alignment,
    parse_tobi_labels, pearson_corr, ser, weighted_unweighted_accuracy, AlignmentConfig, SynthConfig, SyntheticCorpus, Task,
};
use prosody_mpm::Error;

const SEEDS: [u64; 3] = [0, 1, 2];
const CODEBOOK: usize = 128;

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn model_config() -> MpmConfig {
    MpmConfig {
        num_layers: 2,
        model_dim: 32,
        num_heads: 4,
        conv_kernel_size: 7,
        feedforward_dim: 128,
        codebook_sizes: [CODEBOOK; 3],
        max_seq_frames: 600,
        extraction_layer: MpmConfig::default_extraction_layer(2),
    }
}

fn train_config(seed: u64) -> TrainConfig {
    TrainConfig { steps: 2000, batch_size: 4, crop_frames: 256, peak_lr: 1e-3, warmup_steps: 200, seed, ..TrainConfig::default() }
}

/// Models trained on the default synthetic corpus, shared by the
/// structure-learning and trend checks.
struct Trained {
    corpus: SyntheticCorpus,
    tokens: Vec<TokenTrack>,
    models: BTreeMap<(String, u64), (MpmModel<f32>, TrainLog)>,
}

impl Trained {
    fn new() -> Self {
        let corpus = generate_synthetic_corpus(&SynthConfig::default()).unwrap();
        let codebooks = Codebooks::standard(CODEBOOK).unwrap();
        let tokens = corpus.tracks.iter().map(|t| codebooks.tokenize(t)).collect();
        Trained { corpus, tokens, models: BTreeMap::new() }
    }

    fn get(&mut self, strategy: &str, seed: u64) -> Result<&(MpmModel<f32>, TrainLog), String> {
        let key = (strategy.to_string(), seed);
        if !self.models.contains_key(&key) {
            let started = Instant::now();
            let mut model = MpmModel::<f32>::new(model_config(), seed).map_err(|e| e.to_string())?;
            let mask = MaskConfig::parse(strategy).map_err(|e| e.to_string())?;
            let log = train_mpm(&mut model, &self.tokens, &mask, &train_config(seed)).map_err(|e| e.to_string())?;
            eprintln!("  trained m={strategy} seed {seed} in {:.0}s", started.elapsed().as_secs_f64());
            self.models.insert(key.clone(), (model, log));
        }
        Ok(&self.models[&key])
    }

    fn representation(&mut self, strategy: &str, seed: u64) -> Result<Representation, String> {
        let dim = model_config().model_dim;
        self.get(strategy, seed)?;
        let (model, _) = &self.models[&(strategy.to_string(), seed)];
        let features = self
            .tokens
            .iter()
            .map(|t| {
                let data = model.extract_representations(t, None).map_err(|e| e.to_string())?;
                FrameMatrix::new(t.num_frames(), dim, data).map(Some).map_err(|e| e.to_string())
            })
            .collect::<Result<Vec<_>, String>>()?;
        Ok(Representation { name: format!("mpm:{strategy}"), strategy: strategy.into(), source: format!("seed{seed}"), features })
    }

    fn raw(&self) -> Representation {
        let features = self.corpus.tracks.iter().map(|t| Some(raw_features(t).unwrap())).collect();
        Representation { name: "raw".into(), strategy: "-".into(), source: "-".into(), features }
    }
}

fn probe_grid(seed: u64) -> GridConfig {
    GridConfig { seeds: vec![seed], train: ProbeTrainConfig { peak_lr: 1e-3, ..ProbeTrainConfig::default() }, ..GridConfig::default() }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn mask_statistics() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let combos: Vec<(usize, usize)> = [1, 4, 16, 64, 128].iter().flat_map(|m| [64, 256, 600].map(|n| (*m, n))).collect();
    let (mut lo, mut hi, mut outside) = (1.0f64, 0.0f64, 0usize);
    for i in 0..10_000 {
        let (m, n) = combos[i % combos.len()];
        let f = sample_mask_plan(n, m, &mut rng).map_err(|e| e.to_string())?.masked_fraction;
        lo = lo.min(f);
        hi = hi.max(f);
        outside += usize::from(!(0.45..=0.55).contains(&f));
    }
    ensure(outside == 0, format!("10000 plans, fraction range [{lo:.4}, {hi:.4}], {outside} outside [0.45, 0.55]"))
}

fn loss_normalisation() -> Check {
    let mut worst = 0.0f64;
    for c in [2usize, 4, 128, 512] {
        let frames = 50;
        let logits = vec![0.0f32; frames * c];
        let targets: Vec<usize> = (0..frames).map(|t| (t * 7) % c).collect();
        let mask: Vec<bool> = (0..frames).map(|t| t % 3 != 0).collect();
        let l = mpm_loss([&logits, &logits, &logits], [&targets, &targets, &targets], &mask, [c; 3]).map_err(|e| e.to_string())?;
        for p in l.per_stream {
            worst = worst.max((p - 1.0).abs());
        }
        worst = worst.max((l.total - 3.0).abs());
    }
    ensure(worst <= 1e-6, format!("max deviation {worst:.2e} over c in {{2, 4, 128, 512}}"))
}

fn gradient_check() -> Check {
    let r = grad_check(&tiny_config(), 1e-5, 240, 17).map_err(|e| e.to_string())?;
    ensure(r.checked >= 200 && r.max_relative_error < 1e-4, format!("{} parameters, max relative error {:.2e}", r.checked, r.max_relative_error))
}

fn structure_learning(trained: &mut Trained) -> Check {
    trained.get("4", 0)?;
    let (model, log) = &trained.models[&("4".to_string(), 0)];
    let first = log.mean_loss(0, 50);
    let last = log.mean_loss(log.losses.len() - 50, log.losses.len());
    let eval = evaluate_masked(model, &trained.tokens, &MaskConfig::parse("4").unwrap(), 8, 256, 20, 99).map_err(|e| e.to_string())?;
    let chance = 5.0 / CODEBOOK as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noise: Vec<TokenTrack> = (0..200)
        .map(|_| {
            let mut draw = || (0..300).map(|_| rng.gen_range(0..CODEBOOK)).collect::<Vec<_>>();
            let (p, e, v) = (draw(), draw(), draw());
            TokenTrack::new(p, e, v).unwrap()
        })
        .collect();
    let mut iid = MpmModel::<f32>::new(model_config(), 0).map_err(|e| e.to_string())?;
    let iid_log = train_mpm(&mut iid, &noise, &MaskConfig::parse("4").unwrap(), &train_config(0)).map_err(|e| e.to_string())?;
    let plateau = iid_log.mean_loss(iid_log.losses.len() - 50, iid_log.losses.len());

    let reduced = last <= 0.7 * first;
    let accurate = eval.accuracy.iter().all(|a| *a > chance);
    let flat = (plateau - 3.0).abs() <= 0.1;
    ensure(
        reduced && accurate && flat,
        format!(
            "loss {first:.3} -> {last:.3} ({:.0}% drop), masked accuracy {:.3}/{:.3}/{:.3} vs {chance:.3}, i.i.d. plateau {plateau:.3}",
            100.0 * (1.0 - last / first),
            eval.accuracy[0],
            eval.accuracy[1],
            eval.accuracy[2]
        ),
    )
}

/// Mean over seeds of the per-seed fold mean, by representation name.
fn seed_means(trained: &mut Trained, strategies: &[&str], task: Task, metric: &str) -> Result<BTreeMap<String, Vec<f64>>, String> {
    let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for &seed in &SEEDS {
        let mut reps = vec![trained.raw()];
        for s in strategies {
            reps.push(trained.representation(s, seed)?);
        }
        let report: EvalReport = run_probe_grid(&reps, &[task], &trained.corpus.labels, &probe_grid(seed), "acceptance").map_err(|e| e.to_string())?;
        for r in &reps {
            let v = report.mean(&r.name, ProbeKind::Linear, task, metric).ok_or_else(|| format!("no {metric} for {}", r.name))?;
            out.entry(r.name.clone()).or_default().push(v);
        }
    }
    Ok(out)
}

fn fmt_means(m: &BTreeMap<String, Vec<f64>>) -> String {
    m.iter().map(|(k, v)| format!("{k} {:.3}", mean(v))).collect::<Vec<_>>().join(", ")
}

fn trend(trained: &mut Trained, class: &BTreeMap<String, Vec<f64>>) -> Check {
    let syllable = seed_means(trained, &["4", "128"], Task::Syllable, "f1")?;
    let c = |k: &str| mean(&class[k]);
    let f = |k: &str| mean(&syllable[k]);
    let a1 = c("mpm:128") >= c("mpm:4");
    let a2 = c("mpm:random") >= c("mpm:4");
    let b = f("mpm:4") >= f("mpm:128");
    ensure(
        a1 && a2 && b,
        format!(
            "class WA: m128 {:.3} {} m4 {:.3}, random {:.3} {} m4; syllable F1: m4 {:.3} {} m128 {:.3}",
            c("mpm:128"),
            if a1 { ">=" } else { "<" },
            c("mpm:4"),
            c("mpm:random"),
            if a2 { ">=" } else { "<" },
            f("mpm:4"),
            if b { ">=" } else { "<" },
            f("mpm:128")
        ),
    )
}

fn ordering(class: &BTreeMap<String, Vec<f64>>) -> Check {
    let (m, r) = (mean(&class["mpm:random"]), mean(&class["raw"]));
    ensure(m > r, format!("class WA over 3 seeds: mpm:random {m:.3} vs raw {r:.3}"))
}

fn mexican_hat(t: f64) -> f64 {
    2.0 / (3.0f64.sqrt() * std::f64::consts::PI.powf(0.25)) * (1.0 - t * t) * (-t * t / 2.0).exp()
}

fn mirror(mut i: isize, n: isize) -> usize {
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

fn cwt_oracle() -> Check {
    let cfg = CwtConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x: Vec<f64> = (0..512).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let mut planner = FftPlanner::new();
    let mut worst = 0.0f64;
    for &s in &cfg.scales {
        let k = (cfg.support * s).ceil() as isize;
        let fast = cwt_column(&x, s, &cfg, &mut planner);
        for t in 0..x.len() as isize {
            let direct: f64 = (-k..=k).map(|j| mexican_hat(j as f64 / s) / s.sqrt() * x[mirror(t + j, x.len() as isize)]).sum();
            worst = worst.max((direct - fast[t as usize]).abs());
        }
    }
    ensure(worst <= 1e-6, format!("max abs error {worst:.2e} over {} scales", cfg.scales.len()))
}

fn metric_fixtures() -> Check {
    let mut worst = 0.0f64;
    let mut track = |got: f64, want: f64| worst = worst.max((got - want).abs());
    track(ser(&[4, 5, 10], &[3, 5, 12]).unwrap(), (0.25 + 0.0 + 0.2) / 3.0);
    track(pearson_corr(&[1.0, 2.0, 3.0, 4.0], &[2.0, 4.0, 5.0, 9.0]).unwrap(), 11.0 / 130f64.sqrt());
    track(f1_binary(&[1, 1, 0, 0, 1], &[1, 0, 1, 0, 1]).unwrap(), 2.0 / 3.0);
    let golds: Vec<usize> = (0..100).map(|i| usize::from(i >= 90)).collect();
    let (wa, ua) = weighted_unweighted_accuracy(&vec![0; 100], &golds, 2).unwrap();
    track(wa, 0.9);
    track(ua, 0.5);
    let (wa, ua) = weighted_unweighted_accuracy(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
    track(wa, 1.0);
    track(ua, 1.0);
    let syllables = count_syllables_from_frames(&[0.0, 0.9, 0.9, 0.0, 0.0, 0.0, 0.8, 0.0], 0.5, 3);
    let folds = kfold_split(103, 5, 1).unwrap();
    let mut sizes = [0usize; 5];
    for f in &folds {
        sizes[*f] += 1;
    }
    let covering = folds.len() == 103 && sizes.iter().sum::<usize>() == 103 && sizes.iter().all(|s| (20..=21).contains(s));
    let null = f1_binary(&[0, 0], &[0, 0]).unwrap() == 0.0;
    ensure(worst <= 1e-12 && syllables == 2 && covering && null, format!("max error {worst:.1e}, fold sizes {sizes:?}, syllables {syllables}"))
}

fn determinism() -> Check {
    let smoke = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml");
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut ckpts = Vec::new();
    let mut reports = Vec::new();
    for d in &dirs {
        let mut cfg = ExperimentConfig::load(&smoke).map_err(|e| e.to_string())?;
        cfg.out_dir = d.path().to_path_buf();
        let p = Pipeline::new(cfg).map_err(|e| e.to_string())?;
        let (report, _) = p.sweep().map_err(|e| e.to_string())?;
        ckpts.push(std::fs::read(p.checkpoint_path("random")).map_err(|e| e.to_string())?);
        reports.push(report.to_tsv());
    }
    let ckpt = MpmCheckpoint::from_bytes(&ckpts[0]).map_err(|e| e.to_string())?;
    let reloaded = MpmCheckpoint::from_bytes(&ckpt.to_bytes().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let corpus = generate_synthetic_corpus(&SynthConfig { num_utterances: 3, ..SynthConfig::default() }).unwrap();
    let mut same_forward = true;
    for t in &corpus.tracks {
        let tokens = ckpt.codebooks.tokenize(t);
        let a = ckpt.model.forward(&tokens).map_err(|e| e.to_string())?;
        let b = reloaded.model.forward(&tokens).map_err(|e| e.to_string())?;
        for s in 0..3 {
            same_forward &= a.logits[s].iter().map(|v| v.to_bits()).eq(b.logits[s].iter().map(|v| v.to_bits()));
        }
    }
    let same_ckpt = ckpts[0] == ckpts[1];
    let same_report = reports[0] == reports[1];
    ensure(
        same_ckpt && same_report && same_forward,
        format!("checkpoints identical: {same_ckpt}, reports identical: {same_report}, reload forward bit-identical: {same_forward}"),
    )
}

fn fixture(name: &str) -> String {
    std::fs::read_to_string(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)).unwrap()
}

fn parser_fixtures() -> Check {
    let vowels = parse_timit_alignment(&fixture("three_vowels.phn"), &AlignmentConfig::default()).map_err(|e| e.to_string())?;
    let flagged: Vec<usize> = vowels.frame_flags.iter().enumerate().filter(|(_, f)| **f == 1).map(|(t, _)| t).collect();
    let want: Vec<usize> = (20..30).chain(35..45).chain(50..60).collect();
    let timit = vowels.syllable_count == 3 && flagged == want;

    let words = parse_tobi_labels(&fixture("words.tobi")).map_err(|e| e.to_string())?;
    let got: Vec<(bool, bool)> = words.iter().map(|w| (w.prominent(), w.boundary())).collect();
    let tobi = got == [(true, false), (false, false), (false, false), (true, true), (false, true), (true, false)];

    let mut ravdess = true;
    for line in fixture("ravdess_names.tsv").lines().filter(|l| !l.starts_with('#')) {
        let cols: Vec<&str> = line.split('\t').collect();
        let id = parse_ravdess_id(cols[0]).map_err(|e| e.to_string())?;
        ravdess &= id.emotion() == cols[1].parse::<usize>().unwrap() && id.speaker() == cols[2].parse::<u8>().unwrap();
    }
    ravdess &= EMOTIONS[parse_ravdess_id("03-01-05-01-02-01-12.wav").unwrap().emotion()] == "angry";

    let line_of = |r: Result<(), Error>| match r {
        Err(Error::Parse { line, .. }) => Some(line),
        _ => None,
    };
    let errors = line_of(parse_phn(&fixture("nonmonotone.phn")).map(|_| ())) == Some(3)
        && line_of(parse_phn(&fixture("empty_segment.phn")).map(|_| ())) == Some(2)
        && line_of(parse_tobi_labels(&fixture("bad_break.tobi")).map(|_| ())) == Some(3)
        && line_of(parse_tobi_labels(&fixture("overlap.tobi")).map(|_| ())) == Some(2)
        && line_of(parse_tobi_labels(&fixture("short_row.tobi")).map(|_| ())) == Some(1)
        && fixture("ravdess_malformed.txt").lines().all(|n| matches!(parse_ravdess_id(n), Err(Error::Parse { .. })));
    ensure(timit && tobi && ravdess && errors, format!("timit {timit}, tobi {tobi}, ravdess {ravdess}, malformed inputs rejected {errors}"))
}

fn report(results: &mut Vec<bool>, id: usize, name: &str, started: Instant, check: Check) {
    let secs = started.elapsed().as_secs_f64();
    let (ok, detail) = match check {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    println!("{} criterion {id:>2} {name}: {detail} [{secs:.1}s]", if ok { "PASS" } else { "FAIL" });
    results.push(ok);
}

fn main() -> ExitCode {
    par::set_workers(1);
    let mut results = Vec::new();

    let t = Instant::now();
    report(&mut results, 1, "mask-plan statistics", t, mask_statistics());
    let t = Instant::now();
    report(&mut results, 2, "loss normalisation", t, loss_normalisation());
    let t = Instant::now();
    report(&mut results, 3, "gradient check", t, gradient_check());

    let mut trained = Trained::new();
    let t = Instant::now();
    report(&mut results, 4, "structure learning", t, structure_learning(&mut trained));
    let t = Instant::now();
    let class = seed_means(&mut trained, &["4", "128", "random"], Task::Class, "wa");
    match &class {
        Ok(class) => {
            eprintln!("  class WA means: {}", fmt_means(class));
            report(&mut results, 5, "mask-size trends", t, trend(&mut trained, class));
            let t = Instant::now();
            report(&mut results, 6, "representation ordering", t, ordering(class));
        }
        Err(e) => {
            report(&mut results, 5, "mask-size trends", t, Err(e.clone()));
            report(&mut results, 6, "representation ordering", Instant::now(), Err(e.clone()));
        }
    }

    let t = Instant::now();
    report(&mut results, 7, "CWT against direct convolution", t, cwt_oracle());
    let t = Instant::now();
    report(&mut results, 8, "metric fixtures", t, metric_fixtures());
    let t = Instant::now();
    report(&mut results, 9, "determinism and persistence", t, determinism());
    let t = Instant::now();
    report(&mut results, 10, "parser fixtures", t, parser_fixtures());

    let passed = results.iter().filter(|r| **r).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
