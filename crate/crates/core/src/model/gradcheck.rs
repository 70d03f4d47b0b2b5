use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{mpm_loss_graph, MpmConfig, MpmModel};
use crate::codec::TokenTrack;
use crate::error::Result;
use crate::mask::{apply_mask, sample_mask_plan, MaskedExample};
use crate::nn::Graph;

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
}

/// Denominator floor for the relative error, so that gradients that are
/// zero up to roundoff do not dominate the maximum. Central differences on
/// an O(1) loss carry about 1e-11 absolute noise at eps = 1e-5.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// Layer and width settings small enough for finite differences.
pub fn tiny_config() -> MpmConfig {
    MpmConfig {
        num_layers: 2,
        model_dim: 8,
        num_heads: 2,
        conv_kernel_size: 3,
        feedforward_dim: 16,
        codebook_sizes: [5, 5, 3],
        max_seq_frames: 12,
        extraction_layer: 1,
    }
}

fn examples(cfg: &MpmConfig, rng: &mut ChaCha8Rng) -> Result<Vec<MaskedExample>> {
    let seq = cfg.max_seq_frames.clamp(8, 12);
    (0..2)
        .map(|_| {
            let s = cfg.codebook_sizes;
            let track = TokenTrack::new(
                (0..seq).map(|_| rng.gen_range(0..s[0])).collect(),
                (0..seq).map(|_| rng.gen_range(0..s[1])).collect(),
                (0..seq).map(|_| rng.gen_range(0..s[2])).collect(),
            )?;
            let plan = sample_mask_plan(seq, 3, rng)?;
            apply_mask(&track, &plan, cfg.codebook_sizes)
        })
        .collect()
}

fn loss_graph(model: &MpmModel<f64>, ex: &[MaskedExample]) -> Result<(Graph<f64>, crate::nn::Var)> {
    let mut g = Graph::new();
    let inputs: Vec<&TokenTrack> = ex.iter().map(|e| &e.corrupted).collect();
    let vars = model.forward_graph(&mut g, &inputs)?;
    let t: [Vec<usize>; 3] = [0, 1, 2].map(|s| ex.iter().flat_map(|e| e.targets.streams()[s].to_vec()).collect());
    let mask: Vec<bool> = ex.iter().flat_map(|e| e.mask.clone()).collect();
    let (loss, _) = mpm_loss_graph(&mut g, vars.logits, [&t[0], &t[1], &t[2]], &mask, model.config().codebook_sizes)?;
    Ok((g, loss))
}

/// Compare analytic gradients with central differences at step `eps` on
/// `num_checks` randomly chosen scalar parameters of a double-precision model.
pub fn grad_check(cfg: &MpmConfig, eps: f64, num_checks: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = MpmModel::<f64>::new(cfg.clone(), seed)?;
    // move away from the symmetric initial point (unit gains, zero biases)
    for id in model.params().ids().collect::<Vec<_>>() {
        for v in model.params_mut().get_mut(id).value.iter_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    let ex = examples(cfg, &mut rng)?;
    let (g, loss) = loss_graph(&model, &ex)?;
    let analytic = g.param_grads(&g.backward(loss), model.params())?;

    let sizes: Vec<usize> = model.params().entries().iter().map(|e| e.value.len()).collect();
    let total: usize = sizes.iter().sum();
    let picks = sample(&mut rng, total, num_checks.min(total));
    let ids: Vec<_> = model.params().ids().collect();
    let mut report = GradCheckReport { checked: 0, max_relative_error: 0.0, max_absolute_error: 0.0 };
    for flat in picks.into_iter() {
        let (mut p, mut i) = (0, flat);
        while i >= sizes[p] {
            i -= sizes[p];
            p += 1;
        }
        let id = ids[p];
        let orig = model.params().get(id).value[i];
        let mut eval = |v: f64| -> Result<f64> {
            model.params_mut().get_mut(id).value[i] = v;
            let (g, l) = loss_graph(&model, &ex)?;
            Ok(g.scalar(l))
        };
        let plus = eval(orig + eps)?;
        let minus = eval(orig - eps)?;
        model.params_mut().get_mut(id).value[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.get(id)[i];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
        report.max_absolute_error = report.max_absolute_error.max(abs);
        report.max_relative_error = report.max_relative_error.max(rel);
        report.checked += 1;
    }
    Ok(report)
}
