//! Continuous wavelet transform of the prosodic contours.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::ProsodyTrack;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Wavelet {
    MexicanHat,
}

impl Wavelet {
    /// Mother wavelet at `t`, normalised to unit L2 norm.
    pub fn eval(self, t: f64) -> f64 {
        match self {
            Wavelet::MexicanHat => {
                let norm = 2.0 / (3.0f64.sqrt() * std::f64::consts::PI.powf(0.25));
                norm * (1.0 - t * t) * (-0.5 * t * t).exp()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CwtConfig {
    pub wavelet: Wavelet,
    /// Scales in frames, strictly increasing.
    pub scales: Vec<f64>,
    /// Kernel half-width in units of the scale.
    pub support: f64,
}

impl Default for CwtConfig {
    fn default() -> Self {
        CwtConfig {
            wavelet: Wavelet::MexicanHat,
            scales: vec![2.0, 4.0, 8.0, 16.0, 32.0, 64.0],
            support: 8.0,
        }
    }
}

impl CwtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.len() < 2 {
            return Err(Error::Config("at least two CWT scales are required".into()));
        }
        if self.scales.iter().any(|s| !(*s > 0.0)) || self.scales.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config("CWT scales must be positive and strictly increasing".into()));
        }
        if !(self.support > 0.0) {
            return Err(Error::Config("CWT support must be positive".into()));
        }
        Ok(())
    }

    pub fn half_width(&self, scale: f64) -> usize {
        (self.support * scale).ceil() as usize
    }

    /// Sampled `psi(j / s) / sqrt(s)` for `j` in `-K..=K`.
    pub fn kernel(&self, scale: f64) -> Vec<f64> {
        let k = self.half_width(scale) as isize;
        (-k..=k).map(|j| self.wavelet.eval(j as f64 / scale) / scale.sqrt()).collect()
    }
}

/// Index into a length-`n` signal with mirror reflection about the edge
/// samples (the edge itself is not repeated), for any offset.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let r = i.rem_euclid(period);
    if r < n as isize {
        r as usize
    } else {
        (period - r) as usize
    }
}

/// Per-frame wavelet responses, `num_frames x (3 * scales.len())`,
/// columns ordered feature-major then scale.
#[derive(Clone, Debug, PartialEq)]
pub struct CwtFeatures {
    pub num_frames: usize,
    pub scales: Vec<f64>,
    pub data: Vec<f32>,
}

impl CwtFeatures {
    pub fn dim(&self) -> usize {
        3 * self.scales.len()
    }

    pub fn column_index(&self, feature: usize, scale: usize) -> usize {
        feature * self.scales.len() + scale
    }
}

/// Response of one contour at one scale, computed by FFT correlation over
/// the reflect-padded signal.
pub fn cwt_column(x: &[f64], scale: f64, cfg: &CwtConfig, planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let n = x.len();
    let kernel = cfg.kernel(scale);
    let k = cfg.half_width(scale);
    let padded_len = n + 2 * k;
    let size = (padded_len + kernel.len() - 1).next_power_of_two();
    let fft = planner.plan_fft_forward(size);
    let ifft = planner.plan_fft_inverse(size);
    let mut a: Vec<Complex64> = (0..size)
        .map(|i| {
            if i < padded_len {
                Complex64::new(x[reflect_index(i as isize - k as isize, n)], 0.0)
            } else {
                Complex64::default()
            }
        })
        .collect();
    // the kernel is symmetric, so correlation equals convolution
    let mut b: Vec<Complex64> = (0..size)
        .map(|i| kernel.get(i).map_or(Complex64::default(), |v| Complex64::new(*v, 0.0)))
        .collect();
    fft.process(&mut a);
    fft.process(&mut b);
    for (u, v) in a.iter_mut().zip(&b) {
        *u *= v;
    }
    ifft.process(&mut a);
    let scale_back = 1.0 / size as f64;
    // full convolution index t + 2k is centred on padded index t + k, i.e. frame t
    (0..n).map(|t| a[t + 2 * k].re * scale_back).collect()
}

/// Encode pitch, energy and VAD contours. Scales not shorter than the track
/// are dropped with a warning.
pub fn cwt_encode(track: &ProsodyTrack, cfg: &CwtConfig) -> Result<CwtFeatures> {
    cfg.validate()?;
    let n = track.num_frames();
    let scales: Vec<f64> = cfg.scales.iter().copied().filter(|s| (n as f64) > *s).collect();
    if scales.len() < cfg.scales.len() {
        log::warn!(
            "track of {n} frames is too short for {} of {} CWT scales; dropping them",
            cfg.scales.len() - scales.len(),
            cfg.scales.len()
        );
    }
    if scales.is_empty() {
        return Err(Error::Config(format!("track of {n} frames is shorter than every CWT scale")));
    }
    let contours: [Vec<f64>; 3] = [
        track.pitch.iter().map(|v| *v as f64).collect(),
        track.energy.iter().map(|v| *v as f64).collect(),
        track.vad.iter().map(|v| *v as f64).collect(),
    ];
    let dim = 3 * scales.len();
    let mut data = vec![0f32; n * dim];
    let mut planner = FftPlanner::new();
    for (f, x) in contours.iter().enumerate() {
        for (si, s) in scales.iter().enumerate() {
            let col = cwt_column(x, *s, cfg, &mut planner);
            let c = f * scales.len() + si;
            for (t, v) in col.into_iter().enumerate() {
                data[t * dim + c] = v as f32;
            }
        }
    }
    Ok(CwtFeatures { num_frames: n, scales, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Time-domain sum with the wavelet evaluated afresh at every tap.
    fn direct(x: &[f64], s: f64, cfg: &CwtConfig) -> Vec<f64> {
        let n = x.len() as isize;
        let k = (cfg.support * s).ceil() as isize;
        (0..n)
            .map(|t| {
                (t - k..=t + k)
                    .map(|u| x[reflect_index(u, x.len())] * cfg.wavelet.eval((u - t) as f64 / s) / s.sqrt())
                    .sum()
            })
            .collect()
    }

    fn col(x: &[f64], s: f64) -> Vec<f64> {
        cwt_column(x, s, &CwtConfig::default(), &mut FftPlanner::new())
    }

    #[test]
    fn reflect_indices() {
        let idx: Vec<usize> = (-4..9).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(idx, vec![2, 3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1, 2]);
        assert_eq!(reflect_index(-100, 1), 0);
    }

    #[test]
    fn matches_direct_sum_on_random_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x: Vec<f64> = (0..512).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let cfg = CwtConfig::default();
        for s in &cfg.scales {
            let fast = col(&x, *s);
            let slow = direct(&x, *s, &cfg);
            let err = fast.iter().zip(&slow).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-6, "scale {s}: {err}");
        }
    }

    #[test]
    fn impulse_gives_wavelet() {
        let mut x = vec![0.0; 200];
        x[100] = 1.0;
        let s = 4.0;
        let y = col(&x, s);
        for (t, v) in y.iter().enumerate().take(150).skip(50) {
            let expected = Wavelet::MexicanHat.eval((100.0 - t as f64) / s) / s.sqrt();
            assert!((v - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_contour_has_no_response() {
        let x = vec![3.7; 300];
        for s in CwtConfig::default().scales {
            assert!(col(&x, s).iter().all(|v| v.abs() < 1e-6), "scale {s}");
        }
    }

    #[test]
    fn column_layout_and_scale_dropping() {
        let n = 40;
        let track = ProsodyTrack::new(
            (0..n).map(|i| (i as f32 * 0.3).sin()).collect(),
            (0..n).map(|i| (i as f32 * 0.1).cos()).collect(),
            (0..n).map(|i| (i % 2) as u8).collect(),
            vec![0.0; n],
            0.01,
        )
        .unwrap();
        let f = cwt_encode(&track, &CwtConfig::default()).unwrap();
        assert_eq!(f.scales, vec![2.0, 4.0, 8.0, 16.0, 32.0]);
        assert_eq!(f.dim(), 15);
        let energy: Vec<f64> = track.energy.iter().map(|v| *v as f64).collect();
        let expected = col(&energy, 8.0);
        let c = f.column_index(1, 2);
        for t in 0..n {
            assert!((f.data[t * 15 + c] as f64 - expected[t]).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_bad_scales() {
        let cfg = CwtConfig { scales: vec![4.0, 2.0], ..CwtConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = CwtConfig { scales: vec![4.0], ..CwtConfig::default() };
        assert!(cfg.validate().is_err());
    }

    proptest! {
        #[test]
        fn linear_in_the_input(
            x in proptest::collection::vec(-1.0f64..1.0, 80),
            y in proptest::collection::vec(-1.0f64..1.0, 80),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
            let (cx, cy, cm) = (col(&x, 4.0), col(&y, 4.0), col(&mix, 4.0));
            for t in 0..80 {
                prop_assert!((cm[t] - (a * cx[t] + b * cy[t])).abs() < 1e-9);
            }
        }

        #[test]
        fn shift_moves_interior_responses(x in proptest::collection::vec(-1.0f64..1.0, 200), k in 1usize..20) {
            let s = 4.0;
            let band = CwtConfig::default().half_width(s);
            let shifted: Vec<f64> = (0..200).map(|i| if i >= k { x[i - k] } else { x[0] }).collect();
            let (a, b) = (col(&x, s), col(&shifted, s));
            for t in band..(200 - band - k) {
                prop_assert!((b[t + k] - a[t]).abs() < 1e-9);
            }
        }
    }
}
