use crate::error::{Error, Result};

/// Z-score a contour using statistics of the defined frames only.
///
/// Undefined frames are first filled by linear interpolation between the
/// nearest defined neighbours (edges hold the nearest defined value) and then
/// go through the same affine map. A constant contour maps to zeros.
pub fn normalize_track(values: &[f64], defined: &[bool]) -> Result<Vec<f64>> {
    assert_eq!(values.len(), defined.len(), "values and mask differ in length");
    let filled = interpolate_gaps(values, defined)?;
    let (mut n, mut sum) = (0usize, 0.0);
    for (v, d) in filled.iter().zip(defined) {
        if *d {
            n += 1;
            sum += v;
        }
    }
    let mean = sum / n as f64;
    let var = filled
        .iter()
        .zip(defined)
        .filter(|(_, d)| **d)
        .map(|(v, _)| (v - mean) * (v - mean))
        .sum::<f64>()
        / n as f64;
    let scale = mean.abs().max(1.0);
    if var.sqrt() <= 1e-12 * scale {
        return Ok(vec![0.0; values.len()]);
    }
    let std = var.sqrt();
    Ok(filled.iter().map(|v| (v - mean) / std).collect())
}

/// Linear interpolation across undefined runs; edge runs hold the nearest value.
pub fn interpolate_gaps(values: &[f64], defined: &[bool]) -> Result<Vec<f64>> {
    let known: Vec<usize> = (0..values.len()).filter(|&i| defined[i]).collect();
    let (&first, &last) = match (known.first(), known.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::DegenerateTrack),
    };
    let mut out = values.to_vec();
    out[..first].iter_mut().for_each(|v| *v = values[first]);
    out[last + 1..].iter_mut().for_each(|v| *v = values[last]);
    for pair in known.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if b - a > 1 {
            for (i, slot) in out.iter_mut().enumerate().take(b).skip(a + 1) {
                let t = (i - a) as f64 / (b - a) as f64;
                *slot = values[a] + t * (values[b] - values[a]);
            }
        }
    }
    Ok(out)
}
