use crate::error::{Error, Result};
use crate::nn::{Graph, Scalar, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub per_stream: [f64; 3],
}

fn check_mask(mask: &[bool]) -> Result<usize> {
    let count = mask.iter().filter(|m| **m).count();
    if count == 0 {
        return Err(Error::UndefinedLoss("no masked frames".into()));
    }
    Ok(count)
}

/// Masked cross-entropy per stream, each divided by `ln c` so that uniform
/// predictions score 1.0; the total is the sum over streams.
///
/// `mask` and `targets` cover the flattened `batch * seq` rows of the logits.
pub fn mpm_loss_graph<F: Scalar>(
    g: &mut Graph<F>,
    logits: [Var; 3],
    targets: [&[usize]; 3],
    mask: &[bool],
    sizes: [usize; 3],
) -> Result<(Var, [Var; 3])> {
    let count = check_mask(mask)?;
    let mut per = Vec::with_capacity(3);
    for s in 0..3 {
        let norm = 1.0 / (count as f64 * (sizes[s] as f64).ln());
        let w: Vec<F> = mask.iter().map(|m| if *m { F::lit(norm) } else { F::zero() }).collect();
        per.push(g.cross_entropy(logits[s], targets[s], &w));
    }
    let a = g.add(per[0], per[1]);
    let total = g.add(a, per[2]);
    Ok((total, [per[0], per[1], per[2]]))
}

/// Plain-value version of [`mpm_loss_graph`] over row-major logits.
pub fn mpm_loss(logits: [&[f32]; 3], targets: [&[usize]; 3], mask: &[bool], sizes: [usize; 3]) -> Result<LossValues> {
    let count = check_mask(mask)?;
    let mut per_stream = [0.0; 3];
    for s in 0..3 {
        let c = sizes[s];
        let mut sum = 0.0f64;
        for (r, row) in logits[s].chunks(c).enumerate() {
            if !mask[r] {
                continue;
            }
            let max = row.iter().fold(f32::NEG_INFINITY, |a, b| a.max(*b)) as f64;
            let lse = max + row.iter().map(|v| (*v as f64 - max).exp()).sum::<f64>().ln();
            sum += lse - row[targets[s][r]] as f64;
        }
        per_stream[s] = sum / (count as f64 * (c as f64).ln());
    }
    Ok(LossValues { total: per_stream.iter().sum(), per_stream })
}

/// Fraction of masked rows whose argmax equals the target, per stream.
pub fn masked_accuracy(logits: [&[f32]; 3], targets: [&[usize]; 3], mask: &[bool], sizes: [usize; 3]) -> Result<[f64; 3]> {
    let count = check_mask(mask)?;
    let mut acc = [0.0; 3];
    for s in 0..3 {
        let hits = logits[s]
            .chunks(sizes[s])
            .enumerate()
            .filter(|(r, row)| {
                mask[*r] && {
                    let best = row
                        .iter()
                        .enumerate()
                        .fold((0, f32::NEG_INFINITY), |b, (i, v)| if *v > b.1 { (i, *v) } else { b })
                        .0;
                    best == targets[s][*r]
                }
            })
            .count();
        acc[s] = hits as f64 / count as f64;
    }
    Ok(acc)
}
