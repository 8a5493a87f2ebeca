use crate::error::{Error, Result};
use crate::tensor::Tensor4D;

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. logits.
pub fn softmax_cross_entropy(logits: &Tensor4D, labels: &[usize]) -> Result<(f32, Tensor4D)> {
    let d = logits.dims();
    let classes = d.sample_len();
    if labels.len() != d.n {
        return Err(Error::shape(&[d.n], &[labels.len()]));
    }
    let mut grad = Tensor4D::zeros(d);
    let mut total = 0f64;
    let inv_n = 1.0 / d.n as f64;
    for (n, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::Data(format!("label {label} out of range for {classes} classes")));
        }
        let row = logits.sample(n);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        total += z.ln() + max - row[label] as f64;
        let g = &mut grad.data_mut()[n * classes..(n + 1) * classes];
        for (k, e) in exps.iter().enumerate() {
            let p = e / z;
            let t = if k == label { 1.0 } else { 0.0 };
            g[k] = ((p - t) * inv_n) as f32;
        }
    }
    Ok(((total * inv_n) as f32, grad))
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
