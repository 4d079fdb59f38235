//! Independent reference implementations written directly from the
//! definitions, shared by the oracle tests and the acceptance harness.

use fmqs::autodiff::Graph;
use fmqs::fmqe::contrastive_loss;
use fmqs::tensor::Tensor;

fn cosine(a: &[f64], b: &[f64], zero: f64) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        zero
    } else {
        dot / (na * nb)
    }
}

/// Channel and spatial cosine similarity written directly from their
/// definitions over a `[C, H, W]` layout.
pub fn cs_oracle(a: &Tensor, b: &Tensor, alpha: f64, zero: f64) -> (f64, f64, f64) {
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let plane = h * w;
    let channel = (0..c)
        .map(|ch| cosine(&a.data()[ch * plane..(ch + 1) * plane], &b.data()[ch * plane..(ch + 1) * plane], zero))
        .sum::<f64>()
        / c as f64;
    let spatial = (0..plane)
        .map(|p| {
            let va: Vec<f64> = (0..c).map(|ch| a.data()[ch * plane + p]).collect();
            let vb: Vec<f64> = (0..c).map(|ch| b.data()[ch * plane + p]).collect();
            cosine(&va, &vb, zero)
        })
        .sum::<f64>()
        / plane as f64;
    (channel, spatial, alpha * channel + (1.0 - alpha) * spatial)
}

pub fn metrics_oracle(p: &[f64], y: &[f64]) -> (f64, f64, f64, f64) {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let mut mse = 0.0;
    let mut mae = 0.0;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    let mut mape = 0.0;
    for i in 0..y.len() {
        mse += (y[i] - p[i]).powi(2) / n;
        mae += (y[i] - p[i]).abs() / n;
        ss_res += (y[i] - p[i]).powi(2);
        ss_tot += (y[i] - mean).powi(2);
        mape += ((y[i] - p[i]) / y[i]).abs() / n;
    }
    (mse, mae, 1.0 - ss_res / ss_tot, 100.0 * mape)
}

pub fn contrastive(image: &[f64], text: &[f64], s: usize, d: usize, tau: f64) -> f64 {
    let mut g = Graph::new();
    let i = g.constant(Tensor::new([s, d], image.to_vec()).unwrap());
    let t = g.constant(Tensor::new([s, d], text.to_vec()).unwrap());
    let tau = g.scalar(tau);
    let l = contrastive_loss(&mut g, i, t, tau).unwrap();
    g.value(l).item().unwrap()
}

pub fn contrastive_oracle(image: &[f64], text: &[f64], s: usize, d: usize, tau: f64) -> f64 {
    let unit = |v: &[f64]| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect::<Vec<_>>()
    };
    let is: Vec<Vec<f64>> = image.chunks(d).map(unit).collect();
    let ts: Vec<Vec<f64>> = text.chunks(d).map(unit).collect();
    let logit = |i: usize, j: usize| is[i].iter().zip(&ts[j]).map(|(a, b)| a * b).sum::<f64>() / tau;
    let mut total = 0.0;
    for i in 0..s {
        let row: f64 = (0..s).map(|j| logit(i, j).exp()).sum();
        let col: f64 = (0..s).map(|j| logit(j, i).exp()).sum();
        total += (logit(i, i) - row.ln()) + (logit(i, i) - col.ln());
    }
    -total / s as f64
}
