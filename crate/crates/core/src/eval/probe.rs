//! Multinomial linear probe on frozen features.

use rand_distr::{Distribution, Normal};

use super::metrics::macro_f1;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            steps: 500,
            lr: 0.1,
            seed: 0,
        }
    }
}

/// A trained probe: features are z-scored with training statistics, then
/// mapped through `W: [d, classes]` and `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    classes: Vec<usize>,
    mean: Vec<f64>,
    scale: Vec<f64>,
    w: Tensor,
    b: Tensor,
}

fn check_rows(feats: &[Vec<f64>], labels: &[usize], what: &str) -> Result<usize> {
    if feats.len() != labels.len() || feats.is_empty() {
        return Err(Error::shape(
            "phase_probe",
            format!("{what}: {} features, {} labels", feats.len(), labels.len()),
        ));
    }
    let d = feats[0].len();
    if d == 0 || feats.iter().any(|f| f.len() != d) {
        return Err(Error::shape(
            "phase_probe",
            format!("{what}: ragged or empty feature rows"),
        ));
    }
    Ok(d)
}

impl LinearProbe {
    /// Full-batch gradient descent on mean cross-entropy.
    pub fn fit(feats: &[Vec<f64>], labels: &[usize], cfg: ProbeConfig) -> Result<LinearProbe> {
        let d = check_rows(feats, labels, "train")?;
        let mut classes = labels.to_vec();
        classes.sort_unstable();
        classes.dedup();
        if classes.len() < 2 {
            return Err(Error::invalid("probe training needs at least two classes"));
        }
        let c = classes.len();
        let n = feats.len();
        let mut mean = vec![0.0; d];
        for f in feats {
            mean.iter_mut().zip(f).for_each(|(m, x)| *m += x / n as f64);
        }
        let mut scale = vec![0.0; d];
        for f in feats {
            scale
                .iter_mut()
                .zip(f.iter().zip(&mean))
                .for_each(|(s, (x, m))| *s += (x - m).powi(2) / n as f64);
        }
        scale
            .iter_mut()
            .for_each(|s| *s = if *s > 1e-24 { 1.0 / s.sqrt() } else { 1.0 });

        let x: Vec<f64> = feats
            .iter()
            .flat_map(|f| f.iter().zip(&mean).zip(&scale).map(|((x, m), s)| (x - m) * s))
            .collect();
        let picks: Vec<usize> = labels
            .iter()
            .enumerate()
            .map(|(i, l)| i * c + classes.binary_search(l).expect("label is a class"))
            .collect();

        let mut rng = seed::rng(cfg.seed);
        let normal = Normal::new(0.0, 0.01).expect("valid std");
        let mut w = Tensor::new(vec![d, c], (0..d * c).map(|_| normal.sample(&mut rng)).collect(), true)?;
        let mut b = Tensor::zeros(vec![c], true)?;
        for _ in 0..cfg.steps {
            let mut tape = Tape::new();
            let xv = tape.constant(vec![n, d], x.clone())?;
            let wv = tape.leaf(&w);
            let bv = tape.leaf(&b);
            let logits = affine(&mut tape, xv, wv, bv, n, c)?;
            let lse = tape.log_sum_exp(logits)?;
            let flat = tape.reshape(logits, vec![n * c])?;
            let picked = tape.gather(flat, &picks)?;
            let diff = tape.sub(lse, picked)?;
            let loss = tape.mean(diff);
            tape.backward(loss)?;
            let gw = tape.grad(wv).expect("weight gradient").to_vec();
            let gb = tape.grad(bv).expect("bias gradient").to_vec();
            w.values_mut().iter_mut().zip(&gw).for_each(|(p, g)| *p -= cfg.lr * g);
            b.values_mut().iter_mut().zip(&gb).for_each(|(p, g)| *p -= cfg.lr * g);
        }
        Ok(LinearProbe {
            classes,
            mean,
            scale,
            w,
            b,
        })
    }

    pub fn predict(&self, feat: &[f64]) -> Result<usize> {
        let d = self.mean.len();
        if feat.len() != d {
            return Err(Error::shape(
                "phase_probe",
                format!("feature of length {}, probe expects {d}", feat.len()),
            ));
        }
        let c = self.classes.len();
        let z: Vec<f64> = feat
            .iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((x, m), s)| (x - m) * s)
            .collect();
        let w = self.w.values();
        let mut best = (f64::NEG_INFINITY, 0);
        for k in 0..c {
            let score = self.b.values()[k] + (0..d).map(|i| z[i] * w[i * c + k]).sum::<f64>();
            if score > best.0 {
                best = (score, k);
            }
        }
        Ok(self.classes[best.1])
    }
}

fn affine(tape: &mut Tape, x: Var, w: Var, b: Var, n: usize, c: usize) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    let ones = tape.constant(vec![n, 1], vec![1.0; n])?;
    let brow = tape.reshape(b, vec![1, c])?;
    let bias = tape.matmul(ones, brow)?;
    tape.add(xw, bias)
}

/// Macro F1 (percentage) on the test set of a probe fit on the train set.
pub fn phase_probe(
    train_feats: &[Vec<f64>],
    train_labels: &[usize],
    test_feats: &[Vec<f64>],
    test_labels: &[usize],
    cfg: ProbeConfig,
) -> Result<f64> {
    check_rows(test_feats, test_labels, "test")?;
    let probe = LinearProbe::fit(train_feats, train_labels, cfg)?;
    let pred = test_feats
        .iter()
        .map(|f| probe.predict(f))
        .collect::<Result<Vec<_>>>()?;
    macro_f1(&pred, test_labels)
}
