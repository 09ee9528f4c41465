//! Kernel similarity between layer representations: kernel matrices, HSIC,
//! CKA and the thresholded similarity matrix used for layer grouping.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ForwardPass;
use crate::tensor::Tensor;

/// Self-HSIC below this fraction of `‖K‖²_F / (n-1)²` counts as a constant
/// representation.
const DEGENERATE_RATIO: f64 = 1e-20;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Kernel {
    /// `K = F Fᵀ`.
    #[default]
    Linear,
    /// `exp(-‖a-b‖² / 2σ²)`; `σ` defaults to the median pairwise distance.
    Gaussian { bandwidth: Option<f64> },
}

/// `n × n` kernel matrix of an `n × p` activation matrix.
pub fn kernel_matrix(acts: &Tensor, kernel: Kernel) -> Result<Tensor> {
    let n = acts.rows();
    if n < 2 {
        return Err(Error::Precondition(format!(
            "kernel matrix needs at least 2 samples, got {n}"
        )));
    }
    let mut k = vec![0.0; n * n];
    match kernel {
        Kernel::Linear => {
            for a in 0..n {
                for b in a..n {
                    let v: f64 = acts.row(a).iter().zip(acts.row(b)).map(|(x, y)| x * y).sum();
                    k[a * n + b] = v;
                    k[b * n + a] = v;
                }
            }
        }
        Kernel::Gaussian { bandwidth } => {
            let mut d2 = vec![0.0; n * n];
            for a in 0..n {
                for b in a + 1..n {
                    let v: f64 = acts
                        .row(a)
                        .iter()
                        .zip(acts.row(b))
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum();
                    d2[a * n + b] = v;
                    d2[b * n + a] = v;
                }
            }
            let sigma = bandwidth.unwrap_or_else(|| median_distance(&d2, n));
            let denom = 2.0 * sigma * sigma;
            for (kv, dv) in k.iter_mut().zip(&d2) {
                *kv = (-dv / denom).exp();
            }
        }
    }
    Tensor::new(vec![n, n], k)
}

fn median_distance(d2: &[f64], n: usize) -> f64 {
    let mut d: Vec<f64> = (0..n)
        .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
        .map(|(a, b)| d2[a * n + b].sqrt())
        .collect();
    d.sort_by(f64::total_cmp);
    let m = d[d.len() / 2];
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// `H K H` with `H = I - 11ᵀ/n`.
fn center(k: &Tensor) -> Vec<f64> {
    let n = k.rows();
    let row_mean: Vec<f64> = (0..n).map(|a| k.row(a).iter().sum::<f64>() / n as f64).collect();
    let grand = row_mean.iter().sum::<f64>() / n as f64;
    let mut c = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..n {
            // K symmetric: column mean b == row mean b
            c[a * n + b] = k.data()[a * n + b] - row_mean[a] - row_mean[b] + grand;
        }
    }
    c
}

fn check_pair(ki: &Tensor, kj: &Tensor) -> Result<usize> {
    let n = ki.rows();
    if ki.shape() != [n, n] || kj.shape() != [n, n] {
        return Err(Error::Shape(format!(
            "HSIC needs equal square kernels, got {:?} and {:?}",
            ki.shape(),
            kj.shape()
        )));
    }
    if n < 2 {
        return Err(Error::Precondition("HSIC needs n >= 2".into()));
    }
    Ok(n)
}

/// `(n-1)^-2 · Tr(H Ki H Kj)`.
pub fn hsic(ki: &Tensor, kj: &Tensor) -> Result<f64> {
    let n = check_pair(ki, kj)?;
    let ci = center(ki);
    // Tr(H Ki H Kj) = Σ_ab (H Ki H)_ab (Kj)_ba, Kj symmetric
    let tr: f64 = ci.iter().zip(kj.data()).map(|(a, b)| a * b).sum();
    Ok(tr / ((n - 1) * (n - 1)) as f64)
}

/// A kernel matrix prepared for repeated CKA evaluation.
#[derive(Debug, Clone)]
pub struct CenteredKernel {
    n: usize,
    centered: Vec<f64>,
    self_hsic: f64,
    degenerate: bool,
}

impl CenteredKernel {
    pub fn new(k: &Tensor) -> Result<Self> {
        let n = check_pair(k, k)?;
        let centered = center(k);
        let norm = ((n - 1) * (n - 1)) as f64;
        let self_hsic = centered.iter().map(|v| v * v).sum::<f64>() / norm;
        let scale = k.data().iter().map(|v| v * v).sum::<f64>() / norm;
        let degenerate = !(self_hsic > DEGENERATE_RATIO * scale) || self_hsic <= 0.0;
        Ok(Self {
            n,
            centered,
            self_hsic,
            degenerate,
        })
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    fn cross(&self, other: &Self) -> f64 {
        let tr: f64 = self
            .centered
            .iter()
            .zip(&other.centered)
            .map(|(a, b)| a * b)
            .sum();
        tr / ((self.n - 1) * (self.n - 1)) as f64
    }

    pub fn cka(&self, other: &Self) -> Result<f64> {
        if self.n != other.n {
            return Err(Error::Shape(format!(
                "CKA over {} vs {} samples",
                self.n, other.n
            )));
        }
        if self.degenerate || other.degenerate {
            return Err(Error::DegenerateRepresentation);
        }
        let v = self.cross(other) / (self.self_hsic * other.self_hsic).sqrt();
        Ok(v.clamp(0.0, 1.0))
    }
}

/// `HSIC(Ki,Kj) / √(HSIC(Ki,Ki)·HSIC(Kj,Kj))`, clamped to `[0, 1]`.
pub fn cka(ki: &Tensor, kj: &Tensor) -> Result<f64> {
    check_pair(ki, kj)?;
    CenteredKernel::new(ki)?.cka(&CenteredKernel::new(kj)?)
}

/// Flattened activations per tap point over the same `n` inputs.
#[derive(Debug, Clone)]
pub struct ActivationSet {
    pub taps: Vec<usize>,
    pub matrices: Vec<Tensor>,
}

impl ActivationSet {
    pub fn new(taps: Vec<usize>, matrices: Vec<Tensor>) -> Result<Self> {
        if taps.len() != matrices.len() {
            return Err(Error::Shape("one matrix per tap point required".into()));
        }
        let n = matrices.first().map_or(0, Tensor::rows);
        if matrices.iter().any(|m| m.rows() != n) {
            return Err(Error::Shape("tap matrices disagree on sample count".into()));
        }
        if n < 2 {
            return Err(Error::Precondition(format!(
                "activation set needs at least 2 samples, got {n}"
            )));
        }
        Ok(Self { taps, matrices })
    }

    pub fn from_forward(pass: &ForwardPass) -> Result<Self> {
        let taps: Vec<usize> = pass.taps.keys().copied().collect();
        let matrices = pass.taps.values().map(Tensor::flatten_rows).collect();
        Self::new(taps, matrices)
    }

    pub fn n(&self) -> usize {
        self.matrices[0].rows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkaMatrix {
    /// Layer index of each tap, in order.
    pub taps: Vec<usize>,
    /// Symmetric scores; `None` where a representation was degenerate.
    pub values: Vec<Vec<Option<f64>>>,
    pub epsilon: f64,
    pub binary: Vec<Vec<bool>>,
}

impl CkaMatrix {
    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("tap");
        for t in &self.taps {
            let _ = write!(s, ",{t}");
        }
        s.push('\n');
        for (i, row) in self.values.iter().enumerate() {
            let _ = write!(s, "{}", self.taps[i]);
            for v in row {
                match v {
                    Some(v) => {
                        let _ = write!(s, ",{v:.12}");
                    }
                    None => s.push_str(",undefined"),
                }
            }
            s.push('\n');
        }
        s
    }

    /// Row-major intensities for a heatmap (undefined entries are 0).
    pub fn heatmap(&self) -> Vec<f64> {
        self.values
            .iter()
            .flat_map(|r| r.iter().map(|v| v.unwrap_or(0.0)))
            .collect()
    }
}

pub fn threshold(values: &[Vec<Option<f64>>], epsilon: f64) -> Vec<Vec<bool>> {
    values
        .iter()
        .map(|r| r.iter().map(|v| v.is_some_and(|v| v >= 1.0 - epsilon)).collect())
        .collect()
}

/// Pairwise CKA over all taps and the binary matrix `B = [CKA >= 1 - ε]`.
pub fn build_cka_matrix(acts: &ActivationSet, epsilon: f64, kernel: Kernel) -> Result<CkaMatrix> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must lie in [0, 1), got {epsilon}"
        )));
    }
    if acts.taps.len() < 2 {
        return Err(Error::Precondition("need at least two tap points".into()));
    }
    let kernels: Vec<CenteredKernel> = acts
        .matrices
        .iter()
        .map(|m| CenteredKernel::new(&kernel_matrix(m, kernel)?))
        .collect::<Result<_>>()?;
    let l = kernels.len();
    let mut values = vec![vec![None; l]; l];
    for i in 0..l {
        if !kernels[i].is_degenerate() {
            values[i][i] = Some(1.0);
        }
        for j in i + 1..l {
            let v = match kernels[i].cka(&kernels[j]) {
                Ok(v) => Some(v),
                Err(Error::DegenerateRepresentation) => None,
                Err(e) => return Err(e),
            };
            values[i][j] = v;
            values[j][i] = v;
        }
    }
    let binary = threshold(&values, epsilon);
    Ok(CkaMatrix {
        taps: acts.taps.clone(),
        values,
        epsilon,
        binary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_ones_kernels() {
        let k = kernel_matrix(&Tensor::new(vec![2, 2], vec![1., 0., 0., 1.]).unwrap(), Kernel::Linear)
            .unwrap();
        assert_eq!(k.data(), &[1., 0., 0., 1.]);
        let k = kernel_matrix(&Tensor::full(&[3, 2], 1.0), Kernel::Linear).unwrap();
        assert_eq!(k.data(), &[2.0; 9]);
    }

    #[test]
    fn zero_kernels_have_zero_hsic() {
        let z = Tensor::zeros(&[3, 3]);
        assert_eq!(hsic(&z, &z).unwrap(), 0.0);
    }

    #[test]
    fn two_by_two_identity_hsic() {
        // H = [[.5,-.5],[-.5,.5]]; H·I·H·I = H·H = H; Tr(H) = 1; (2-1)^-2 · 1 = 1
        let i2 = Tensor::new(vec![2, 2], vec![1., 0., 0., 1.]).unwrap();
        assert!((hsic(&i2, &i2).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch() {
        assert!(hsic(&Tensor::zeros(&[2, 2]), &Tensor::zeros(&[3, 3])).is_err());
    }

    #[test]
    fn constant_activations_are_degenerate() {
        let k = kernel_matrix(&Tensor::full(&[4, 3], 0.7), Kernel::Linear).unwrap();
        let other = kernel_matrix(
            &Tensor::new(vec![4, 1], vec![1., 2., 3., 5.]).unwrap(),
            Kernel::Linear,
        )
        .unwrap();
        assert!(matches!(cka(&k, &other), Err(Error::DegenerateRepresentation)));
    }

    #[test]
    fn epsilon_zero_keeps_only_exact_ones() {
        let vals = vec![
            vec![Some(1.0), Some(0.999_999)],
            vec![Some(0.999_999), Some(1.0)],
        ];
        assert_eq!(threshold(&vals, 0.0), vec![vec![true, false], vec![false, true]]);
    }

    #[test]
    fn gaussian_kernel_has_unit_diagonal() {
        let a = Tensor::new(vec![3, 1], vec![0., 1., 3.]).unwrap();
        let k = kernel_matrix(&a, Kernel::Gaussian { bandwidth: None }).unwrap();
        for i in 0..3 {
            assert_eq!(k.data()[i * 3 + i], 1.0);
        }
    }
}
