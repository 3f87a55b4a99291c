//! Binary cross-entropy over independent labels, frequency-balanced class
//! weights, and the per-class contribution report.
//!
//! The weights are `w_pos = freq_n` and `w_neg = freq_p`, so that
//! `w_pos·freq_p == w_neg·freq_n` for every class: positives and negatives
//! carry the same expected mass in the loss.

use std::io::Write;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_CLAMP_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassFrequencies<T> {
    pub freq_p: Vec<T>,
    pub freq_n: Vec<T>,
    pub n_examples: usize,
}

impl<T: Scalar> ClassFrequencies<T> {
    pub fn num_classes(&self) -> usize {
        self.freq_p.len()
    }

    /// Classes without positives or without negatives.
    pub fn degenerate(&self) -> Vec<usize> {
        self.freq_p
            .iter()
            .enumerate()
            .filter(|(_, &p)| p == T::zero() || p == T::one())
            .map(|(c, _)| c)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights<T> {
    pub w_pos: Vec<T>,
    pub w_neg: Vec<T>,
    /// Classes whose training labels are all one value; one loss side is zero.
    pub degenerate: Vec<usize>,
}

impl<T: Scalar> ClassWeights<T> {
    pub fn unit(num_classes: usize) -> Self {
        ClassWeights {
            w_pos: vec![T::one(); num_classes],
            w_neg: vec![T::one(); num_classes],
            degenerate: Vec::new(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.w_pos.len()
    }
}

/// Column-wise positive rates of an `N×K` binary label matrix.
pub fn compute_frequencies<T: Scalar>(labels: &[Vec<u8>]) -> Result<ClassFrequencies<T>> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::InvalidArgument("label matrix has no rows".into()));
    }
    let k = labels[0].len();
    let mut counts = vec![0usize; k];
    for (r, row) in labels.iter().enumerate() {
        if row.len() != k {
            return Err(Error::InvalidShape(format!("row {r} has {} labels, expected {k}", row.len())));
        }
        for (c, &y) in row.iter().enumerate() {
            match y {
                0 => {}
                1 => counts[c] += 1,
                other => {
                    return Err(Error::InvalidLabel {
                        row: r,
                        column: c,
                        value: other.to_string(),
                    })
                }
            }
        }
    }
    let freq_p: Vec<T> = counts
        .iter()
        .map(|&c| T::of(c as f64) / T::of(n as f64))
        .collect();
    let freq_n = freq_p.iter().map(|&p| T::one() - p).collect();
    Ok(ClassFrequencies {
        freq_p,
        freq_n,
        n_examples: n,
    })
}

/// `w_pos = freq_n`, `w_neg = freq_p`. Degenerate classes are recorded, not rejected.
pub fn compute_weights<T: Scalar>(freqs: &ClassFrequencies<T>) -> ClassWeights<T> {
    ClassWeights {
        w_pos: freqs.freq_n.clone(),
        w_neg: freqs.freq_p.clone(),
        degenerate: freqs.degenerate(),
    }
}

fn labels_tensor<T: Scalar>(labels: &[Vec<u8>]) -> Result<Tensor<T>> {
    let k = labels.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(labels.len() * k);
    for row in labels {
        if row.len() != k {
            return Err(Error::InvalidShape(format!("ragged label rows: {} vs {k}", row.len())));
        }
        data.extend(row.iter().map(|&y| T::of(y as f64)));
    }
    Tensor::new(vec![labels.len(), k], data)
}

/// Class-weighted BCE averaged over examples and classes; differentiable
/// through `probabilities`.
pub fn weighted_bce<T: Scalar>(
    g: &mut Graph<T>,
    probabilities: Var,
    labels: &[Vec<u8>],
    weights: &ClassWeights<T>,
    clamp_eps: f64,
) -> Result<Var> {
    let targets = labels_tensor(labels)?;
    g.weighted_bce(
        probabilities,
        &targets,
        &weights.w_pos,
        &weights.w_neg,
        T::of(clamp_eps),
    )
}

/// Unweighted BCE (both weights 1).
pub fn plain_bce<T: Scalar>(
    g: &mut Graph<T>,
    probabilities: Var,
    labels: &[Vec<u8>],
    clamp_eps: f64,
) -> Result<Var> {
    let k = g.value(probabilities)?.dims2()?.1;
    weighted_bce(g, probabilities, labels, &ClassWeights::unit(k), clamp_eps)
}

/// One row of the contribution report.
#[derive(Clone, Debug, PartialEq)]
pub struct Contribution<T> {
    pub class_name: String,
    pub freq_p: T,
    pub freq_n: T,
    pub w_pos: T,
    pub w_neg: T,
    pub positive: T,
    pub negative: T,
}

/// Expected loss-weight mass of positives (`w_pos·freq_p`) and negatives
/// (`w_neg·freq_n`) for each class.
pub fn contribution_report<T: Scalar>(
    labels: &[Vec<u8>],
    weights: &ClassWeights<T>,
    class_names: &[String],
) -> Result<Vec<Contribution<T>>> {
    let freqs = compute_frequencies::<T>(labels)?;
    if freqs.num_classes() != weights.num_classes() || class_names.len() != weights.num_classes() {
        return Err(Error::InvalidShape(format!(
            "{} label columns, {} weights, {} class names",
            freqs.num_classes(),
            weights.num_classes(),
            class_names.len()
        )));
    }
    Ok((0..freqs.num_classes())
        .map(|c| Contribution {
            class_name: class_names[c].clone(),
            freq_p: freqs.freq_p[c],
            freq_n: freqs.freq_n[c],
            w_pos: weights.w_pos[c],
            w_neg: weights.w_neg[c],
            positive: weights.w_pos[c] * freqs.freq_p[c],
            negative: weights.w_neg[c] * freqs.freq_n[c],
        })
        .collect())
}

pub fn write_contribution_csv<T: Scalar, W: Write>(rows: &[Contribution<T>], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "class",
        "freq_p",
        "freq_n",
        "w_pos",
        "w_neg",
        "pos_contribution",
        "neg_contribution",
    ])?;
    for r in rows {
        w.write_record([
            r.class_name.clone(),
            r.freq_p.to_string(),
            r.freq_n.to_string(),
            r.w_pos.to_string(),
            r.w_neg.to_string(),
            r.positive.to_string(),
            r.negative.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<contribution csv>", e))?;
    Ok(())
}
