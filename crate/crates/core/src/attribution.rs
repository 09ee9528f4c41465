//! Causal effect of interventions on causal-node outputs, signed feature
//! attribution, and greedy minimal explanation masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::CausalGraph;
use crate::intervention::Intervention;
use crate::nn::TappedModel;
use crate::tensor::{argmax, Tensor};

/// Additive smoothing applied to node distributions before renormalising.
pub const SMOOTHING: f64 = 1e-12;

/// `softmax(v)` smoothed by [`SMOOTHING`] and renormalised, so every entry is
/// strictly positive.
pub fn node_distribution(acts: &[f64]) -> Vec<f64> {
    let m = acts.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = acts.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    let smoothed: Vec<f64> = e.iter().map(|v| v / z + SMOOTHING).collect();
    let z2: f64 = smoothed.iter().sum();
    smoothed.into_iter().map(|v| v / z2).collect()
}

/// `Σ p ln(p/q)`.
pub fn kl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "KL over distributions of length {} and {}",
            p.len(),
            q.len()
        )));
    }
    Ok(p.iter()
        .zip(q)
        .map(|(&a, &b)| if a == b { 0.0 } else { a * (a / b).ln() })
        .sum())
}

/// Effect of one intervention on one causal node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectTerm {
    /// `KL(g'(x') ‖ g'(x))`.
    pub kl: f64,
    /// `|g'(x) - g'(x')|₁`.
    pub delta_l1: f64,
    /// +1 when the predicted class loses probability at the output, -1 when
    /// it gains, 0 when unchanged.
    pub sign: f64,
}

impl EffectTerm {
    const ZERO: EffectTerm = EffectTerm {
        kl: 0.0,
        delta_l1: 0.0,
        sign: 0.0,
    };

    /// `|Δ|₁ · KL`.
    pub fn magnitude(&self) -> f64 {
        self.delta_l1 * self.kl
    }

    pub fn signed(&self) -> f64 {
        self.sign * self.kl
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    /// Per-sample input shape.
    pub shape: Vec<usize>,
    pub predicted: usize,
    /// `terms[node][intervention]`.
    pub terms: Vec<Vec<EffectTerm>>,
    /// Signed per-feature attribution for each node (mean over the
    /// interventions containing the feature).
    pub per_node: Vec<Vec<f64>>,
    /// Mean of `per_node` over nodes.
    pub aggregate: Vec<f64>,
    /// Mean `|Δ|₁ · KL` per node.
    pub node_ace: Vec<f64>,
    /// Mean signed KL per node.
    pub node_signed: Vec<f64>,
}

impl AttributionMap {
    /// Mean KL over nodes for each intervention; used to order mask units.
    pub fn unit_scores(&self) -> Vec<f64> {
        let m = self.terms.first().map_or(0, Vec::len);
        (0..m)
            .map(|k| self.terms.iter().map(|t| t[k].signed()).sum::<f64>() / self.terms.len() as f64)
            .collect()
    }

    pub fn aggregate_tensor(&self) -> Tensor {
        Tensor::new(self.shape.clone(), self.aggregate.clone()).expect("attribution shape")
    }

    /// The `k` features with the largest `|score|` for `node`, ties by index.
    pub fn top_features(&self, node: usize, k: usize) -> Vec<(usize, f64)> {
        let mut idx: Vec<usize> = (0..self.per_node[node].len()).collect();
        let row = &self.per_node[node];
        idx.sort_by(|&a, &b| row[b].abs().total_cmp(&row[a].abs()).then(a.cmp(&b)));
        idx.into_iter().take(k).map(|i| (i, row[i])).collect()
    }
}

fn batch1(x: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    x.clone().reshape(shape)
}

/// Average causal effect of each intervention on every node of `graph`.
pub fn ace(
    model: &TappedModel,
    graph: &CausalGraph,
    x: &Tensor,
    interventions: &[Intervention],
) -> Result<AttributionMap> {
    if graph.taps != model.taps() {
        return Err(Error::Precondition(
            "graph was built for different tap points".into(),
        ));
    }
    let d = x.len();
    let mut rows = vec![batch1(x)?];
    for iv in interventions {
        if iv.sample.shape() != x.shape() {
            return Err(Error::Shape(format!(
                "intervention shape {:?} vs sample {:?}",
                iv.sample.shape(),
                x.shape()
            )));
        }
        rows.push(batch1(&iv.sample)?);
    }
    let batch = Tensor::new(
        {
            let mut s = vec![rows.len()];
            s.extend_from_slice(x.shape());
            s
        },
        rows.iter().flat_map(|r| r.data().iter().copied()).collect(),
    )?;
    let pass = model.forward(&batch)?;
    let probs = model.probabilities(&batch)?;
    let predicted = argmax(probs.row(0));
    let p0 = probs.row(0)[predicted];
    let signs: Vec<f64> = (1..rows.len())
        .map(|k| {
            let pk = probs.row(k)[predicted];
            if pk < p0 {
                1.0
            } else if pk > p0 {
                -1.0
            } else {
                0.0
            }
        })
        .collect();

    let m = interventions.len();
    let mut touching = vec![0usize; d];
    for iv in interventions {
        for &i in &iv.indices {
            touching[i] += 1;
        }
    }
    let mut terms = Vec::with_capacity(graph.node_count());
    let mut per_node = Vec::with_capacity(graph.node_count());
    let mut node_ace = Vec::with_capacity(graph.node_count());
    let mut node_signed = Vec::with_capacity(graph.node_count());
    for g in 0..graph.node_count() {
        let out = pass
            .taps
            .get(&graph.node_layer(g))
            .expect("graph taps match model taps")
            .flatten_rows();
        let base = out.row(0);
        let q = node_distribution(base);
        let mut node_terms = Vec::with_capacity(m);
        for k in 0..m {
            let row = out.row(k + 1);
            let identical = row.iter().zip(base).all(|(a, b)| a.to_bits() == b.to_bits());
            if identical {
                node_terms.push(EffectTerm::ZERO);
                continue;
            }
            let p = node_distribution(row);
            let kl = kl(&p, &q)?;
            let delta_l1 = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum();
            node_terms.push(EffectTerm {
                kl,
                delta_l1,
                sign: signs[k],
            });
        }
        let mut feat = vec![0.0; d];
        for (iv, t) in interventions.iter().zip(&node_terms) {
            for &i in &iv.indices {
                feat[i] += t.signed();
            }
        }
        for (f, &c) in feat.iter_mut().zip(&touching) {
            if c > 0 {
                *f /= c as f64;
            }
        }
        let denom = m.max(1) as f64;
        node_ace.push(node_terms.iter().map(EffectTerm::magnitude).sum::<f64>() / denom);
        node_signed.push(node_terms.iter().map(EffectTerm::signed).sum::<f64>() / denom);
        per_node.push(feat);
        terms.push(node_terms);
    }
    let nodes = per_node.len().max(1) as f64;
    let aggregate = (0..d)
        .map(|i| per_node.iter().map(|r| r[i]).sum::<f64>() / nodes)
        .collect();
    Ok(AttributionMap {
        shape: x.shape().to_vec(),
        predicted,
        terms,
        per_node,
        aggregate,
        node_ace,
        node_signed,
    })
}

/// Outcome of removing one unit from the final mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovalTest {
    pub unit: usize,
    pub prediction: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationMask {
    /// Binary, input-shaped.
    pub mask: Tensor,
    /// Units (feature index sets) that remain selected.
    pub kept_units: Vec<usize>,
    pub label: usize,
    /// `model(M ⊙ x) == label`, verified on the final mask.
    pub sufficient: bool,
    /// Every single-unit removal from the final mask, with its prediction.
    pub certificate: Vec<RemovalTest>,
}

impl ExplanationMask {
    /// Every tested removal flipped the prediction.
    pub fn is_one_minimal(&self) -> bool {
        self.certificate.iter().all(|t| t.prediction != self.label)
    }

    pub fn size(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v != 0.0).count()
    }
}

fn mask_from_units(d: usize, units: &[Vec<usize>], active: &[bool]) -> Vec<f64> {
    let mut covered = vec![false; d];
    for u in units {
        for &i in u {
            covered[i] = true;
        }
    }
    // features outside every unit cannot be removed
    let mut m: Vec<f64> = covered.iter().map(|&c| if c { 0.0 } else { 1.0 }).collect();
    for (u, &a) in units.iter().zip(active) {
        if a {
            for &i in u {
                m[i] = 1.0;
            }
        }
    }
    m
}

/// Greedy backward elimination over `units`: repeatedly drop the unit with the
/// lowest `|score|` whose removal keeps `model(M ⊙ x) == y`, then record every
/// single-unit removal from the fixpoint as the minimality certificate.
pub fn find_minimal_mask(
    model: &TappedModel,
    x: &Tensor,
    y: usize,
    units: &[Vec<usize>],
    scores: &[f64],
) -> Result<ExplanationMask> {
    if units.len() != scores.len() {
        return Err(Error::Shape(format!(
            "{} units but {} scores",
            units.len(),
            scores.len()
        )));
    }
    let d = x.len();
    if let Some(&bad) = units.iter().flatten().find(|&&i| i >= d) {
        return Err(Error::IndexOutOfRange { index: bad, len: d });
    }
    let predict = |masks: &[Vec<f64>]| -> Result<Vec<usize>> {
        let mut shape = vec![masks.len()];
        shape.extend_from_slice(x.shape());
        let data = masks
            .iter()
            .flat_map(|m| m.iter().zip(x.data()).map(|(a, b)| a * b))
            .collect();
        model.classify(&Tensor::new(shape, data)?)
    };
    if predict(&[vec![1.0; d]])?[0] != y {
        return Err(Error::Precondition(format!(
            "model does not predict label {y} on the unmasked input"
        )));
    }

    let mut order: Vec<usize> = (0..units.len()).collect();
    order.sort_by(|&a, &b| scores[a].abs().total_cmp(&scores[b].abs()).then(a.cmp(&b)));
    let mut active = vec![true; units.len()];
    loop {
        let candidates: Vec<usize> = order.iter().copied().filter(|&u| active[u]).collect();
        if candidates.is_empty() {
            break;
        }
        let masks: Vec<Vec<f64>> = candidates
            .iter()
            .map(|&u| {
                let mut a = active.clone();
                a[u] = false;
                mask_from_units(d, units, &a)
            })
            .collect();
        let preds = predict(&masks)?;
        match candidates.iter().zip(&preds).find(|(_, &p)| p == y) {
            Some((&u, _)) => active[u] = false,
            None => break,
        }
    }

    let kept_units: Vec<usize> = (0..units.len()).filter(|&u| active[u]).collect();
    let final_mask = mask_from_units(d, units, &active);
    let mut probes = vec![final_mask.clone()];
    for &u in &kept_units {
        let mut a = active.clone();
        a[u] = false;
        probes.push(mask_from_units(d, units, &a));
    }
    let preds = predict(&probes)?;
    let certificate = kept_units
        .iter()
        .zip(&preds[1..])
        .map(|(&unit, &prediction)| RemovalTest { unit, prediction })
        .collect();
    Ok(ExplanationMask {
        mask: Tensor::new(x.shape().to_vec(), final_mask)?,
        kept_units,
        label: y,
        sufficient: preds[0] == y,
        certificate,
    })
}
