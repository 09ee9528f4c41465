//! Per-sample explanation: interventions, layer similarity, causal graph,
//! attribution and minimal mask in one call.

use serde::{Deserialize, Serialize};

use crate::attribution::{ace, find_minimal_mask, AttributionMap, ExplanationMask};
use crate::error::{Error, Result};
use crate::graph::{CausalGraph, FeatureScore};
use crate::intervention::{generate, Baseline, InterventionPlan};
use crate::nn::TappedModel;
use crate::similarity::{build_cka_matrix, ActivationSet, CkaMatrix, Kernel};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainConfig {
    pub plan: InterventionPlan,
    pub epsilon: f64,
    pub kernel: Kernel,
    /// Features annotated per graph node.
    pub top_features: usize,
    pub find_mask: bool,
}

#[derive(Debug, Clone)]
pub struct Explanation {
    pub predicted: usize,
    pub cka: CkaMatrix,
    pub graph: CausalGraph,
    pub attribution: AttributionMap,
    pub mask: Option<ExplanationMask>,
}

/// Runs the full analysis for one sample `x` (no batch axis).
pub fn explain_sample(
    model: &TappedModel,
    x: &Tensor,
    baseline: &Baseline,
    config: &ExplainConfig,
    seed: u64,
) -> Result<Explanation> {
    if x.shape() != model.input_shape() {
        return Err(Error::Shape(format!(
            "sample shape {:?} vs model input {:?}",
            x.shape(),
            model.input_shape()
        )));
    }
    let interventions = generate(x, &config.plan, baseline, seed)?;
    let mut rows = vec![x.clone()];
    rows.extend(interventions.iter().map(|iv| iv.sample.clone()));
    let pass = model.forward(&Tensor::stack(&rows)?)?;
    let acts = ActivationSet::from_forward(&pass)?;
    let cka = build_cka_matrix(&acts, config.epsilon, config.kernel)?;
    let mut graph = CausalGraph::from_cka(&cka, model)?;
    let attribution = ace(model, &graph, x, &interventions)?;
    for g in 0..graph.node_count() {
        graph.annotations[g] = attribution
            .top_features(g, config.top_features)
            .into_iter()
            .map(|(feature, score)| FeatureScore { feature, score })
            .collect();
    }
    let predicted = attribution.predicted;
    let mask = if config.find_mask {
        let units: Vec<Vec<usize>> = interventions.into_iter().map(|iv| iv.indices).collect();
        Some(find_minimal_mask(
            model,
            x,
            predicted,
            &units,
            &attribution.unit_scores(),
        )?)
    } else {
        None
    };
    Ok(Explanation {
        predicted,
        cka,
        graph,
        attribution,
        mask,
    })
}
