//! Causal abstraction over tap points: layer groups (nodes), causal links,
//! composite-layer checks and DOT/JSON export.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{load_document, save_document};
use crate::error::{Error, Result};
use crate::nn::{Layer, TappedModel};
use crate::similarity::CkaMatrix;
use crate::tensor::Tensor;

pub const GRAPH_VERSION: &str = "tracer-graph/1";

/// A maximal run of consecutive tap indices with adjacent `B == 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGroup {
    pub id: usize,
    /// Tap indices `r..=s`.
    pub members: Vec<usize>,
    pub representative: usize,
}

impl LayerGroup {
    pub fn first(&self) -> usize {
        self.members[0]
    }

    pub fn last(&self) -> usize {
        *self.members.last().expect("groups are non-empty")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkKind {
    Adjacency,
    Similarity,
}

/// Directed edge between group ids, oriented by layer order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CausalLink {
    pub from: usize,
    pub to: usize,
    pub kind: LinkKind,
}

/// Partition of `0..B.len()` into maximal runs where `B[i][i+1]` holds.
pub fn group_layers(b: &[Vec<bool>]) -> Vec<LayerGroup> {
    let mut groups: Vec<LayerGroup> = Vec::new();
    for i in 0..b.len() {
        match groups.last_mut() {
            Some(g) if b[i - 1][i] => g.members.push(i),
            _ => groups.push(LayerGroup {
                id: groups.len(),
                members: vec![i],
                representative: i,
            }),
        }
    }
    groups
}

/// Adjacency links between consecutive groups plus similarity links between
/// non-consecutive groups sharing any cross pair with `B == 1`.
pub fn link_groups(groups: &[LayerGroup], b: &[Vec<bool>]) -> Vec<CausalLink> {
    let mut links = Vec::new();
    for a in 0..groups.len() {
        if a + 1 < groups.len() {
            links.push(CausalLink {
                from: a,
                to: a + 1,
                kind: LinkKind::Adjacency,
            });
        }
        for c in a + 2..groups.len() {
            let similar = groups[a]
                .members
                .iter()
                .any(|&i| groups[c].members.iter().any(|&j| b[i][j]));
            if similar {
                links.push(CausalLink {
                    from: a,
                    to: c,
                    kind: LinkKind::Similarity,
                });
            }
        }
    }
    links.sort();
    links
}

/// A signed feature contribution attached to a node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScore {
    pub feature: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalGraph {
    /// Layer index of each tap point.
    pub taps: Vec<usize>,
    /// Display name per tap point.
    pub tap_names: Vec<String>,
    pub groups: Vec<LayerGroup>,
    pub links: Vec<CausalLink>,
    /// Top contributing features per group.
    pub annotations: Vec<Vec<FeatureScore>>,
}

impl CausalGraph {
    pub fn from_binary(taps: Vec<usize>, tap_names: Vec<String>, b: &[Vec<bool>]) -> Result<Self> {
        if taps.len() != b.len() || tap_names.len() != b.len() {
            return Err(Error::Shape(format!(
                "{} taps, {} names, {}x{} matrix",
                taps.len(),
                tap_names.len(),
                b.len(),
                b.len()
            )));
        }
        if b.iter().any(|r| r.len() != b.len()) {
            return Err(Error::Shape("binary matrix must be square".into()));
        }
        let groups = group_layers(b);
        let links = link_groups(&groups, b);
        Ok(Self {
            taps,
            tap_names,
            annotations: vec![Vec::new(); groups.len()],
            groups,
            links,
        })
    }

    pub fn from_cka(cka: &CkaMatrix, model: &TappedModel) -> Result<Self> {
        let kinds = model.kinds();
        let names = cka
            .taps
            .iter()
            .map(|&t| format!("{}{t}", kinds[t].name()))
            .collect();
        Self::from_binary(cka.taps.clone(), names, &cka.binary)
    }

    /// Number of intermediate causal nodes.
    pub fn node_count(&self) -> usize {
        self.groups.len()
    }

    /// Structural key: group boundaries plus links, ignoring annotations.
    pub fn topology(&self) -> String {
        let groups: Vec<String> = self
            .groups
            .iter()
            .map(|g| {
                if g.members.len() == 1 {
                    g.first().to_string()
                } else {
                    format!("{}-{}", g.first(), g.last())
                }
            })
            .collect();
        let links: Vec<String> = self
            .links
            .iter()
            .map(|l| {
                let k = match l.kind {
                    LinkKind::Adjacency => 'a',
                    LinkKind::Similarity => 's',
                };
                format!("{k}{}>{}", l.from, l.to)
            })
            .collect();
        format!("{};{}", groups.join("|"), links.join(","))
    }

    /// Layer index whose output represents group `g`.
    pub fn node_layer(&self, g: usize) -> usize {
        self.taps[self.groups[g].last()]
    }

    pub fn is_linear_chain(&self) -> bool {
        self.links.iter().all(|l| l.kind == LinkKind::Adjacency)
    }

    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph causal {\n  rankdir=LR;\n  node [shape=box];\n");
        s.push_str("  input [label=\"input\", shape=ellipse];\n");
        for g in &self.groups {
            let members: Vec<&str> = g.members.iter().map(|&m| self.tap_names[m].as_str()).collect();
            let mut label = format!("g{}: {}", g.id, members.join(", "));
            for f in self.annotations.get(g.id).into_iter().flatten() {
                let _ = write!(label, "\\nx{} {:+.4e}", f.feature, f.score);
            }
            let _ = writeln!(s, "  g{} [label=\"{label}\"];", g.id);
        }
        s.push_str("  output [label=\"output\", shape=ellipse];\n");
        if let (Some(first), Some(last)) = (self.groups.first(), self.groups.last()) {
            let _ = writeln!(s, "  input -> g{};", first.id);
            for l in &self.links {
                match l.kind {
                    LinkKind::Adjacency => {
                        let _ = writeln!(s, "  g{} -> g{};", l.from, l.to);
                    }
                    LinkKind::Similarity => {
                        let _ = writeln!(s, "  g{} -> g{} [style=dashed];", l.from, l.to);
                    }
                }
            }
            let _ = writeln!(s, "  g{} -> output;", last.id);
        } else {
            s.push_str("  input -> output;\n");
        }
        s.push_str("}\n");
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_document(GRAPH_VERSION, self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        load_document(GRAPH_VERSION, path)
    }
}

/// Fits `y ≈ x Wᵀ + b` by least squares (minimum-norm when underdetermined)
/// and returns it as a dense layer `[q, p]`.
pub fn lstsq_bridge(x: &Tensor, y: &Tensor) -> Result<Layer> {
    let (n, p, q) = (x.rows(), x.row_len(), y.row_len());
    if y.rows() != n || n == 0 {
        return Err(Error::Shape(format!(
            "bridge fit over {n} inputs and {} targets",
            y.rows()
        )));
    }
    let a = DMatrix::from_fn(n, p + 1, |r, c| if c < p { x.row(r)[c] } else { 1.0 });
    let b = DMatrix::from_fn(n, q, |r, c| y.row(r)[c]);
    let sol = a
        .svd(true, true)
        .solve(&b, 1e-12)
        .map_err(|e| Error::Precondition(format!("least-squares bridge: {e}")))?;
    let weight = Tensor::new(vec![q, p], (0..q * p).map(|i| sol[(i % p, i / p)]).collect())?;
    let bias = Tensor::new(vec![q], (0..q).map(|j| sol[(p, j)]).collect())?;
    Ok(Layer::Dense { weight, bias })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BridgeKind {
    Identity,
    LeastSquares,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub group: usize,
    /// Layer indices of the representative tap and the group's last tap.
    pub from_layer: usize,
    pub to_layer: usize,
    pub bridge: Option<BridgeKind>,
    /// Fraction of samples whose prediction is unchanged by the replacement.
    pub agreement: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeReport {
    pub checks: Vec<GroupCheck>,
    /// Lowest per-group agreement; 1 when no group has several members.
    pub agreement: f64,
}

fn batch_shape(n: usize, per_sample: &[usize]) -> Vec<usize> {
    let mut s = vec![n];
    s.extend_from_slice(per_sample);
    s
}

/// Replaces each multi-member group by its representative followed by an
/// identity or least-squares bridge, and measures prediction agreement on
/// `samples`.
pub fn composite_check(
    model: &TappedModel,
    graph: &CausalGraph,
    samples: &Tensor,
) -> Result<CompositeReport> {
    let n = samples.rows();
    let reference = model.classify(samples)?;
    let shapes = model.layer_shapes()?;
    let depth = model.layers().len();
    let mut checks = Vec::new();
    for g in graph.groups.iter().filter(|g| g.members.len() > 1) {
        let from = graph.taps[g.first()];
        let to = graph.taps[g.last()];
        let mut check = GroupCheck {
            group: g.id,
            from_layer: from,
            to_layer: to,
            bridge: None,
            agreement: None,
            error: None,
        };
        let h_from = model.forward_range(samples, 0, from + 1);
        let h_to = model.forward_range(&h_from, from + 1, to + 1);
        let bridged = if shapes[from] == shapes[to] && h_from == h_to {
            check.bridge = Some(BridgeKind::Identity);
            Ok(h_from)
        } else {
            check.bridge = Some(BridgeKind::LeastSquares);
            lstsq_bridge(&h_from.flatten_rows(), &h_to.flatten_rows())
                .and_then(|l| l.forward(&h_from.flatten_rows()).reshape(batch_shape(n, &shapes[to])))
        };
        match bridged {
            Ok(h) => {
                let out = model.forward_range(&h, to + 1, depth).argmax_rows();
                let same = out.iter().zip(&reference).filter(|(a, b)| a == b).count();
                check.agreement = Some(same as f64 / n as f64);
            }
            Err(e) => check.error = Some(e.to_string()),
        }
        checks.push(check);
    }
    let agreement = checks
        .iter()
        .map(|c| c.agreement.unwrap_or(0.0))
        .fold(1.0, f64::min);
    Ok(CompositeReport { checks, agreement })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bm(n: usize, ones: &[(usize, usize)]) -> Vec<Vec<bool>> {
        let mut b = vec![vec![false; n]; n];
        for i in 0..n {
            b[i][i] = true;
        }
        for &(i, j) in ones {
            b[i][j] = true;
            b[j][i] = true;
        }
        b
    }

    fn members(groups: &[LayerGroup]) -> Vec<Vec<usize>> {
        groups.iter().map(|g| g.members.clone()).collect()
    }

    #[test]
    fn all_ones_is_one_group() {
        let b = vec![vec![true; 4]; 4];
        assert_eq!(members(&group_layers(&b)), vec![vec![0, 1, 2, 3]]);
    }

    #[test]
    fn broken_chain_splits() {
        let b = bm(4, &[(0, 1), (2, 3)]);
        assert_eq!(members(&group_layers(&b)), vec![vec![0, 1], vec![2, 3]]);
    }

    #[test]
    fn similarity_link_skips_a_group() {
        let b = bm(3, &[(0, 2)]);
        let g = group_layers(&b);
        let links = link_groups(&g, &b);
        assert_eq!(
            links,
            vec![
                CausalLink { from: 0, to: 1, kind: LinkKind::Adjacency },
                CausalLink { from: 0, to: 2, kind: LinkKind::Similarity },
                CausalLink { from: 1, to: 2, kind: LinkKind::Adjacency },
            ]
        );
    }

    #[test]
    fn two_groups_have_one_adjacency_link() {
        let b = bm(2, &[]);
        let g = group_layers(&b);
        assert_eq!(link_groups(&g, &b).len(), 1);
    }

    #[test]
    fn bridge_recovers_affine_map() {
        let x = Tensor::from_rows(&[
            vec![0.0, 1.0],
            vec![1.0, 0.0],
            vec![2.0, 3.0],
            vec![-1.0, 0.5],
        ]);
        // y = [x0 + 2 x1 + 1, -x0]
        let y = Tensor::from_rows(
            &x.data()
                .chunks(2)
                .map(|r| vec![r[0] + 2.0 * r[1] + 1.0, -r[0]])
                .collect::<Vec<_>>(),
        );
        let layer = lstsq_bridge(&x, &y).unwrap();
        let got = layer.forward(&x);
        for (a, b) in got.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
