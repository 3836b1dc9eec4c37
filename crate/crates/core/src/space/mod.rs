//! Architecture search spaces: the factorized cell, the plain per-edge cell
//! and the layer-wise chain.
//!
//! An architecture is a flat vector of choice indices, one per distribution
//! site, in the order returned by [`SearchSpace::site_arities`].

mod cell;
mod dot;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::categorical::{sample_onehot, CategoricalParam};
use crate::error::{Error, Result};

pub use cell::{CellArch, EdgeAssignment, NodeChoice};
pub use dot::export_dot;

/// Number of cell inputs available to every node.
pub const CELL_INPUTS: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorizedCellSpec {
    pub n_nodes: usize,
    pub op_names: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerEdgeSpec {
    pub n_nodes: usize,
    pub op_names: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerwiseSpec {
    pub n_layers: usize,
    pub op_names: Vec<String>,
}

/// Default toy cell operations; `zero` sits at index 0.
pub fn default_cell_ops() -> Vec<String> {
    ["zero", "identity", "linear_tanh", "bottleneck", "wide_mlp"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

/// Layer choices of the mobile search space; `skip` removes the layer.
pub fn default_layer_ops() -> Vec<String> {
    [
        "skip", "mb3_k3", "mb3_k5", "mb3_k7", "mb6_k3", "mb6_k5", "mb6_k7",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

impl Default for FactorizedCellSpec {
    fn default() -> Self {
        Self {
            n_nodes: 4,
            op_names: default_cell_ops(),
        }
    }
}

impl Default for LayerwiseSpec {
    fn default() -> Self {
        Self {
            n_layers: 8,
            op_names: default_layer_ops(),
        }
    }
}

impl LayerwiseSpec {
    /// The full-size 21-layer mobile space.
    pub fn mobile21() -> Self {
        Self {
            n_layers: 21,
            op_names: default_layer_ops(),
        }
    }
}

impl FactorizedCellSpec {
    pub fn n_ops(&self) -> usize {
        self.op_names.len()
    }

    /// States node `n` may read: the cell inputs and every earlier node.
    pub fn predecessors(&self, node: usize) -> usize {
        node + CELL_INPUTS
    }
}

impl PerEdgeSpec {
    pub fn n_ops(&self) -> usize {
        self.op_names.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SearchSpace {
    Factorized(FactorizedCellSpec),
    PerEdge(PerEdgeSpec),
    Layerwise(LayerwiseSpec),
}

impl SearchSpace {
    pub fn op_names(&self) -> &[String] {
        match self {
            Self::Factorized(s) => &s.op_names,
            Self::PerEdge(s) => &s.op_names,
            Self::Layerwise(s) => &s.op_names,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (units, what) = match self {
            Self::Factorized(s) => (s.n_nodes, "n_nodes"),
            Self::PerEdge(s) => (s.n_nodes, "n_nodes"),
            Self::Layerwise(s) => (s.n_layers, "n_layers"),
        };
        if units == 0 {
            return Err(Error::Config(format!("{what} must be at least 1")));
        }
        if self.op_names().len() < 2 {
            return Err(Error::Config("need at least two operations".into()));
        }
        Ok(())
    }

    /// Site identifiers paired with their arities.
    pub fn site_layout(&self) -> Vec<(String, usize)> {
        match self {
            Self::Factorized(s) => (0..s.n_nodes)
                .flat_map(|n| {
                    let p = s.predecessors(n);
                    let k = s.n_ops();
                    [
                        (format!("node{n}.input_a"), p),
                        (format!("node{n}.input_b"), p),
                        (format!("node{n}.op_a"), k),
                        (format!("node{n}.op_b"), k),
                    ]
                })
                .collect(),
            Self::PerEdge(s) => (0..s.n_nodes)
                .flat_map(|n| {
                    (0..n + CELL_INPUTS).map(move |src| (format!("node{n}.edge{src}"), s.n_ops()))
                })
                .collect(),
            Self::Layerwise(s) => (0..s.n_layers)
                .map(|l| (format!("layer{l}"), s.op_names.len()))
                .collect(),
        }
    }

    pub fn site_arities(&self) -> Vec<usize> {
        self.site_layout().into_iter().map(|(_, k)| k).collect()
    }

    /// Distribution sites with uniform logits.
    pub fn uniform_sites(&self) -> Vec<CategoricalParam> {
        self.site_layout()
            .into_iter()
            .map(|(id, k)| {
                CategoricalParam::uniform(id, k).expect("arity >= 2 checked by validate")
            })
            .collect()
    }

    pub fn check_sites(&self, sites: &[CategoricalParam]) -> Result<()> {
        let layout = self.site_layout();
        if layout.len() != sites.len() {
            return Err(Error::SiteCount {
                expected: layout.len(),
                got: sites.len(),
            });
        }
        for ((id, k), s) in layout.iter().zip(sites) {
            if s.k() != *k {
                return Err(Error::SiteArity {
                    site: id.clone(),
                    expected: *k,
                    got: s.k(),
                });
            }
        }
        Ok(())
    }

    pub fn check_arch(&self, arch: &[usize]) -> Result<()> {
        let layout = self.site_layout();
        if layout.len() != arch.len() {
            return Err(Error::SiteCount {
                expected: layout.len(),
                got: arch.len(),
            });
        }
        for ((_, k), &c) in layout.iter().zip(arch) {
            if c >= *k {
                return Err(Error::BadChoice { index: c, k: *k });
            }
        }
        Ok(())
    }

    /// Penalty on coincident (input, op) pairs; zero outside the factorized
    /// space.
    pub fn arch_penalty(&self, arch: &[usize], lambda: f64) -> f64 {
        match self {
            Self::Factorized(_) => CellArch::from_flat(arch).duplicate_pairs() as f64 * lambda,
            _ => 0.0,
        }
    }

    /// Name-to-index map for serialization.
    pub fn to_map(&self, arch: &[usize]) -> BTreeMap<String, usize> {
        self.site_layout()
            .into_iter()
            .map(|(id, _)| id)
            .zip(arch.iter().copied())
            .collect()
    }

    pub fn to_json(&self, arch: &[usize]) -> String {
        serde_json::to_string_pretty(&self.to_map(arch)).expect("map of integers serializes")
    }

    /// Parses a site-to-index JSON map. Parse errors carry line and column.
    pub fn arch_from_json(&self, text: &str) -> Result<Vec<usize>> {
        let mut map: BTreeMap<String, usize> = serde_json::from_str(text)
            .map_err(|e| Error::Parse(format!("line {} column {}: {e}", e.line(), e.column())))?;
        let mut arch = Vec::new();
        for (id, k) in self.site_layout() {
            let c = map
                .remove(&id)
                .ok_or_else(|| Error::Parse(format!("missing site `{id}`")))?;
            if c >= k {
                return Err(Error::Parse(format!(
                    "site `{id}` has choice {c}, arity {k}"
                )));
            }
            arch.push(c);
        }
        if let Some(extra) = map.keys().next() {
            return Err(Error::Parse(format!("unknown site `{extra}`")));
        }
        Ok(arch)
    }
}

/// One independent Gumbel-max draw per site.
pub fn sample_architecture<R: Rng + ?Sized>(
    space: &SearchSpace,
    sites: &[CategoricalParam],
    rng: &mut R,
) -> Result<Vec<usize>> {
    space.check_sites(sites)?;
    sites
        .iter()
        .map(|s| sample_onehot(s, rng).map(|d| d.onehot.index))
        .collect()
}

/// Result of taking the most probable choice at every site.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Extraction {
    pub arch: Vec<usize>,
    /// Sites whose top probability was shared; resolved to the lowest index.
    pub ties: Vec<String>,
}

pub fn extract_final(sites: &[CategoricalParam]) -> Extraction {
    let mut ties = Vec::new();
    let arch = sites
        .iter()
        .map(|s| {
            let best = s.argmax();
            let top = s.logits()[best];
            if s.logits().iter().filter(|&&l| l == top).count() > 1 {
                ties.push(s.site_id().to_string());
            }
            best
        })
        .collect();
    Extraction { arch, ties }
}
