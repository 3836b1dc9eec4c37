use serde::Serialize;

use super::CELL_INPUTS;

/// The two (input, op) selections of one node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct NodeChoice {
    pub inputs: [usize; 2],
    pub ops: [usize; 2],
}

impl NodeChoice {
    /// Both pairs select the same input with the same operation.
    pub fn is_duplicate(&self) -> bool {
        self.inputs[0] == self.inputs[1] && self.ops[0] == self.ops[1]
    }
}

/// A factorized cell decoded from its flat site vector
/// `[input_a, input_b, op_a, op_b]` per node.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CellArch {
    pub nodes: Vec<NodeChoice>,
}

impl CellArch {
    pub fn from_flat(arch: &[usize]) -> Self {
        assert_eq!(
            arch.len() % 4,
            0,
            "factorized architecture has 4 sites per node"
        );
        Self {
            nodes: arch
                .chunks(4)
                .map(|c| NodeChoice {
                    inputs: [c[0], c[1]],
                    ops: [c[2], c[3]],
                })
                .collect(),
        }
    }

    pub fn to_flat(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .flat_map(|n| [n.inputs[0], n.inputs[1], n.ops[0], n.ops[1]])
            .collect()
    }

    pub fn duplicate_pairs(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_duplicate()).count()
    }

    pub fn to_edge_assignment(&self, n_ops: usize) -> EdgeAssignment {
        EdgeAssignment {
            nodes: self
                .nodes
                .iter()
                .enumerate()
                .map(|(n, c)| {
                    let mut m = vec![vec![0u8; n_ops]; n + CELL_INPUTS];
                    for j in 0..2 {
                        m[c.inputs[j]][c.ops[j]] += 1;
                    }
                    m
                })
                .collect(),
        }
    }
}

/// Per node, a (predecessor x op) count matrix: `i (x) o + i' (x) o'`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct EdgeAssignment {
    pub nodes: Vec<Vec<Vec<u8>>>,
}

impl EdgeAssignment {
    pub fn node_mass(&self, node: usize) -> usize {
        self.nodes[node].iter().flatten().map(|&v| v as usize).sum()
    }
}
