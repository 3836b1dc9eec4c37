use std::fmt::Write;

use super::CellArch;

fn state_name(idx: usize) -> String {
    match idx {
        0 => "c_prev_prev".into(),
        1 => "c_prev".into(),
        n => format!("n{}", n - 2),
    }
}

/// Graphviz digraph of a factorized cell. Each node gets one line holding
/// its two labelled in-edges.
pub fn export_dot(arch: &CellArch, op_names: &[String]) -> String {
    let mut out = String::from("digraph cell {\n");
    for (n, c) in arch.nodes.iter().enumerate() {
        let target = format!("n{n}");
        let edges: Vec<String> = (0..2)
            .map(|j| {
                format!(
                    "{} -> {} [label=\"{}\"];",
                    state_name(c.inputs[j]),
                    target,
                    op_names[c.ops[j]]
                )
            })
            .collect();
        writeln!(out, "  {}", edges.join(" ")).expect("writing to a String");
    }
    out.push_str("}\n");
    out
}
