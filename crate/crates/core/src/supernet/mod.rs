//! A small weight-sharing supernet over vector features.
//!
//! Cell spaces read two states: the raw input and a tanh stem of it. Every
//! (edge, op) pair owns its weights; a node sums its incoming edges and the
//! head classifies the mean of the node outputs. The layer-wise space is a
//! chain of ops after the stem.

mod ops;
mod optim;
mod task;

use rand::Rng;
use unas_autodiff::{Array, Tape, Var};

use crate::categorical::CategoricalParam;
use crate::error::{Error, Result};
use crate::space::{sample_architecture, CellArch, SearchSpace, CELL_INPUTS};

pub use ops::OpKind;
pub use optim::{cosine, Adam};
pub use task::{Batch, TaskSpec, ToyTask};

/// Parameters shared by every architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    pub arrays: Vec<Array>,
}

impl Weights {
    pub fn sizes(&self) -> Vec<usize> {
        self.arrays.iter().map(Array::len).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.arrays.iter().all(Array::is_finite)
    }
}

/// How much of each (edge, op) output flows into its target.
enum Mixing {
    /// Sparse constant weights from a discrete architecture.
    Discrete(Vec<(usize, usize, f64)>),
    /// Per edge, per op scalar nodes (or `None` where the weight is zero).
    Relaxed(Vec<Vec<Option<Var>>>),
}

#[derive(Clone, Debug)]
pub struct Supernet {
    space: SearchSpace,
    dim: usize,
    classes: usize,
    ops: Vec<OpKind>,
    /// Per edge: index of its first (edge, op) slot's first array.
    slot_start: Vec<Vec<usize>>,
    /// Source state of each edge and the node (or layer) it feeds.
    edges: Vec<(usize, usize)>,
    n_arrays: usize,
}

const STEM: usize = 0;
const HEAD: usize = 2;
const FIRST_SLOT: usize = 4;

impl Supernet {
    pub fn new(space: SearchSpace, dim: usize, classes: usize) -> Result<Self> {
        space.validate()?;
        if dim == 0 || classes < 2 {
            return Err(Error::Config(
                "supernet needs dim >= 1 and classes >= 2".into(),
            ));
        }
        let ops = space
            .op_names()
            .iter()
            .map(|n| OpKind::from_name(n))
            .collect::<Result<Vec<_>>>()?;
        let edges: Vec<(usize, usize)> = match &space {
            SearchSpace::Factorized(s) => (0..s.n_nodes)
                .flat_map(|n| (0..n + CELL_INPUTS).map(move |p| (p, n)))
                .collect(),
            SearchSpace::PerEdge(s) => (0..s.n_nodes)
                .flat_map(|n| (0..n + CELL_INPUTS).map(move |p| (p, n)))
                .collect(),
            SearchSpace::Layerwise(s) => (0..s.n_layers).map(|l| (l, l)).collect(),
        };
        let mut next = FIRST_SLOT;
        let slot_start = edges
            .iter()
            .map(|_| {
                ops.iter()
                    .map(|op| {
                        let s = next;
                        next += op.param_shapes(dim).len();
                        s
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            space,
            dim,
            classes,
            ops,
            slot_start,
            edges,
            n_arrays: next,
        })
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn ops(&self) -> &[OpKind] {
        &self.ops
    }

    /// Array indices holding the weights of op `op` on edge `edge`.
    pub fn slot_arrays(&self, edge: usize, op: usize) -> std::ops::Range<usize> {
        let s = self.slot_start[edge][op];
        s..s + self.ops[op].param_shapes(self.dim).len()
    }

    pub fn init_weights<R: Rng + ?Sized>(&self, rng: &mut R) -> Weights {
        let mut arrays = Vec::with_capacity(self.n_arrays);
        arrays.extend(OpKind::LinearTanh.init(self.dim, rng));
        let bound = 1.0 / (self.dim as f64).sqrt();
        arrays.push(Array::matrix(
            self.dim,
            self.classes,
            (0..self.dim * self.classes)
                .map(|_| rng.random_range(-bound..bound))
                .collect(),
        ));
        arrays.push(Array::zeros(&[self.classes]));
        for _ in &self.edges {
            for op in &self.ops {
                arrays.extend(op.init(self.dim, rng));
            }
        }
        Weights { arrays }
    }

    /// Puts the weights on `tape`, trainable or constant.
    pub fn bind(&self, tape: &mut Tape, w: &Weights, trainable: bool) -> Vec<Var> {
        w.arrays
            .iter()
            .map(|a| {
                if trainable {
                    tape.param(a.clone())
                } else {
                    tape.constant(a.clone())
                }
            })
            .collect()
    }

    fn discrete_mixing(&self, arch: &[usize]) -> Result<Mixing> {
        self.space.check_arch(arch)?;
        let mut terms: Vec<(usize, usize, f64)> = Vec::new();
        let mut add = |edge: usize, op: usize| {
            if let Some(t) = terms.iter_mut().find(|t| t.0 == edge && t.1 == op) {
                t.2 += 1.0;
            } else {
                terms.push((edge, op, 1.0));
            }
        };
        match &self.space {
            SearchSpace::Factorized(_) => {
                let cell = CellArch::from_flat(arch);
                let mut base = 0;
                for (n, c) in cell.nodes.iter().enumerate() {
                    for j in 0..2 {
                        add(base + c.inputs[j], c.ops[j]);
                    }
                    base += n + CELL_INPUTS;
                }
            }
            SearchSpace::PerEdge(_) | SearchSpace::Layerwise(_) => {
                for (e, &op) in arch.iter().enumerate() {
                    add(e, op);
                }
            }
        }
        Ok(Mixing::Discrete(terms))
    }

    fn relaxed_mixing(&self, tape: &mut Tape, zeta: &[Var]) -> Result<Mixing> {
        let k = self.ops.len();
        let arities = self.space.site_arities();
        if zeta.len() != arities.len() {
            return Err(Error::SiteCount {
                expected: arities.len(),
                got: zeta.len(),
            });
        }
        let mut out = Vec::with_capacity(self.edges.len());
        match &self.space {
            SearchSpace::Factorized(s) => {
                for n in 0..s.n_nodes {
                    let z = &zeta[4 * n..4 * n + 4];
                    let a = tape.outer(z[0], z[2])?;
                    let b = tape.outer(z[1], z[3])?;
                    let m = tape.add(a, b)?;
                    for p in 0..n + CELL_INPUTS {
                        out.push(
                            (0..k)
                                .map(|o| tape.index(m, p * k + o).map(Some))
                                .collect::<std::result::Result<Vec<_>, _>>()?,
                        );
                    }
                }
            }
            SearchSpace::PerEdge(_) | SearchSpace::Layerwise(_) => {
                for z in zeta {
                    out.push(
                        (0..k)
                            .map(|o| tape.index(*z, o).map(Some))
                            .collect::<std::result::Result<Vec<_>, _>>()?,
                    );
                }
            }
        }
        Ok(Mixing::Relaxed(out))
    }

    fn op_out(&self, tape: &mut Tape, w: &[Var], edge: usize, op: usize, x: Var) -> Result<Var> {
        let r = self.slot_arrays(edge, op);
        self.ops[op].apply(tape, x, &w[r])
    }

    fn features(&self, tape: &mut Tape, w: &[Var], mixing: &Mixing, x: Var) -> Result<Var> {
        if w.len() != self.n_arrays {
            return Err(Error::Config(format!(
                "weights hold {} arrays, supernet needs {}",
                w.len(),
                self.n_arrays
            )));
        }
        let stem = OpKind::LinearTanh.apply(tape, x, &w[STEM..STEM + 2])?;
        let rows = tape.value(x).shape()[0];
        let zeros = Array::zeros(&[rows, self.dim]);
        // Contribution of one edge from state `input`.
        let edge_sum = |tape: &mut Tape, edge: usize, input: Var| -> Result<Option<Var>> {
            let mut acc: Option<Var> = None;
            let mut push = |tape: &mut Tape, v: Var| -> Result<()> {
                acc = Some(match acc {
                    Some(a) => tape.add(a, v)?,
                    None => v,
                });
                Ok(())
            };
            match mixing {
                Mixing::Discrete(terms) => {
                    for &(e, op, c) in terms.iter().filter(|t| t.0 == edge) {
                        if self.ops[op] == OpKind::Zero {
                            continue;
                        }
                        let o = self.op_out(tape, w, e, op, input)?;
                        let o = if c == 1.0 { o } else { tape.mul_scalar(o, c) };
                        push(tape, o)?;
                    }
                }
                Mixing::Relaxed(coef) => {
                    for (op, c) in coef[edge].iter().enumerate() {
                        let Some(c) = c else { continue };
                        if self.ops[op] == OpKind::Zero {
                            continue;
                        }
                        let o = self.op_out(tape, w, edge, op, input)?;
                        let o = tape.scale(o, *c)?;
                        push(tape, o)?;
                    }
                }
            }
            Ok(acc)
        };
        match &self.space {
            SearchSpace::Layerwise(_) => {
                let mut h = stem;
                for l in 0..self.edges.len() {
                    h = match edge_sum(tape, l, h)? {
                        Some(v) => v,
                        None => tape.constant(zeros.clone()),
                    };
                }
                Ok(h)
            }
            SearchSpace::Factorized(_) | SearchSpace::PerEdge(_) => {
                let mut states = vec![x, stem];
                let mut edge = 0;
                let n_nodes = self.edges.iter().map(|e| e.1).max().map_or(0, |m| m + 1);
                for n in 0..n_nodes {
                    let mut acc: Option<Var> = None;
                    for &state in &states[..n + CELL_INPUTS] {
                        if let Some(v) = edge_sum(tape, edge, state)? {
                            acc = Some(match acc {
                                Some(a) => tape.add(a, v)?,
                                None => v,
                            });
                        }
                        edge += 1;
                    }
                    let out = match acc {
                        Some(v) => v,
                        None => tape.constant(zeros.clone()),
                    };
                    states.push(out);
                }
                let mut pooled = states[CELL_INPUTS];
                for s in &states[CELL_INPUTS + 1..] {
                    pooled = tape.add(pooled, *s)?;
                }
                Ok(tape.mul_scalar(pooled, 1.0 / n_nodes as f64))
            }
        }
    }

    fn head(&self, tape: &mut Tape, w: &[Var], feats: Var) -> Result<Var> {
        let logits = tape.matmul(feats, w[HEAD])?;
        Ok(tape.add_row(logits, w[HEAD + 1])?)
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        if batch.dim() != self.dim {
            return Err(Error::Config(format!(
                "batch has {} features, supernet expects {}",
                batch.dim(),
                self.dim
            )));
        }
        Ok(())
    }

    /// Class logits of a discrete architecture.
    pub fn logits_discrete(
        &self,
        tape: &mut Tape,
        w: &[Var],
        arch: &[usize],
        batch: &Batch,
    ) -> Result<Var> {
        self.check_batch(batch)?;
        let mixing = self.discrete_mixing(arch)?;
        let x = tape.constant(batch.x.clone());
        let f = self.features(tape, w, &mixing, x)?;
        self.head(tape, w, f)
    }

    /// Cross-entropy of a discrete architecture; only selected ops are
    /// evaluated.
    pub fn loss_discrete(
        &self,
        tape: &mut Tape,
        w: &[Var],
        arch: &[usize],
        batch: &Batch,
    ) -> Result<Var> {
        let logits = self.logits_discrete(tape, w, arch, batch)?;
        Ok(tape.cross_entropy(logits, &batch.y)?)
    }

    /// Class logits with every op mixed by the relaxed samples `zeta`.
    pub fn logits_relaxed(
        &self,
        tape: &mut Tape,
        w: &[Var],
        zeta: &[Var],
        batch: &Batch,
    ) -> Result<Var> {
        self.check_batch(batch)?;
        let mixing = self.relaxed_mixing(tape, zeta)?;
        let x = tape.constant(batch.x.clone());
        let f = self.features(tape, w, &mixing, x)?;
        self.head(tape, w, f)
    }

    pub fn loss_relaxed(
        &self,
        tape: &mut Tape,
        w: &[Var],
        zeta: &[Var],
        batch: &Batch,
    ) -> Result<Var> {
        let logits = self.logits_relaxed(tape, w, zeta, batch)?;
        Ok(tape.cross_entropy(logits, &batch.y)?)
    }

    /// Loss value without gradients.
    pub fn eval_loss(&self, w: &Weights, arch: &[usize], batch: &Batch) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, w, false);
        let l = self.loss_discrete(&mut tape, &vars, arch, batch)?;
        Ok(tape.forward(l)?)
    }

    /// Fraction of misclassified rows.
    pub fn error_rate(&self, w: &Weights, arch: &[usize], batch: &Batch) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, w, false);
        let logits = self.logits_discrete(&mut tape, &vars, arch, batch)?;
        let v = tape.value(logits);
        let wrong = v
            .data()
            .chunks(self.classes)
            .zip(&batch.y)
            .filter(|(row, &y)| crate::categorical::argmax(row) != y)
            .count();
        Ok(wrong as f64 / batch.len() as f64)
    }

    /// Loss value and weight gradients for one architecture.
    pub fn loss_and_grad(
        &self,
        w: &Weights,
        arch: &[usize],
        batch: &Batch,
    ) -> Result<(f64, Vec<Array>)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, w, true);
        let l = self.loss_discrete(&mut tape, &vars, arch, batch)?;
        let value = tape.forward(l)?;
        let g = tape.backward()?;
        Ok((value, vars.iter().map(|v| g.wrt(*v).clone()).collect()))
    }
}

/// `train + lambda * |val - train|`, or without the absolute value.
pub fn gen_loss(train: f64, val: f64, lambda: f64, absolute: bool) -> f64 {
    let gap = val - train;
    train + lambda * if absolute { gap.abs() } else { gap }
}

/// [`gen_loss`] on the tape.
pub fn gen_loss_on_tape(
    tape: &mut Tape,
    train: Var,
    val: Var,
    lambda: f64,
    absolute: bool,
) -> Result<Var> {
    let gap = tape.sub(val, train)?;
    let gap = if absolute { tape.abs(gap) } else { gap };
    let gap = tape.mul_scalar(gap, lambda);
    Ok(tape.add(train, gap)?)
}

/// Samples `arch_samples` architectures, averages their training-loss weight
/// gradients and applies one Adam step. Returns the mean sampled loss.
#[allow(clippy::too_many_arguments)]
pub fn weight_step<R: Rng + ?Sized>(
    net: &Supernet,
    w: &mut Weights,
    opt: &mut Adam,
    lr: f64,
    sites: &[CategoricalParam],
    batch: &Batch,
    arch_samples: usize,
    rng: &mut R,
    step: usize,
) -> Result<f64> {
    let n = arch_samples.max(1);
    let mut total: Option<Vec<Array>> = None;
    let mut loss = 0.0;
    for _ in 0..n {
        let arch = sample_architecture(net.space(), sites, rng)?;
        let (l, g) = net.loss_and_grad(w, &arch, batch).map_err(|e| match e {
            Error::Tape(unas_autodiff::TapeError::NonFinite { .. }) => {
                Error::NonFiniteGradient { step }
            }
            other => other,
        })?;
        loss += l / n as f64;
        total = Some(match total {
            None => g,
            Some(acc) => acc
                .iter()
                .zip(&g)
                .map(|(a, b)| a.zip_map(b, |x, y| x + y))
                .collect(),
        });
    }
    let grads: Vec<Array> = total
        .expect("at least one sample")
        .into_iter()
        .map(|a| a.map(|x| x / n as f64))
        .collect();
    if !grads.iter().all(Array::is_finite) {
        return Err(Error::NonFiniteGradient { step });
    }
    opt.step(&mut w.arrays, &grads, lr);
    Ok(loss)
}
