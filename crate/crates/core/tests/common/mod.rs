//! Shared across integration tests: a seeded generator of small random
//! computation plans used for gradient checks.

use epgs_lab::rng;
use epgs_lab::tape::Tape;
use rand::Rng;

#[derive(Clone, Debug)]
pub enum PlanOp {
    /// Multiply by a fresh [cols, next] leaf.
    Matmul(usize),
    Add,
    Mul,
    Gelu,
    Tanh,
    Softmax,
    LayerNorm,
}

/// A randomly drawn computation plan: a chain of ops over an [r, c] input,
/// all leaves trainable, reduced to a scalar by summation.
#[derive(Clone, Debug)]
pub struct Plan {
    pub rows: usize,
    pub cols: usize,
    pub ops: Vec<PlanOp>,
}

impl Plan {
    pub fn random(seed: u64) -> Plan {
        let mut r = rng::stream(seed, "graph-plan");
        let rows = r.random_range(1..4);
        let mut cols = r.random_range(2..5);
        let depth = r.random_range(1..5);
        let mut ops = Vec::new();
        for _ in 0..depth {
            let op = match r.random_range(0..7) {
                0 => {
                    let next = r.random_range(2..5);
                    let op = PlanOp::Matmul(next);
                    cols = next;
                    op
                }
                1 => PlanOp::Add,
                2 => PlanOp::Mul,
                3 => PlanOp::Gelu,
                4 => PlanOp::Tanh,
                5 => PlanOp::Softmax,
                _ => PlanOp::LayerNorm,
            };
            ops.push(op);
        }
        Plan { rows, cols: r.random_range(2..5), ops: reorder(ops, rows, cols) }
    }

    /// Total parameter count across all leaves.
    pub fn param_count(&self) -> usize {
        self.walk_shapes().0
    }

    fn walk_shapes(&self) -> (usize, Vec<usize>) {
        let mut sizes = vec![self.rows * self.cols];
        let mut c = self.cols;
        for op in &self.ops {
            match op {
                PlanOp::Matmul(next) => {
                    sizes.push(c * next);
                    c = *next;
                }
                PlanOp::Add | PlanOp::Mul => sizes.push(self.rows * c),
                PlanOp::LayerNorm => {
                    sizes.push(c);
                    sizes.push(c);
                }
                _ => {}
            }
        }
        (sizes.iter().sum(), sizes)
    }

    /// Evaluate the plan for a flat parameter vector; optionally return the
    /// reverse-mode gradient.
    pub fn eval(&self, flat: &[f64], with_grad: bool) -> (f64, Option<Vec<f64>>) {
        let (total, sizes) = self.walk_shapes();
        assert_eq!(flat.len(), total);
        let mut tape = if with_grad { Tape::new() } else { Tape::inference() };
        let mut off = 0;
        let mut take = |tape: &mut Tape, shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            let leaf = tape.leaf(flat[off..off + n].to_vec(), shape, true);
            off += n;
            leaf
        };
        let mut x = take(&mut tape, vec![self.rows, self.cols]);
        let mut c = self.cols;
        let mut leaves = vec![x];
        for op in &self.ops {
            x = match op {
                PlanOp::Matmul(next) => {
                    let w = take(&mut tape, vec![c, *next]);
                    leaves.push(w);
                    c = *next;
                    tape.matmul(x, w)
                }
                PlanOp::Add => {
                    let b = take(&mut tape, vec![self.rows, c]);
                    leaves.push(b);
                    tape.add(x, b)
                }
                PlanOp::Mul => {
                    let b = take(&mut tape, vec![self.rows, c]);
                    leaves.push(b);
                    tape.mul(x, b)
                }
                PlanOp::Gelu => tape.gelu(x),
                PlanOp::Tanh => tape.tanh(x),
                PlanOp::Softmax => tape.row_softmax(x),
                PlanOp::LayerNorm => {
                    let g = take(&mut tape, vec![c]);
                    let b = take(&mut tape, vec![c]);
                    leaves.push(g);
                    leaves.push(b);
                    tape.layer_norm(x, g, b)
                }
            };
        }
        // The 0.01 scale keeps |f| small so finite-difference noise on
        // near-zero coordinates stays well under the relative-error floor.
        let total_sum = tape.sum(x);
        let loss = tape.scale(total_sum, 0.01);
        let value = tape.scalar_value(loss);
        if !with_grad {
            return (value, None);
        }
        tape.backward(loss).unwrap();
        let mut grad = Vec::with_capacity(total);
        for (leaf, size) in leaves.iter().zip(&sizes) {
            let g = tape.grad(*leaf).unwrap();
            assert_eq!(g.len(), *size);
            grad.extend_from_slice(g);
        }
        (value, Some(grad))
    }
}

// A softmax whose output reaches the final sum through additions alone has
// an identically-zero gradient (softmax rows sum to one), which reduces the
// relative-error check to comparing finite-difference noise against the
// floor. Keep something nonlinear after every softmax.
fn reorder(mut ops: Vec<PlanOp>, _rows: usize, _cols: usize) -> Vec<PlanOp> {
    let degenerate = |ops: &[PlanOp]| {
        ops.iter().enumerate().any(|(i, op)| {
            matches!(op, PlanOp::Softmax)
                && ops[i + 1..].iter().all(|o| matches!(o, PlanOp::Add))
        })
    };
    if degenerate(&ops) {
        ops.push(PlanOp::Gelu);
    }
    ops
}

