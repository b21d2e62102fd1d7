//! Minimal reverse-mode automatic differentiation on a flat tape.
//!
//! Every tape node holds a vector value computed eagerly at construction,
//! so the same code path serves training and inference (bitwise-identical
//! outputs). [`Tape::backward`] walks the nodes in reverse, accumulating
//! vector-Jacobian products into per-node gradients; parameters are plain
//! leaves, so their gradients fall out of the same sweep.
//!
//! The op set is exactly what the reference predictor needs: elementwise
//! arithmetic, affine maps, concatenation, softplus/sigmoid/ReLU, layer
//! normalization, summation, and a Huber loss against a constant label.
//! Dimension agreement is asserted — callers validate model/graph shape
//! compatibility before building a tape.

/// Index of a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// Elementwise `a + b`.
    Add(NodeId, NodeId),
    /// Hadamard product `a ∘ b`.
    Mul(NodeId, NodeId),
    /// `s · a` for a constant scalar.
    Scale(NodeId, f64),
    /// `W x + b` with `W` row-major `rows×cols`.
    Linear {
        w: NodeId,
        b: NodeId,
        x: NodeId,
        rows: usize,
        cols: usize,
    },
    Concat(Vec<NodeId>),
    Softplus(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    /// `γ ∘ (x − μ)/√(σ² + ε) + β` over the whole vector.
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    /// Elementwise sum of equal-length vectors.
    Sum(Vec<NodeId>),
    /// Mean elementwise Huber loss against a constant label (scalar output).
    HuberLoss {
        pred: NodeId,
        label: Vec<f64>,
        delta: f64,
    },
}

struct Node {
    op: Op,
    value: Vec<f64>,
}

/// Gradients of one scalar output with respect to every tape node.
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> &[f64] {
        &self.grads[id.0]
    }
}

/// Numerically stable `ln(1 + eˣ)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Vec<f64>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Vec<f64>) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.len(), vb.len(), "add: length mismatch");
        let value = va.iter().zip(vb).map(|(x, y)| x + y).collect();
        self.push(Op::Add(a, b), value)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.len(), vb.len(), "mul: length mismatch");
        let value = va.iter().zip(vb).map(|(x, y)| x * y).collect();
        self.push(Op::Mul(a, b), value)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let value = self.nodes[a.0].value.iter().map(|x| s * x).collect();
        self.push(Op::Scale(a, s), value)
    }

    /// Affine map `W x + b`; `w` is row-major with shape `rows × cols`.
    pub fn linear(&mut self, w: NodeId, b: NodeId, x: NodeId, rows: usize, cols: usize) -> NodeId {
        let wv = &self.nodes[w.0].value;
        let bv = &self.nodes[b.0].value;
        let xv = &self.nodes[x.0].value;
        assert_eq!(wv.len(), rows * cols, "linear: weight shape mismatch");
        assert_eq!(bv.len(), rows, "linear: bias shape mismatch");
        assert_eq!(xv.len(), cols, "linear: input shape mismatch");
        let mut value = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &wv[r * cols..(r + 1) * cols];
            let mut s = bv[r];
            for (wi, xi) in row.iter().zip(xv) {
                s += wi * xi;
            }
            value.push(s);
        }
        self.push(Op::Linear { w, b, x, rows, cols }, value)
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat: no inputs");
        let mut value = Vec::new();
        for &p in parts {
            value.extend_from_slice(&self.nodes[p.0].value);
        }
        self.push(Op::Concat(parts.to_vec()), value)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.iter().map(|&x| softplus(x)).collect();
        self.push(Op::Softplus(a), value)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.iter().map(|&x| sigmoid(x)).collect();
        self.push(Op::Sigmoid(a), value)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.iter().map(|&x| x.max(0.0)).collect();
        self.push(Op::Relu(a), value)
    }

    /// Layer normalization over the whole vector with learned gain/bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[gain.0].value;
        let bv = &self.nodes[bias.0].value;
        assert_eq!(xv.len(), gv.len(), "layer_norm: gain shape mismatch");
        assert_eq!(xv.len(), bv.len(), "layer_norm: bias shape mismatch");
        let (hat, _, _) = layer_norm_forward(xv);
        let value = hat
            .iter()
            .zip(gv.iter().zip(bv))
            .map(|(h, (g, b))| g * h + b)
            .collect();
        self.push(Op::LayerNorm { x, gain, bias }, value)
    }

    /// Elementwise sum of one or more equal-length vectors.
    pub fn sum(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "sum: no inputs");
        let len = self.nodes[parts[0].0].value.len();
        let mut value = vec![0.0; len];
        for &p in parts {
            let pv = &self.nodes[p.0].value;
            assert_eq!(pv.len(), len, "sum: length mismatch");
            for (acc, v) in value.iter_mut().zip(pv) {
                *acc += v;
            }
        }
        self.push(Op::Sum(parts.to_vec()), value)
    }

    /// Mean elementwise Huber loss against a constant label.
    pub fn huber_loss(&mut self, pred: NodeId, label: &[f64], delta: f64) -> NodeId {
        let pv = &self.nodes[pred.0].value;
        assert_eq!(pv.len(), label.len(), "huber_loss: length mismatch");
        assert!(delta > 0.0, "huber_loss: delta must be positive");
        let n = pv.len() as f64;
        let mut total = 0.0;
        for (p, l) in pv.iter().zip(label) {
            let r = p - l;
            total += if r.abs() <= delta {
                0.5 * r * r
            } else {
                delta * (r.abs() - 0.5 * delta)
            };
        }
        self.push(
            Op::HuberLoss {
                pred,
                label: label.to_vec(),
                delta,
            },
            vec![total / n],
        )
    }

    /// Reverse sweep from a scalar root; returns gradients for every node.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward: root must be scalar"
        );
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.value.len()])
            .collect();
        grads[root.0][0] = 1.0;

        for idx in (0..=root.0).rev() {
            let out = grads[idx].clone();
            if out.iter().all(|&g| g == 0.0) {
                continue;
            }
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    for (g, &o) in grads[a.0].iter_mut().zip(&out) {
                        *g += o;
                    }
                    for (g, &o) in grads[b.0].iter_mut().zip(&out) {
                        *g += o;
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    for i in 0..out.len() {
                        let (va, vb) = (self.nodes[a.0].value[i], self.nodes[b.0].value[i]);
                        grads[a.0][i] += out[i] * vb;
                        grads[b.0][i] += out[i] * va;
                    }
                }
                Op::Scale(a, s) => {
                    for (g, &o) in grads[a.0].iter_mut().zip(&out) {
                        *g += s * o;
                    }
                }
                Op::Linear { w, b, x, rows, cols } => {
                    let xv = self.nodes[x.0].value.clone();
                    let wv = self.nodes[w.0].value.clone();
                    for r in 0..*rows {
                        let o = out[r];
                        grads[b.0][r] += o;
                        for c in 0..*cols {
                            grads[w.0][r * cols + c] += o * xv[c];
                            grads[x.0][c] += o * wv[r * cols + c];
                        }
                    }
                }
                Op::Concat(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let len = self.nodes[p.0].value.len();
                        for (g, &o) in grads[p.0].iter_mut().zip(&out[at..at + len]) {
                            *g += o;
                        }
                        at += len;
                    }
                }
                Op::Softplus(a) => {
                    for i in 0..out.len() {
                        grads[a.0][i] += out[i] * sigmoid(self.nodes[a.0].value[i]);
                    }
                }
                Op::Sigmoid(a) => {
                    for i in 0..out.len() {
                        let s = self.nodes[idx].value[i];
                        grads[a.0][i] += out[i] * s * (1.0 - s);
                    }
                }
                Op::Relu(a) => {
                    for i in 0..out.len() {
                        if self.nodes[a.0].value[i] > 0.0 {
                            grads[a.0][i] += out[i];
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias } => {
                    let xv = &self.nodes[x.0].value;
                    let gv = self.nodes[gain.0].value.clone();
                    let (hat, _, s) = layer_norm_forward(xv);
                    let n = xv.len() as f64;
                    // d/dx̂ through the gain, then the two mean corrections.
                    let dhat: Vec<f64> = out.iter().zip(&gv).map(|(o, g)| o * g).collect();
                    let mean_dhat = dhat.iter().sum::<f64>() / n;
                    let mean_dhat_hat =
                        dhat.iter().zip(&hat).map(|(d, h)| d * h).sum::<f64>() / n;
                    for i in 0..xv.len() {
                        grads[x.0][i] += (dhat[i] - mean_dhat - hat[i] * mean_dhat_hat) / s;
                        grads[gain.0][i] += out[i] * hat[i];
                        grads[bias.0][i] += out[i];
                    }
                }
                Op::Sum(parts) => {
                    for &p in parts {
                        for (g, &o) in grads[p.0].iter_mut().zip(&out) {
                            *g += o;
                        }
                    }
                }
                Op::HuberLoss { pred, label, delta } => {
                    let n = label.len() as f64;
                    let scale = out[0] / n;
                    for i in 0..label.len() {
                        let r = self.nodes[pred.0].value[i] - label[i];
                        let d = if r.abs() <= *delta {
                            r
                        } else {
                            delta * r.signum()
                        };
                        grads[pred.0][i] += scale * d;
                    }
                }
            }
        }
        Gradients { grads }
    }
}

/// Shared forward kernel for layer normalization: returns the normalized
/// vector, the mean, and the scale `√(σ² + ε)`.
fn layer_norm_forward(x: &[f64]) -> (Vec<f64>, f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let s = (var + LAYER_NORM_EPS).sqrt();
    (x.iter().map(|v| (v - mean) / s).collect(), mean, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of a scalar-valued tape program with
    /// respect to every input leaf, compared against the analytic sweep.
    fn fd_check(build: impl Fn(&mut Tape, &[Vec<f64>]) -> (Vec<NodeId>, NodeId), inputs: &[Vec<f64>]) {
        let eval = |inputs: &[Vec<f64>]| -> f64 {
            let mut tape = Tape::new();
            let (_, out) = build(&mut tape, inputs);
            assert_eq!(tape.value(out).len(), 1);
            tape.value(out)[0]
        };

        let mut tape = Tape::new();
        let (leaves, out) = build(&mut tape, inputs);
        let grads = tape.backward(out);

        let h = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            for i in 0..inputs[li].len() {
                let mut plus = inputs.to_vec();
                plus[li][i] += h;
                let mut minus = inputs.to_vec();
                minus[li][i] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let analytic = grads.get(*leaf)[i];
                let denom = numeric.abs().max(analytic.abs()).max(1e-8);
                let rel = (numeric - analytic).abs() / denom;
                assert!(
                    rel < 1e-5,
                    "leaf {li} coord {i}: analytic {analytic:e}, numeric {numeric:e}"
                );
            }
        }
    }

    fn random_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()
    }

    /// Reduce any vector node to a scalar through a fixed linear probe so
    /// the finite-difference helper exercises full Jacobians.
    fn probe(tape: &mut Tape, x: NodeId, seed: u64) -> NodeId {
        let n = tape.value(x).len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = tape.leaf(random_vec(&mut rng, n));
        let b = tape.leaf(vec![0.0]);
        tape.linear(w, b, x, 1, n)
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let a = random_vec(&mut rng, 5);
        let b = random_vec(&mut rng, 5);
        fd_check(
            |tape, inputs| {
                let a = tape.leaf(inputs[0].clone());
                let b = tape.leaf(inputs[1].clone());
                let sum = tape.add(a, b);
                let prod = tape.mul(sum, a);
                let scaled = tape.scale(prod, 0.37);
                (vec![a, b], probe(tape, scaled, 1))
            },
            &[a, b],
        );
    }

    #[test]
    fn activations_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        // Keep ReLU inputs away from the kink at zero.
        let x: Vec<f64> = (0..6)
            .map(|_| {
                let v: f64 = rng.gen_range(0.1..1.5);
                if rng.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        fd_check(
            |tape, inputs| {
                let x = tape.leaf(inputs[0].clone());
                let sp = tape.softplus(x);
                let sg = tape.sigmoid(sp);
                let r = tape.relu(sg);
                (vec![x], probe(tape, r, 2))
            },
            &[x.clone()],
        );
        fd_check(
            |tape, inputs| {
                let x = tape.leaf(inputs[0].clone());
                let r = tape.relu(x);
                (vec![x], probe(tape, r, 3))
            },
            &[x],
        );
    }

    #[test]
    fn linear_and_concat_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        let w = random_vec(&mut rng, 12);
        let b = random_vec(&mut rng, 3);
        let x = random_vec(&mut rng, 4);
        let y = random_vec(&mut rng, 2);
        fd_check(
            |tape, inputs| {
                let w = tape.leaf(inputs[0].clone());
                let b = tape.leaf(inputs[1].clone());
                let x = tape.leaf(inputs[2].clone());
                let y = tape.leaf(inputs[3].clone());
                let lin = tape.linear(w, b, x, 3, 4);
                let cat = tape.concat(&[lin, y]);
                (vec![w, b, x, y], probe(tape, cat, 4))
            },
            &[w, b, x, y],
        );
    }

    #[test]
    fn layer_norm_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let x = random_vec(&mut rng, 6);
        let gain = random_vec(&mut rng, 6);
        let bias = random_vec(&mut rng, 6);
        fd_check(
            |tape, inputs| {
                let x = tape.leaf(inputs[0].clone());
                let g = tape.leaf(inputs[1].clone());
                let b = tape.leaf(inputs[2].clone());
                let ln = tape.layer_norm(x, g, b);
                (vec![x, g, b], probe(tape, ln, 5))
            },
            &[x, gain, bias],
        );
    }

    #[test]
    fn sum_and_huber_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(74);
        let a = random_vec(&mut rng, 4);
        let b = random_vec(&mut rng, 4);
        let c = random_vec(&mut rng, 4);
        let label = random_vec(&mut rng, 4);
        fd_check(
            |tape, inputs| {
                let a = tape.leaf(inputs[0].clone());
                let b = tape.leaf(inputs[1].clone());
                let c = tape.leaf(inputs[2].clone());
                let s = tape.sum(&[a, b, c]);
                let loss = tape.huber_loss(s, &[0.3, -2.5, 0.0, 4.0], 1.0);
                (vec![a, b, c], loss)
            },
            &[a, b, c],
        );
        // Also probe with the label far away so the linear branch is hit.
        fd_check(
            |tape, inputs| {
                let a = tape.leaf(inputs[0].clone());
                let loss = tape.huber_loss(a, &[10.0, -10.0, 10.0, -10.0], 1.0);
                (vec![a], loss)
            },
            &[label],
        );
    }

    #[test]
    fn huber_matches_hand_values() {
        let mut tape = Tape::new();
        // |r| = 0.5 below δ=1: quadratic branch r²/2 = 0.125.
        let p = tape.leaf(vec![0.5]);
        let l = tape.huber_loss(p, &[0.0], 1.0);
        assert_eq!(tape.value(l)[0], 0.125);
        // r = 2 above δ=1: linear branch δ(|r|−δ/2) = 1.5.
        let p = tape.leaf(vec![2.0]);
        let l = tape.huber_loss(p, &[0.0], 1.0);
        assert_eq!(tape.value(l)[0], 1.5);
        // Zero at pred = label, with zero gradient.
        let p = tape.leaf(vec![0.7, -0.3]);
        let l = tape.huber_loss(p, &[0.7, -0.3], 1.0);
        assert_eq!(tape.value(l)[0], 0.0);
        let grads = tape.backward(l);
        assert_eq!(grads.get(p), &[0.0, 0.0]);
    }

    #[test]
    fn softplus_is_stable_at_extremes() {
        assert_eq!(softplus(800.0), 800.0);
        assert_eq!(softplus(-800.0), 0.0);
        assert!((softplus(0.0) - 2.0f64.ln()).abs() < 1e-15);
        assert_eq!(sigmoid(800.0), 1.0);
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(0.0), 0.5);
    }

    #[test]
    fn unreached_nodes_get_zero_gradient() {
        let mut tape = Tape::new();
        let used = tape.leaf(vec![1.0, 2.0]);
        let unused = tape.leaf(vec![3.0]);
        let loss = tape.huber_loss(used, &[0.0, 0.0], 1.0);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(unused), &[0.0]);
        assert!(grads.get(used).iter().any(|&g| g != 0.0));
    }
}
