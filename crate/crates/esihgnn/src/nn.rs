//! Standard neural primitives on top of the tape: linear maps, a GRU
//! cell, and cross-entropy.
//!
//! The GRU follows the fixed convention
//!
//! ```text
//! z  = sigmoid(W_z x + U_z h + b_z)
//! r  = sigmoid(W_r x + U_r h + b_r)
//! n  = tanh(W_n x + r ∘ (U_n h) + b_n)
//! h' = (1 - z) ∘ n + z ∘ h
//! ```
//!
//! With all parameters zero this collapses to `h' = 0.5 · h`, which the
//! tests pin down.

use crate::error::{Error, Result};
use crate::tape::{NodeId, ParamId, ParamStore, Tape};
use crate::tensor::{Real, Tensor};
use rand::Rng;

/// `y = Wx (+ b)`.
pub fn linear<T: Real>(
    tape: &mut Tape<T>,
    w: NodeId,
    b: Option<NodeId>,
    x: NodeId,
) -> Result<NodeId> {
    let y = tape.matvec(w, x)?;
    match b {
        Some(b) => tape.add(y, b),
        None => Ok(y),
    }
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy<T: Real>(
    tape: &mut Tape<T>,
    logits: NodeId,
    label: usize,
) -> Result<NodeId> {
    tape.nll_loss(logits, label)
}

/// Parameter set for one GRU cell: gate matrices and biases for the
/// update gate, reset gate, and candidate state.
#[derive(Clone, Debug)]
pub struct GruParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_update: ParamId,
    pub u_update: ParamId,
    pub b_update: ParamId,
    pub w_reset: ParamId,
    pub u_reset: ParamId,
    pub b_reset: ParamId,
    pub w_cand: ParamId,
    pub u_cand: ParamId,
    pub b_cand: ParamId,
}

impl GruParams {
    pub fn init<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        let wi = |store: &mut ParamStore<T>, rng: &mut R, n: &str| {
            store.register(format!("{name}.{n}"), init_matrix(hidden_dim, input_dim, rng))
        };
        let wh = |store: &mut ParamStore<T>, rng: &mut R, n: &str| {
            store.register(format!("{name}.{n}"), init_matrix(hidden_dim, hidden_dim, rng))
        };
        let bz = |store: &mut ParamStore<T>, n: &str| {
            store.register(format!("{name}.{n}"), Tensor::zeros(vec![hidden_dim]))
        };
        let w_update = wi(store, rng, "w_update");
        let u_update = wh(store, rng, "u_update");
        let b_update = bz(store, "b_update");
        let w_reset = wi(store, rng, "w_reset");
        let u_reset = wh(store, rng, "u_reset");
        let b_reset = bz(store, "b_reset");
        let w_cand = wi(store, rng, "w_cand");
        let u_cand = wh(store, rng, "u_cand");
        let b_cand = bz(store, "b_cand");
        GruParams {
            input_dim,
            hidden_dim,
            w_update,
            u_update,
            b_update,
            w_reset,
            u_reset,
            b_reset,
            w_cand,
            u_cand,
            b_cand,
        }
    }

    pub fn param_ids(&self) -> [ParamId; 9] {
        [
            self.w_update,
            self.u_update,
            self.b_update,
            self.w_reset,
            self.u_reset,
            self.b_reset,
            self.w_cand,
            self.u_cand,
            self.b_cand,
        ]
    }
}

/// Tape nodes for one GRU parameter set, created once per forward pass.
pub struct GruNodes {
    pub hidden_dim: usize,
    pub input_dim: usize,
    w_update: NodeId,
    u_update: NodeId,
    b_update: NodeId,
    w_reset: NodeId,
    u_reset: NodeId,
    b_reset: NodeId,
    w_cand: NodeId,
    u_cand: NodeId,
    b_cand: NodeId,
}

impl GruNodes {
    pub fn bring<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>, p: &GruParams) -> Self {
        GruNodes {
            hidden_dim: p.hidden_dim,
            input_dim: p.input_dim,
            w_update: tape.param(store, p.w_update),
            u_update: tape.param(store, p.u_update),
            b_update: tape.param(store, p.b_update),
            w_reset: tape.param(store, p.w_reset),
            u_reset: tape.param(store, p.u_reset),
            b_reset: tape.param(store, p.b_reset),
            w_cand: tape.param(store, p.w_cand),
            u_cand: tape.param(store, p.u_cand),
            b_cand: tape.param(store, p.b_cand),
        }
    }
}

/// One GRU step. `input` has the cell's input dimension, `hidden` its
/// hidden dimension; callers assign roles.
pub fn gru_cell<T: Real>(
    tape: &mut Tape<T>,
    g: &GruNodes,
    input: NodeId,
    hidden: NodeId,
) -> Result<NodeId> {
    if tape.value(input).len() != g.input_dim {
        return Err(Error::Shape {
            op: "gru_cell",
            detail: format!("input len {} != input_dim {}", tape.value(input).len(), g.input_dim),
        });
    }
    if tape.value(hidden).len() != g.hidden_dim {
        return Err(Error::Shape {
            op: "gru_cell",
            detail: format!(
                "hidden len {} != hidden_dim {}",
                tape.value(hidden).len(),
                g.hidden_dim
            ),
        });
    }
    let gate = |tape: &mut Tape<T>, w, u, b| -> Result<NodeId> {
        let wx = tape.matvec(w, input)?;
        let uh = tape.matvec(u, hidden)?;
        let s = tape.add(wx, uh)?;
        tape.add(s, b)
    };
    let z_pre = gate(tape, g.w_update, g.u_update, g.b_update)?;
    let z = tape.sigmoid(z_pre)?;
    let r_pre = gate(tape, g.w_reset, g.u_reset, g.b_reset)?;
    let r = tape.sigmoid(r_pre)?;

    let wx = tape.matvec(g.w_cand, input)?;
    let uh = tape.matvec(g.u_cand, hidden)?;
    let ruh = tape.mul(r, uh)?;
    let pre = tape.add(wx, ruh)?;
    let pre = tape.add(pre, g.b_cand)?;
    let n = tape.tanh(pre)?;

    let ones = tape.leaf(Tensor::vector(vec![T::one(); g.hidden_dim]));
    let one_minus_z = tape.sub(ones, z)?;
    let a = tape.mul(one_minus_z, n)?;
    let b = tape.mul(z, hidden)?;
    tape.add(a, b)
}

/// Uniform `±sqrt(1/fan_in)` matrix init. Values are drawn in f64 so the
/// f32 and f64 instantiations of one seed agree up to rounding.
pub fn init_matrix<T: Real, R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor<T> {
    let bound = (1.0 / cols as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::matrix(rows, cols, data).expect("sized buffer")
}

/// Uniform `(lo, hi)` vector init.
pub fn init_vector<T: Real, R: Rng>(n: usize, lo: f64, hi: f64, rng: &mut R) -> Tensor<T> {
    Tensor::vector((0..n).map(|_| T::from_f64(rng.gen_range(lo..hi))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_gru(store: &mut ParamStore<f64>, input_dim: usize, hidden_dim: usize) -> GruParams {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = GruParams::init(store, "g", input_dim, hidden_dim, &mut rng);
        let _ = &mut p;
        for id in p.param_ids() {
            let shape = store.value(id).shape().to_vec();
            *store.value_mut(id) = Tensor::zeros(shape);
        }
        p
    }

    #[test]
    fn linear_identity_passthrough() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(Tensor::identity(3));
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = linear(&mut tape, w, None, x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn linear_zero_map_returns_bias() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(Tensor::zeros(vec![2, 3]));
        let b = tape.leaf(Tensor::vector(vec![5.0, 5.0]));
        let x = tape.leaf(Tensor::vector(vec![9.0, -1.0, 4.0]));
        let y = linear(&mut tape, w, Some(b), x).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, 5.0]);
    }

    #[test]
    fn linear_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let w: Tensor<f64> = init_matrix(4, 4, &mut rng);
        let b: Tensor<f64> = init_vector(4, -1.0, 1.0, &mut rng);
        let x: Tensor<f64> = init_vector(4, -1.0, 1.0, &mut rng);

        // naive triple-loop reference
        let mut expect = vec![0.0; 4];
        for r in 0..4 {
            for c in 0..4 {
                expect[r] += w.at2(r, c) * x.at(c);
            }
            expect[r] += b.at(r);
        }

        let mut tape = Tape::new();
        let wn = tape.leaf(w);
        let bn = tape.leaf(b);
        let xn = tape.leaf(x);
        let y = linear(&mut tape, wn, Some(bn), xn).unwrap();
        for i in 0..4 {
            assert!((tape.value(y).at(i) - expect[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_rejects_dim_mismatch() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(Tensor::zeros(vec![2, 3]));
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(linear(&mut tape, w, None, x).is_err());
    }

    #[test]
    fn softmax_symmetry_and_singleton() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::vector(vec![0.0, 0.0]));
        let s = tape.softmax(a).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);

        let one = tape.leaf(Tensor::vector(vec![3.7]));
        let s1 = tape.softmax(one).unwrap();
        assert_eq!(tape.value(s1).data(), &[1.0]);
    }

    #[test]
    fn softmax_shift_invariance_and_order() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::vector(vec![0.3, -1.2, 2.5]));
        let b = tape.leaf(Tensor::vector(vec![100.3, 98.8, 102.5]));
        let sa = tape.softmax(a).unwrap();
        let sb = tape.softmax(b).unwrap();
        for i in 0..3 {
            assert!((tape.value(sa).at(i) - tape.value(sb).at(i)).abs() < 1e-6);
        }
        assert_eq!(tape.value(sa).argmax(), 2);
    }

    #[test]
    fn gru_zero_params_halves_hidden() {
        let mut store = ParamStore::<f64>::new();
        let p = zero_gru(&mut store, 3, 4);
        let mut tape = Tape::new();
        let g = GruNodes::bring(&mut tape, &store, &p);
        let input = tape.leaf(Tensor::vector(vec![1.0, -2.0, 0.5]));
        let hidden = tape.leaf(Tensor::vector(vec![2.0, 4.0, -6.0, 8.0]));
        let h2 = gru_cell(&mut tape, &g, input, hidden).unwrap();
        assert_eq!(tape.value(h2).data(), &[1.0, 2.0, -3.0, 4.0]);

        let zero_hidden = tape.leaf(Tensor::zeros(vec![4]));
        let h3 = gru_cell(&mut tape, &g, input, zero_hidden).unwrap();
        assert_eq!(tape.value(h3).data(), &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn gru_matches_scalar_oracle() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = GruParams::init(&mut store, "g", 3, 4, &mut rng);
        let input = Tensor::vector(vec![0.3, -0.7, 1.1]);
        let hidden = Tensor::vector(vec![0.2, -0.4, 0.9, -1.3]);

        // elementwise 64-bit reference, written independently of the tape
        let mv = |w: &Tensor<f64>, x: &Tensor<f64>| -> Vec<f64> {
            (0..w.rows())
                .map(|r| (0..w.cols()).map(|c| w.at2(r, c) * x.at(c)).sum())
                .collect()
        };
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let wx = mv(store.value(p.w_update), &input);
        let uh = mv(store.value(p.u_update), &hidden);
        let z: Vec<f64> = (0..4).map(|i| sig(wx[i] + uh[i] + store.value(p.b_update).at(i))).collect();
        let wx = mv(store.value(p.w_reset), &input);
        let uh = mv(store.value(p.u_reset), &hidden);
        let r: Vec<f64> = (0..4).map(|i| sig(wx[i] + uh[i] + store.value(p.b_reset).at(i))).collect();
        let wx = mv(store.value(p.w_cand), &input);
        let uh = mv(store.value(p.u_cand), &hidden);
        let n: Vec<f64> =
            (0..4).map(|i| (wx[i] + r[i] * uh[i] + store.value(p.b_cand).at(i)).tanh()).collect();
        let expect: Vec<f64> = (0..4).map(|i| (1.0 - z[i]) * n[i] + z[i] * hidden.at(i)).collect();

        let mut tape = Tape::new();
        let g = GruNodes::bring(&mut tape, &store, &p);
        let input = tape.leaf(input);
        let hidden = tape.leaf(hidden);
        let h2 = gru_cell(&mut tape, &g, input, hidden).unwrap();
        for i in 0..4 {
            assert!((tape.value(h2).at(i) - expect[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn gru_output_bounded_by_candidate_and_hidden() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = GruParams::init(&mut store, "g", 2, 3, &mut rng);
        let mut tape = Tape::new();
        let g = GruNodes::bring(&mut tape, &store, &p);
        let input = tape.leaf(Tensor::vector(vec![2.0, -3.0]));
        let hidden = tape.leaf(Tensor::vector(vec![5.0, -5.0, 0.1]));
        let h2 = gru_cell(&mut tape, &g, input, hidden).unwrap();
        for i in 0..3 {
            let h = tape.value(hidden).at(i);
            let lo = (-1.0f64).min(h);
            let hi = 1.0f64.max(h);
            let v = tape.value(h2).at(i);
            assert!(v >= lo && v <= hi, "coordinate {i} = {v} outside [{lo}, {hi}]");
        }
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let mut tape = Tape::<f64>::new();
        let uniform = tape.leaf(Tensor::vector(vec![0.0; 5]));
        let l = cross_entropy(&mut tape, uniform, 2).unwrap();
        assert!((tape.value(l).at(0) - 5.0f64.ln()).abs() < 1e-12);

        let sat = tape.leaf(Tensor::vector(vec![30.0, -30.0]));
        let l = cross_entropy(&mut tape, sat, 0).unwrap();
        assert!(tape.value(l).at(0) < 1e-9);
        assert!(tape.value(l).at(0) >= 0.0);
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let logits: Tensor<f64> = init_vector(7, -2.0, 2.0, &mut rng);
        let label = 4usize;
        // direct 64-bit evaluation
        let z: f64 = logits.data().iter().map(|v| v.exp()).sum();
        let expect = -(logits.at(label).exp() / z).ln();

        let mut tape = Tape::new();
        let l = tape.leaf(logits);
        let loss = cross_entropy(&mut tape, l, label).unwrap();
        assert!((tape.value(loss).at(0) - expect).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut tape = Tape::<f64>::new();
        let l = tape.leaf(Tensor::vector(vec![0.0, 1.0]));
        assert!(cross_entropy(&mut tape, l, 2).is_err());
    }
}
