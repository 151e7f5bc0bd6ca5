//! Central finite-difference verification of tape gradients.
//!
//! Runs in 64-bit only; 32-bit differencing is too noisy to separate
//! truncation error from real gradient bugs.

use crate::edge_features::EdgeMode;
use crate::error::Result;
use crate::graph::{build_graph, Conversation, HeteroGraph, Utterance};
use crate::model::{ForwardOpts, Model, ModelConfig};
use crate::tape::{ParamId, ParamStore};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Per-parameter and overall relative error of analytic vs numeric
/// gradients.
#[derive(Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub per_param: Vec<(String, f64)>,
}

/// Compare tape gradients against central differences.
///
/// `loss_and_grad(store, with_grad)` evaluates the scalar loss; when
/// `with_grad` is true it must also accumulate gradients into the store
/// (grads are zeroed first here). The function must be deterministic.
///
/// `sample_per_param` caps how many coordinates of each parameter are
/// probed (0 means all). Relative error per coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`; the floor
/// keeps central-difference roundoff (about `eps / step`, ~1e-11 here)
/// from registering as a large relative error on coordinates whose true
/// gradient is effectively zero.
pub fn finite_diff_check<F>(
    store: &mut ParamStore<f64>,
    mut loss_and_grad: F,
    step: f64,
    sample_per_param: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore<f64>, bool) -> Result<f64>,
{
    store.zero_grads();
    let _ = loss_and_grad(store, true)?;
    let analytic: Vec<Vec<f64>> =
        store.ids().map(|id| store.grad(id).data().to_vec()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = store.ids().collect();
    let mut per_param = Vec::with_capacity(ids.len());
    let mut max_rel_err = 0.0f64;

    for (pi, &id) in ids.iter().enumerate() {
        let n = store.value(id).len();
        let mut coords: Vec<usize> = (0..n).collect();
        if sample_per_param > 0 && sample_per_param < n {
            coords.shuffle(&mut rng);
            coords.truncate(sample_per_param);
        }
        let mut param_err = 0.0f64;
        for &c in &coords {
            let orig = store.value(id).at(c);
            store.value_mut(id).data_mut()[c] = orig + step;
            let plus = loss_and_grad(store, false)?;
            store.value_mut(id).data_mut()[c] = orig - step;
            let minus = loss_and_grad(store, false)?;
            store.value_mut(id).data_mut()[c] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[pi][c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            param_err = param_err.max(rel);
        }
        max_rel_err = max_rel_err.max(param_err);
        per_param.push((store.name(id).to_string(), param_err));
    }
    Ok(GradCheckReport { max_rel_err, per_param })
}

/// Finite-difference check of every parameter group of a small full
/// model: a three-turn two-speaker conversation, trainable edge
/// features, and the intra-turn exchange enabled.
pub fn check_model_gradients(
    seed: u64,
    hidden: usize,
    layers: usize,
    omega: usize,
    sample_per_param: usize,
) -> Result<GradCheckReport> {
    let event_dim = 5;
    let config = ModelConfig {
        hidden,
        event_dim,
        onehot_dim: 2,
        classes: 3,
        layers,
        omega,
        edge_mode: EdgeMode::Trainable,
        edge_trainable_dim: 4,
        ..ModelConfig::default()
    };
    let mut model: Model<f64> = Model::new(config, seed, None);

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5bd1_e995);
    let turns = ["A", "B", "A"]
        .iter()
        .enumerate()
        .map(|(i, s)| Utterance {
            turn_index: i,
            speaker_id: s.to_string(),
            text: None,
            label: Some([0, 2, 1][i]),
            feature: (0..event_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        })
        .collect();
    let conv = Conversation::new("gradcheck".into(), turns)?;
    let graph = build_graph(&conv, omega)?;

    fn eval(
        model: &mut Model<f64>,
        conv: &Conversation,
        graph: &HeteroGraph,
        with_grad: bool,
    ) -> Result<f64> {
        let fwd = model.forward_on_graph(conv, graph, &mut ForwardOpts::inference())?;
        let loss = fwd.loss.expect("toy conversation is fully labeled");
        let v = fwd.loss_value().unwrap();
        if with_grad {
            fwd.tape.backward(loss, &mut model.store)?;
        }
        Ok(v)
    }

    // finite_diff_check owns the store during probing; hand the model's
    // store over and put it back around every evaluation
    let mut store = ParamStore::new();
    std::mem::swap(&mut store, &mut model.store);
    finite_diff_check(
        &mut store,
        |s, with_grad| {
            std::mem::swap(s, &mut model.store);
            let out = eval(&mut model, &conv, &graph, with_grad);
            std::mem::swap(s, &mut model.store);
            out
        },
        1e-5,
        sample_per_param,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{gru_cell, GruNodes, GruParams};
    use crate::tape::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_form_passes_tight() {
        let mut store = ParamStore::<f64>::new();
        let x = store.register("x", Tensor::vector(vec![0.7, -1.3, 2.1]));
        let report = finite_diff_check(
            &mut store,
            |store, with_grad| {
                let mut tape = Tape::new();
                let xn = tape.param(store, x);
                let loss = tape.dot(xn, xn)?;
                let v = tape.value(loss).at(0);
                if with_grad {
                    tape.backward(loss, store)?;
                }
                Ok(v)
            },
            1e-5,
            0,
            0,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-8, "err = {}", report.max_rel_err);
    }

    #[test]
    fn gru_cell_passes() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = GruParams::init(&mut store, "g", 3, 4, &mut rng);
        let input = Tensor::vector(vec![0.5, -0.2, 0.9]);
        let hidden = Tensor::vector(vec![0.1, 0.4, -0.6, 0.3]);
        let report = finite_diff_check(
            &mut store,
            |store, with_grad| {
                let mut tape = Tape::new();
                let g = GruNodes::bring(&mut tape, store, &p);
                let i = tape.leaf(input.clone());
                let h = tape.leaf(hidden.clone());
                let out = gru_cell(&mut tape, &g, i, h)?;
                let loss = tape.dot(out, out)?;
                let v = tape.value(loss).at(0);
                if with_grad {
                    tape.backward(loss, store)?;
                }
                Ok(v)
            },
            1e-5,
            0,
            0,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "err = {}", report.max_rel_err);
    }
}
