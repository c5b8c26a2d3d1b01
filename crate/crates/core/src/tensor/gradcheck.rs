//! Central finite-difference gradient checking (f64 graphs only).

use super::graph::{BnMode, Graph, NodeId};
use super::Tensor;
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn all_pass(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }
}

/// Per-parameter element cap; larger tensors are stride-sampled.
const MAX_ELEMENTS_PER_PARAM: usize = 200;
const STEP: f64 = 1e-5;

/// Compare analytic gradients of `loss` against central finite differences
/// for every parameter bound in `graph`. Reports failures instead of
/// returning an error.
pub fn grad_check(
    graph: &mut Graph<f64>,
    loss: NodeId,
    inputs: &[(&str, &Tensor<f64>)],
    bn: BnMode,
    tolerance: f64,
) -> Result<GradCheckReport> {
    graph.forward(inputs, bn)?;
    let analytic = graph.backward(loss)?;

    let param_names: Vec<String> =
        graph.param_nodes().iter().map(|(n, _)| n.clone()).collect();

    let mut entries = Vec::with_capacity(param_names.len());
    for name in param_names {
        let base = graph.bound_value(&name).unwrap().clone();
        let grad = &analytic[&name];
        let numel = base.numel();
        let stride = numel.div_ceil(MAX_ELEMENTS_PER_PARAM).max(1);

        let mut max_rel = 0.0f64;
        let mut idx = 0;
        while idx < numel {
            let mut plus = base.clone();
            plus.data_mut()[idx] += STEP;
            graph.rebind(&name, &plus)?;
            graph.forward(inputs, bn)?;
            let f_plus = graph.value(loss)?.item();

            let mut minus = base.clone();
            minus.data_mut()[idx] -= STEP;
            graph.rebind(&name, &minus)?;
            graph.forward(inputs, bn)?;
            let f_minus = graph.value(loss)?.item();

            let numeric = (f_plus - f_minus) / (2.0 * STEP);
            let a = grad.data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5);
            max_rel = max_rel.max(rel);
            idx += stride;
        }
        graph.rebind(&name, &base)?;
        entries.push(GradCheckEntry { name, max_rel_err: max_rel, pass: max_rel < tolerance });
    }
    // restore forward state for the original parameters
    graph.forward(inputs, bn)?;
    Ok(GradCheckReport { tolerance, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::he_normal;

    #[test]
    fn linear_layer_gradients_tight() {
        let mut rng = Rng::from_seed(21);
        let mut g: Graph<f64> = Graph::new();
        let x = g.input("x", &[4, 6]);
        let w = g.param("w", &he_normal(&[6, 3], 6, &mut rng));
        let b = g.param("b", &Tensor::zeros(&[3]));
        let h = g.matmul(x, w).unwrap();
        let h = g.add(h, b).unwrap();
        let loss = g.mean_all(h);
        let xv: Tensor<f64> = he_normal(&[4, 6], 6, &mut rng);
        let report = grad_check(&mut g, loss, &[("x", &xv)], BnMode::Eval, 1e-6).unwrap();
        assert!(report.all_pass(), "max rel err {}", report.max_rel_err());
    }

    #[test]
    fn three_layer_mlp_matches_finite_differences() {
        let mut rng = Rng::from_seed(33);
        let mut g: Graph<f64> = Graph::new();
        let x = g.input("x", &[4, 8]);
        let w1 = g.param("w1", &he_normal(&[8, 10], 8, &mut rng));
        let w2 = g.param("w2", &he_normal(&[10, 6], 10, &mut rng));
        let w3 = g.param("w3", &he_normal(&[6, 1], 6, &mut rng));
        let h1 = g.matmul(x, w1).unwrap();
        let h1 = g.tanh(h1);
        let h2 = g.matmul(h1, w2).unwrap();
        let h2 = g.sigmoid(h2);
        let h3 = g.matmul(h2, w3).unwrap();
        let loss = g.mean_all(h3);
        let xv: Tensor<f64> = he_normal(&[4, 8], 8, &mut rng);
        let report = grad_check(&mut g, loss, &[("x", &xv)], BnMode::Eval, 1e-5).unwrap();
        assert!(report.all_pass(), "max rel err {}", report.max_rel_err());
    }

    #[test]
    fn conv_pool_relu_stack_passes_at_1e4() {
        let mut rng = Rng::from_seed(55);
        let mut g: Graph<f64> = Graph::new();
        let x = g.input("x", &[2, 2, 8, 8]);
        let w = g.param("w", &he_normal(&[3, 2, 3, 3], 18, &mut rng));
        let h = g.conv2d(x, w, 1, 1).unwrap();
        // nudge values away from relu/maxpool kinks
        let h = g.relu(h);
        let p = g.max_pool(h, 2, 2).unwrap();
        let pooled = g.global_avg_pool(p).unwrap();
        let loss = g.mean_all(pooled);
        // inputs kept away from 0 by at least 1e-3
        let xv_data: Vec<f64> = (0..256)
            .map(|_| {
                let v = rng.normal_f64();
                if v.abs() < 1e-3 {
                    1e-3
                } else {
                    v
                }
            })
            .collect();
        let xv = Tensor::new(vec![2, 2, 8, 8], xv_data).unwrap();
        let report = grad_check(&mut g, loss, &[("x", &xv)], BnMode::Eval, 1e-4).unwrap();
        assert!(report.all_pass(), "max rel err {}", report.max_rel_err());
    }

    #[test]
    fn info_nce_gradient_matches_finite_differences() {
        // B=2, d=4, K=8 per the loss contract
        let mut rng = Rng::from_seed(77);
        let (b, d, kn) = (2usize, 4usize, 8usize);
        let unit_rows = |rng: &mut Rng, rows: usize| -> Vec<f64> {
            let mut data = vec![0.0; rows * d];
            for r in 0..rows {
                let mut sq = 0.0;
                for j in 0..d {
                    data[r * d + j] = rng.normal_f64();
                    sq += data[r * d + j] * data[r * d + j];
                }
                let inv = 1.0 / sq.sqrt();
                for j in 0..d {
                    data[r * d + j] *= inv;
                }
            }
            data
        };
        let mut g: Graph<f64> = Graph::new();
        // differentiate through the normalize so raw q can be perturbed freely
        let q_raw = g.param("q_raw", &Tensor::new(vec![b, d], unit_rows(&mut rng, b)).unwrap());
        let q = g.l2_normalize(q_raw, 1).unwrap();
        let k_pos = Tensor::new(vec![b, d], unit_rows(&mut rng, b)).unwrap();
        let queue = Tensor::new(vec![kn, d], unit_rows(&mut rng, kn)).unwrap();
        let loss = g.info_nce(q, k_pos, queue, 0.2).unwrap();
        let report = grad_check(&mut g, loss, &[], BnMode::Eval, 1e-5).unwrap();
        assert!(report.all_pass(), "max rel err {}", report.max_rel_err());
    }

    #[test]
    fn batch_norm_train_mode_gradients() {
        let mut rng = Rng::from_seed(91);
        let mut g: Graph<f64> = Graph::new();
        let x = g.input("x", &[3, 2, 4, 4]);
        let w = g.param("w", &he_normal(&[2, 2, 3, 3], 18, &mut rng));
        let gamma = g.param("g", &Tensor::full(&[2], 1.0));
        let beta = g.param("b", &Tensor::zeros(&[2]));
        let rm = g.buffer("rm", &Tensor::zeros(&[2]));
        let rv = g.buffer("rv", &Tensor::full(&[2], 1.0));
        let h = g.conv2d(x, w, 1, 1).unwrap();
        let h = g.batch_norm(h, gamma, beta, rm, rv, 1e-5, 0.1).unwrap();
        let h = g.tanh(h);
        let loss = g.mean_all(h);
        let xv: Tensor<f64> = he_normal(&[3, 2, 4, 4], 32, &mut rng);
        let report = grad_check(&mut g, loss, &[("x", &xv)], BnMode::Train, 1e-4).unwrap();
        assert!(report.all_pass(), "max rel err {}", report.max_rel_err());
    }
}
