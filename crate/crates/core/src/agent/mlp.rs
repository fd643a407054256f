//! Fully-connected Q-network: rectifier hidden layers, linear output.

use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    SquaredL2,
    SmoothL1,
}

impl Loss {
    /// Value and derivative with respect to the prediction, for error = q - y.
    pub fn eval(self, error: f64) -> (f64, f64) {
        match self {
            Loss::SquaredL2 => (error * error, 2.0 * error),
            Loss::SmoothL1 => {
                if error.abs() <= 1.0 {
                    (0.5 * error * error, error)
                } else {
                    (error.abs() - 0.5, error.signum())
                }
            }
        }
    }
}

/// Parameters live in one flat vector: per layer, the column-major weight
/// matrix (outputs x inputs) followed by the bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    widths: Vec<usize>,
    params: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct LayerShape {
    inputs: usize,
    outputs: usize,
    weight_offset: usize,
    bias_offset: usize,
}

pub struct Sample<'a> {
    pub state: &'a [f64],
    pub action: usize,
    pub target: f64,
}

impl Mlp {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        let mut mlp = Mlp::zeros(widths)?;
        for shape in mlp.shapes() {
            let bound = 1.0 / (shape.inputs as f64).sqrt();
            let end = shape.bias_offset + shape.outputs;
            for p in &mut mlp.params[shape.weight_offset..end] {
                *p = rng.gen_range(-bound..bound);
            }
        }
        Ok(mlp)
    }

    pub fn zeros(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(Error::config("network needs at least input and output widths, all positive"));
        }
        let n: usize = widths.windows(2).map(|w| w[1] * w[0] + w[1]).sum();
        Ok(Mlp {
            widths: widths.to_vec(),
            params: vec![0.0; n],
        })
    }

    pub fn from_params(widths: &[usize], params: Vec<f64>) -> Result<Self> {
        let mut mlp = Mlp::zeros(widths)?;
        if params.len() != mlp.params.len() {
            return Err(Error::config(format!(
                "expected {} parameters, got {}",
                mlp.params.len(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::numerical("non-finite network parameter"));
        }
        mlp.params = params;
        Ok(mlp)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn n_inputs(&self) -> usize {
        self.widths[0]
    }

    pub fn n_outputs(&self) -> usize {
        *self.widths.last().expect("non-empty widths")
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn shapes(&self) -> Vec<LayerShape> {
        let mut offset = 0;
        self.widths
            .windows(2)
            .map(|w| {
                let s = LayerShape {
                    inputs: w[0],
                    outputs: w[1],
                    weight_offset: offset,
                    bias_offset: offset + w[0] * w[1],
                };
                offset = s.bias_offset + w[1];
                s
            })
            .collect()
    }

    fn weight(&self, s: &LayerShape) -> DMatrixView<'_, f64> {
        DMatrixView::from_slice(&self.params[s.weight_offset..s.bias_offset], s.outputs, s.inputs)
    }

    fn bias(&self, s: &LayerShape) -> &[f64] {
        &self.params[s.bias_offset..s.bias_offset + s.outputs]
    }

    /// Activations of every layer for a batch stored column-wise.
    fn activations(&self, input: DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let shapes = self.shapes();
        let last = shapes.len() - 1;
        let mut acts = Vec::with_capacity(shapes.len() + 1);
        acts.push(input);
        for (l, s) in shapes.iter().enumerate() {
            let mut z = self.weight(s) * acts.last().expect("input present");
            let b = self.bias(s);
            for mut col in z.column_iter_mut() {
                for (zi, bi) in col.iter_mut().zip(b) {
                    *zi += bi;
                    if l != last && *zi < 0.0 {
                        *zi = 0.0;
                    }
                }
            }
            acts.push(z);
        }
        acts
    }

    fn batch_matrix(&self, states: &[&[f64]]) -> Result<DMatrix<f64>> {
        let n = self.n_inputs();
        if let Some(bad) = states.iter().find(|s| s.len() != n) {
            return Err(Error::config(format!(
                "network expects {n} inputs, got {}",
                bad.len()
            )));
        }
        Ok(DMatrix::from_fn(n, states.len(), |r, c| states[c][r]))
    }

    pub fn forward(&self, state: &[f64]) -> Result<Vec<f64>> {
        let x = self.batch_matrix(&[state])?;
        let out = self.activations(x).pop().expect("output layer");
        Ok(out.iter().copied().collect())
    }

    /// Q rows for a batch; column c holds the values of `states[c]`.
    pub fn forward_batch(&self, states: &[&[f64]]) -> Result<DMatrix<f64>> {
        if states.is_empty() {
            return Ok(DMatrix::zeros(self.n_outputs(), 0));
        }
        let x = self.batch_matrix(states)?;
        Ok(self.activations(x).pop().expect("output layer"))
    }

    /// Mean loss on the chosen actions and its gradient.
    pub fn loss_and_gradient(&self, batch: &[Sample<'_>], loss: Loss) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::config("empty training batch"));
        }
        let n_out = self.n_outputs();
        for s in batch {
            if !s.target.is_finite() {
                return Err(Error::numerical("non-finite training target"));
            }
            if s.action >= n_out {
                return Err(Error::config(format!("action {} outside {n_out} outputs", s.action)));
            }
        }
        let states: Vec<&[f64]> = batch.iter().map(|s| s.state).collect();
        let acts = self.activations(self.batch_matrix(&states)?);
        let scale = 1.0 / batch.len() as f64;
        let out = acts.last().expect("output layer");
        let mut delta = DMatrix::zeros(n_out, batch.len());
        let mut total = 0.0;
        for (c, s) in batch.iter().enumerate() {
            let (value, slope) = loss.eval(out[(s.action, c)] - s.target);
            total += value;
            delta[(s.action, c)] = slope * scale;
        }
        let mut grad = vec![0.0; self.params.len()];
        let shapes = self.shapes();
        for (l, s) in shapes.iter().enumerate().rev() {
            let input = &acts[l];
            {
                let mut gw = DMatrixViewMut::from_slice(
                    &mut grad[s.weight_offset..s.bias_offset],
                    s.outputs,
                    s.inputs,
                );
                gw.gemm(1.0, &delta, &input.transpose(), 0.0);
            }
            for (r, g) in grad[s.bias_offset..s.bias_offset + s.outputs].iter_mut().enumerate() {
                *g = delta.row(r).sum();
            }
            if l > 0 {
                let mut back = self.weight(s).transpose() * &delta;
                for (b, a) in back.iter_mut().zip(input.iter()) {
                    if *a <= 0.0 {
                        *b = 0.0;
                    }
                }
                delta = back;
            }
        }
        Ok((total * scale, grad))
    }

    /// target <- tau * online + (1 - tau) * target.
    pub fn soft_update_from(&mut self, online: &Mlp, tau: f64) -> Result<()> {
        if self.widths != online.widths {
            return Err(Error::config("soft update between networks of different shapes"));
        }
        for (t, o) in self.params.iter_mut().zip(&online.params) {
            *t = tau * o + (1.0 - tau) * *t;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Straight loops over the same layout, as an independent check.
    fn reference_forward(widths: &[usize], params: &[f64], x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        let mut off = 0;
        let layers = widths.len() - 1;
        for l in 0..layers {
            let (ni, no) = (widths[l], widths[l + 1]);
            let w = &params[off..off + ni * no];
            let b = &params[off + ni * no..off + ni * no + no];
            off += ni * no + no;
            let mut z = vec![0.0; no];
            for o in 0..no {
                let mut acc = b[o];
                for i in 0..ni {
                    acc += w[i * no + o] * a[i];
                }
                z[o] = if l + 1 < layers { acc.max(0.0) } else { acc };
            }
            a = z;
        }
        a
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut m = Mlp::zeros(&[3, 4, 2]).unwrap();
        let n = m.params.len();
        m.params[n - 2] = 0.7;
        m.params[n - 1] = -0.2;
        let q = m.forward(&[0.1, 0.2, 0.7]).unwrap();
        assert_eq!(q, vec![0.7, -0.2]);
        assert!(m.forward(&[0.1, 0.2]).is_err());
    }

    #[test]
    fn single_linear_layer() {
        let params = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 0.5, -0.5];
        let m = Mlp::from_params(&[3, 2], params).unwrap();
        // column-major W = [[1, 3, 5], [2, 4, 6]]
        let q = m.forward(&[1.0, -1.0, 2.0]).unwrap();
        assert_eq!(q, vec![1.0 - 3.0 + 10.0 + 0.5, 2.0 - 4.0 + 12.0 - 0.5]);
    }

    #[test]
    fn matches_reference_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let widths = [5, 7, 6, 3];
        let m = Mlp::new(&widths, &mut rng).unwrap();
        for _ in 0..20 {
            let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let a = m.forward(&x).unwrap();
            let b = reference_forward(&widths, m.params(), &x);
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn exact_target_has_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = Mlp::new(&[3, 4, 2], &mut rng).unwrap();
        let x = [0.2, 0.3, 0.5];
        let q = m.forward(&x).unwrap();
        for loss in [Loss::SquaredL2, Loss::SmoothL1] {
            let (l, g) = m
                .loss_and_gradient(&[Sample { state: &x, action: 1, target: q[1] }], loss)
                .unwrap();
            assert_eq!(l, 0.0);
            assert!(g.iter().all(|&v| v == 0.0));
        }
        assert!(m
            .loss_and_gradient(&[Sample { state: &x, action: 1, target: f64::NAN }], Loss::SmoothL1)
            .is_err());
    }

    #[test]
    fn smooth_l1_quadratic_zone() {
        for e in [-1.0, -0.3, 0.0, 0.6, 1.0] {
            assert_eq!(Loss::SmoothL1.eval(e).0, 0.5 * e * e);
        }
        assert_eq!(Loss::SmoothL1.eval(3.0).0, 2.5);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let widths = [4, 6, 5, 3];
        let m = Mlp::new(&widths, &mut rng).unwrap();
        let xs: Vec<Vec<f64>> = (0..6).map(|_| (0..4).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
        let batch: Vec<Sample> = xs
            .iter()
            .enumerate()
            .map(|(i, x)| Sample { state: x, action: i % 3, target: rng.gen_range(-3.0..3.0) })
            .collect();
        for loss in [Loss::SquaredL2, Loss::SmoothL1] {
            let (_, g) = m.loss_and_gradient(&batch, loss).unwrap();
            let h = 1e-6;
            for p in 0..m.params.len() {
                let mut plus = m.clone();
                plus.params[p] += h;
                let mut minus = m.clone();
                minus.params[p] -= h;
                let fd = (plus.loss_and_gradient(&batch, loss).unwrap().0
                    - minus.loss_and_gradient(&batch, loss).unwrap().0)
                    / (2.0 * h);
                let tol = 1e-4 * fd.abs().max(g[p].abs()) + 1e-6;
                assert!((fd - g[p]).abs() <= tol, "param {p}: {fd} vs {}", g[p]);
            }
        }
    }

    #[test]
    fn soft_update_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let online = Mlp::new(&[2, 3, 2], &mut rng).unwrap();
        let start = Mlp::new(&[2, 3, 2], &mut rng).unwrap();
        let mut t = start.clone();
        t.soft_update_from(&online, 0.0).unwrap();
        assert_eq!(t, start);
        t.soft_update_from(&online, 1.0).unwrap();
        assert_eq!(t, online);
        let tau = 0.3;
        let mut twice = start.clone();
        twice.soft_update_from(&online, tau).unwrap();
        twice.soft_update_from(&online, tau).unwrap();
        let w = 1.0 - (1.0 - tau) * (1.0 - tau);
        for ((a, o), s) in twice.params.iter().zip(&online.params).zip(&start.params) {
            assert!((a - (w * o + (1.0 - w) * s)).abs() < 1e-12);
        }
        assert!(t.soft_update_from(&Mlp::zeros(&[2, 2]).unwrap(), 0.5).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
    }
}
