//! Fully connected ReLU networks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{BracError, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{gemm, Tensor};

/// Dense network `input -> hidden... -> output` with ReLU on hidden layers
/// and a linear output. Weights are stored `[fan_in, fan_out]`, biases
/// `[1, fan_out]`, interleaved as `[w0, b0, w1, b1, ...]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<Tensor>,
}

/// Parameter leaves of an [`Mlp`] bound onto a tape.
#[derive(Clone, Debug)]
pub struct MlpVars {
    vars: Vec<Var>,
}

impl MlpVars {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients in parameter order; zeros where the loss does not depend on
    /// a parameter.
    pub fn grads(&self, g: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| g.wrt(v)).collect()
    }
}

fn check_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 || sizes.contains(&0) {
        return Err(BracError::Config(format!(
            "layer sizes must list at least input and output, all positive: {sizes:?}"
        )));
    }
    Ok(())
}

impl Mlp {
    /// Uniform `±1/sqrt(fan_in)` initialisation for weights and biases.
    pub fn new(sizes: &[usize], rng: &mut impl Rng) -> Result<Self> {
        check_sizes(sizes)?;
        let mut params = Vec::with_capacity(2 * (sizes.len() - 1));
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut draw = |n: usize| -> Vec<f64> {
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            };
            params.push(Tensor::from_vec(fan_in, fan_out, draw(fan_in * fan_out)));
            params.push(Tensor::from_vec(1, fan_out, draw(fan_out)));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            params,
        })
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        check_sizes(sizes)?;
        let params = sizes
            .windows(2)
            .flat_map(|w| [Tensor::zeros(w[0], w[1]), Tensor::zeros(1, w[1])])
            .collect();
        Ok(Self {
            sizes: sizes.to_vec(),
            params,
        })
    }

    /// Rebuilds a network from a flat parameter vector in [`Mlp::flat_params`] order.
    pub fn from_flat(sizes: &[usize], flat: &[f64]) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        net.set_flat_params(flat)?;
        Ok(net)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("non-empty sizes")
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        Self::param_count(&self.sizes)
    }

    pub fn param_count(sizes: &[usize]) -> usize {
        sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.data().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(BracError::Config(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.numel();
            p.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Output-layer bias, handy for building fixed test policies.
    pub fn output_bias_mut(&mut self) -> &mut Tensor {
        self.params.last_mut().expect("at least one layer")
    }

    fn check_input(&self, rows_cols: (usize, usize)) -> Result<()> {
        if rows_cols.1 != self.input_dim() {
            return Err(BracError::Config(format!(
                "network expects input width {}, got {}",
                self.input_dim(),
                rows_cols.1
            )));
        }
        Ok(())
    }

    /// Pushes the parameters onto `tape`; `trainable = false` binds them as
    /// constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> MlpVars {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect();
        MlpVars { vars }
    }

    /// Recorded forward pass.
    pub fn forward_tape(&self, tape: &mut Tape, vars: &MlpVars, x: Var) -> Result<Var> {
        Ok(self.forward_tape_with_preacts(tape, vars, x)?.0)
    }

    fn forward_tape_with_preacts(
        &self,
        tape: &mut Tape,
        vars: &MlpVars,
        x: Var,
    ) -> Result<(Var, Vec<Var>)> {
        self.check_input(tape.shape(x))?;
        let layers = self.sizes.len() - 1;
        let mut h = x;
        let mut preacts = Vec::with_capacity(layers);
        for l in 0..layers {
            let z = tape.matmul(h, vars.vars[2 * l]);
            let z = tape.add_row(z, vars.vars[2 * l + 1]);
            preacts.push(z);
            h = if l + 1 < layers { tape.relu(z) } else { z };
        }
        Ok((h, preacts))
    }

    /// Differentiable `∂(Σ_rows out[:, 0]) / ∂x`, i.e. the per-row input
    /// gradient of a scalar-output network, shaped like `x`. Built from tape
    /// ops so it can itself be differentiated w.r.t. the parameters.
    pub fn input_gradient_tape(&self, tape: &mut Tape, vars: &MlpVars, x: Var) -> Result<Var> {
        if self.output_dim() != 1 {
            return Err(BracError::Config(
                "input gradient needs a scalar-output network".into(),
            ));
        }
        let (_, preacts) = self.forward_tape_with_preacts(tape, vars, x)?;
        let rows = tape.shape(x).0;
        let layers = self.sizes.len() - 1;
        let mut upstream = tape.constant(Tensor::filled(rows, 1, 1.0));
        for l in (0..layers).rev() {
            if l + 1 < layers {
                let mask = tape.value(preacts[l]).map(|z| if z > 0.0 { 1.0 } else { 0.0 });
                let mask = tape.constant(mask);
                upstream = tape.mul(upstream, mask);
            }
            upstream = tape.matmul_bt(upstream, vars.vars[2 * l]);
        }
        Ok(upstream)
    }

    /// Untracked forward pass.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input((x.rows(), x.cols()))?;
        let layers = self.sizes.len() - 1;
        let rows = x.rows();
        let mut h = x.clone();
        for l in 0..layers {
            let (w, b) = (&self.params[2 * l], &self.params[2 * l + 1]);
            let out_dim = w.cols();
            // Seed the output with the bias, then accumulate h @ w.
            let mut out: Vec<f64> = b.data().iter().copied().cycle().take(rows * out_dim).collect();
            gemm(
                h.data(),
                (rows, h.cols()),
                false,
                w.data(),
                (w.rows(), out_dim),
                false,
                &mut out,
                1.0,
            );
            if l + 1 < layers {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            h = Tensor::from_vec(rows, out_dim, out);
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros(&[3, 5, 2]).unwrap();
        let x = Tensor::from_vec(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.1, 9.0]);
        assert!(net.forward(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_single_layer() {
        let mut net = Mlp::zeros(&[1, 1]).unwrap();
        net.params_mut()[0].data_mut()[0] = 1.0;
        let y = net.forward(&Tensor::scalar(2.0)).unwrap();
        assert_eq!(y.item(), 2.0);
    }

    #[test]
    fn shape_mismatch_is_a_config_error() {
        let net = Mlp::zeros(&[3, 4, 1]).unwrap();
        assert!(matches!(
            net.forward(&Tensor::zeros(2, 2)),
            Err(BracError::Config(_))
        ));
    }

    #[test]
    fn tape_and_plain_forward_agree() {
        let mut rng = seeded(7);
        let net = Mlp::new(&[4, 16, 8, 3], &mut rng).unwrap();
        let x = Tensor::from_vec(5, 4, (0..20).map(|i| (i as f64 * 0.37).sin()).collect());
        let plain = net.forward(&x).unwrap();
        let mut tape = Tape::new();
        let vars = net.bind(&mut tape, true);
        let xv = tape.constant(x);
        let y = net.forward_tape(&mut tape, &vars, xv).unwrap();
        for (a, b) in plain.data().iter().zip(tape.value(y).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn parameter_count_depends_only_on_sizes() {
        let mut rng = seeded(1);
        let net = Mlp::new(&[6, 300, 300, 1], &mut rng).unwrap();
        assert_eq!(net.num_params(), 6 * 300 + 300 + 300 * 300 + 300 + 300 + 1);
        assert_eq!(net.flat_params().len(), net.num_params());
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = seeded(3);
        let net = Mlp::new(&[3, 12, 12, 1], &mut rng).unwrap();
        let x = Tensor::from_vec(2, 3, vec![0.2, -0.4, 0.9, 1.1, 0.3, -0.6]);
        let mut tape = Tape::new();
        let vars = net.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let g = net.input_gradient_tape(&mut tape, &vars, xv).unwrap();
        let g = tape.value(g).clone();
        let h = 1e-6;
        for i in 0..x.numel() {
            let mut up = x.clone();
            let mut down = x.clone();
            up.data_mut()[i] += h;
            down.data_mut()[i] -= h;
            let fd = (net.forward(&up).unwrap().sum() - net.forward(&down).unwrap().sum()) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() < 1e-7, "{fd} vs {}", g.data()[i]);
        }
    }
}
