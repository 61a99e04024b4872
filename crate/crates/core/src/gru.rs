//! Gated recurrent units and the multi-layer bidirectional runner shared by
//! the three sequence branches.
//!
//! Update convention: `h_t = (1 - z) * h_prev + z * h_candidate`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GruCellParams<T> {
    pub w_z: Tensor<T>,
    pub w_r: Tensor<T>,
    pub w_h: Tensor<T>,
    pub u_z: Tensor<T>,
    pub u_r: Tensor<T>,
    pub u_h: Tensor<T>,
    pub b_z: Tensor<T>,
    pub b_r: Tensor<T>,
    pub b_h: Tensor<T>,
}

impl<T: Scalar> GruCellParams<T> {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        let w = || Tensor::zeros(vec![input_dim, hidden_dim]);
        let u = || Tensor::zeros(vec![hidden_dim, hidden_dim]);
        let b = || Tensor::zeros(vec![hidden_dim]);
        Self {
            w_z: w(),
            w_r: w(),
            w_h: w(),
            u_z: u(),
            u_r: u(),
            u_h: u(),
            b_z: b(),
            b_r: b(),
            b_h: b(),
        }
    }

    /// Matrices uniform in `±1/sqrt(hidden_dim)`, biases zero.
    pub fn init<R: Rng + ?Sized>(input_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden_dim as f64).sqrt();
        let mut mat = |r: usize, c: usize| {
            Tensor::from_fn(vec![r, c], |_| T::lit(rng.gen_range(-bound..bound)))
        };
        let (w_z, w_r, w_h) = (
            mat(input_dim, hidden_dim),
            mat(input_dim, hidden_dim),
            mat(input_dim, hidden_dim),
        );
        let (u_z, u_r, u_h) = (
            mat(hidden_dim, hidden_dim),
            mat(hidden_dim, hidden_dim),
            mat(hidden_dim, hidden_dim),
        );
        let b = || Tensor::zeros(vec![hidden_dim]);
        Self {
            w_z,
            w_r,
            w_h,
            u_z,
            u_r,
            u_h,
            b_z: b(),
            b_r: b(),
            b_h: b(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_z.shape()[0]
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_z.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let (d_in, d_h) = (self.input_dim(), self.hidden_dim());
        let checks: [(&str, &Tensor<T>, Vec<usize>); 9] = [
            ("w_z", &self.w_z, vec![d_in, d_h]),
            ("w_r", &self.w_r, vec![d_in, d_h]),
            ("w_h", &self.w_h, vec![d_in, d_h]),
            ("u_z", &self.u_z, vec![d_h, d_h]),
            ("u_r", &self.u_r, vec![d_h, d_h]),
            ("u_h", &self.u_h, vec![d_h, d_h]),
            ("b_z", &self.b_z, vec![d_h]),
            ("b_r", &self.b_r, vec![d_h]),
            ("b_h", &self.b_h, vec![d_h]),
        ];
        for (name, t, want) in checks {
            if t.shape() != want.as_slice() {
                return Err(Error::Shape(format!(
                    "gru {name}: expected {want:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> GruCellVars {
        let mut leaf = |t: &Tensor<T>| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        GruCellVars {
            w_z: leaf(&self.w_z),
            w_r: leaf(&self.w_r),
            w_h: leaf(&self.w_h),
            u_z: leaf(&self.u_z),
            u_r: leaf(&self.u_r),
            u_h: leaf(&self.u_h),
            b_z: leaf(&self.b_z),
            b_r: leaf(&self.b_r),
            b_h: leaf(&self.b_h),
            hidden_dim: self.hidden_dim(),
        }
    }
}

impl<T: Scalar> Parameters<T> for GruCellParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (n, t) in [
            ("w_z", &self.w_z),
            ("w_r", &self.w_r),
            ("w_h", &self.w_h),
            ("u_z", &self.u_z),
            ("u_r", &self.u_r),
            ("u_h", &self.u_h),
            ("b_z", &self.b_z),
            ("b_r", &self.b_r),
            ("b_h", &self.b_h),
        ] {
            f(format!("{prefix}.{n}"), t);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (n, t) in [
            ("w_z", &mut self.w_z),
            ("w_r", &mut self.w_r),
            ("w_h", &mut self.w_h),
            ("u_z", &mut self.u_z),
            ("u_r", &mut self.u_r),
            ("u_h", &mut self.u_h),
            ("b_z", &mut self.b_z),
            ("b_r", &mut self.b_r),
            ("b_h", &mut self.b_h),
        ] {
            f(format!("{prefix}.{n}"), t);
        }
    }
}

/// Graph leaves of one cell.
#[derive(Clone, Copy, Debug)]
pub struct GruCellVars {
    pub w_z: Var,
    pub w_r: Var,
    pub w_h: Var,
    pub u_z: Var,
    pub u_r: Var,
    pub u_h: Var,
    pub b_z: Var,
    pub b_r: Var,
    pub b_h: Var,
    pub hidden_dim: usize,
}

impl GruCellVars {
    pub fn all(&self) -> [Var; 9] {
        [
            self.w_z, self.w_r, self.w_h, self.u_z, self.u_r, self.u_h, self.b_z, self.b_r,
            self.b_h,
        ]
    }
}

fn gate<T: Scalar>(g: &mut Graph<T>, x: Var, h: Var, w: Var, u: Var, b: Var) -> Result<Var> {
    let xw = g.matmul(x, w)?;
    let hu = g.matmul(h, u)?;
    let s = g.add(xw, hu)?;
    g.add_bias(s, b)
}

/// One GRU step. `x_t` is `[D_in]` or `[B, D_in]`; `h_prev` matches with `D_h`.
pub fn gru_cell_step<T: Scalar>(
    g: &mut Graph<T>,
    cell: &GruCellVars,
    x_t: Var,
    h_prev: Var,
) -> Result<Var> {
    let zs = gate(g, x_t, h_prev, cell.w_z, cell.u_z, cell.b_z)?;
    let z = g.sigmoid(zs);
    let rs = gate(g, x_t, h_prev, cell.w_r, cell.u_r, cell.b_r)?;
    let r = g.sigmoid(rs);
    let rh = g.mul(r, h_prev)?;
    let cs = gate(g, x_t, rh, cell.w_h, cell.u_h, cell.b_h)?;
    let cand = g.tanh(cs);
    let delta = g.sub(cand, h_prev)?;
    let step = g.mul(z, delta)?;
    g.add(h_prev, step)
}

/// How a branch turns BiGRU outputs into its descriptor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// `[h_fwd_T ; h_bwd_1]` of the top layer.
    #[default]
    FinalStates,
    /// Mean over the per-step top-layer outputs.
    MeanOutputs,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiGruLayer<T> {
    pub forward: GruCellParams<T>,
    pub backward: GruCellParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiGruStack<T> {
    pub layers: Vec<BiGruLayer<T>>,
}

impl<T: Scalar> BiGruStack<T> {
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        hidden_dim: usize,
        num_layers: usize,
        rng: &mut R,
    ) -> Self {
        let layers = (0..num_layers)
            .map(|l| {
                let d_in = if l == 0 { input_dim } else { 2 * hidden_dim };
                BiGruLayer {
                    forward: GruCellParams::init(d_in, hidden_dim, rng),
                    backward: GruCellParams::init(d_in, hidden_dim, rng),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn zeros(input_dim: usize, hidden_dim: usize, num_layers: usize) -> Self {
        let layers = (0..num_layers)
            .map(|l| {
                let d_in = if l == 0 { input_dim } else { 2 * hidden_dim };
                BiGruLayer {
                    forward: GruCellParams::zeros(d_in, hidden_dim),
                    backward: GruCellParams::zeros(d_in, hidden_dim),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.layers[0].forward.hidden_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].forward.input_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::invalid("bigru stack needs at least one layer"));
        }
        let h = self.hidden_dim();
        for (l, layer) in self.layers.iter().enumerate() {
            for cell in [&layer.forward, &layer.backward] {
                cell.validate()?;
                let want_in = if l == 0 { self.input_dim() } else { 2 * h };
                if cell.hidden_dim() != h || cell.input_dim() != want_in {
                    return Err(Error::Shape(format!(
                        "bigru layer {l}: expected {want_in}->{h}, got {}->{}",
                        cell.input_dim(),
                        cell.hidden_dim()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BiGruVars {
        BiGruVars {
            layers: self
                .layers
                .iter()
                .map(|l| (l.forward.bind(g, trainable), l.backward.bind(g, trainable)))
                .collect(),
        }
    }
}

impl<T: Scalar> Parameters<T> for BiGruStack<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (l, layer) in self.layers.iter().enumerate() {
            layer.forward.visit(&format!("{prefix}.l{l}.fwd"), f);
            layer.backward.visit(&format!("{prefix}.l{l}.bwd"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            layer.forward.visit_mut(&format!("{prefix}.l{l}.fwd"), f);
            layer.backward.visit_mut(&format!("{prefix}.l{l}.bwd"), f);
        }
    }
}

#[derive(Clone, Debug)]
pub struct BiGruVars {
    pub layers: Vec<(GruCellVars, GruCellVars)>,
}

impl BiGruVars {
    /// Leaves in the order of the stack's parameter traversal.
    pub fn all(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|(f, b)| f.all().into_iter().chain(b.all())).collect()
    }
}

#[derive(Clone, Debug)]
pub struct BiGruOutput {
    /// Top-layer `[h_fwd_t ; h_bwd_t]` per step.
    pub outputs: Vec<Var>,
    /// `[h_fwd_T ; h_bwd_1]` of the top layer.
    pub final_states: Var,
}

impl BiGruOutput {
    pub fn readout<T: Scalar>(&self, g: &mut Graph<T>, mode: Readout) -> Result<Var> {
        match mode {
            Readout::FinalStates => Ok(self.final_states),
            Readout::MeanOutputs => {
                let mut acc = self.outputs[0];
                for &o in &self.outputs[1..] {
                    acc = g.add(acc, o)?;
                }
                Ok(g.scale(acc, T::one() / T::lit(self.outputs.len() as f64)))
            }
        }
    }
}

fn zero_state<T: Scalar>(g: &mut Graph<T>, like: Var, hidden: usize) -> Var {
    let mut shape = g.shape(like).to_vec();
    *shape.last_mut().expect("non-empty") = hidden;
    g.constant(Tensor::zeros(shape))
}

/// Runs every layer forward over `t = 1..T` and backward over `t = T..1`
/// from zero initial states.
pub fn bigru_forward<T: Scalar>(
    g: &mut Graph<T>,
    stack: &BiGruVars,
    sequence: &[Var],
) -> Result<BiGruOutput> {
    if sequence.is_empty() {
        return Err(Error::invalid("bigru_forward: empty sequence"));
    }
    let steps = sequence.len();
    let mut inputs = sequence.to_vec();
    let mut last_fwd = None;
    let mut first_bwd = None;
    for (fwd, bwd) in &stack.layers {
        let mut h = zero_state(g, inputs[0], fwd.hidden_dim);
        let mut fwd_states = Vec::with_capacity(steps);
        for &x in &inputs {
            h = gru_cell_step(g, fwd, x, h)?;
            fwd_states.push(h);
        }
        let mut h = zero_state(g, inputs[0], bwd.hidden_dim);
        let mut bwd_states = vec![h; steps];
        for (t, &x) in inputs.iter().enumerate().rev() {
            h = gru_cell_step(g, bwd, x, h)?;
            bwd_states[t] = h;
        }
        let axis = g.shape(fwd_states[0]).len() - 1;
        inputs = fwd_states
            .iter()
            .zip(&bwd_states)
            .map(|(&f, &b)| g.concat(&[f, b], axis))
            .collect::<Result<_>>()?;
        last_fwd = Some(fwd_states[steps - 1]);
        first_bwd = Some(bwd_states[0]);
    }
    let (f, b) = (last_fwd.expect("at least one layer"), first_bwd.expect("at least one layer"));
    let axis = g.shape(f).len() - 1;
    let final_states = g.concat(&[f, b], axis)?;
    Ok(BiGruOutput {
        outputs: inputs,
        final_states,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vecf(v: &[f64]) -> Tensor<f64> {
        Tensor::vector(v.to_vec()).unwrap()
    }

    #[test]
    fn zero_params_zero_state_stays_zero() {
        let p = GruCellParams::<f64>::zeros(3, 2);
        let mut g = Graph::new();
        let c = p.bind(&mut g, false);
        let x = g.constant(vecf(&[1.0, -2.0, 0.5]));
        let h = g.constant(vecf(&[0.0, 0.0]));
        let out = gru_cell_step(&mut g, &c, x, h).unwrap();
        assert_eq!(g.value(out).data(), &[0.0, 0.0]);
    }

    #[test]
    fn zero_params_halve_previous_state() {
        let p = GruCellParams::<f64>::zeros(3, 2);
        let mut g = Graph::new();
        let c = p.bind(&mut g, false);
        let x = g.constant(vecf(&[1.0, -2.0, 0.5]));
        let h = g.constant(vecf(&[0.8, -0.4]));
        let out = gru_cell_step(&mut g, &c, x, h).unwrap();
        assert_eq!(g.value(out).data(), &[0.4, -0.2]);
    }

    #[test]
    fn saturated_update_gate_takes_candidate() {
        let mut p = GruCellParams::<f64>::zeros(2, 2);
        p.b_z = Tensor::full(vec![2], 50.0);
        let mut g = Graph::new();
        let c = p.bind(&mut g, false);
        let x = g.constant(vecf(&[0.3, 0.1]));
        let h = g.constant(vecf(&[0.9, -0.7]));
        let out = gru_cell_step(&mut g, &c, x, h).unwrap();
        for v in g.value(out).data() {
            assert!(v.abs() < 1e-10, "{v}");
        }
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let p = GruCellParams::<f64>::zeros(3, 2);
        let mut g = Graph::new();
        let c = p.bind(&mut g, false);
        let x = g.constant(vecf(&[1.0, 2.0]));
        let h = g.constant(vecf(&[0.0, 0.0]));
        assert!(matches!(gru_cell_step(&mut g, &c, x, h), Err(Error::Shape(_))));
    }

    #[test]
    fn single_step_sequence() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = BiGruStack::<f64>::init(3, 4, 2, &mut rng);
        let mut g = Graph::new();
        let v = s.bind(&mut g, false);
        let x = g.constant(vecf(&[0.1, 0.2, 0.3]));
        let out = bigru_forward(&mut g, &v, &[x]).unwrap();
        assert_eq!(out.outputs.len(), 1);
        assert_eq!(g.value(out.outputs[0]), g.value(out.final_states));
    }

    #[test]
    fn empty_sequence_rejected() {
        let s = BiGruStack::<f64>::zeros(3, 4, 1);
        let mut g = Graph::new();
        let v = s.bind(&mut g, false);
        assert!(bigru_forward(&mut g, &v, &[]).is_err());
    }

    #[test]
    fn zero_stack_outputs_zero() {
        let s = BiGruStack::<f64>::zeros(3, 4, 3);
        let mut g = Graph::new();
        let v = s.bind(&mut g, false);
        let seq: Vec<Var> = (0..5)
            .map(|i| g.constant(vecf(&[i as f64, 1.0, -1.0])))
            .collect();
        let out = bigru_forward(&mut g, &v, &seq).unwrap();
        for o in out.outputs.iter().chain([&out.final_states]) {
            assert!(g.value(*o).data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn mean_readout_averages_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = BiGruStack::<f64>::init(2, 3, 1, &mut rng);
        let mut g = Graph::new();
        let v = s.bind(&mut g, false);
        let seq: Vec<Var> = (0..4).map(|i| g.constant(vecf(&[i as f64 * 0.1, 0.5]))).collect();
        let out = bigru_forward(&mut g, &v, &seq).unwrap();
        let m = out.readout(&mut g, Readout::MeanOutputs).unwrap();
        for k in 0..6 {
            let want: f64 = out.outputs.iter().map(|&o| g.value(o).data()[k]).sum::<f64>() / 4.0;
            assert!((g.value(m).data()[k] - want).abs() < 1e-15);
        }
    }
}
