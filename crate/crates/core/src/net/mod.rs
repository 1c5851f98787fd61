//! The parametrized Lagrangian: a fully connected network with two softplus
//! hidden layers and a linear scalar output, evaluable at any `Scalar` type
//! and able to report batched first and second input derivatives.

pub mod batch;

use serde::{Deserialize, Serialize};

use crate::diff::{Scalar, ScalarField};
use crate::dynamics::{Jet, LagrangianField};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::systems::State;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// Row-major weight matrix, fan_out x fan_in.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

/// Network weights plus the metadata needed to reuse them: the layer widths,
/// the initialization seed, and which system/mode they were trained for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub layout: Vec<usize>,
    pub layers: Vec<Layer>,
    pub seed: u64,
    pub system: String,
    pub mode: String,
}

pub const HIDDEN_WIDTH: usize = 128;

impl Params {
    /// Fresh parameters for a state of dimension `input_dim`: two hidden
    /// layers of 128 units. Weights are zero-mean normal with variance
    /// 2 / (fan_in + fan_out); biases start at zero.
    pub fn init(input_dim: usize, seed: u64) -> Result<Self> {
        Self::init_with_layout(&[input_dim, HIDDEN_WIDTH, HIDDEN_WIDTH, 1], seed)
    }

    pub fn init_with_layout(layout: &[usize], seed: u64) -> Result<Self> {
        if layout.len() < 2 || layout[0] < 2 || *layout.last().unwrap() != 1 {
            return Err(Error::InvalidArgument(format!(
                "layout {layout:?} must map at least 2 inputs to a single output"
            )));
        }
        let mut rng = SplitMix64::new(seed);
        let layers = layout
            .windows(2)
            .map(|io| {
                let (fan_in, fan_out) = (io[0], io[1]);
                let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
                Layer {
                    w: (0..fan_in * fan_out).map(|_| std * rng.normal()).collect(),
                    b: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(Params {
            layout: layout.to_vec(),
            layers,
            seed,
            system: String::new(),
            mode: "lnn".into(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layout[0]
    }

    pub fn param_count(&self) -> usize {
        self.layout
            .windows(2)
            .map(|io| io[0] * io[1] + io[1])
            .sum()
    }

    /// Concatenates all weights and biases layer by layer.
    pub fn flatten(&self) -> Vec<f64> {
        let mut theta = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            theta.extend_from_slice(&layer.w);
            theta.extend_from_slice(&layer.b);
        }
        theta
    }

    pub fn from_flat(layout: &[usize], theta: &[f64]) -> Result<Self> {
        let mut p = Params::init_with_layout(layout, 0)?;
        let expected = p.param_count();
        if theta.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: theta.len(),
            });
        }
        let mut at = 0;
        for layer in &mut p.layers {
            let nw = layer.w.len();
            layer.w.copy_from_slice(&theta[at..at + nw]);
            at += nw;
            let nb = layer.b.len();
            layer.b.copy_from_slice(&theta[at..at + nb]);
            at += nb;
        }
        Ok(p)
    }

    /// Scalar output for a state, checking dimensions.
    pub fn forward(&self, s: &State) -> Result<f64> {
        if 2 * s.dof() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: 2 * s.dof(),
            });
        }
        Ok(self.eval(&s.flat()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.layout.len() != self.layers.len() + 1 {
            return Err(Error::InvalidArgument(format!(
                "layout of {} widths does not match {} layers",
                self.layout.len(),
                self.layers.len()
            )));
        }
        for (l, io) in self.layers.iter().zip(self.layout.windows(2)) {
            if l.w.len() != io[0] * io[1] || l.b.len() != io[1] {
                return Err(Error::InvalidArgument(
                    "layer shapes do not chain with the declared layout".into(),
                ));
            }
            if l.w.iter().chain(l.b.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: "network parameters",
                    index: None,
                });
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let p: Params = serde_json::from_reader(std::io::BufReader::new(file))?;
        p.validate()?;
        Ok(p)
    }
}

/// MLP forward pass generic over both the parameter and input scalar type.
/// Hidden activations are softplus; the output layer is linear so the learned
/// Lagrangian can take negative values.
pub fn eval_flat<S: Scalar>(layout: &[usize], theta: &[S], x: &[S]) -> S {
    debug_assert_eq!(x.len(), layout[0]);
    let n_layers = layout.len() - 1;
    let mut h: Vec<S> = x.to_vec();
    let mut at = 0;
    for l in 0..n_layers {
        let (fan_in, fan_out) = (layout[l], layout[l + 1]);
        let w = &theta[at..at + fan_in * fan_out];
        at += fan_in * fan_out;
        let b = &theta[at..at + fan_out];
        at += fan_out;
        let mut z = Vec::with_capacity(fan_out);
        for o in 0..fan_out {
            let mut acc = b[o];
            let row = &w[o * fan_in..(o + 1) * fan_in];
            for (wk, hk) in row.iter().zip(&h) {
                acc = acc + *wk * *hk;
            }
            z.push(if l + 1 < n_layers { acc.softplus() } else { acc });
        }
        h = z;
    }
    h[0]
}

impl ScalarField for Params {
    fn eval<S: Scalar>(&self, x: &[S]) -> S {
        let theta: Vec<S> = self
            .layers
            .iter()
            .flat_map(|l| l.w.iter().chain(l.b.iter()))
            .map(|&v| S::from_f64(v))
            .collect();
        eval_flat(&self.layout, &theta, x)
    }
}

impl LagrangianField for Params {
    /// Batched second-order forward pass; one evaluation yields the value,
    /// the full gradient and the packed Hessian.
    fn jet(&self, x: &[f64]) -> Result<Jet> {
        batch::single_jet(self, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{grad, softplus_f64};

    #[test]
    fn init_is_deterministic() {
        let a = Params::init(6, 42).unwrap();
        let b = Params::init(6, 42).unwrap();
        assert_eq!(a, b);
        let c = Params::init(6, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_shapes() {
        let p = Params::init(6, 0).unwrap();
        assert_eq!(p.layout, vec![6, 128, 128, 1]);
        assert_eq!(p.layers[0].w.len(), 128 * 6);
        assert_eq!(p.layers[0].b.len(), 128);
        assert_eq!(p.layers[1].w.len(), 128 * 128);
        assert_eq!(p.layers[1].b.len(), 128);
        assert_eq!(p.layers[2].w.len(), 128);
        assert_eq!(p.layers[2].b.len(), 1);
    }

    #[test]
    fn first_layer_weight_variance() {
        let p = Params::init(6, 7).unwrap();
        let w = &p.layers[0].w;
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w.len() as f64;
        let target = 2.0 / (6.0 + 128.0);
        assert!(
            (var - target).abs() < 0.2 * target,
            "var {var} vs target {target}"
        );
    }

    #[test]
    fn zero_params_give_zero_output() {
        let mut p = Params::init_with_layout(&[4, 8, 8, 1], 1).unwrap();
        for l in &mut p.layers {
            l.w.iter_mut().for_each(|v| *v = 0.0);
        }
        let s = State::new(vec![0.7, -0.3], vec![0.1, 0.9]);
        assert_eq!(p.forward(&s).unwrap(), 0.0);
    }

    #[test]
    fn tiny_layout_hand_computed() {
        // 2 -> 1 -> 1 -> 1 with all weights 1 and biases 0:
        // out = softplus(softplus(x0 + x1))
        let mut p = Params::init_with_layout(&[2, 1, 1, 1], 0).unwrap();
        for l in &mut p.layers {
            l.w.iter_mut().for_each(|v| *v = 1.0);
        }
        let s = State::new(vec![0.3], vec![0.5]);
        let want = softplus_f64(softplus_f64(0.8));
        assert!((p.forward(&s).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let p = Params::init_with_layout(&[4, 8, 8, 1], 3).unwrap();
        let x = [0.3, -0.2, 0.5, 0.9];
        let g = grad(&p, &x).unwrap();
        let h = 1e-5;
        for i in 0..4 {
            let mut xp = x;
            xp[i] += h;
            let mut xm = x;
            xm[i] -= h;
            let fd = (p.eval(&xp[..]) - p.eval(&xm[..])) / (2.0 * h);
            assert!((g[i] - fd).abs() < 1e-8, "coord {i}: {} vs {fd}", g[i]);
        }
    }

    #[test]
    fn output_finite_on_large_inputs() {
        let p = Params::init(4, 9).unwrap();
        let x = vec![100.0, -100.0, 57.0, -99.0];
        let y = p.eval(&x[..]);
        assert!(y.is_finite());
        let g = grad(&p, &x).unwrap();
        assert!(g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn serialization_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.json");
        let mut p = Params::init(8, 5).unwrap();
        p.system = "wheel".into();
        p.mode = "lnn-nh".into();
        p.save(&path).unwrap();
        let q = Params::load(&path).unwrap();
        assert_eq!(p, q);
        for (a, b) in p.flatten().iter().zip(q.flatten().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn forward_rejects_dimension_mismatch() {
        let p = Params::init(6, 0).unwrap();
        let s = State::new(vec![0.0; 4], vec![0.0; 4]);
        assert!(matches!(
            p.forward(&s),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn json_schema_field_names() {
        let p = Params::init_with_layout(&[2, 2, 2, 1], 0).unwrap();
        let text = serde_json::to_string(&p).unwrap();
        for key in ["\"layout\"", "\"layers\"", "\"w\"", "\"b\"", "\"seed\"", "\"system\"", "\"mode\""] {
            assert!(text.contains(key), "missing {key} in {text}");
        }
    }
}
