//! Appearance network: `(p, d, α_p, φ) -> (rgb, σ)`.
//!
//! The input projection is split into a per-sample part over
//! `[encode(p), d, α_p]` and a per-ray-batch part over `φ`, which is added as
//! a row bias. Both halves together are one fully connected layer over the
//! concatenated input.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::math::{encoding_len, Vec3};
use crate::nets::params::{LatentCode, ParamSet, ParamTensor, ParamVars};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AppearanceConfig {
    pub width: usize,
    pub frequencies: usize,
    pub latent_dim: usize,
}

impl Default for AppearanceConfig {
    fn default() -> Self {
        Self {
            width: 64,
            frequencies: 6,
            latent_dim: 64,
        }
    }
}

impl AppearanceConfig {
    /// Per-sample input width: encoded point, direction, occupancy.
    pub fn point_inputs(&self) -> usize {
        encoding_len(self.frequencies) + 3 + 1
    }
}

pub const APPEARANCE_META: &str = "meta/appearance";

#[derive(Clone, Debug, PartialEq)]
pub struct AppearanceNetwork {
    pub config: AppearanceConfig,
    pub params: ParamSet,
}

/// Tape outputs of one batched evaluation.
#[derive(Clone, Copy, Debug)]
pub struct RadianceVars {
    /// `n x 3`
    pub color: Var,
    /// `n x 1`
    pub sigma: Var,
}

impl AppearanceNetwork {
    pub fn zeros(config: AppearanceConfig) -> Self {
        let mut params = ParamSet::new();
        for (name, dims) in Self::layout(&config) {
            params.insert(ParamTensor::zeros(name, dims)).expect("unique names");
        }
        Self { config, params }
    }

    pub fn new<R: Rng + ?Sized>(config: AppearanceConfig, rng: &mut R) -> Self {
        let mut net = Self::zeros(config);
        let c = &net.config;
        let input_fan = c.point_inputs() + c.latent_dim;
        let fan_in: BTreeMap<String, usize> = Self::layout(c)
            .into_iter()
            .filter(|(n, _)| n.contains("weight"))
            .map(|(n, d)| {
                let f = if n.starts_with("appearance.input") { input_fan } else { d[0] };
                (n, f)
            })
            .collect();
        net.params.kaiming_uniform(&fan_in, rng);
        net
    }

    pub fn from_params(config: AppearanceConfig, params: ParamSet) -> Result<Self> {
        for (name, dims) in Self::layout(&config) {
            match params.get(&name) {
                Some(t) if t.dims == dims => {}
                Some(t) => return shape_err(format!("{name}: expected {dims:?}, got {:?}", t.dims)),
                None => return shape_err(format!("missing tensor {name}")),
            }
        }
        Ok(Self { config, params })
    }

    pub fn meta_tensor(&self) -> ParamTensor {
        let c = &self.config;
        ParamTensor {
            name: APPEARANCE_META.into(),
            dims: vec![3],
            values: vec![c.width as f64, c.frequencies as f64, c.latent_dim as f64],
        }
    }

    pub fn config_from_meta(t: &ParamTensor) -> Result<AppearanceConfig> {
        if t.values.len() != 3 {
            return shape_err("appearance meta tensor needs 3 entries");
        }
        Ok(AppearanceConfig {
            width: t.values[0] as usize,
            frequencies: t.values[1] as usize,
            latent_dim: t.values[2] as usize,
        })
    }

    fn layout(c: &AppearanceConfig) -> Vec<(String, Vec<usize>)> {
        let w = c.width;
        let mut out = vec![
            ("appearance.input.weight_point".to_string(), vec![c.point_inputs(), w]),
            ("appearance.input.weight_code".to_string(), vec![c.latent_dim, w]),
            ("appearance.input.bias".to_string(), vec![w]),
        ];
        for b in 1..=2 {
            for l in 1..=2 {
                out.push((format!("appearance.block{b}.fc{l}.weight"), vec![w, w]));
                out.push((format!("appearance.block{b}.fc{l}.bias"), vec![w]));
            }
        }
        out.push(("appearance.color.weight".to_string(), vec![w, 3]));
        out.push(("appearance.color.bias".to_string(), vec![3]));
        out.push(("appearance.density.weight".to_string(), vec![w, 1]));
        out.push(("appearance.density.bias".to_string(), vec![1]));
        out
    }

    fn dense(tape: &mut Tape, p: &ParamVars, x: Var, name: &str) -> Var {
        let h = tape.matmul(x, p.get(&format!("{name}.weight")));
        tape.add_row(h, p.get(&format!("{name}.bias")))
    }

    /// Batched evaluation. `points` and `dirs` are `n x 3`, `alpha` is
    /// `n x 1`, `phi` is `1 x latent_dim`.
    pub fn eval_on_tape(&self, tape: &mut Tape, p: &ParamVars, points: Var, dirs: Var, alpha: Var, phi: Var) -> RadianceVars {
        let enc = tape.pos_enc(points, self.config.frequencies);
        let x = tape.concat_cols(&[enc, dirs, alpha]);
        let h = tape.matmul(x, p.get("appearance.input.weight_point"));
        let code = tape.matmul(phi, p.get("appearance.input.weight_code"));
        let code = tape.add(code, p.get("appearance.input.bias"));
        let h = tape.add_row(h, code);
        let mut h = tape.relu(h);
        for b in 1..=2 {
            let u = Self::dense(tape, p, h, &format!("appearance.block{b}.fc1"));
            let u = tape.relu(u);
            let v = Self::dense(tape, p, u, &format!("appearance.block{b}.fc2"));
            let s = tape.add(h, v);
            h = tape.relu(s);
        }
        let c = Self::dense(tape, p, h, "appearance.color");
        let color = tape.sigmoid(c);
        let s = Self::dense(tape, p, h, "appearance.density");
        let sigma = tape.softplus(s);
        RadianceVars { color, sigma }
    }

    /// Single-point evaluation.
    pub fn eval(&self, p: Vec3, d: Vec3, alpha: f64, phi: &LatentCode) -> ([f64; 3], f64) {
        let mut tape = Tape::new();
        let vars = self.params.to_tape(&mut tape, false);
        let pv = tape.constant(p.to_array().to_vec(), 1, 3);
        let dv = tape.constant(d.to_array().to_vec(), 1, 3);
        let av = tape.constant(vec![alpha], 1, 1);
        let phv = tape.constant(phi.0.clone(), 1, phi.dim());
        let out = self.eval_on_tape(&mut tape, &vars, pv, dv, av, phv);
        let c = tape.value(out.color);
        ([c[0], c[1], c[2]], tape.value(out.sigma)[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_params_give_gray_and_ln2() {
        let net = AppearanceNetwork::zeros(AppearanceConfig::default());
        let (c, s) = net.eval(Vec3::new(0.1, 0.2, -0.3), Vec3::new(0.0, 0.0, 1.0), 0.7, &LatentCode(vec![0.5; 64]));
        assert_eq!(c, [0.5, 0.5, 0.5]);
        assert!((s - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = AppearanceNetwork::new(AppearanceConfig::default(), &mut rng);
        let phi = LatentCode::random(64, 0.3, &mut rng);
        let d = Vec3::new(0.3, -0.4, 0.5).normalized();
        let a = net.eval(Vec3::new(0.1, 0.0, 0.2), d, 0.4, &phi);
        let b = net.eval(Vec3::new(0.1, 0.0, 0.2), d, 0.4, &phi);
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn outputs_in_range(
            seed in 0u64..1000,
            px in -0.5f64..0.5, py in -0.5f64..0.5, pz in -0.5f64..0.5,
            alpha in 0.0f64..1.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let net = AppearanceNetwork::new(AppearanceConfig { width: 16, ..Default::default() }, &mut rng);
            let phi = LatentCode::random(64, 1.0, &mut rng);
            let (c, s) = net.eval(Vec3::new(px, py, pz), Vec3::new(0.0, 1.0, 0.0), alpha, &phi);
            prop_assert!(s >= 0.0);
            prop_assert!(c.iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn activations_are_monotone(a in -40.0f64..40.0, b in -40.0f64..40.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let mut tape = Tape::new();
            let x = tape.constant(vec![lo, hi], 1, 2);
            for y in [tape.relu(x), tape.sigmoid(x), tape.softplus(x)] {
                let v = tape.value(y);
                prop_assert!(v[0] <= v[1]);
            }
        }
    }
}
