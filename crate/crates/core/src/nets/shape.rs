//! Shape decoder: latent code -> occupancy scaffold.
//!
//! `FC(latent -> hidden) -> ReLU -> FC(hidden -> seed³·c0)`, reshaped to a
//! `c0`-channel seed volume, then three `[upsample x2 -> conv3³ -> ReLU]`
//! blocks and a `1³` convolution to one channel followed by a logistic.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::math::Aabb;
use crate::nets::params::{LatentCode, ParamSet, ParamTensor, ParamVars};
use crate::voxel::VoxelGrid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapeConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    pub seed_res: usize,
    pub seed_channels: usize,
    /// Output channels of the three upsampling blocks.
    pub block_channels: [usize; 3],
}

impl Default for ShapeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            hidden: 512,
            seed_res: 4,
            seed_channels: 8,
            block_channels: [8, 4, 4],
        }
    }
}

impl ShapeConfig {
    pub fn resolution(&self) -> usize {
        self.seed_res * 8
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.resolution(); 3]
    }

    fn to_meta(&self) -> Vec<f64> {
        let mut v = vec![
            self.latent_dim as f64,
            self.hidden as f64,
            self.seed_res as f64,
            self.seed_channels as f64,
        ];
        v.extend(self.block_channels.iter().map(|c| *c as f64));
        v
    }

    fn from_meta(v: &[f64]) -> Result<Self> {
        if v.len() != 7 {
            return shape_err("shape meta tensor needs 7 entries");
        }
        Ok(Self {
            latent_dim: v[0] as usize,
            hidden: v[1] as usize,
            seed_res: v[2] as usize,
            seed_channels: v[3] as usize,
            block_channels: [v[4] as usize, v[5] as usize, v[6] as usize],
        })
    }
}

pub const SHAPE_META: &str = "meta/shape";

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeNetwork {
    pub config: ShapeConfig,
    pub params: ParamSet,
}

impl ShapeNetwork {
    /// All-zero parameters.
    pub fn zeros(config: ShapeConfig) -> Self {
        let mut params = ParamSet::new();
        for (name, dims) in Self::layout(&config) {
            params.insert(ParamTensor::zeros(name, dims)).expect("unique names");
        }
        Self { config, params }
    }

    pub fn new<R: Rng + ?Sized>(config: ShapeConfig, rng: &mut R) -> Self {
        let mut net = Self::zeros(config);
        let fan_in: BTreeMap<String, usize> = Self::layout(&net.config)
            .into_iter()
            .filter(|(n, _)| n.ends_with(".weight"))
            .map(|(n, d)| {
                let f = if n.starts_with("shape.fc") { d[0] } else { d[1..].iter().product() };
                (n, f)
            })
            .collect();
        net.params.kaiming_uniform(&fan_in, rng);
        net
    }

    pub fn from_params(config: ShapeConfig, params: ParamSet) -> Result<Self> {
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
        ParamTensor {
            name: SHAPE_META.into(),
            dims: vec![7],
            values: self.config.to_meta(),
        }
    }

    pub fn config_from_meta(t: &ParamTensor) -> Result<ShapeConfig> {
        ShapeConfig::from_meta(&t.values)
    }

    fn layout(c: &ShapeConfig) -> Vec<(String, Vec<usize>)> {
        let seed = c.seed_res.pow(3) * c.seed_channels;
        let mut out = vec![
            ("shape.fc1.weight".to_string(), vec![c.latent_dim, c.hidden]),
            ("shape.fc1.bias".to_string(), vec![c.hidden]),
            ("shape.fc2.weight".to_string(), vec![c.hidden, seed]),
            ("shape.fc2.bias".to_string(), vec![seed]),
        ];
        let mut cin = c.seed_channels;
        for (i, cout) in c.block_channels.iter().enumerate() {
            out.push((format!("shape.conv{}.weight", i + 1), vec![*cout, cin, 3, 3, 3]));
            out.push((format!("shape.conv{}.bias", i + 1), vec![*cout]));
            cin = *cout;
        }
        out.push(("shape.out.weight".to_string(), vec![1, cin, 1, 1, 1]));
        out.push(("shape.out.bias".to_string(), vec![1]));
        out
    }

    /// Decodes on the tape; the result is a `1 x res³` occupancy buffer.
    pub fn decode_on_tape(&self, tape: &mut Tape, p: &ParamVars, theta: Var) -> Var {
        let c = &self.config;
        let h = tape.matmul(theta, p.get("shape.fc1.weight"));
        let h = tape.add_row(h, p.get("shape.fc1.bias"));
        let h = tape.relu(h);
        let h = tape.matmul(h, p.get("shape.fc2.weight"));
        let h = tape.add_row(h, p.get("shape.fc2.bias"));
        let mut res = c.seed_res;
        let mut x = tape.reshape(h, c.seed_channels, res.pow(3));
        for i in 1..=3 {
            x = tape.upsample2(x, [res; 3]);
            res *= 2;
            x = tape.conv3d(x, p.get(&format!("shape.conv{i}.weight")), p.get(&format!("shape.conv{i}.bias")), [res; 3], 3);
            x = tape.relu(x);
        }
        let x = tape.conv3d(x, p.get("shape.out.weight"), p.get("shape.out.bias"), [res; 3], 1);
        tape.sigmoid(x)
    }

    pub fn decode(&self, theta: &LatentCode) -> VoxelGrid {
        let mut tape = Tape::new();
        let p = self.params.to_tape(&mut tape, false);
        let t = tape.constant(theta.0.clone(), 1, theta.dim());
        let out = self.decode_on_tape(&mut tape, &p, t);
        VoxelGrid {
            dims: self.config.dims(),
            bounds: Aabb::unit(),
            values: tape.value(out).to_vec(),
        }
    }
}
