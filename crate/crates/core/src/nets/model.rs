use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nets::params::{load_srft, save_srft, LatentCode, ParamSet, ParamTensor};
use crate::nets::{AppearanceNetwork, ShapeNetwork, APPEARANCE_META, SHAPE_META};

pub const MODEL_META: &str = "meta/model";

/// Both networks plus per-object latent tables.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub shape: ShapeNetwork,
    pub appearance: AppearanceNetwork,
    pub theta: BTreeMap<String, LatentCode>,
    pub phi: BTreeMap<String, LatentCode>,
    /// Scaffold-free model: occupancy input pinned to 1, rays clipped to the unit box.
    pub conditional: bool,
}

impl Model {
    pub fn tensors(&self) -> Vec<ParamTensor> {
        let mut out = vec![
            ParamTensor {
                name: MODEL_META.into(),
                dims: vec![1],
                values: vec![self.conditional as u8 as f64],
            },
            self.shape.meta_tensor(),
            self.appearance.meta_tensor(),
        ];
        out.extend(self.shape.params.iter().cloned());
        out.extend(self.appearance.params.iter().cloned());
        out.extend(self.theta.iter().map(|(id, c)| c.as_tensor(format!("theta/{id}"))));
        out.extend(self.phi.iter().map(|(id, c)| c.as_tensor(format!("phi/{id}"))));
        out
    }

    pub fn from_tensors(tensors: Vec<ParamTensor>) -> Result<Self> {
        let find = |name: &str| {
            tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))
        };
        let shape_cfg = ShapeNetwork::config_from_meta(find(SHAPE_META)?)?;
        let app_cfg = AppearanceNetwork::config_from_meta(find(APPEARANCE_META)?)?;
        let conditional = find(MODEL_META)?.values.first().copied().unwrap_or(0.0) != 0.0;
        let (mut sp, mut ap) = (ParamSet::new(), ParamSet::new());
        let (mut theta, mut phi) = (BTreeMap::new(), BTreeMap::new());
        for t in tensors {
            if let Some(id) = t.name.strip_prefix("theta/") {
                theta.insert(id.to_string(), LatentCode(t.values));
            } else if let Some(id) = t.name.strip_prefix("phi/") {
                phi.insert(id.to_string(), LatentCode(t.values));
            } else if t.name.starts_with("shape.") {
                sp.insert(t)?;
            } else if t.name.starts_with("appearance.") {
                ap.insert(t)?;
            }
        }
        Ok(Self {
            shape: ShapeNetwork::from_params(shape_cfg, sp)?,
            appearance: AppearanceNetwork::from_params(app_cfg, ap)?,
            theta,
            phi,
            conditional,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_srft(path, &self.tensors())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensors(load_srft(path)?)
    }

    pub fn object_ids(&self) -> impl Iterator<Item = &String> {
        self.phi.keys()
    }

    pub fn mean_theta(&self) -> Option<LatentCode> {
        LatentCode::mean(self.theta.values())
    }

    pub fn mean_phi(&self) -> Option<LatentCode> {
        LatentCode::mean(self.phi.values())
    }
}
