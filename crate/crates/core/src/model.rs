//! A complete tracker model: backbone plus both heads, and its checkpoint.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{backbone_to_bytes, read_backbone, Arch, BackboneParams, Reader};
use crate::bbe::{BbeHead, DEFAULT_NU};
use crate::error::{Error, Result};
use crate::params::{hash_values, Group};
use crate::tcl::{TclHead, DEFAULT_MU};

const MAGIC: &[u8; 4] = b"TDMD";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub tcl_k: usize,
    pub mu: f64,
    pub bbe_dim: usize,
    pub embed_k: usize,
    pub hidden: usize,
    pub nu: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { tcl_k: 3, mu: DEFAULT_MU, bbe_dim: 32, embed_k: 3, hidden: 64, nu: DEFAULT_NU }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub backbone: BackboneParams,
    pub tcl: TclHead,
    pub bbe: BbeHead,
}

impl Model {
    pub fn init(arch: Arch, heads: &HeadConfig, rng: &mut impl Rng) -> Self {
        let c = arch.out_channels();
        let backbone = BackboneParams::init(arch, rng);
        let tcl = TclHead::init(c, heads.tcl_k, heads.mu, rng);
        let bbe = BbeHead::init(c, heads.bbe_dim, heads.embed_k, heads.hidden, heads.nu, rng);
        Self { backbone, tcl, bbe }
    }

    pub fn head_config(&self) -> HeadConfig {
        HeadConfig {
            tcl_k: self.tcl.k,
            mu: self.tcl.mu,
            bbe_dim: self.bbe.dim,
            embed_k: self.bbe.embed_k,
            hidden: self.bbe.hidden,
            nu: self.bbe.nu,
        }
    }

    /// Architecture descriptor covering backbone and heads.
    pub fn descriptor(&self) -> String {
        let h = self.head_config();
        format!(
            "{};tcl{}k{};bbe{}d{}k{}h",
            self.backbone.arch.descriptor(),
            self.tcl.channels,
            h.tcl_k,
            h.bbe_dim,
            h.embed_k,
            h.hidden
        )
    }

    pub fn group(&self, g: Group) -> &Vec<f64> {
        match g {
            Group::Backbone => &self.backbone.values,
            Group::TclReference => &self.tcl.reference,
            Group::TclTest => &self.tcl.test,
            Group::BbeReference => &self.bbe.reference,
            Group::BbeTest => &self.bbe.test,
            Group::BbePsi => &self.bbe.psi,
        }
    }

    pub fn group_mut(&mut self, g: Group) -> &mut Vec<f64> {
        match g {
            Group::Backbone => &mut self.backbone.values,
            Group::TclReference => &mut self.tcl.reference,
            Group::TclTest => &mut self.tcl.test,
            Group::BbeReference => &mut self.bbe.reference,
            Group::BbeTest => &mut self.bbe.test,
            Group::BbePsi => &mut self.bbe.psi,
        }
    }

    pub fn groups_mut(&mut self) -> BTreeMap<Group, &mut Vec<f64>> {
        let mut m = BTreeMap::new();
        m.insert(Group::Backbone, &mut self.backbone.values);
        m.insert(Group::TclReference, &mut self.tcl.reference);
        m.insert(Group::TclTest, &mut self.tcl.test);
        m.insert(Group::BbeReference, &mut self.bbe.reference);
        m.insert(Group::BbeTest, &mut self.bbe.test);
        m.insert(Group::BbePsi, &mut self.bbe.psi);
        m
    }

    pub fn hashes(&self) -> BTreeMap<Group, u64> {
        Group::ALL.iter().map(|g| (*g, hash_values(self.group(*g)))).collect()
    }

    pub fn is_finite(&self) -> bool {
        Group::ALL.iter().all(|g| self.group(*g).iter().all(|v| v.is_finite()))
    }
}

pub(crate) fn put_f64s(out: &mut Vec<u8>, vals: &[f64]) {
    out.extend_from_slice(&(vals.len() as u64).to_le_bytes());
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn get_f64s(r: &mut Reader, expected: usize, what: &str) -> Result<Vec<f64>> {
    let n = r.u64()? as usize;
    if n != expected {
        return Err(Error::Corrupt(format!("{what}: {n} values, expected {expected}")));
    }
    (0..n).map(|_| r.f64()).collect()
}

pub(crate) fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub(crate) fn model_to_bytes(m: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&backbone_to_bytes(&m.backbone));
    put_str(&mut out, &serde_json::to_string(&m.head_config()).unwrap());
    for g in Group::HEADS {
        put_f64s(&mut out, m.group(g));
    }
    out
}

pub(crate) fn read_model(r: &mut Reader) -> Result<Model> {
    if r.take(4)? != MAGIC {
        return Err(Error::Corrupt("not a model checkpoint".into()));
    }
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(Error::Version { expected: MODEL_VERSION, found: version });
    }
    let backbone = read_backbone(r, None)?;
    let heads: HeadConfig = serde_json::from_str(&r.string()?).map_err(|e| Error::Corrupt(e.to_string()))?;
    let c = backbone.arch.out_channels();
    let mut m = Model {
        backbone,
        tcl: TclHead::zeros(c, heads.tcl_k, heads.mu),
        bbe: BbeHead::zeros(c, heads.bbe_dim, heads.embed_k, heads.hidden, heads.nu),
    };
    for g in Group::HEADS {
        let n = m.group(g).len();
        *m.group_mut(g) = get_f64s(r, n, g.as_str())?;
    }
    Ok(m)
}

/// Backbone values are stored as f32, head values as f64.
pub fn save_model(m: &Model, path: &Path) -> Result<()> {
    fs::write(path, model_to_bytes(m))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model> {
    let buf = fs::read(path)?;
    let mut r = Reader::new(&buf);
    let m = read_model(&mut r)?;
    if r.pos != buf.len() {
        return Err(Error::Corrupt("trailing bytes".into()));
    }
    Ok(m)
}
