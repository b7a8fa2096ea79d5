//! Named parameter groups and the optimizers that update them.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Which side of the two-branch head a parameter group belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Branch {
    Reference,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Group {
    Backbone,
    /// TCL filter predictor.
    TclReference,
    /// TCL test-feature projection.
    TclTest,
    /// BBE modulation.
    BbeReference,
    /// BBE test embedding.
    BbeTest,
    /// BBE regressor.
    BbePsi,
}

impl Group {
    pub const ALL: [Group; 6] =
        [Group::Backbone, Group::TclReference, Group::TclTest, Group::BbeReference, Group::BbeTest, Group::BbePsi];
    pub const HEADS: [Group; 5] = [Group::TclReference, Group::TclTest, Group::BbeReference, Group::BbeTest, Group::BbePsi];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Backbone => "backbone",
            Group::TclReference => "tcl.reference",
            Group::TclTest => "tcl.test",
            Group::BbeReference => "bbe.reference",
            Group::BbeTest => "bbe.test",
            Group::BbePsi => "bbe.psi",
        }
    }

    pub fn branch(self) -> Option<Branch> {
        match self {
            Group::TclReference | Group::BbeReference => Some(Branch::Reference),
            Group::TclTest | Group::BbeTest => Some(Branch::Test),
            _ => None,
        }
    }

    pub fn is_tcl(self) -> bool {
        matches!(self, Group::TclReference | Group::TclTest)
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Small set of groups.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroupSet(u8);

impl GroupSet {
    pub const EMPTY: GroupSet = GroupSet(0);

    pub fn all() -> Self {
        Self::from_groups(&Group::ALL)
    }

    pub fn from_groups(groups: &[Group]) -> Self {
        let mut s = Self::EMPTY;
        for g in groups {
            s.insert(*g);
        }
        s
    }

    fn bit(g: Group) -> u8 {
        1 << (g as u8)
    }

    pub fn insert(&mut self, g: Group) {
        self.0 |= Self::bit(g);
    }

    pub fn remove(&mut self, g: Group) {
        self.0 &= !Self::bit(g);
    }

    pub fn contains(&self, g: Group) -> bool {
        self.0 & Self::bit(g) != 0
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn union(self, other: GroupSet) -> GroupSet {
        GroupSet(self.0 | other.0)
    }

    pub fn intersection(self, other: GroupSet) -> GroupSet {
        GroupSet(self.0 & other.0)
    }

    pub fn iter(self) -> impl Iterator<Item = Group> {
        Group::ALL.into_iter().filter(move |g| self.contains(*g))
    }
}

/// Gradients keyed by group. Groups that are not trainable are simply absent.
pub type Gradients = BTreeMap<Group, Vec<f64>>;

pub fn add_into(dst: &mut Gradients, src: &Gradients) {
    for (g, v) in src {
        let d = dst.entry(*g).or_insert_with(|| vec![0.0; v.len()]);
        for (a, b) in d.iter_mut().zip(v) {
            *a += b;
        }
    }
}

pub fn scale_all(grads: &mut Gradients, k: f64) {
    grads.values_mut().flat_map(|v| v.iter_mut()).for_each(|v| *v *= k);
}

/// FNV-1a over the raw bit patterns; used to detect any change in a group.
pub fn hash_values(values: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-group optimizer state. Plain SGD keeps none; Adam keeps its two
/// moment estimates and a step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub steps: u64,
    pub moments: BTreeMap<Group, (Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self { kind, steps: 0, moments: BTreeMap::new() }
    }

    /// Applies one update. `lr` gives the step size for each group present in
    /// `grads`; groups without a gradient are never touched.
    pub fn step(&mut self, params: &mut BTreeMap<Group, &mut Vec<f64>>, grads: &Gradients, lr: impl Fn(Group) -> f64) {
        self.steps += 1;
        for (group, g) in grads {
            let Some(p) = params.get_mut(group) else { continue };
            let rate = lr(*group);
            match self.kind {
                OptimizerKind::Sgd => {
                    for (pv, gv) in p.iter_mut().zip(g) {
                        *pv -= rate * gv;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let (m, v) = self.moments.entry(*group).or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
                    let t = self.steps as i32;
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for i in 0..g.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        p[i] -= rate * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}
