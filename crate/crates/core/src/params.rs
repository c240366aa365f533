//! Named parameter tensors with training-group roles, and tape binding.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::numerics::tape::{Tape, VarId};
use crate::numerics::tensor::Tensor;
use crate::Scalar;

/// Training group a parameter belongs to.
///
/// - `Fresh`: newly initialized (focusing transformer, stem, cls, dense
///   head) — trains at the full learning rate.
/// - `Tunable`: inherited blocks that fine-tune at a reduced rate and stay
///   frozen during the warmup epoch.
/// - `Frozen`: inherited weights that must remain bit-identical to the
///   donor (late blocks, final LN, classifier/projection).
/// - `Teacher`: alignment-target weights; never trained, never part of the
///   student.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Fresh,
    Tunable,
    Frozen,
    Teacher,
}

impl Role {
    /// Whether this group ever receives optimizer updates.
    pub fn trainable(self) -> bool {
        matches!(self, Role::Fresh | Role::Tunable)
    }

    /// Learning-rate multiplier; the tunable group is held at zero during
    /// the warmup epoch and at 0.1x afterwards.
    pub fn lr_multiplier(self, warmup: bool, tunable_mult: f64) -> f64 {
        match self {
            Role::Fresh => 1.0,
            Role::Tunable => {
                if warmup {
                    0.0
                } else {
                    tunable_mult
                }
            }
            Role::Frozen | Role::Teacher => 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Param<S: Scalar> {
    pub value: Tensor<S>,
    pub role: Role,
}

/// Ordered collection of named parameters (insertion order is the
/// checkpoint and iteration order, keeping runs deterministic).
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S: Scalar> {
    entries: IndexMap<String, Param<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { entries: IndexMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<S>, role: Role) {
        let prev = self.entries.insert(name.to_string(), Param { value, role });
        assert!(prev.is_none(), "duplicate parameter name: {name}");
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &Tensor<S> {
        &self.entries.get(name).unwrap_or_else(|| panic!("missing parameter: {name}")).value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<S> {
        &mut self.entries.get_mut(name).unwrap_or_else(|| panic!("missing parameter: {name}")).value
    }

    pub fn role(&self, name: &str) -> Role {
        self.entries.get(name).unwrap_or_else(|| panic!("missing parameter: {name}")).role
    }

    pub fn remove(&mut self, name: &str) -> Option<Param<S>> {
        self.entries.shift_remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<S>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar elements across all parameters.
    pub fn total_elems(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// Bind every parameter onto a tape. With `train` set, parameters whose
    /// role is trainable become gradient leaves; everything else is
    /// recorded as a constant (so e.g. the teacher subgraph records no
    /// backward closures at all).
    pub fn bind(&self, tape: &mut Tape<S>, train: bool) -> Bound {
        let mut map = IndexMap::with_capacity(self.entries.len());
        for (name, p) in &self.entries {
            let id = if train && p.role.trainable() {
                tape.leaf(p.value.clone())
            } else {
                tape.constant(p.value.clone())
            };
            map.insert(name.clone(), id);
        }
        Bound { map }
    }

    /// Bind with every parameter as a gradient leaf, ignoring roles.
    /// Only the supervised teacher trainer uses this; alignment training
    /// goes through [`ParamStore::bind`] so role rules apply.
    pub fn bind_all(&self, tape: &mut Tape<S>) -> Bound {
        let mut map = IndexMap::with_capacity(self.entries.len());
        for (name, p) in &self.entries {
            map.insert(name.clone(), tape.leaf(p.value.clone()));
        }
        Bound { map }
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (name, p) in &self.entries {
            out.insert(name, p.value.cast::<T>(), p.role);
        }
        out
    }
}

/// Tape ids for one bound [`ParamStore`].
pub struct Bound {
    map: IndexMap<String, VarId>,
}

impl Bound {
    pub fn p(&self, name: &str) -> VarId {
        *self.map.get(name).unwrap_or_else(|| panic!("unbound parameter: {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, VarId)> {
        self.map.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_multipliers_follow_group_rules() {
        assert_eq!(Role::Fresh.lr_multiplier(true, 0.1), 1.0);
        assert_eq!(Role::Tunable.lr_multiplier(true, 0.1), 0.0);
        assert_eq!(Role::Tunable.lr_multiplier(false, 0.1), 0.1);
        assert_eq!(Role::Frozen.lr_multiplier(false, 0.1), 0.0);
        assert_eq!(Role::Teacher.lr_multiplier(false, 0.1), 0.0);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter")]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a", Tensor::zeros(vec![2]), Role::Fresh);
        s.insert("a", Tensor::zeros(vec![2]), Role::Fresh);
    }

    #[test]
    fn bind_marks_only_trainable_as_leaves() {
        let mut s = ParamStore::<f64>::new();
        s.insert("fresh", Tensor::zeros(vec![2]), Role::Fresh);
        s.insert("tun", Tensor::zeros(vec![2]), Role::Tunable);
        s.insert("froz", Tensor::zeros(vec![2]), Role::Frozen);
        s.insert("teach", Tensor::zeros(vec![2]), Role::Teacher);
        let mut tape = Tape::new();
        let b = s.bind(&mut tape, true);
        assert!(tape.needs_grad(b.p("fresh")));
        assert!(tape.needs_grad(b.p("tun")));
        assert!(!tape.needs_grad(b.p("froz")));
        assert!(!tape.needs_grad(b.p("teach")));
        let b2 = s.bind(&mut tape, false);
        assert!(!tape.needs_grad(b2.p("fresh")));
    }
}
