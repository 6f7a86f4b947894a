use std::collections::{BTreeSet, HashMap};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{GradError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), GradError> {
        let ok_beta = |b: f64| b > 0.0 && b < 1.0;
        if !(self.learning_rate > 0.0) || !ok_beta(self.beta1) || !ok_beta(self.beta2) || !(self.epsilon > 0.0)
        {
            return Err(GradError::InvalidConfig(format!("{self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Entry {
    value: Tensor,
    group: String,
    first_moment: Tensor,
    second_moment: Tensor,
    steps: u64,
}

/// Named trainable tensors, each assigned to exactly one network group, with
/// per-entry Adam state.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    entries: IndexMap<String, Entry>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, group: impl Into<String>, value: Tensor) -> Result<(), GradError> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(GradError::DuplicateParameter(name));
        }
        let zeros = Tensor::zeros(value.shape());
        self.entries.insert(
            name,
            Entry {
                value,
                group: group.into(),
                first_moment: zeros.clone(),
                second_moment: zeros,
                steps: 0,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn group_of(&self, name: &str) -> Option<&str> {
        self.entries.get(name).map(|e| e.group.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Parameter count across all entries.
    pub fn size(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    /// `(name, group, tensor)` in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, &Tensor)> {
        self.entries
            .iter()
            .map(|(n, e)| (n.as_str(), e.group.as_str(), &e.value))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Distinct group names in first-seen order.
    pub fn groups(&self) -> Vec<String> {
        let mut seen = Vec::<String>::new();
        for e in self.entries.values() {
            if !seen.contains(&e.group) {
                seen.push(e.group.clone());
            }
        }
        seen
    }

    pub fn group_entries<'a>(&'a self, group: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.entries
            .iter()
            .filter(move |(_, e)| e.group == group)
            .map(|(n, _)| n.as_str())
    }

    /// SHA-256 over names and values of every entry in `group`.
    pub fn group_checksum(&self, group: &str) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, e) in &self.entries {
            if e.group == group {
                h.update(name.as_bytes());
                e.value.feed(&mut h);
            }
        }
        h.finalize().into()
    }

    pub fn checksums(&self) -> HashMap<String, [u8; 32]> {
        self.groups()
            .into_iter()
            .map(|g| {
                let c = self.group_checksum(&g);
                (g, c)
            })
            .collect()
    }

    /// Copies parameter values from `other`, which must have identical names
    /// and shapes. Optimizer state is left untouched.
    pub fn copy_values_from(&mut self, other: &ParameterStore) -> Result<(), GradError> {
        for (name, e) in self.entries.iter_mut() {
            let src = other
                .entries
                .get(name)
                .ok_or_else(|| GradError::UnknownParameter(name.clone()))?;
            if src.value.shape() != e.value.shape() {
                return Err(GradError::ShapeMismatch {
                    op: "copy_values_from",
                    node: 0,
                    left: e.value.shape().to_vec(),
                    right: src.value.shape().to_vec(),
                });
            }
            e.value = src.value.clone();
        }
        Ok(())
    }

    /// Clears moments and step counts for the given groups (all when `None`).
    pub fn reset_optimizer(&mut self, groups: Option<&[&str]>) {
        for e in self.entries.values_mut() {
            if groups.is_none_or(|g| g.contains(&e.group.as_str())) {
                e.first_moment = Tensor::zeros(e.value.shape());
                e.second_moment = Tensor::zeros(e.value.shape());
                e.steps = 0;
            }
        }
    }

    fn masked(&self, mask: Option<&[&str]>) -> BTreeSet<&str> {
        self.entries
            .iter()
            .filter(|(_, e)| mask.is_none_or(|m| m.contains(&e.group.as_str())))
            .map(|(n, _)| n.as_str())
            .collect()
    }

    /// Restricts `grads` to the masked groups, filling zeros for parameters
    /// that were not reached by the backward pass.
    pub fn select_gradients(&self, grads: &HashMap<String, Tensor>, mask: Option<&[&str]>) -> HashMap<String, Tensor> {
        self.masked(mask)
            .into_iter()
            .map(|name| {
                let g = grads
                    .get(name)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.entries[name].value.shape()));
                (name.to_string(), g)
            })
            .collect()
    }

    /// One bias-corrected Adam step over the masked groups (all groups when
    /// `mask` is `None`). `grads` must cover exactly the masked entries; a
    /// gradient for any other parameter is rejected before anything changes.
    pub fn adam_step(
        &mut self,
        grads: &HashMap<String, Tensor>,
        cfg: &AdamConfig,
        mask: Option<&[&str]>,
    ) -> Result<(), GradError> {
        cfg.validate()?;
        let allowed = self.masked(mask);
        for (name, g) in grads {
            let Some(entry) = self.entries.get(name) else {
                return Err(GradError::UnknownParameter(name.clone()));
            };
            if !allowed.contains(name.as_str()) {
                return Err(GradError::MaskLeak {
                    name: name.clone(),
                    group: entry.group.clone(),
                });
            }
            if g.shape() != entry.value.shape() {
                return Err(GradError::ShapeMismatch {
                    op: "adam_step",
                    node: 0,
                    left: entry.value.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(GradError::NonFinite(name.clone()));
            }
        }
        if let Some(missing) = allowed.iter().find(|n| !grads.contains_key(**n)) {
            return Err(GradError::MissingGradient(missing.to_string()));
        }

        for (name, g) in grads {
            let e = self.entries.get_mut(name).expect("validated above");
            e.steps += 1;
            let t = e.steps as i32;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            let m = e.first_moment.data_mut();
            let v = e.second_moment.data_mut();
            let p = e.value.data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
        }
        Ok(())
    }

    #[cfg(test)]
    pub(crate) fn moments(&self, name: &str) -> (&Tensor, &Tensor, u64) {
        let e = &self.entries[name];
        (&e.first_moment, &e.second_moment, e.steps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("a/w", "A", Tensor::vector(vec![1.0, 2.0])).unwrap();
        s.insert("b/w", "B", Tensor::scalar(0.0)).unwrap();
        s
    }

    fn grads(pairs: &[(&str, Tensor)]) -> HashMap<String, Tensor> {
        pairs.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = store();
        let cfg = AdamConfig::default();
        let g = grads(&[("b/w", Tensor::scalar(1.0))]);
        s.adam_step(&g, &cfg, Some(&["B"])).unwrap();
        let p = s.get("b/w").unwrap().item();
        let expected = -cfg.learning_rate * 1.0 / (1.0 + cfg.epsilon);
        assert!((p - expected).abs() < 1e-9, "{p}");
        assert!((p + 0.001).abs() < 1e-9);
    }

    #[test]
    fn mask_keeps_other_groups_bit_identical() {
        let mut s = store();
        let before = s.group_checksum("A");
        let g = grads(&[("b/w", Tensor::scalar(0.3))]);
        for _ in 0..5 {
            s.adam_step(&g, &AdamConfig::default(), Some(&["B"])).unwrap();
        }
        assert_eq!(before, s.group_checksum("A"));
        assert_ne!(s.get("b/w").unwrap().item(), 0.0);
    }

    #[test]
    fn leaked_gradient_is_rejected_without_side_effects() {
        let mut s = store();
        let before = s.checksums();
        let g = grads(&[("b/w", Tensor::scalar(1.0)), ("a/w", Tensor::vector(vec![1.0, 1.0]))]);
        let err = s.adam_step(&g, &AdamConfig::default(), Some(&["B"])).unwrap_err();
        assert!(matches!(err, GradError::MaskLeak { .. }));
        assert_eq!(before, s.checksums());
    }

    #[test]
    fn missing_gradient_is_rejected() {
        let mut s = store();
        let g = grads(&[("b/w", Tensor::scalar(1.0))]);
        assert!(matches!(
            s.adam_step(&g, &AdamConfig::default(), None),
            Err(GradError::MissingGradient(_))
        ));
    }

    #[test]
    fn zero_gradient_leaves_parameters_but_advances_state() {
        let mut s = store();
        let g = s.select_gradients(&HashMap::new(), None);
        s.adam_step(&g, &AdamConfig::default(), None).unwrap();
        assert_eq!(s.get("a/w").unwrap().data(), &[1.0, 2.0]);
        let (m, v, steps) = s.moments("a/w");
        assert_eq!(steps, 1);
        assert_eq!(m.shape(), &[2]);
        assert_eq!(v.shape(), &[2]);
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = AdamConfig {
            beta1: 1.0,
            ..AdamConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(AdamConfig::with_learning_rate(0.0).validate().is_err());
    }
}
