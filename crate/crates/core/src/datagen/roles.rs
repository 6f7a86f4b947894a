use serde::{Deserialize, Serialize};

use super::measurement::{MeasurementDataset, DIM_A, DIM_C, DIM_X};
use super::DataError;
use crate::ndgrad::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Parent,
    CoParent,
    Child,
    Target,
}

/// Role of every observed column of the measurement data.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleMap {
    pub columns: Vec<(String, Role)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode", content = "k")]
pub enum Misspecification {
    /// The first `k` child columns are treated as co-parents.
    RelabelChildrenAsCoparents(usize),
    /// Columns `x{i}` and `c{i}` exchange roles for `i < k`.
    SwapPairs(usize),
}

/// Covariate matrices laid out according to a role map.
#[derive(Clone, Debug, PartialEq)]
pub struct RoleViews {
    pub a: Tensor,
    pub c: Tensor,
    pub x: Tensor,
}

impl RoleMap {
    /// The true graph of the generator.
    pub fn measurement() -> Self {
        let mut columns: Vec<(String, Role)> = (0..DIM_A).map(|i| (format!("a{i}"), Role::Parent)).collect();
        columns.extend((0..DIM_C).map(|i| (format!("c{i}"), Role::CoParent)));
        columns.extend((0..DIM_X).map(|i| (format!("x{i}"), Role::Child)));
        columns.push(("y".into(), Role::Target));
        Self { columns }
    }

    pub fn count(&self, role: Role) -> usize {
        self.columns.iter().filter(|(_, r)| *r == role).count()
    }

    pub fn role_of(&self, name: &str) -> Option<Role> {
        self.columns.iter().find(|(n, _)| n == name).map(|(_, r)| *r)
    }

    /// `(dim_a, dim_c, dim_x)` under this map.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.count(Role::Parent), self.count(Role::CoParent), self.count(Role::Child))
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.count(Role::Target) != 1 {
            return Err(DataError::Invalid("exactly one target column is required".into()));
        }
        let mut names: Vec<&str> = self.columns.iter().map(|(n, _)| n.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(DataError::Invalid("duplicate column names".into()));
        }
        Ok(())
    }

    pub fn misspecify(&self, mode: Misspecification) -> Result<Self, DataError> {
        let mut out = self.clone();
        match mode {
            Misspecification::RelabelChildrenAsCoparents(k) => {
                let children: Vec<usize> = (0..self.columns.len()).filter(|&i| self.columns[i].1 == Role::Child).collect();
                if k > children.len() {
                    return Err(DataError::TooMany {
                        requested: k,
                        available: children.len(),
                    });
                }
                for &i in &children[..k] {
                    out.columns[i].1 = Role::CoParent;
                }
            }
            Misspecification::SwapPairs(k) => {
                let pairs = (0..).take_while(|i| self.role_of(&format!("x{i}")).is_some() && self.role_of(&format!("c{i}")).is_some());
                let available = pairs.count();
                if k > available {
                    return Err(DataError::TooMany { requested: k, available });
                }
                for i in 0..k {
                    let xi = self.position(&format!("x{i}")).expect("checked");
                    let ci = self.position(&format!("c{i}")).expect("checked");
                    out.columns[xi].1 = self.columns[ci].1;
                    out.columns[ci].1 = self.columns[xi].1;
                }
            }
        }
        Ok(out)
    }

    fn position(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|(n, _)| n == name)
    }

    /// Gathers the columns of `ds` into parent, co-parent and child blocks,
    /// each in column order.
    pub fn project(&self, ds: &MeasurementDataset) -> Result<RoleViews, DataError> {
        self.validate()?;
        let n = ds.rows();
        let source = |name: &str| -> Result<(&Tensor, usize), DataError> {
            let (block, idx) = name.split_at(1);
            let idx: usize = idx.parse().map_err(|_| DataError::Invalid(format!("unknown column {name:?}")))?;
            let t = match block {
                "a" => &ds.a,
                "c" => &ds.c,
                "x" => &ds.x,
                _ => return Err(DataError::Invalid(format!("unknown column {name:?}"))),
            };
            if idx >= t.cols() {
                return Err(DataError::Invalid(format!("unknown column {name:?}")));
            }
            Ok((t, idx))
        };
        let gather = |role: Role| -> Result<Tensor, DataError> {
            let cols: Vec<&str> = self.columns.iter().filter(|(_, r)| *r == role).map(|(n, _)| n.as_str()).collect();
            let mut data = vec![0.0; n * cols.len()];
            for (j, name) in cols.iter().enumerate() {
                let (t, k) = source(name)?;
                for i in 0..n {
                    data[i * cols.len() + j] = t.get2(i, k);
                }
            }
            Ok(Tensor::new(vec![n, cols.len()], data)?)
        };
        Ok(RoleViews {
            a: gather(Role::Parent)?,
            c: gather(Role::CoParent)?,
            x: gather(Role::Child)?,
        })
    }
}
