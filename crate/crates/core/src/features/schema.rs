use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DEFAULT_EMBED_DIM: usize = 16;
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    User,
    Ad,
    Cross,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Multiplicity {
    #[default]
    Single,
    /// A multiset of ids whose embeddings are summed.
    MultiSumPool,
}

/// The (user group, ad group) pair a cross group is derived from.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CrossSource {
    pub user: String,
    pub ad: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureGroup {
    pub id: String,
    pub side: Side,
    pub cardinality: u32,
    #[serde(default)]
    pub multiplicity: Multiplicity,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cross_of: Option<CrossSource>,
}

fn default_embed_dim() -> usize {
    DEFAULT_EMBED_DIM
}

impl FeatureGroup {
    pub fn user(id: &str, cardinality: u32) -> FeatureGroup {
        FeatureGroup {
            id: id.to_string(),
            side: Side::User,
            cardinality,
            multiplicity: Multiplicity::Single,
            embed_dim: DEFAULT_EMBED_DIM,
            cross_of: None,
        }
    }

    pub fn ad(id: &str, cardinality: u32) -> FeatureGroup {
        FeatureGroup {
            side: Side::Ad,
            ..FeatureGroup::user(id, cardinality)
        }
    }

    pub fn cross(id: &str, cardinality: u32, user: &str, ad: &str) -> FeatureGroup {
        FeatureGroup {
            side: Side::Cross,
            cross_of: Some(CrossSource {
                user: user.to_string(),
                ad: ad.to_string(),
            }),
            ..FeatureGroup::user(id, cardinality)
        }
    }

    pub fn pooled(mut self) -> FeatureGroup {
        self.multiplicity = Multiplicity::MultiSumPool;
        self
    }

    pub fn with_dim(mut self, embed_dim: usize) -> FeatureGroup {
        self.embed_dim = embed_dim;
        self
    }
}

/// Where a group's raw value comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    /// Index into [`UserContext::values`](super::UserContext).
    User(usize),
    /// Index into [`AdContext::values`](super::AdContext).
    Ad(usize),
    /// Computed from one user slot and one ad slot.
    Cross { user: usize, ad: usize },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SchemaDef {
    version: u32,
    groups: Vec<FeatureGroup>,
}

/// Ordered list of feature groups.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "SchemaDef", into = "SchemaDef")]
pub struct FeatureSchema {
    groups: Vec<FeatureGroup>,
    slots: Vec<Slot>,
    user_groups: Vec<usize>,
    ad_groups: Vec<usize>,
}

impl PartialEq for FeatureSchema {
    fn eq(&self, other: &Self) -> bool {
        self.groups == other.groups
    }
}

impl TryFrom<SchemaDef> for FeatureSchema {
    type Error = Error;

    fn try_from(def: SchemaDef) -> Result<Self> {
        if def.version != SCHEMA_VERSION {
            return Err(Error::Schema(format!(
                "schema version {} unsupported",
                def.version
            )));
        }
        FeatureSchema::new(def.groups)
    }
}

impl From<FeatureSchema> for SchemaDef {
    fn from(s: FeatureSchema) -> SchemaDef {
        SchemaDef {
            version: SCHEMA_VERSION,
            groups: s.groups,
        }
    }
}

impl FeatureSchema {
    pub fn new(groups: Vec<FeatureGroup>) -> Result<FeatureSchema> {
        if groups.is_empty() {
            return Err(Error::Schema("no feature groups".into()));
        }
        let mut seen = HashSet::new();
        for g in &groups {
            if !seen.insert(g.id.as_str()) {
                return Err(Error::Schema(format!("duplicate group id `{}`", g.id)));
            }
            if g.cardinality == 0 {
                return Err(Error::Schema(format!("group `{}` has cardinality 0", g.id)));
            }
            if g.embed_dim == 0 {
                return Err(Error::Schema(format!("group `{}` has embed_dim 0", g.id)));
            }
        }

        let mut user_groups = Vec::new();
        let mut ad_groups = Vec::new();
        let mut slots = Vec::with_capacity(groups.len());
        for (i, g) in groups.iter().enumerate() {
            match g.side {
                Side::User => {
                    slots.push(Slot::User(user_groups.len()));
                    user_groups.push(i);
                }
                Side::Ad => {
                    slots.push(Slot::Ad(ad_groups.len()));
                    ad_groups.push(i);
                }
                // resolved below, once all side slots are known
                Side::Cross => slots.push(Slot::Cross { user: 0, ad: 0 }),
            }
            if g.side != Side::Cross && g.cross_of.is_some() {
                return Err(Error::Schema(format!(
                    "non-cross group `{}` declares a cross source",
                    g.id
                )));
            }
        }

        for (i, g) in groups.iter().enumerate() {
            if g.side != Side::Cross {
                continue;
            }
            let src = g.cross_of.as_ref().ok_or_else(|| {
                Error::Schema(format!("cross group `{}` lacks its (user, ad) source", g.id))
            })?;
            if g.multiplicity != Multiplicity::Single {
                return Err(Error::Schema(format!("cross group `{}` must be single-valued", g.id)));
            }
            let resolve = |name: &str, side: Side| -> Result<usize> {
                let idx = groups
                    .iter()
                    .position(|x| x.id == name)
                    .ok_or_else(|| Error::Schema(format!("cross group `{}` references unknown `{name}`", g.id)))?;
                let parent = &groups[idx];
                if parent.side != side || parent.multiplicity != Multiplicity::Single {
                    return Err(Error::Schema(format!(
                        "cross group `{}` source `{name}` must be a single-valued {side:?} group",
                        g.id
                    )));
                }
                Ok(idx)
            };
            let u = resolve(&src.user, Side::User)?;
            let a = resolve(&src.ad, Side::Ad)?;
            let user = match slots[u] {
                Slot::User(s) => s,
                _ => unreachable!(),
            };
            let ad = match slots[a] {
                Slot::Ad(s) => s,
                _ => unreachable!(),
            };
            slots[i] = Slot::Cross { user, ad };
        }

        Ok(FeatureSchema {
            groups,
            slots,
            user_groups,
            ad_groups,
        })
    }

    pub fn groups(&self) -> &[FeatureGroup] {
        &self.groups
    }

    pub fn group(&self, index: usize) -> &FeatureGroup {
        &self.groups[index]
    }

    /// Total number of groups.
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.id == id)
    }

    pub fn require(&self, id: &str) -> Result<usize> {
        self.index_of(id).ok_or_else(|| Error::UnknownGroup(id.to_string()))
    }

    pub fn slot(&self, index: usize) -> Slot {
        self.slots[index]
    }

    /// Schema indices of user-side groups, in schema order.
    pub fn user_groups(&self) -> &[usize] {
        &self.user_groups
    }

    pub fn ad_groups(&self) -> &[usize] {
        &self.ad_groups
    }

    pub fn cross_groups(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.groups[i].side == Side::Cross)
            .collect()
    }

    pub fn all_groups(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    /// Sum of embedding widths over `groups`.
    pub fn width(&self, groups: &[usize]) -> usize {
        groups.iter().map(|&g| self.groups[g].embed_dim).sum()
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("schema serializes");
        let hash = Sha256::digest(&json);
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Sorts, dedups and bounds-checks a group selection.
    pub fn normalize_selection(&self, groups: &[usize]) -> Result<Vec<usize>> {
        if groups.is_empty() {
            return Err(Error::EmptySelection);
        }
        let mut out = groups.to_vec();
        out.sort_unstable();
        out.dedup();
        if let Some(&bad) = out.iter().find(|&&g| g >= self.len()) {
            return Err(Error::UnknownGroup(format!("#{bad}")));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<FeatureGroup> {
        vec![
            FeatureGroup::user("u", 10),
            FeatureGroup::user("hist", 5).pooled(),
            FeatureGroup::ad("a", 7),
            FeatureGroup::cross("ua", 32, "u", "a"),
        ]
    }

    #[test]
    fn slots_resolve() {
        let s = FeatureSchema::new(sample()).unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!(s.slot(0), Slot::User(0));
        assert_eq!(s.slot(1), Slot::User(1));
        assert_eq!(s.slot(2), Slot::Ad(0));
        assert_eq!(s.slot(3), Slot::Cross { user: 0, ad: 0 });
        assert_eq!(s.width(&[0, 2, 3]), 48);
    }

    #[test]
    fn rejects_bad_schemas() {
        let mut dup = sample();
        dup.push(FeatureGroup::ad("a", 3));
        assert!(FeatureSchema::new(dup).is_err());

        let mut zero = sample();
        zero[0].cardinality = 0;
        assert!(FeatureSchema::new(zero).is_err());

        let mut dangling = sample();
        dangling.push(FeatureGroup::cross("x", 4, "u", "nope"));
        assert!(FeatureSchema::new(dangling).is_err());

        let mut pooled_parent = sample();
        pooled_parent.push(FeatureGroup::cross("x", 4, "hist", "a"));
        assert!(FeatureSchema::new(pooled_parent).is_err());

        let mut swapped = sample();
        swapped.push(FeatureGroup::cross("x", 4, "a", "u"));
        assert!(FeatureSchema::new(swapped).is_err());
    }

    #[test]
    fn json_round_trip_and_digest() {
        let s = FeatureSchema::new(sample()).unwrap();
        let json = serde_json::to_string(&s).unwrap();
        let back: FeatureSchema = serde_json::from_str(&json).unwrap();
        assert_eq!(s, back);
        assert_eq!(s.digest(), back.digest());

        let mut changed = sample();
        changed[2].cardinality = 8;
        let other = FeatureSchema::new(changed).unwrap();
        assert_ne!(s.digest(), other.digest());
    }
}
