use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::schema::{FeatureSchema, Multiplicity, Side};
use crate::error::{Error, Result};

/// Raw value of one feature group for one entity.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FeatureValue {
    Id(u32),
    /// Multiset as `(id, count)` pairs; summed in the order given.
    Pooled(Vec<(u32, u32)>),
}

impl FeatureValue {
    pub fn as_id(&self) -> Option<u32> {
        match self {
            FeatureValue::Id(id) => Some(*id),
            FeatureValue::Pooled(_) => None,
        }
    }
}

/// User-side feature values, aligned with [`FeatureSchema::user_groups`].
#[derive(Clone, Debug, PartialEq)]
pub struct UserContext {
    pub user_id: u32,
    pub values: Vec<FeatureValue>,
}

/// Ad-side feature values, aligned with [`FeatureSchema::ad_groups`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdContext {
    pub ad_id: u32,
    pub values: Vec<FeatureValue>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawExample {
    pub user: Arc<UserContext>,
    pub ad: Arc<AdContext>,
    pub label: u8,
    pub bid: f32,
    pub timestamp: u64,
}

/// Feature values keyed by group id, as they appear in JSON documents.
pub type FeatureMap = BTreeMap<String, FeatureValue>;

fn reduce(value: &FeatureValue, cardinality: u32, multiplicity: Multiplicity) -> FeatureValue {
    match (value, multiplicity) {
        (FeatureValue::Id(id), Multiplicity::Single) => FeatureValue::Id(id % cardinality),
        (FeatureValue::Id(id), Multiplicity::MultiSumPool) => {
            FeatureValue::Pooled(vec![(id % cardinality, 1)])
        }
        (FeatureValue::Pooled(entries), _) => FeatureValue::Pooled(
            entries
                .iter()
                .map(|&(id, count)| (id % cardinality, count))
                .collect(),
        ),
    }
}

fn resolve_side(schema: &FeatureSchema, side: Side, map: &FeatureMap) -> Result<Vec<FeatureValue>> {
    for key in map.keys() {
        let idx = schema.require(key)?;
        if schema.group(idx).side == Side::Cross {
            return Err(Error::InvalidArgument(format!(
                "cross feature `{key}` is computed, not supplied"
            )));
        }
    }
    let indices = match side {
        Side::User => schema.user_groups(),
        Side::Ad => schema.ad_groups(),
        Side::Cross => unreachable!(),
    };
    indices
        .iter()
        .map(|&g| {
            let group = schema.group(g);
            let v = map
                .get(&group.id)
                .ok_or_else(|| Error::InvalidArgument(format!("missing value for `{}`", group.id)))?;
            if group.multiplicity == Multiplicity::Single && matches!(v, FeatureValue::Pooled(_)) {
                return Err(Error::InvalidArgument(format!(
                    "group `{}` is single-valued",
                    group.id
                )));
            }
            Ok(reduce(v, group.cardinality, group.multiplicity))
        })
        .collect()
}

impl UserContext {
    /// Resolves a name-keyed map. Out-of-vocabulary ids are reduced modulo the
    /// group cardinality; values of other sides are rejected.
    pub fn from_map(schema: &FeatureSchema, user_id: u32, map: &FeatureMap) -> Result<UserContext> {
        let own: FeatureMap = map
            .iter()
            .filter(|(k, _)| schema.index_of(k).map(|i| schema.group(i).side) != Some(Side::Ad))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Ok(UserContext {
            user_id,
            values: resolve_side(schema, Side::User, &own)?,
        })
    }

    pub fn to_map(&self, schema: &FeatureSchema) -> FeatureMap {
        schema
            .user_groups()
            .iter()
            .zip(&self.values)
            .map(|(&g, v)| (schema.group(g).id.clone(), v.clone()))
            .collect()
    }
}

impl AdContext {
    pub fn from_map(schema: &FeatureSchema, ad_id: u32, map: &FeatureMap) -> Result<AdContext> {
        let own: FeatureMap = map
            .iter()
            .filter(|(k, _)| schema.index_of(k).map(|i| schema.group(i).side) != Some(Side::User))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Ok(AdContext {
            ad_id,
            values: resolve_side(schema, Side::Ad, &own)?,
        })
    }

    pub fn to_map(&self, schema: &FeatureSchema) -> FeatureMap {
        schema
            .ad_groups()
            .iter()
            .zip(&self.values)
            .map(|(&g, v)| (schema.group(g).id.clone(), v.clone()))
            .collect()
    }
}
