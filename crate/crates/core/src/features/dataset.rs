//! Newline-delimited JSON dataset files.
//!
//! Line 1 is a header `{"format":"cold-dataset","version":1,"schema":{...}}`.
//! Every following line is one example:
//!
//! ```text
//! {"ts":17,"user_id":3,"ad_id":41,"label":0,"bid":1.25,
//!  "features":{"ad_category":7,"user_history":[[2,1],[9,3]],...}}
//! ```
//!
//! `features` carries every user and ad group; cross groups are never stored.
//! Pooled groups are `[[id, count], ...]`. Ids outside a group's vocabulary
//! are reduced modulo its cardinality when read.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::schema::FeatureSchema;
use super::values::{AdContext, FeatureMap, RawExample, UserContext};
use crate::error::{Error, Result};

pub const DATASET_FORMAT: &str = "cold-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub schema: FeatureSchema,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub ts: u64,
    pub user_id: u32,
    pub ad_id: u32,
    pub label: u8,
    pub bid: f32,
    pub features: FeatureMap,
}

impl ExampleRecord {
    pub fn from_example(schema: &FeatureSchema, ex: &RawExample) -> ExampleRecord {
        let mut features = ex.user.to_map(schema);
        features.extend(ex.ad.to_map(schema));
        ExampleRecord {
            ts: ex.timestamp,
            user_id: ex.user.user_id,
            ad_id: ex.ad.ad_id,
            label: ex.label,
            bid: ex.bid,
            features,
        }
    }

    pub fn resolve(&self, schema: &FeatureSchema) -> Result<RawExample> {
        if self.label > 1 {
            return Err(Error::InvalidArgument(format!("label {} is not 0/1", self.label)));
        }
        if !(self.bid.is_finite() && self.bid >= 0.0) {
            return Err(Error::InvalidArgument(format!("bid {} is not a non-negative number", self.bid)));
        }
        Ok(RawExample {
            user: Arc::new(UserContext::from_map(schema, self.user_id, &self.features)?),
            ad: Arc::new(AdContext::from_map(schema, self.ad_id, &self.features)?),
            label: self.label,
            bid: self.bid,
            timestamp: self.ts,
        })
    }
}

pub fn write_dataset<W: Write>(out: W, schema: &FeatureSchema, examples: &[RawExample]) -> Result<()> {
    let mut w = BufWriter::new(out);
    let header = DatasetHeader {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        schema: schema.clone(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for ex in examples {
        serde_json::to_writer(&mut w, &ExampleRecord::from_example(schema, ex))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_dataset(path: impl AsRef<Path>, schema: &FeatureSchema, examples: &[RawExample]) -> Result<()> {
    write_dataset(std::fs::File::create(path)?, schema, examples)
}

/// Streaming reader: the header is parsed eagerly, examples lazily.
pub struct DatasetReader<R> {
    schema: FeatureSchema,
    lines: std::io::Lines<BufReader<R>>,
    line_no: usize,
}

impl<R: Read> DatasetReader<R> {
    pub fn new(input: R) -> Result<DatasetReader<R>> {
        let mut lines = BufReader::new(input).lines();
        let first = lines.next().ok_or(Error::Dataset {
            line: 1,
            reason: "missing header".into(),
        })??;
        let header: DatasetHeader = serde_json::from_str(&first).map_err(|e| Error::Dataset {
            line: 1,
            reason: format!("bad header: {e}"),
        })?;
        if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
            return Err(Error::Dataset {
                line: 1,
                reason: format!("unsupported format {} v{}", header.format, header.version),
            });
        }
        Ok(DatasetReader {
            schema: header.schema,
            lines,
            line_no: 1,
        })
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }
}

impl<R: Read> Iterator for DatasetReader<R> {
    type Item = Result<RawExample>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = self.lines.next()?;
            self.line_no += 1;
            let line = match line {
                Ok(l) => l,
                Err(e) => return Some(Err(e.into())),
            };
            if line.trim().is_empty() {
                continue;
            }
            let line_no = self.line_no;
            let wrap = |e: Error| Error::Dataset {
                line: line_no,
                reason: e.to_string(),
            };
            return Some(
                serde_json::from_str::<ExampleRecord>(&line)
                    .map_err(|e| wrap(e.into()))
                    .and_then(|rec| rec.resolve(&self.schema).map_err(wrap)),
            );
        }
    }
}

pub fn read_dataset<R: Read>(input: R) -> Result<(FeatureSchema, Vec<RawExample>)> {
    let reader = DatasetReader::new(input)?;
    let schema = reader.schema().clone();
    let examples = reader.collect::<Result<Vec<_>>>()?;
    Ok((schema, examples))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<(FeatureSchema, Vec<RawExample>)> {
    read_dataset(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{FeatureGroup, FeatureValue};

    fn schema() -> FeatureSchema {
        FeatureSchema::new(vec![
            FeatureGroup::user("u", 10),
            FeatureGroup::user("hist", 5).pooled(),
            FeatureGroup::ad("a", 7),
            FeatureGroup::cross("ua", 32, "u", "a"),
        ])
        .unwrap()
    }

    #[test]
    fn write_then_read() {
        let s = schema();
        let ex = RawExample {
            user: Arc::new(UserContext {
                user_id: 4,
                values: vec![FeatureValue::Id(4), FeatureValue::Pooled(vec![(1, 3)])],
            }),
            ad: Arc::new(AdContext {
                ad_id: 2,
                values: vec![FeatureValue::Id(2)],
            }),
            label: 1,
            bid: 0.75,
            timestamp: 9,
        };
        let mut buf = Vec::new();
        write_dataset(&mut buf, &s, std::slice::from_ref(&ex)).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(!text.lines().nth(1).unwrap().contains("\"ua\""));
        let (s2, back) = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(s2, s);
        assert_eq!(back, vec![ex]);
    }

    #[test]
    fn rejects_bad_lines() {
        let s = schema();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &s, &[]).unwrap();
        buf.extend_from_slice(b"{\"ts\":0,\"user_id\":1,\"ad_id\":1,\"label\":3,\"bid\":1,\"features\":{}}\n");
        let err = read_dataset(buf.as_slice()).unwrap_err();
        assert!(matches!(err, Error::Dataset { line: 2, .. }), "{err}");
        assert!(read_dataset(&b"{\"nope\":1}\n"[..]).is_err());
        assert!(read_dataset(&b""[..]).is_err());
    }
}
