//! JSON dump of trained factors, readable back as a [`BlockModel`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::BlockModel;
use crate::matrix::Dense;

pub const FORMAT_TAG: &str = "dmc-factors/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorBlock {
    pub start: usize,
    pub end: usize,
    /// users × rank, row-major.
    pub u: Vec<Vec<f64>>,
    /// rank × (end − start), row-major.
    pub v: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorDump {
    pub format: String,
    pub users: usize,
    pub items: usize,
    pub rank: usize,
    pub blocks: Vec<FactorBlock>,
}

impl FactorDump {
    pub fn from_model(model: &BlockModel) -> Self {
        let blocks: Vec<FactorBlock> = model
            .blocks()
            .map(|((start, end), u, v)| FactorBlock {
                start,
                end,
                u: u.to_rows(),
                v: v.to_rows(),
            })
            .collect();
        let (users, rank) = model
            .blocks()
            .next()
            .map_or((0, 0), |(_, u, _)| (u.rows(), u.cols()));
        FactorDump {
            format: FORMAT_TAG.to_string(),
            users,
            items: blocks.last().map_or(0, |b| b.end),
            rank,
            blocks,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("factor dump serializes")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let dump: FactorDump = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        if dump.format != FORMAT_TAG {
            return Err(Error::data(format!(
                "unsupported factor dump format {:?}",
                dump.format
            )));
        }
        Ok(dump)
    }

    /// Validates declared sizes against the blocks and builds the model.
    pub fn into_model(self) -> Result<BlockModel> {
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in self.blocks {
            if b.end <= b.start || b.u.len() != self.users || b.v.len() != self.rank {
                return Err(Error::data(format!(
                    "block [{}, {}) disagrees with declared {} users, rank {}",
                    b.start, b.end, self.users, self.rank
                )));
            }
            let u = Dense::from_rows(&b.u).map_err(|e| Error::data(format!("block U: {e}")))?;
            let v = Dense::from_rows(&b.v).map_err(|e| Error::data(format!("block V: {e}")))?;
            if u.cols() != self.rank {
                return Err(Error::data(format!(
                    "block U has {} columns, rank is {}",
                    u.cols(),
                    self.rank
                )));
            }
            blocks.push(((b.start, b.end), u, v));
        }
        let model = BlockModel::new(blocks)?;
        if crate::eval::Predictor::items(&model) != self.items {
            return Err(Error::data(format!(
                "blocks cover {} items, dump declares {}",
                crate::eval::Predictor::items(&model),
                self.items
            )));
        }
        Ok(model)
    }
}
