use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{DataError, InteractionLog};

/// Supported interaction file layouts. Ratings, when present, are dropped.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractionFormat {
    /// `user<TAB>item<TAB>timestamp`
    TsvTriples,
    /// `user::item::rating::timestamp`
    MovielensDat,
    /// `item,user,rating,timestamp` (the Amazon ratings-only CSV layout)
    AmazonCsv,
}

impl FromStr for InteractionFormat {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tsv" | "tsv_triples" => Ok(InteractionFormat::TsvTriples),
            "movielens" | "movielens_dat" => Ok(InteractionFormat::MovielensDat),
            "amazon" | "amazon_csv" => Ok(InteractionFormat::AmazonCsv),
            other => Err(DataError::InvalidArgument(format!("unknown format '{}'", other))),
        }
    }
}

impl InteractionFormat {
    pub fn name(self) -> &'static str {
        match self {
            InteractionFormat::TsvTriples => "tsv_triples",
            InteractionFormat::MovielensDat => "movielens_dat",
            InteractionFormat::AmazonCsv => "amazon_csv",
        }
    }

    fn split(self, line: &str) -> Option<(&str, &str, &str)> {
        match self {
            InteractionFormat::TsvTriples => {
                let mut it = line.split('\t');
                let (u, i, t) = (it.next()?, it.next()?, it.next()?);
                it.next().is_none().then_some((u, i, t))
            }
            InteractionFormat::MovielensDat => {
                let mut it = line.split("::");
                let (u, i, _rating, t) = (it.next()?, it.next()?, it.next()?, it.next()?);
                it.next().is_none().then_some((u, i, t))
            }
            InteractionFormat::AmazonCsv => {
                let mut it = line.split(',');
                let (i, u, _rating, t) = (it.next()?, it.next()?, it.next()?, it.next()?);
                it.next().is_none().then_some((u, i, t))
            }
        }
    }
}

pub fn load_interactions(path: impl AsRef<Path>, format: InteractionFormat) -> Result<InteractionLog, DataError> {
    parse_interactions(File::open(path)?, format)
}

pub fn parse_interactions<R: Read>(reader: R, format: InteractionFormat) -> Result<InteractionLog, DataError> {
    let mut log = InteractionLog::new();
    for (n, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let (user, item, ts) = format.split(line).ok_or_else(|| DataError::Parse {
            line: n + 1,
            message: format!("expected {} fields", format.name()),
        })?;
        let (user, item) = (user.trim(), item.trim());
        if user.is_empty() || item.is_empty() {
            return Err(DataError::Parse {
                line: n + 1,
                message: "empty user or item id".into(),
            });
        }
        let ts: i64 = ts.trim().parse().map_err(|_| DataError::Parse {
            line: n + 1,
            message: format!("bad timestamp '{}'", ts.trim()),
        })?;
        log.push(user, item, ts);
    }
    if log.is_empty() {
        return Err(DataError::EmptyInput);
    }
    Ok(log)
}
