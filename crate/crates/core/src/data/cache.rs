use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{CorridorDataset, Provenance, CHANNELS, SLOTS_PER_DAY};
use crate::container::{Container, Kind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Serialize, Deserialize)]
struct Meta {
    sites: Vec<String>,
    days: Vec<NaiveDate>,
    #[serde(default)]
    note: serde_json::Value,
}

/// Write the dataset; `note` is stored verbatim in the metadata block.
pub fn save_dataset(path: &Path, ds: &CorridorDataset, note: serde_json::Value) -> Result<()> {
    let meta = Meta {
        sites: ds.sites.clone(),
        days: ds.days.clone(),
        note,
    };
    let (p, d) = (ds.n_sites(), ds.n_days());
    let mut c = Container::new(Kind::Dataset, serde_json::to_value(meta)?);
    c.push("values", Tensor::new(vec![p, d, SLOTS_PER_DAY, CHANNELS], ds.values().to_vec())?);
    let codes = ds.provenance_flags().iter().map(|f| f.code()).collect();
    c.push("provenance", Tensor::new(vec![p, d, SLOTS_PER_DAY], codes)?);
    c.write(path)
}

pub fn load_dataset(path: &Path) -> Result<(CorridorDataset, serde_json::Value)> {
    let c = Container::read(path, Kind::Dataset)?;
    let meta: Meta = serde_json::from_value(c.meta.clone())?;
    let values = c.array("values")?.data().to_vec();
    let provenance = c
        .array("provenance")?
        .data()
        .iter()
        .map(|&x| Provenance::from_code(x).ok_or_else(|| Error::Container(format!("bad provenance code {x}"))))
        .collect::<Result<Vec<_>>>()?;
    let ds = CorridorDataset::from_parts(meta.sites, meta.days, values, provenance)?;
    Ok((ds, meta.note))
}
