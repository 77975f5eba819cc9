use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime, Timelike};

use super::{is_weekday, slot_of, CorridorDataset, Provenance, CHANNELS, CHANNEL_NAMES, SLOTS_PER_DAY, SPEED};
use crate::error::{Error, Result};

const HEADER: [&str; 8] = [
    "site_id",
    "timestamp",
    "flow_0_52",
    "flow_52_66",
    "flow_66_116",
    "flow_116p",
    "total_flow",
    "avg_speed_mph",
];

/// Allowed gap between the total and the sum of the band flows.
pub const TOTAL_TOLERANCE: f64 = 0.5;

/// One site's observations for one day.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteDay {
    pub site_id: String,
    pub date: NaiveDate,
    /// `SLOTS_PER_DAY * CHANNELS`, NaN where invalid.
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl SiteDay {
    fn new(site_id: String, date: NaiveDate) -> Self {
        Self {
            site_id,
            date,
            values: vec![f64::NAN; SLOTS_PER_DAY * CHANNELS],
            valid: vec![false; SLOTS_PER_DAY],
        }
    }

    pub fn valid_slots(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RowIssue {
    /// 1-based line number in the source file (header is line 1).
    pub line: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub rows: usize,
    pub midnight_dropped: usize,
    /// Rows with at least one blank field; the slot stays missing.
    pub blank_rows: usize,
    pub invalid: Vec<RowIssue>,
    pub consistency_warnings: Vec<RowIssue>,
}

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    const FORMATS: [&str; 4] = ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"];
    FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s.trim(), f).ok())
}

enum Parsed {
    Skip,
    Blank,
    Invalid(String),
    Row {
        site: String,
        date: NaiveDate,
        slot: usize,
        values: [f64; CHANNELS],
    },
}

fn parse_row(rec: &csv::StringRecord) -> Parsed {
    if rec.len() != HEADER.len() {
        return Parsed::Invalid(format!("expected {} fields, found {}", HEADER.len(), rec.len()));
    }
    let site = rec[0].trim();
    if site.is_empty() {
        return Parsed::Invalid("blank site id".into());
    }
    let Some(ts) = parse_timestamp(&rec[1]) else {
        return Parsed::Invalid(format!("malformed timestamp {:?}", &rec[1]));
    };
    if ts.hour() == 0 {
        return Parsed::Skip;
    }
    let Some(slot) = slot_of(ts.hour(), ts.minute()).filter(|_| ts.second() == 0) else {
        return Parsed::Invalid(format!("timestamp {ts} is not on a 15-minute boundary"));
    };
    let mut values = [0.0; CHANNELS];
    let mut blank = false;
    for (ch, v) in values.iter_mut().enumerate() {
        let field = rec[ch + 2].trim();
        if field.is_empty() {
            blank = true;
            continue;
        }
        match field.parse::<f64>() {
            Ok(x) if x.is_finite() => *v = x,
            _ => return Parsed::Invalid(format!("{} is not a number: {field:?}", CHANNEL_NAMES[ch])),
        }
    }
    if let Some(ch) = (0..SPEED).find(|&ch| values[ch] < 0.0) {
        return Parsed::Invalid(format!("negative {}", CHANNEL_NAMES[ch]));
    }
    if !(0.0..=120.0).contains(&values[SPEED]) {
        return Parsed::Invalid(format!("speed {} outside [0, 120]", values[SPEED]));
    }
    if blank {
        return Parsed::Blank;
    }
    Parsed::Row {
        site: site.to_string(),
        date: ts.date(),
        slot,
        values,
    }
}

/// Parse a daily-report CSV. Bad rows are recorded in the report, not
/// fatal; a missing or wrong header is.
pub fn ingest_reader<R: Read>(reader: R) -> Result<(Vec<SiteDay>, IngestReport)> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header != HEADER {
        return Err(Error::Data(format!("unexpected header {header:?}; want {HEADER:?}")));
    }
    let mut days: BTreeMap<(String, NaiveDate), SiteDay> = BTreeMap::new();
    let mut order: Vec<(String, NaiveDate)> = Vec::new();
    let mut report = IngestReport::default();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        report.rows += 1;
        match parse_row(&rec) {
            Parsed::Skip => report.midnight_dropped += 1,
            Parsed::Blank => report.blank_rows += 1,
            Parsed::Invalid(reason) => report.invalid.push(RowIssue { line, reason }),
            Parsed::Row { site, date, slot, values } => {
                let key = (site.clone(), date);
                let day = days.entry(key.clone()).or_insert_with(|| {
                    order.push(key);
                    SiteDay::new(site, date)
                });
                if day.valid[slot] {
                    report.invalid.push(RowIssue {
                        line,
                        reason: "duplicate slot".into(),
                    });
                    continue;
                }
                let bands: f64 = values[..4].iter().sum();
                if (values[4] - bands).abs() > TOTAL_TOLERANCE {
                    report.consistency_warnings.push(RowIssue {
                        line,
                        reason: format!("total flow {} differs from band sum {bands}", values[4]),
                    });
                }
                day.values[slot * CHANNELS..(slot + 1) * CHANNELS].copy_from_slice(&values);
                day.valid[slot] = true;
            }
        }
    }
    let out = order.into_iter().map(|k| days.remove(&k).expect("key recorded")).collect();
    Ok((out, report))
}

pub fn ingest_csv(paths: &[impl AsRef<Path>]) -> Result<(Vec<SiteDay>, IngestReport)> {
    let mut all = Vec::new();
    let mut report = IngestReport::default();
    for p in paths {
        let file = std::fs::File::open(p.as_ref())?;
        let (days, r) = ingest_reader(std::io::BufReader::new(file))?;
        all.extend(days);
        report.rows += r.rows;
        report.midnight_dropped += r.midnight_dropped;
        report.blank_rows += r.blank_rows;
        report.invalid.extend(r.invalid);
        report.consistency_warnings.extend(r.consistency_warnings);
    }
    Ok((all, report))
}

/// Lay site-days onto a dense grid. Weekend dates are skipped. With
/// `site_order` (downstream first) only those sites are kept; otherwise
/// sites appear in first-seen order.
pub fn assemble(site_days: &[SiteDay], site_order: Option<&[String]>) -> Result<CorridorDataset> {
    let mut sites: Vec<String> = Vec::new();
    for sd in site_days {
        if !sites.contains(&sd.site_id) {
            sites.push(sd.site_id.clone());
        }
    }
    if let Some(order) = site_order {
        if let Some(s) = order.iter().find(|s| !sites.contains(s)) {
            return Err(Error::Data(format!("site {s} named in the site order has no data")));
        }
        sites = order.to_vec();
    }
    let mut days: Vec<NaiveDate> = site_days.iter().map(|d| d.date).filter(|d| is_weekday(*d)).collect();
    days.sort();
    days.dedup();
    if sites.is_empty() || days.is_empty() {
        return Err(Error::Data("no weekday observations to assemble".into()));
    }
    let mut ds = CorridorDataset::empty(sites, days)?;
    for sd in site_days {
        let Some(s) = ds.sites.iter().position(|x| *x == sd.site_id) else {
            continue;
        };
        let Ok(d) = ds.days.binary_search(&sd.date) else {
            continue;
        };
        for slot in (0..SLOTS_PER_DAY).filter(|&k| sd.valid[k]) {
            ds.set_slot(s, d, slot, &sd.values[slot * CHANNELS..(slot + 1) * CHANNELS], Provenance::Observed);
        }
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEAD: &str = "site_id,timestamp,flow_0_52,flow_52_66,flow_66_116,flow_116p,total_flow,avg_speed_mph\n";

    fn full_day(site: &str, date: &str) -> String {
        let mut s = String::new();
        for h in 0..24 {
            for m in [0, 15, 30, 45] {
                s.push_str(&format!("{site},{date}T{h:02}:{m:02}:00,100,20,10,5,135,65\n"));
            }
        }
        s
    }

    #[test]
    fn full_day_keeps_92_slots() {
        let csv = format!("{HEAD}{}", full_day("M25/1", "2017-09-04"));
        let (days, rep) = ingest_reader(csv.as_bytes()).unwrap();
        assert_eq!(days.len(), 1);
        assert_eq!(days[0].valid_slots(), 92);
        assert_eq!(rep.midnight_dropped, 4);
        assert!(rep.invalid.is_empty() && rep.consistency_warnings.is_empty());
    }

    #[test]
    fn blank_speed_masks_slot() {
        let csv = format!("{HEAD}A,2017-09-04 08:00:00,100,20,10,5,135,\n");
        let (days, rep) = ingest_reader(csv.as_bytes()).unwrap();
        assert!(days.is_empty());
        assert_eq!(rep.blank_rows, 1);
    }

    #[test]
    fn bad_rows_are_flagged_not_fatal() {
        let csv = format!(
            "{HEAD}A,2017-09-04 08:00:00,100,20,10,5,200,60\n\
             A,not-a-time,1,1,1,1,4,60\n\
             A,2017-09-04 08:15:00,-1,20,10,5,34,60\n\
             A,2017-09-04 08:30:00,1,2,3,4,10,130\n"
        );
        let (days, rep) = ingest_reader(csv.as_bytes()).unwrap();
        assert_eq!(days[0].valid_slots(), 1);
        assert_eq!(rep.consistency_warnings.len(), 1);
        assert_eq!(rep.invalid.len(), 3);
        assert_eq!(rep.invalid[0].line, 3);
    }

    #[test]
    fn wrong_header_is_fatal() {
        assert!(ingest_reader("a,b\n1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn assemble_skips_weekends_and_orders_sites() {
        let csv = format!(
            "{HEAD}{}{}{}",
            full_day("B", "2017-09-04"),
            full_day("A", "2017-09-04"),
            full_day("A", "2017-09-09")
        );
        let (days, _) = ingest_reader(csv.as_bytes()).unwrap();
        let order = vec!["A".to_string(), "B".to_string()];
        let ds = assemble(&days, Some(&order)).unwrap();
        assert_eq!(ds.sites, order);
        assert_eq!(ds.n_days(), 1);
        assert_eq!(ds.count(Provenance::Observed), 184);
    }
}
