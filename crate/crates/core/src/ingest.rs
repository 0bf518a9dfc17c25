//! Loading, cleaning and seasonal segmentation of daily series.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

/// One homogeneous block of records: a season within a (season-)year.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct YearBlock {
    /// Year in which the season starts (December of `year` and January of
    /// `year + 1` share a block for cross-year seasons).
    pub year: i32,
    /// Index of the season range the block belongs to.
    pub segment: usize,
    pub start: usize,
    pub len: usize,
}

impl YearBlock {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }
}

/// Missing days immediately before record `index`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gap {
    pub index: usize,
    pub missing_days: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailySeries {
    pub dates: Vec<NaiveDate>,
    pub values: Vec<f64>,
    pub season_label: String,
    pub blocks: Vec<YearBlock>,
    pub gaps: Vec<Gap>,
}

#[derive(Debug, Clone)]
pub struct ColumnSpec {
    pub date: String,
    pub value: String,
}

impl Default for ColumnSpec {
    fn default() -> Self {
        Self {
            date: "date".into(),
            value: "value".into(),
        }
    }
}

impl DailySeries {
    /// Builds a series from sorted, distinct dates, with one block per
    /// calendar year.
    pub fn from_calendar(
        dates: Vec<NaiveDate>,
        values: Vec<f64>,
        season_label: impl Into<String>,
    ) -> Result<Self> {
        Self::build(dates, values, season_label.into(), |d| (d.year(), 0))
    }

    fn build<K>(
        dates: Vec<NaiveDate>,
        values: Vec<f64>,
        season_label: String,
        key: K,
    ) -> Result<Self>
    where
        K: Fn(NaiveDate) -> (i32, usize),
    {
        if dates.len() != values.len() {
            return Err(Error::InvalidInput(format!(
                "{} dates but {} values",
                dates.len(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite value at record {i}")));
        }
        for w in dates.windows(2) {
            if w[1] == w[0] {
                return Err(Error::DuplicateDate(w[1]));
            }
            if w[1] < w[0] {
                return Err(Error::InvalidInput("dates not sorted".into()));
            }
        }
        let mut blocks: Vec<YearBlock> = Vec::new();
        let mut gaps = Vec::new();
        let mut current: Option<(i32, usize)> = None;
        for (i, &d) in dates.iter().enumerate() {
            let k = key(d);
            if current != Some(k) {
                blocks.push(YearBlock {
                    year: k.0,
                    segment: k.1,
                    start: i,
                    len: 0,
                });
                current = Some(k);
            } else {
                let step = (d - dates[i - 1]).num_days();
                if step > 1 {
                    gaps.push(Gap {
                        index: i,
                        missing_days: step - 1,
                    });
                }
            }
            if let Some(b) = blocks.last_mut() {
                b.len += 1;
            }
        }
        Ok(Self {
            dates,
            values,
            season_label,
            blocks,
            gaps,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Whether records `i - 1` and `i` are consecutive days in one block.
    pub fn is_transition(&self, i: usize) -> bool {
        if i == 0 || i >= self.len() {
            return false;
        }
        let same_block = self
            .blocks
            .iter()
            .any(|b| b.start < i && i < b.start + b.len);
        same_block && (self.dates[i] - self.dates[i - 1]).num_days() == 1
    }

    /// Maximal runs of consecutive days: blocks split further at gaps.
    pub fn segments(&self) -> Vec<Range<usize>> {
        let mut out = Vec::new();
        let mut gap_iter = self.gaps.iter().map(|g| g.index).peekable();
        for b in &self.blocks {
            let mut start = b.start;
            let end = b.start + b.len;
            while let Some(&g) = gap_iter.peek() {
                if g >= end {
                    break;
                }
                gap_iter.next();
                if g > start {
                    out.push(start..g);
                    start = g;
                }
            }
            if end > start {
                out.push(start..end);
            }
        }
        out
    }

    /// Copy keeping only records where `keep` is true. Block structure is
    /// preserved; removed records become recorded gaps.
    pub fn retain(&self, keep: &[bool]) -> Result<Self> {
        let mut dates = Vec::new();
        let mut values = Vec::new();
        let mut owner = Vec::new();
        for (bi, b) in self.blocks.iter().enumerate() {
            for i in b.range() {
                if keep[i] {
                    dates.push(self.dates[i]);
                    values.push(self.values[i]);
                    owner.push((self.blocks[bi].year, self.blocks[bi].segment));
                }
            }
        }
        let lookup: BTreeMap<NaiveDate, (i32, usize)> =
            dates.iter().copied().zip(owner).collect();
        Self::build(dates, values, self.season_label.clone(), |d| lookup[&d])
    }

    /// Block lengths in order.
    pub fn block_lengths(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.len).collect()
    }
}

/// Reads a CSV file with a header row into a series with calendar-year
/// blocks. Rows with an empty, `NA` or `NaN` value are dropped and show up
/// as gaps.
pub fn load_csv(path: impl AsRef<Path>, columns: &ColumnSpec) -> Result<DailySeries> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    read_csv(file, columns)
}

pub fn read_csv<R: Read>(reader: R, columns: &ColumnSpec) -> Result<DailySeries> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Format(format!("missing column `{name}`")))
    };
    let di = find(&columns.date)?;
    let vi = find(&columns.value)?;

    let mut rows: Vec<(NaiveDate, Option<f64>)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let row = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let date_s = rec.get(di).unwrap_or("");
        let date = NaiveDate::parse_from_str(date_s, "%Y-%m-%d").map_err(|e| Error::Parse {
            row,
            message: format!("bad date `{date_s}`: {e}"),
        })?;
        let value_s = rec.get(vi).unwrap_or("");
        let value = match value_s {
            "" | "NA" | "na" | "NaN" | "nan" => None,
            s => {
                let v: f64 = s.parse().map_err(|_| Error::Parse {
                    row,
                    message: format!("bad value `{s}`"),
                })?;
                v.is_finite().then_some(v)
            }
        };
        rows.push((date, value));
    }
    if rows.is_empty() {
        return Err(Error::Empty("no data rows".into()));
    }
    rows.sort_by_key(|r| r.0);
    if let Some(w) = rows.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::DuplicateDate(w[0].0));
    }
    let (dates, values): (Vec<_>, Vec<_>) = rows
        .into_iter()
        .filter_map(|(d, v)| v.map(|v| (d, v)))
        .unzip();
    if dates.is_empty() {
        return Err(Error::Empty("every row is missing its value".into()));
    }
    DailySeries::from_calendar(dates, values, "all")
}

/// Writes `date,value` rows. Values use the shortest round-trip formatting.
pub fn write_csv(series: &DailySeries, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["date", "value"])?;
    for (d, v) in series.dates.iter().zip(&series.values) {
        w.write_record([d.format("%Y-%m-%d").to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Month-day pair; ordering is calendar order within a year.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MonthDay {
    pub month: u32,
    pub day: u32,
}

impl MonthDay {
    pub fn of(d: NaiveDate) -> Self {
        Self {
            month: d.month(),
            day: d.day(),
        }
    }
}

impl FromStr for MonthDay {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidInput(format!("bad month-day `{s}`, expected MM-DD"));
        let (m, d) = s.trim().split_once('-').ok_or_else(bad)?;
        let month: u32 = m.parse().map_err(|_| bad())?;
        let day: u32 = d.parse().map_err(|_| bad())?;
        // Validate against a leap year so 02-29 is accepted.
        NaiveDate::from_ymd_opt(2000, month, day).ok_or_else(bad)?;
        Ok(Self { month, day })
    }
}

/// Inclusive calendar range; wraps across the new year when `start > end`.
///
/// An end of `02-28` covers 29 February as well, so leap days stay ordinary
/// in-season days.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeasonRange {
    pub start: MonthDay,
    pub end: MonthDay,
}

impl SeasonRange {
    fn effective_end(&self) -> MonthDay {
        if self.end == (MonthDay { month: 2, day: 28 }) {
            MonthDay { month: 2, day: 29 }
        } else {
            self.end
        }
    }

    pub fn wraps(&self) -> bool {
        self.start > self.end
    }

    /// Season-year offset (0 or -1) when `md` is in range.
    fn locate(&self, md: MonthDay) -> Option<i32> {
        let end = self.effective_end();
        if self.wraps() {
            if md >= self.start {
                Some(0)
            } else if md <= end {
                Some(-1)
            } else {
                None
            }
        } else {
            (md >= self.start && md <= end).then_some(0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Season {
    pub ranges: Vec<SeasonRange>,
}

impl Season {
    pub fn whole_year() -> Self {
        Self {
            ranges: vec![SeasonRange {
                start: MonthDay { month: 1, day: 1 },
                end: MonthDay { month: 12, day: 31 },
            }],
        }
    }

    fn locate(&self, d: NaiveDate) -> Option<(i32, usize)> {
        let md = MonthDay::of(d);
        self.ranges
            .iter()
            .enumerate()
            .find_map(|(i, r)| r.locate(md).map(|off| (d.year() + off, i)))
    }

    fn check_disjoint(&self) -> Result<()> {
        let mut day = NaiveDate::from_ymd_opt(2000, 1, 1).expect("valid date");
        while day.year() == 2000 {
            let md = MonthDay::of(day);
            let hits = self.ranges.iter().filter(|r| r.locate(md).is_some()).count();
            if hits > 1 {
                return Err(Error::InvalidInput(format!(
                    "season ranges overlap on {:02}-{:02}",
                    md.month, md.day
                )));
            }
            day = day.succ_opt().expect("valid date");
        }
        Ok(())
    }
}

impl FromStr for Season {
    type Err = Error;

    /// Parses `MM-DD:MM-DD[,MM-DD:MM-DD...]`.
    fn from_str(s: &str) -> Result<Self> {
        let mut ranges = Vec::new();
        for part in s.split(',').filter(|p| !p.trim().is_empty()) {
            let (a, b) = part.split_once(':').ok_or_else(|| {
                Error::InvalidInput(format!("bad season range `{part}`, expected MM-DD:MM-DD"))
            })?;
            ranges.push(SeasonRange {
                start: a.parse()?,
                end: b.parse()?,
            });
        }
        if ranges.is_empty() {
            return Err(Error::InvalidInput("empty season".into()));
        }
        let season = Season { ranges };
        season.check_disjoint()?;
        Ok(season)
    }
}

impl fmt::Display for Season {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .ranges
            .iter()
            .map(|r| {
                format!(
                    "{:02}-{:02}:{:02}-{:02}",
                    r.start.month, r.start.day, r.end.month, r.end.day
                )
            })
            .collect();
        write!(f, "{}", parts.join(","))
    }
}

/// Keeps the in-season records, with one block per (season-year, range).
pub fn extract_season(series: &DailySeries, season: &Season) -> Result<DailySeries> {
    season.check_disjoint()?;
    let mut dates = Vec::new();
    let mut values = Vec::new();
    for (&d, &v) in series.dates.iter().zip(&series.values) {
        if season.locate(d).is_some() {
            dates.push(d);
            values.push(v);
        }
    }
    if dates.is_empty() {
        return Err(Error::Empty(format!("no records in season {season}")));
    }
    DailySeries::build(dates, values, season.to_string(), |d| {
        season.locate(d).expect("filtered to in-season dates")
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub variance: f64,
    pub min: f64,
    pub max: f64,
    pub block_counts: Vec<usize>,
}

pub fn summarize(series: &DailySeries) -> Result<Summary> {
    if series.is_empty() {
        return Err(Error::Empty("series has no records".into()));
    }
    let v = &series.values;
    Ok(Summary {
        n: v.len(),
        mean: stats::mean(v),
        variance: stats::variance(v),
        min: v.iter().copied().fold(f64::INFINITY, f64::min),
        max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        block_counts: series.block_lengths(),
    })
}
