//! Panel of equally spaced daily series, CSV ingestion, activity filters and
//! differencing.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Calendar day stored as days since 1970-01-01.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Day(pub i64);

impl Day {
    const EPOCH: NaiveDate = match NaiveDate::from_ymd_opt(1970, 1, 1) {
        Some(d) => d,
        None => unreachable!(),
    };

    pub fn from_ymd(y: i32, m: u32, d: u32) -> Option<Day> {
        NaiveDate::from_ymd_opt(y, m, d).map(|nd| Day((nd - Self::EPOCH).num_days()))
    }

    pub fn parse(s: &str) -> Result<Day> {
        let nd = NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d")
            .map_err(|e| Error::Parse(format!("bad date {s:?}: {e}")))?;
        Ok(Day((nd - Self::EPOCH).num_days()))
    }

    /// 0 = Monday .. 6 = Sunday; 1970-01-01 was a Thursday.
    pub fn weekday(self) -> u32 {
        ((self.0 + 3).rem_euclid(7)) as u32
    }

    pub fn next(self) -> Day {
        Day(self.0 + 1)
    }

    fn to_naive(self) -> NaiveDate {
        Self::EPOCH + chrono::TimeDelta::days(self.0)
    }

    pub fn year(self) -> i32 {
        self.to_naive().year()
    }
}

impl fmt::Display for Day {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_naive().format("%Y-%m-%d"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    Raw,
    Residual,
    Differenced,
}

/// `d` series of length `n`, stored series-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    values: Vec<f64>,
    d: usize,
    n: usize,
    series_ids: Vec<String>,
    dates: Vec<Day>,
    layout: Layout,
}

impl Panel {
    pub fn new(
        series_ids: Vec<String>,
        dates: Vec<Day>,
        values: Vec<f64>,
        layout: Layout,
    ) -> Result<Panel> {
        let d = series_ids.len();
        let n = dates.len();
        if d == 0 {
            return Err(Error::EmptyPanel);
        }
        if values.len() != d * n {
            return Err(Error::DimensionMismatch {
                expected: d * n,
                got: values.len(),
            });
        }
        let mut seen = HashSet::with_capacity(d);
        for id in &series_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateSeries(id.clone()));
            }
        }
        for w in dates.windows(2) {
            if w[1].0 != w[0].0 + 1 {
                return Err(Error::NonDailySpacing {
                    prev: w[0].to_string(),
                    next: w[1].to_string(),
                });
            }
        }
        Ok(Panel {
            values,
            d,
            n,
            series_ids,
            dates,
            layout,
        })
    }

    /// Panel from rows, with generated ids `s0..` and dates from `start`.
    pub fn from_rows(rows: &[Vec<f64>], start: Day, layout: Layout) -> Result<Panel> {
        let n = rows.first().map_or(0, |r| r.len());
        if let Some(bad) = rows.iter().find(|r| r.len() != n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: bad.len(),
            });
        }
        let ids = (0..rows.len()).map(|i| format!("s{i}")).collect();
        let dates = (0..n as i64).map(|t| Day(start.0 + t)).collect();
        Panel::new(ids, dates, rows.concat(), layout)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn series_ids(&self) -> &[String] {
        &self.series_ids
    }

    pub fn dates(&self) -> &[Day] {
        &self.dates
    }

    pub fn series(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.n.max(1)).take(self.d)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize, t: usize) -> f64 {
        self.values[i * self.n + t]
    }

    pub fn with_layout(mut self, layout: Layout) -> Panel {
        self.layout = layout;
        self
    }

    /// New panel sharing ids/dates with `self` but holding `values`.
    pub fn with_values(&self, values: Vec<f64>, layout: Layout) -> Result<Panel> {
        Panel::new(self.series_ids.clone(), self.dates.clone(), values, layout)
    }

    /// Keep the listed series, in the given order.
    pub fn select(&self, keep: &[usize]) -> Result<Panel> {
        let ids = keep.iter().map(|&i| self.series_ids[i].clone()).collect();
        let mut values = Vec::with_capacity(keep.len() * self.n);
        for &i in keep {
            values.extend_from_slice(self.series(i));
        }
        Panel::new(ids, self.dates.clone(), values, self.layout)
    }

    /// Keep time points `range` (0-based, half open).
    pub fn slice_time(&self, range: std::ops::Range<usize>) -> Result<Panel> {
        if range.end > self.n || range.start >= range.end {
            return Err(Error::InvalidConfig(format!(
                "time range {range:?} outside 0..{}",
                self.n
            )));
        }
        let mut values = Vec::with_capacity(self.d * range.len());
        for row in self.rows() {
            values.extend_from_slice(&row[range.clone()]);
        }
        Panel::new(
            self.series_ids.clone(),
            self.dates[range].to_vec(),
            values,
            self.layout,
        )
    }

    /// `n x d` data matrix (observations in rows, series in columns).
    pub fn to_matrix(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_fn(self.n, self.d, |t, i| self.get(i, t))
    }
}

/// Forward difference `out[t] = in[t+1] - in[t]`; cell `t` maps to date `t+1`.
pub fn first_difference(p: &Panel) -> Result<Panel> {
    if p.n < 2 {
        return Err(Error::InsufficientData(format!(
            "differencing needs n >= 2, got {}",
            p.n
        )));
    }
    let mut values = Vec::with_capacity(p.d * (p.n - 1));
    for row in p.rows() {
        values.extend(row.windows(2).map(|w| w[1] - w[0]));
    }
    Panel::new(
        p.series_ids.clone(),
        p.dates[1..].to_vec(),
        values,
        Layout::Differenced,
    )
}

fn is_missing(field: &str) -> bool {
    let f = field.trim();
    f.is_empty() || f.eq_ignore_ascii_case("na") || f.eq_ignore_ascii_case("nan")
}

fn parse_value(field: &str) -> Result<Option<f64>> {
    if is_missing(field) {
        return Ok(None);
    }
    field
        .trim()
        .parse::<f64>()
        .map(Some)
        .map_err(|e| Error::Parse(format!("bad value {field:?}: {e}")))
}

/// Forward fill, then back fill leading gaps with the first observation.
fn fill_gaps(cells: &mut [Option<f64>], id: &str) -> Result<Vec<f64>> {
    let first = cells
        .iter()
        .flatten()
        .copied()
        .next()
        .ok_or_else(|| Error::Parse(format!("series {id:?} has no observations")))?;
    let mut last = first;
    Ok(cells
        .iter()
        .map(|c| {
            if let Some(v) = c {
                last = *v;
            }
            last
        })
        .collect())
}

fn check_dates(dates: &[Day]) -> Result<()> {
    for w in dates.windows(2) {
        if w[1].0 != w[0].0 + 1 {
            return Err(Error::NonDailySpacing {
                prev: w[0].to_string(),
                next: w[1].to_string(),
            });
        }
    }
    Ok(())
}

/// Read a panel from CSV. Wide layout: `date,<id1>,<id2>,...`. Long layout:
/// exactly three columns `date,<id column>,value` in any row order.
pub fn read_panel<R: Read>(reader: R) -> Result<Panel> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if headers.len() < 2 || !headers[0].eq_ignore_ascii_case("date") {
        return Err(Error::Parse(
            "header must start with a `date` column".to_string(),
        ));
    }
    let long = headers.len() == 3
        && matches!(
            headers[1].to_ascii_lowercase().as_str(),
            "id" | "series_id" | "series"
        )
        && headers[2].eq_ignore_ascii_case("value");
    if long {
        read_long(rdr)
    } else {
        read_wide(rdr, headers)
    }
}

fn read_wide<R: Read>(mut rdr: csv::Reader<R>, headers: Vec<String>) -> Result<Panel> {
    let ids: Vec<String> = headers[1..].to_vec();
    let mut dates = Vec::new();
    let mut cells: Vec<Vec<Option<f64>>> = vec![Vec::new(); ids.len()];
    for rec in rdr.records() {
        let rec = rec?;
        dates.push(Day::parse(&rec[0])?);
        for (i, col) in cells.iter_mut().enumerate() {
            col.push(parse_value(&rec[i + 1])?);
        }
    }
    let mut order: Vec<usize> = (0..dates.len()).collect();
    order.sort_by_key(|&t| dates[t]);
    let dates: Vec<Day> = order.iter().map(|&t| dates[t]).collect();
    check_dates(&dates)?;
    let mut values = Vec::with_capacity(ids.len() * dates.len());
    for (col, id) in cells.iter().zip(&ids) {
        let mut sorted: Vec<Option<f64>> = order.iter().map(|&t| col[t]).collect();
        values.extend(fill_gaps(&mut sorted, id)?);
    }
    Panel::new(ids, dates, values, Layout::Raw)
}

fn read_long<R: Read>(mut rdr: csv::Reader<R>) -> Result<Panel> {
    let mut by_series: BTreeMap<String, HashMap<Day, Option<f64>>> = BTreeMap::new();
    let mut all_dates: Vec<Day> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let day = Day::parse(&rec[0])?;
        let id = rec[1].trim().to_string();
        let v = parse_value(&rec[2])?;
        by_series.entry(id).or_default().insert(day, v);
        all_dates.push(day);
    }
    all_dates.sort();
    all_dates.dedup();
    check_dates(&all_dates)?;
    // Lexicographic id order, independent of row order in the file.
    let ids: Vec<String> = by_series.keys().cloned().collect();
    let mut values = Vec::with_capacity(ids.len() * all_dates.len());
    for id in &ids {
        let obs = &by_series[id];
        let mut cells: Vec<Option<f64>> =
            all_dates.iter().map(|d| obs.get(d).copied().flatten()).collect();
        values.extend(fill_gaps(&mut cells, id)?);
    }
    Panel::new(ids, all_dates, values, Layout::Raw)
}

pub fn load_panel(path: &Path) -> Result<Panel> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_panel(std::io::BufReader::new(file))
}

/// Load a panel and tag it with `layout` (residual files carry no tag).
pub fn load_panel_as(path: &Path, layout: Layout) -> Result<Panel> {
    load_panel(path).map(|p| p.with_layout(layout))
}

/// Write the wide layout. Values use the shortest round-trip representation,
/// so load -> write -> load is bit-exact.
pub fn write_panel<W: Write>(p: &Panel, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = Vec::with_capacity(p.d + 1);
    header.push("date".to_string());
    header.extend(p.series_ids.iter().cloned());
    w.write_record(&header)?;
    let mut rec = Vec::with_capacity(p.d + 1);
    for t in 0..p.n {
        rec.clear();
        rec.push(p.dates[t].to_string());
        for i in 0..p.d {
            rec.push(format!("{:?}", p.get(i, t)));
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<panel writer>", e))?;
    Ok(())
}

pub fn save_panel(p: &Panel, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_panel(p, std::io::BufWriter::new(file))
}

/// Activity rules applied to raw balance panels.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ActivityFilterConfig {
    /// Minimum number of balance changes over the sample.
    pub min_operations: usize,
    /// Longest tolerated run of consecutive unchanged days.
    pub max_dormant_days: usize,
    /// Series with no change after this date are dropped as inactive.
    pub inactivity_cutoff_date: Option<Day>,
    /// Series with no change after this date are dropped as closed.
    pub closure_cutoff_date: Option<Day>,
}

impl Default for ActivityFilterConfig {
    fn default() -> Self {
        ActivityFilterConfig {
            min_operations: 103,
            max_dormant_days: 200,
            inactivity_cutoff_date: None,
            closure_cutoff_date: None,
        }
    }
}

impl ActivityFilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_operations == 0 || self.max_dormant_days == 0 {
            return Err(Error::InvalidConfig(
                "min_operations and max_dormant_days must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionRule {
    MinOperations,
    Dormant,
    Inactive,
    Closed,
}

impl fmt::Display for ExclusionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExclusionRule::MinOperations => "min_operations",
            ExclusionRule::Dormant => "dormant",
            ExclusionRule::Inactive => "inactive",
            ExclusionRule::Closed => "closed",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Exclusion {
    pub series_id: String,
    pub rule: ExclusionRule,
}

/// Number of day-over-day balance changes.
pub fn operation_count(x: &[f64]) -> usize {
    x.windows(2).filter(|w| w[1] != w[0]).count()
}

/// Longest run of consecutive days on which the balance did not change.
pub fn longest_dormant_run(x: &[f64]) -> usize {
    let (mut best, mut run) = (0, 0);
    for w in x.windows(2) {
        if w[1] == w[0] {
            run += 1;
            best = best.max(run);
        } else {
            run = 0;
        }
    }
    best
}

fn changes_after(x: &[f64], dates: &[Day], cutoff: Day) -> bool {
    (1..x.len()).any(|t| dates[t] > cutoff && x[t] != x[t - 1])
}

/// Drop series that fail the activity rules. Returns the survivors (order
/// and values untouched) and one log entry per excluded series.
pub fn apply_activity_filters(
    p: &Panel,
    cfg: &ActivityFilterConfig,
) -> Result<(Option<Panel>, Vec<Exclusion>)> {
    cfg.validate()?;
    let mut keep = Vec::new();
    let mut log = Vec::new();
    for i in 0..p.d {
        let x = p.series(i);
        let rule = if operation_count(x) < cfg.min_operations {
            Some(ExclusionRule::MinOperations)
        } else if longest_dormant_run(x) >= cfg.max_dormant_days {
            Some(ExclusionRule::Dormant)
        } else if cfg
            .inactivity_cutoff_date
            .is_some_and(|c| !changes_after(x, &p.dates, c))
        {
            Some(ExclusionRule::Inactive)
        } else if cfg
            .closure_cutoff_date
            .is_some_and(|c| !changes_after(x, &p.dates, c))
        {
            Some(ExclusionRule::Closed)
        } else {
            None
        };
        match rule {
            Some(rule) => log.push(Exclusion {
                series_id: p.series_ids[i].clone(),
                rule,
            }),
            None => keep.push(i),
        }
    }
    let survivors = if keep.is_empty() {
        None
    } else {
        Some(p.select(&keep)?)
    };
    Ok((survivors, log))
}

pub fn write_exclusions<W: Write>(log: &[Exclusion], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["series_id", "rule"])?;
    for e in log {
        w.write_record([e.series_id.as_str(), &e.rule.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<exclusion writer>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn day0() -> Day {
        Day::from_ymd(2021, 4, 1).unwrap()
    }

    #[test]
    fn reads_wide_csv() {
        let csv = "date,a,b,c\n2021-04-01,1,2,3\n2021-04-02,1.5,2,3\n2021-04-03,1,2,3\n\
                   2021-04-04,1,2,3\n2021-04-05,1,2,4\n";
        let p = read_panel(csv.as_bytes()).unwrap();
        assert_eq!((p.d(), p.n()), (3, 5));
        assert_eq!(p.series(0), &[1.0, 1.5, 1.0, 1.0, 1.0]);
        assert_eq!(p.series(2)[4], 4.0);
    }

    #[test]
    fn gap_is_rejected() {
        let csv = "date,a\n2021-04-05,1\n2021-04-07,2\n";
        assert!(matches!(
            read_panel(csv.as_bytes()),
            Err(Error::NonDailySpacing { .. })
        ));
    }

    #[test]
    fn missing_cells_are_filled() {
        let csv = "date,a\n2021-04-01,\n2021-04-02,NA\n2021-04-03,5\n2021-04-04,\n2021-04-05,7\n";
        let p = read_panel(csv.as_bytes()).unwrap();
        assert_eq!(p.series(0), &[5.0, 5.0, 5.0, 5.0, 7.0]);
    }

    #[test]
    fn empty_series_set() {
        assert!(read_panel("date\n2021-04-01\n".as_bytes()).is_err());
    }

    #[test]
    fn difference_examples() {
        let p = Panel::from_rows(&[vec![1.0, 3.0, 2.0], vec![4.0; 3]], day0(), Layout::Raw).unwrap();
        let d = first_difference(&p).unwrap();
        assert_eq!(d.series(0), &[2.0, -1.0]);
        assert_eq!(d.series(1), &[0.0, 0.0]);
        assert_eq!(d.layout(), Layout::Differenced);
        assert_eq!(d.dates()[0], p.dates()[1]);
        let short = Panel::from_rows(&[vec![1.0]], day0(), Layout::Raw).unwrap();
        assert!(first_difference(&short).is_err());
    }

    #[test]
    fn weekday_is_arithmetic() {
        // 2021-04-01 was a Thursday.
        assert_eq!(day0().weekday(), 3);
        assert_eq!(Day::from_ymd(2023, 3, 31).unwrap().weekday(), 4);
    }

    fn activity_series(n: usize, change_days: &[usize]) -> Vec<f64> {
        let mut v = vec![0.0; n];
        let mut level = 100.0;
        for t in 0..n {
            if change_days.contains(&t) {
                level += 1.0;
            }
            v[t] = level;
        }
        v
    }

    #[test]
    fn activity_rules() {
        let n = 730;
        let constant = vec![50.0; n];
        // 104 changes spaced every 7 days: longest dormant run 6.
        let busy_days: Vec<usize> = (1..=104).map(|k| k * 7).collect();
        let busy = activity_series(n, &busy_days);
        // Plenty of changes but a 250-day silent stretch.
        let dormant_days: Vec<usize> = (1..n).filter(|t| !(300..=550).contains(t)).collect();
        let dormant = activity_series(n, &dormant_days);
        let p = Panel::from_rows(&[constant, busy.clone(), dormant], day0(), Layout::Raw).unwrap();
        let (kept, log) = apply_activity_filters(&p, &ActivityFilterConfig::default()).unwrap();
        let kept = kept.unwrap();
        assert_eq!(kept.series_ids(), &["s1".to_string()]);
        assert_eq!(kept.series(0), busy.as_slice());
        assert_eq!(log[0].rule, ExclusionRule::MinOperations);
        assert_eq!(log[1].rule, ExclusionRule::Dormant);
        assert_eq!(operation_count(&busy), 104);
    }

    #[test]
    fn cutoff_proxy() {
        let n = 400;
        let early: Vec<usize> = (1..150).collect();
        let p = Panel::from_rows(&[activity_series(n, &early)], day0(), Layout::Raw).unwrap();
        let cfg = ActivityFilterConfig {
            min_operations: 10,
            max_dormant_days: 1000,
            closure_cutoff_date: Some(Day(day0().0 + 300)),
            ..Default::default()
        };
        let (kept, log) = apply_activity_filters(&p, &cfg).unwrap();
        assert!(kept.is_none());
        assert_eq!(log[0].rule, ExclusionRule::Closed);
    }
}
