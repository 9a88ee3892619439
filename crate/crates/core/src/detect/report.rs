//! Flag extraction, raw/differenced merging and the report CSV.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{Level, ScoreMatrix};
use crate::error::{Error, Result};
use crate::panel::Day;
use crate::typology::{Sign, Typology};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub series_id: String,
    pub date: Day,
    pub score: f64,
    pub level: Level,
    pub kappa: f64,
    pub method: String,
    pub typology: Option<Typology>,
    pub sign: Option<Sign>,
    pub delta_hat: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OutlierReport {
    pub events: Vec<Event>,
}

impl OutlierReport {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Number of distinct series with at least one event.
    pub fn flagged_series(&self) -> usize {
        let mut ids: Vec<&str> = self.events.iter().map(|e| e.series_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "series_id",
            "date",
            "score",
            "level",
            "kappa",
            "method",
            "typology",
            "sign",
            "delta_hat",
        ])?;
        for e in &self.events {
            w.write_record([
                e.series_id.clone(),
                e.date.to_string(),
                e.score.to_string(),
                e.level.to_string(),
                e.kappa.to_string(),
                e.method.clone(),
                e.typology.map(|t| t.to_string()).unwrap_or_default(),
                e.sign.map(|s| s.to_string()).unwrap_or_default(),
                e.delta_hat.map(|v| v.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("report", e))
    }
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|e| Error::Parse(format!("bad {what} {s:?}: {e}")))
}

fn optional<T>(s: &str, f: impl FnOnce(&str) -> Result<T>) -> Result<Option<T>> {
    if s.trim().is_empty() {
        Ok(None)
    } else {
        f(s).map(Some)
    }
}

pub fn read_report<R: Read>(reader: R) -> Result<OutlierReport> {
    let mut r = csv::Reader::from_reader(reader);
    let headers = r.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let need = |name: &str| col(name).ok_or_else(|| Error::Parse(format!("report lacks column {name:?}")));
    let (ci, cd, cs, cl, ck, cm) = (
        need("series_id")?,
        need("date")?,
        need("score")?,
        need("level")?,
        need("kappa")?,
        need("method")?,
    );
    let (ct, cg, cx) = (col("typology"), col("sign"), col("delta_hat"));
    let mut events = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let get = |c: Option<usize>| c.and_then(|c| rec.get(c)).unwrap_or("");
        events.push(Event {
            series_id: get(Some(ci)).to_string(),
            date: Day::parse(get(Some(cd)))?,
            score: parse_f64(get(Some(cs)), "score")?,
            level: get(Some(cl)).parse()?,
            kappa: parse_f64(get(Some(ck)), "kappa")?,
            method: get(Some(cm)).to_string(),
            typology: optional(get(ct), |s| s.parse())?,
            sign: optional(get(cg), |s| s.parse())?,
            delta_hat: optional(get(cx), |s| parse_f64(s, "delta_hat"))?,
        });
    }
    Ok(OutlierReport { events })
}

/// Cells with score strictly above `kappa`, as `(series, time, score)`.
pub fn flag_cells(scores: &ScoreMatrix, kappa: f64) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for i in 0..scores.d {
        for (t, &s) in scores.series(i).iter().enumerate() {
            if s > kappa {
                out.push((i, t, s));
            }
        }
    }
    out
}

fn event(scores: &ScoreMatrix, i: usize, t: usize, s: f64, kappa: f64, method: &str) -> Event {
    Event {
        series_id: scores.series_ids[i].clone(),
        date: scores.dates[t],
        score: s,
        level: scores.level,
        kappa,
        method: method.to_string(),
        typology: None,
        sign: None,
        delta_hat: None,
    }
}

/// Flag both levels and merge them into one event list.
///
/// A differenced flag dated `D` covers the change from `D - 1` to `D`, so it
/// is matched to a raw flag on the same series dated `D`, then `D - 1`, then
/// `D + 1`. Matched pairs become a single event at the raw date with level
/// `both`, keeping the raw score and cut-off.
pub fn flag_and_merge(raw: Option<(&ScoreMatrix, f64)>, diff: Option<(&ScoreMatrix, f64)>, method: &str) -> OutlierReport {
    let mut events: BTreeMap<(String, Day), Event> = BTreeMap::new();
    let mut order: HashMap<String, usize> = HashMap::new();
    if let Some((s, k)) = raw {
        for (i, t, v) in flag_cells(s, k) {
            let e = event(s, i, t, v, k, method);
            order.entry(e.series_id.clone()).or_insert(i);
            events.insert((e.series_id.clone(), e.date), e);
        }
    }
    if let Some((s, k)) = diff {
        let flags: Vec<Event> = flag_cells(s, k).into_iter().map(|(i, t, v)| event(s, i, t, v, k, method)).collect();
        let mut pending: Vec<Option<Event>> = flags.into_iter().map(Some).collect();
        for offset in [0i64, -1, 1] {
            for slot in pending.iter_mut() {
                let Some(e) = slot.as_ref() else { continue };
                let key = (e.series_id.clone(), Day(e.date.0 + offset));
                if let Some(hit) = events.get_mut(&key) {
                    hit.level = Level::Both;
                    *slot = None;
                }
            }
        }
        for (i, e) in pending.into_iter().flatten().enumerate() {
            let key = (e.series_id.clone(), e.date);
            order.entry(e.series_id.clone()).or_insert(usize::MAX - i);
            events.entry(key).or_insert(e);
        }
    }
    let mut events: Vec<Event> = events.into_values().collect();
    events.sort_by(|a, b| {
        order[&a.series_id]
            .cmp(&order[&b.series_id])
            .then(a.series_id.cmp(&b.series_id))
            .then(a.date.cmp(&b.date))
    });
    OutlierReport { events }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(rows: &[Vec<f64>], start: i64, level: Level) -> ScoreMatrix {
        let n = rows[0].len();
        ScoreMatrix {
            values: rows.concat(),
            d: rows.len(),
            n,
            series_ids: (0..rows.len()).map(|i| format!("s{i}")).collect(),
            dates: (0..n as i64).map(|t| Day(start + t)).collect(),
            level,
        }
    }

    #[test]
    fn disjoint_flags_concatenate() {
        let raw = scores(&[vec![0.0, 5.0, 0.0, 0.0, 0.0]], 0, Level::Raw);
        let diff = scores(&[vec![0.0, 0.0, 0.0, 6.0]], 1, Level::Differenced);
        let r = flag_and_merge(Some((&raw, 1.0)), Some((&diff, 1.0)), "ogk");
        assert_eq!(r.len(), 2);
        assert_eq!(r.events[0].level, Level::Raw);
        assert_eq!(r.events[1].level, Level::Differenced);
        assert_eq!(r.events[1].date, Day(4));
    }

    #[test]
    fn same_cell_at_both_levels_is_one_event() {
        let raw = scores(&[vec![0.0, 0.0, 5.0, 0.0, 0.0]], 0, Level::Raw);
        // An additive spike shows up in the differences at its date and the next.
        let diff = scores(&[vec![0.0, 7.0, 7.0, 0.0]], 1, Level::Differenced);
        let r = flag_and_merge(Some((&raw, 1.0)), Some((&diff, 1.0)), "ogk");
        assert_eq!(r.len(), 1);
        let e = &r.events[0];
        assert_eq!((e.date, e.level, e.score), (Day(2), Level::Both, 5.0));
    }

    #[test]
    fn raising_kappa_never_adds_flags() {
        let s = scores(&[vec![0.5, 2.0, -1.0, 3.0], vec![1.5, 0.1, 4.0, 2.5]], 0, Level::Raw);
        let mut prev = usize::MAX;
        for k in [-2.0, 0.0, 1.0, 2.0, 2.5, 3.0, 5.0] {
            let c = flag_cells(&s, k).len();
            assert!(c <= prev);
            prev = c;
        }
    }

    #[test]
    fn csv_round_trip() {
        let raw = scores(&[vec![0.0, 5.0, 0.0]], 10, Level::Raw);
        let mut r = flag_and_merge(Some((&raw, 1.25)), None, "mrcd");
        r.events[0].typology = Some(Typology::Ao);
        r.events[0].sign = Some(Sign::Negative);
        r.events[0].delta_hat = Some(-3.5);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("series_id,date,score,level,kappa,method,typology,sign,delta_hat\n"));
        assert_eq!(read_report(&buf[..]).unwrap(), r);
    }
}
