//! Frozen-model scoring of new days and the binary model state.

use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{score_with, fit_forecasters, ForecastConfig, ForecastFit, ForecastMethod, Forecasters, HarKind, HarModel, NeuralHar, HAR_WINDOW};
use crate::detect::{Level, ThresholdConfig, ThresholdMethod, ThresholdSpec};
use crate::error::{Error, Result};
use crate::panel::{first_difference, Day, Panel};
use crate::trend::{fit_panel, LteConfig, TrendCycleSpec};

/// Residuals kept per series: enough for the features of both levels.
const BUFFER: usize = HAR_WINDOW + 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RealtimeConfig {
    pub trend: TrendCycleSpec,
    pub lte: LteConfig,
    pub forecast: ForecastConfig,
    pub threshold: ThresholdMethod,
    pub threshold_config: ThresholdConfig,
    /// Also score first differences of the residuals.
    pub differenced: bool,
}

impl Default for RealtimeConfig {
    fn default() -> Self {
        RealtimeConfig {
            trend: TrendCycleSpec::default(),
            lte: LteConfig::default(),
            forecast: ForecastConfig::default(),
            threshold: ThresholdMethod::Quantile(0.9975),
            threshold_config: ThresholdConfig::default(),
            differenced: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelState {
    pub level: Level,
    pub fit: ForecastFit,
    pub kappa: f64,
}

/// Everything frozen at the end of the fitting window.
#[derive(Debug, Clone, PartialEq)]
pub struct RealtimeState {
    pub trend: TrendCycleSpec,
    pub series_ids: Vec<String>,
    /// Length of the fitting window.
    pub fitted_days: usize,
    /// 0-based index of the next expected day.
    pub next_index: usize,
    pub next_date: Day,
    /// Trend-and-cycle coefficients per series.
    pub beta: Vec<Vec<f64>>,
    /// Most recent residuals per series, oldest first.
    pub buffer: Vec<Vec<f64>>,
    pub levels: Vec<LevelState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFlag {
    pub series_id: String,
    pub date: Day,
    pub level: Level,
    pub score: f64,
    pub kappa: f64,
}

fn level_state(p: &Panel, level: Level, cfg: &RealtimeConfig) -> Result<LevelState> {
    let forecasters = fit_forecasters(p, &cfg.forecast)?;
    let (scores, fit) = score_with(p, forecasters, cfg.forecast.method)?;
    let kappa = ThresholdSpec::select(&scores.values, cfg.threshold, &cfg.threshold_config)?.kappa;
    Ok(LevelState { level, fit, kappa })
}

impl RealtimeState {
    /// Fit trends, forecasters and cut-offs on the observed panel. Series
    /// whose trend fit fails are left out of the state.
    pub fn fit(observed: &Panel, cfg: &RealtimeConfig) -> Result<RealtimeState> {
        if observed.n() < BUFFER + 1 {
            return Err(Error::InsufficientData(format!(
                "real-time state needs more than {BUFFER} days, got {}",
                observed.n()
            )));
        }
        let pf = fit_panel(observed, &cfg.trend, &cfg.lte)?;
        for (id, e) in &pf.failures {
            log::warn!("series {id} left out of the real-time state: {e}");
        }
        let residuals = pf.residuals;
        let mut levels = vec![level_state(&residuals, Level::Raw, cfg)?];
        if cfg.differenced {
            levels.push(level_state(&first_difference(&residuals)?, Level::Differenced, cfg)?);
        }
        let n = residuals.n();
        Ok(RealtimeState {
            trend: cfg.trend.clone(),
            series_ids: residuals.series_ids().to_vec(),
            fitted_days: n,
            next_index: n,
            next_date: residuals.dates()[n - 1].next(),
            beta: pf.fits.into_iter().map(|f| f.coefficients).collect(),
            buffer: (0..residuals.d()).map(|i| residuals.series(i)[n - BUFFER..].to_vec()).collect(),
            levels,
        })
    }

    pub fn method(&self) -> ForecastMethod {
        self.levels[0].fit.method
    }

    /// Score one new day. `observations` maps series ids to values; series
    /// without a finite value are skipped and their buffer is advanced with
    /// the forecast residual. The trends and forecasters stay frozen.
    pub fn step(&mut self, date: Day, observations: &HashMap<String, f64>) -> Result<Vec<StepFlag>> {
        if date != self.next_date {
            return Err(Error::State(format!("expected observations for {}, got {date}", self.next_date)));
        }
        let mut row = Vec::new();
        self.trend.row((self.next_index + 1) as f64, &mut row);
        let mut flags = Vec::new();
        let mut missing = 0usize;
        for i in 0..self.series_ids.len() {
            let id = &self.series_ids[i];
            let hist = &self.buffer[i];
            let last = hist[BUFFER - 1];
            let raw_forecast = self.levels[0].fit.forecasters.predict(i, hist);
            let r = match observations.get(id).filter(|v| v.is_finite()) {
                Some(y) => y - row.iter().zip(&self.beta[i]).map(|(x, b)| x * b).sum::<f64>(),
                None => {
                    log::debug!("no observation for {id} on {date}; skipped");
                    missing += 1;
                    let buf = &mut self.buffer[i];
                    buf.remove(0);
                    buf.push(raw_forecast);
                    continue;
                }
            };
            for lv in &self.levels {
                let error = match lv.level {
                    Level::Differenced => {
                        let diffs: Vec<f64> = hist.windows(2).map(|w| w[1] - w[0]).collect();
                        (r - last) - lv.fit.forecasters.predict(i, &diffs)
                    }
                    _ => r - raw_forecast,
                };
                let score = lv.fit.score(i, error);
                if score > lv.kappa {
                    flags.push(StepFlag {
                        series_id: id.clone(),
                        date,
                        level: lv.level,
                        score,
                        kappa: lv.kappa,
                    });
                }
            }
            let buf = &mut self.buffer[i];
            buf.remove(0);
            buf.push(r);
        }
        if missing > 0 {
            log::warn!("{missing} series had no observation on {date}; their forecasts were carried forward");
        }
        self.next_index += 1;
        self.next_date = self.next_date.next();
        Ok(flags)
    }
}

const MAGIC: &[u8; 8] = b"RBANSTAT";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct LevelHeader {
    level: Level,
    method: ForecastMethod,
    kappa: f64,
    score_mean: f64,
    score_sd: f64,
    /// `har` or `ar1` for linear forecasters.
    kind: Option<HarKind>,
    hidden: Option<usize>,
    trim: Option<f64>,
    nets: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    trend: TrendCycleSpec,
    series_ids: Vec<String>,
    fitted_days: usize,
    next_index: usize,
    next_date: Day,
    levels: Vec<LevelHeader>,
    /// Names and lengths of the little-endian f64 arrays that follow.
    arrays: Vec<(String, usize)>,
}

/// Versioned binary layout: magic, version (u32 LE), header length (u64 LE),
/// JSON header, then the f64 arrays listed in the header.
pub fn write_state<W: Write>(s: &RealtimeState, mut w: W) -> Result<()> {
    let mut arrays: Vec<(String, Vec<f64>)> = vec![
        ("beta".into(), s.beta.concat()),
        ("buffer".into(), s.buffer.concat()),
    ];
    let mut levels = Vec::new();
    for (k, lv) in s.levels.iter().enumerate() {
        let fit = &lv.fit;
        arrays.push((format!("level{k}.error_scales"), fit.error_scales.clone()));
        let mut head = LevelHeader {
            level: lv.level,
            method: fit.method,
            kappa: lv.kappa,
            score_mean: fit.score_mean,
            score_sd: fit.score_sd,
            kind: None,
            hidden: None,
            trim: None,
            nets: 0,
        };
        match &fit.forecasters {
            Forecasters::Linear(models) => {
                head.kind = models.first().map(|m| m.kind);
                arrays.push((format!("level{k}.phi"), models.iter().flat_map(|m| m.phi).collect()));
            }
            Forecasters::Neural { nets, input_scales } => {
                head.hidden = Some(nets[0].hidden);
                head.trim = Some(nets[0].trim);
                head.nets = nets.len();
                arrays.push((format!("level{k}.input_scales"), input_scales.clone()));
                for (j, net) in nets.iter().enumerate() {
                    arrays.push((format!("level{k}.net{j}"), net.to_flat()));
                }
            }
        }
        levels.push(head);
    }
    let header = Header {
        version: VERSION,
        trend: s.trend.clone(),
        series_ids: s.series_ids.clone(),
        fitted_days: s.fitted_days,
        next_index: s.next_index,
        next_date: s.next_date,
        levels,
        arrays: arrays.iter().map(|(n, v)| (n.clone(), v.len())).collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::State(e.to_string()))?;
    let io = |e| Error::io("model state", e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for (_, v) in &arrays {
        for x in v {
            w.write_all(&x.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_state<R: Read>(mut r: R) -> Result<RealtimeState> {
    let io = |e| Error::io("model state", e);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::State("not a model state file".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(io)?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(Error::State(format!("unsupported state version {version}")));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(io)?;
    let len = u64::from_le_bytes(b8) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(io)?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| Error::State(format!("bad state header: {e}")))?;
    let mut arrays = HashMap::new();
    for (name, n) in &header.arrays {
        let mut v = Vec::with_capacity(*n);
        for _ in 0..*n {
            r.read_exact(&mut b8).map_err(io)?;
            v.push(f64::from_le_bytes(b8));
        }
        arrays.insert(name.clone(), v);
    }
    let take = |name: &str| arrays.get(name).cloned().ok_or_else(|| Error::State(format!("state lacks array {name}")));
    let d = header.series_ids.len();
    let chunk = |v: Vec<f64>, name: &str| -> Result<Vec<Vec<f64>>> {
        if d == 0 || v.len() % d != 0 {
            return Err(Error::State(format!("array {name} does not split into {d} series")));
        }
        Ok(v.chunks(v.len() / d).map(|c| c.to_vec()).collect())
    };
    let beta = chunk(take("beta")?, "beta")?;
    let buffer = chunk(take("buffer")?, "buffer")?;
    if buffer.iter().any(|b| b.len() != BUFFER) {
        return Err(Error::State("residual buffer has the wrong length".into()));
    }
    let mut levels = Vec::new();
    for (k, h) in header.levels.into_iter().enumerate() {
        let error_scales = take(&format!("level{k}.error_scales"))?;
        let forecasters = match h.kind {
            Some(kind) => {
                let phi = take(&format!("level{k}.phi"))?;
                if phi.len() != 3 * d {
                    return Err(Error::State("coefficient array has the wrong length".into()));
                }
                Forecasters::Linear(phi.chunks(3).map(|c| HarModel { kind, phi: [c[0], c[1], c[2]] }).collect())
            }
            None => {
                let hidden = h.hidden.ok_or_else(|| Error::State("network level without width".into()))?;
                let trim = h.trim.unwrap_or(0.75);
                let nets = (0..h.nets)
                    .map(|j| NeuralHar::from_flat(hidden, trim, &take(&format!("level{k}.net{j}"))?))
                    .collect::<Result<Vec<_>>>()?;
                Forecasters::Neural {
                    nets,
                    input_scales: take(&format!("level{k}.input_scales"))?,
                }
            }
        };
        levels.push(LevelState {
            level: h.level,
            fit: ForecastFit {
                method: h.method,
                forecasters,
                error_scales,
                score_mean: h.score_mean,
                score_sd: h.score_sd,
            },
            kappa: h.kappa,
        });
    }
    Ok(RealtimeState {
        trend: header.trend,
        series_ids: header.series_ids,
        fitted_days: header.fitted_days,
        next_index: header.next_index,
        next_date: header.next_date,
        beta,
        buffer,
        levels,
    })
}
