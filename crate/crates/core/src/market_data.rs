//! Monthly price series ingestion and the MACD / RSI indicator features.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Minimum number of months a series must span before indicators can be derived.
pub const MIN_SERIES_MONTHS: usize = 40;

#[derive(Debug, Error, PartialEq)]
pub enum MarketDataError {
    #[error("price file not found: {0}")]
    MissingFile(PathBuf),
    #[error("parse error on line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("non-positive price on line {line}")]
    NonPositivePrice { line: usize },
    #[error("date gap: expected {expected}, found {found}")]
    DateGap {
        expected: YearMonth,
        found: YearMonth,
    },
    #[error("empty input")]
    EmptyInput,
    #[error("span must be at least 1")]
    ZeroSpan,
    #[error("fast window ({fast}) must be shorter than slow window ({slow})")]
    FastNotLessThanSlow { fast: usize, slow: usize },
    #[error("series too short: need more than {needed} months, got {got}")]
    SeriesTooShort { needed: usize, got: usize },
    #[error("synthetic series needs at least {MIN_SERIES_MONTHS} months, got {0}")]
    TooFewMonths(usize),
    #[error("volatility must be non-negative, got {0}")]
    NegativeVolatility(f64),
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, MarketDataError>;

/// A calendar month.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct YearMonth {
    pub year: i32,
    pub month: u32,
}

impl YearMonth {
    pub fn new(year: i32, month: u32) -> Option<Self> {
        (1..=12).contains(&month).then_some(Self { year, month })
    }

    pub fn next(self) -> Self {
        self.add_months(1)
    }

    pub fn add_months(self, months: i64) -> Self {
        let idx = self.year as i64 * 12 + (self.month as i64 - 1) + months;
        Self {
            year: idx.div_euclid(12) as i32,
            month: idx.rem_euclid(12) as u32 + 1,
        }
    }
}

impl fmt::Display for YearMonth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

impl FromStr for YearMonth {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let (y, m) = s
            .trim()
            .split_once('-')
            .ok_or_else(|| format!("expected YYYY-MM, got {s:?}"))?;
        if y.len() != 4 || m.len() != 2 {
            return Err(format!("expected YYYY-MM, got {s:?}"));
        }
        let year: i32 = y.parse().map_err(|_| format!("bad year in {s:?}"))?;
        let month: u32 = m.parse().map_err(|_| format!("bad month in {s:?}"))?;
        YearMonth::new(year, month).ok_or_else(|| format!("month out of range in {s:?}"))
    }
}

impl TryFrom<String> for YearMonth {
    type Error = String;
    fn try_from(value: String) -> std::result::Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<YearMonth> for String {
    fn from(value: YearMonth) -> Self {
        value.to_string()
    }
}

/// Monthly closing values of one index, consecutive months, all positive.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceSeries {
    pub index_name: String,
    pub dates: Vec<YearMonth>,
    pub prices: Vec<f64>,
}

impl PriceSeries {
    /// Validates ordering and positivity. Length is checked by the indicator
    /// functions, which know how much warm-up they need.
    pub fn new(
        index_name: impl Into<String>,
        dates: Vec<YearMonth>,
        prices: Vec<f64>,
    ) -> Result<Self> {
        if dates.is_empty() || dates.len() != prices.len() {
            return Err(MarketDataError::EmptyInput);
        }
        for (i, p) in prices.iter().enumerate() {
            if !(p.is_finite() && *p > 0.0) {
                return Err(MarketDataError::NonPositivePrice { line: i + 2 });
            }
        }
        for w in dates.windows(2) {
            if w[1] != w[0].next() {
                return Err(MarketDataError::DateGap {
                    expected: w[0].next(),
                    found: w[1],
                });
            }
        }
        Ok(Self {
            index_name: index_name.into(),
            dates,
            prices,
        })
    }

    pub fn len(&self) -> usize {
        self.prices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prices.is_empty()
    }
}

/// Reads a `date,price` CSV. The index name is taken from the file stem.
pub fn load_price_csv(path: &Path) -> Result<PriceSeries> {
    if !path.exists() {
        return Err(MarketDataError::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| MarketDataError::Io(e.to_string()))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_price_csv(&name, &text)
}

pub fn parse_price_csv(index_name: &str, text: &str) -> Result<PriceSeries> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "date,price" => {}
        Some((_, header)) => {
            return Err(MarketDataError::ParseError {
                line: 1,
                message: format!("expected header `date,price`, got {:?}", header.trim()),
            })
        }
        None => return Err(MarketDataError::EmptyInput),
    }

    let mut dates: Vec<YearMonth> = Vec::new();
    let mut prices = Vec::new();
    for (i, raw) in lines {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let (d, p) = line
            .split_once(',')
            .ok_or_else(|| MarketDataError::ParseError {
                line: line_no,
                message: "expected two comma-separated fields".into(),
            })?;
        let date: YearMonth = d.parse().map_err(|message| MarketDataError::ParseError {
            line: line_no,
            message,
        })?;
        let price: f64 = p.trim().parse().map_err(|_| MarketDataError::ParseError {
            line: line_no,
            message: format!("bad price {:?}", p.trim()),
        })?;
        if !(price.is_finite() && price > 0.0) {
            return Err(MarketDataError::NonPositivePrice { line: line_no });
        }
        if let Some(last) = dates.last() {
            if date != last.next() {
                return Err(MarketDataError::DateGap {
                    expected: last.next(),
                    found: date,
                });
            }
        }
        dates.push(date);
        prices.push(price);
    }
    PriceSeries::new(index_name, dates, prices)
}

pub fn format_price_csv(series: &PriceSeries) -> String {
    let mut out = String::from("date,price\n");
    for (d, p) in series.dates.iter().zip(&series.prices) {
        // Shortest representation that parses back to the same f64.
        out.push_str(&format!("{d},{p:?}\n"));
    }
    out
}

pub fn save_price_csv(series: &PriceSeries, path: &Path) -> Result<()> {
    crate::io_util::write_atomic(path, format_price_csv(series).as_bytes())
        .map_err(|e| MarketDataError::Io(e.to_string()))
}

/// Exponential moving average seeded with the first observation.
pub fn ema(values: &[f64], span: usize) -> Result<Vec<f64>> {
    if span == 0 {
        return Err(MarketDataError::ZeroSpan);
    }
    let (&first, rest) = values.split_first().ok_or(MarketDataError::EmptyInput)?;
    let alpha = 2.0 / (span as f64 + 1.0);
    let mut out = Vec::with_capacity(values.len());
    out.push(first);
    let mut prev = first;
    for &v in rest {
        prev = alpha * v + (1.0 - alpha) * prev;
        out.push(prev);
    }
    Ok(out)
}

/// Fast minus slow EMA over the full series, warm-up entries included.
pub fn macd(series: &PriceSeries, fast: usize, slow: usize) -> Result<Vec<f64>> {
    if fast >= slow {
        return Err(MarketDataError::FastNotLessThanSlow { fast, slow });
    }
    if series.len() <= slow {
        return Err(MarketDataError::SeriesTooShort {
            needed: slow,
            got: series.len(),
        });
    }
    let f = ema(&series.prices, fast)?;
    let s = ema(&series.prices, slow)?;
    Ok(f.iter().zip(&s).map(|(a, b)| a - b).collect())
}

/// Wilder RSI scaled to [0, 1], full series length.
///
/// Averages over the first `period` changes are expanding means, after which
/// the Wilder recurrence `avg = (avg * (period - 1) + x) / period` takes over.
/// Months with neither gains nor losses read as 0.5.
pub fn rsi(series: &PriceSeries, period: usize) -> Result<Vec<f64>> {
    if period == 0 {
        return Err(MarketDataError::ZeroSpan);
    }
    if series.len() <= period {
        return Err(MarketDataError::SeriesTooShort {
            needed: period,
            got: series.len(),
        });
    }
    let p = &series.prices;
    let mut out = Vec::with_capacity(p.len());
    out.push(0.5);
    let (mut gain, mut loss) = (0.0_f64, 0.0_f64);
    for t in 1..p.len() {
        let change = p[t] - p[t - 1];
        let (g, l) = (change.max(0.0), (-change).max(0.0));
        let n = t.min(period) as f64;
        gain = (gain * (n - 1.0) + g) / n;
        loss = (loss * (n - 1.0) + l) / n;
        let total = gain + loss;
        out.push(if total > 0.0 {
            (gain / total).clamp(0.0, 1.0)
        } else {
            0.5
        });
    }
    Ok(out)
}

/// Geometric random walk `p[t+1] = p[t] * exp(drift + vol * z)`.
pub fn synth_series(
    name: &str,
    start: YearMonth,
    seed: u64,
    months: usize,
    start_price: f64,
    drift: f64,
    vol: f64,
) -> Result<PriceSeries> {
    if months < MIN_SERIES_MONTHS {
        return Err(MarketDataError::TooFewMonths(months));
    }
    if vol.is_nan() || vol < 0.0 {
        return Err(MarketDataError::NegativeVolatility(vol));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prices = Vec::with_capacity(months);
    let mut dates = Vec::with_capacity(months);
    let mut p = start_price;
    let mut d = start;
    for _ in 0..months {
        prices.push(p);
        dates.push(d);
        let z: f64 = StandardNormal.sample(&mut rng);
        p *= (drift + vol * z).exp();
        d = d.next();
    }
    PriceSeries::new(name, dates, prices)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndicatorParams {
    pub macd_fast: usize,
    pub macd_slow: usize,
    pub rsi_period: usize,
}

impl Default for IndicatorParams {
    fn default() -> Self {
        Self {
            macd_fast: 12,
            macd_slow: 26,
            rsi_period: 14,
        }
    }
}

impl IndicatorParams {
    /// Months dropped from the front of a price series.
    pub fn warm_up(&self) -> usize {
        self.macd_slow.max(self.rsi_period)
    }
}

/// MACD and RSI over the post-warm-up window, with the prices they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct IndicatorSeries {
    pub index_name: String,
    pub dates: Vec<YearMonth>,
    pub prices: Vec<f64>,
    pub macd: Vec<f64>,
    pub rsi: Vec<f64>,
}

impl IndicatorSeries {
    pub fn compute(series: &PriceSeries, params: &IndicatorParams) -> Result<Self> {
        let macd_full = macd(series, params.macd_fast, params.macd_slow)?;
        let rsi_full = rsi(series, params.rsi_period)?;
        let skip = params.warm_up();
        Ok(Self {
            index_name: series.index_name.clone(),
            dates: series.dates[skip..].to_vec(),
            prices: series.prices[skip..].to_vec(),
            macd: macd_full[skip..].to_vec(),
            rsi: rsi_full[skip..].to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    /// `date,macd,rsi` with 9 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("date,macd,rsi\n");
        for i in 0..self.len() {
            out.push_str(&format!(
                "{},{},{}\n",
                self.dates[i],
                sig9(self.macd[i]),
                sig9(self.rsi[i])
            ));
        }
        out
    }
}

fn sig9(x: f64) -> String {
    format!("{x:.8e}")
}
