//! Country-by-period indicator panels: loading, validation, holdout splits
//! and forward simulation of synthetic panels.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::spline::{Coefficients, SplineBasis, SplineConfig};

/// Width of every period in years.
pub const PERIOD_WIDTH: i32 = 5;
/// Admissible open interval for observed values.
pub const VALUE_BOUNDS: (f64, f64) = (15.0, 110.0);

/// A five-year period, e.g. `2015-2020` is `Period { start: 2015, end: 2020 }`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Period {
    pub start: i32,
    pub end: i32,
}

impl Period {
    pub fn starting(start: i32) -> Self {
        Period {
            start,
            end: start + PERIOD_WIDTH,
        }
    }

    pub fn next(self) -> Self {
        Period::starting(self.end)
    }

    pub fn offset(self, steps: i32) -> Self {
        Period::starting(self.start + steps * PERIOD_WIDTH)
    }
}

impl fmt::Display for Period {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.start, self.end)
    }
}

impl FromStr for Period {
    type Err = Error;

    /// Accepts `2015-2020` or a bare start year `2015`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("cannot parse period label {s:?}"));
        let s = s.trim();
        match s.split_once('-') {
            Some((a, b)) => {
                let start: i32 = a.trim().parse().map_err(|_| bad())?;
                let end: i32 = b.trim().parse().map_err(|_| bad())?;
                if end - start != PERIOD_WIDTH {
                    return Err(Error::InvalidConfig(format!(
                        "period {s} is not {PERIOD_WIDTH} years wide"
                    )));
                }
                Ok(Period { start, end })
            }
            None => Ok(Period::starting(s.parse().map_err(|_| bad())?)),
        }
    }
}

impl Serialize for Period {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Period {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Rectangular panel of observed values, countries x periods.
///
/// Missing cells may only appear before a country's first observation or
/// after its last one.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesPanel {
    countries: Vec<String>,
    names: Vec<String>,
    regions: Vec<String>,
    periods: Vec<Period>,
    values: Vec<Option<f64>>,
}

impl SeriesPanel {
    /// Builds a validated panel. `values[c][t]` is the value of country `c`
    /// in period `t`.
    pub fn new(
        countries: Vec<String>,
        names: Vec<String>,
        regions: Vec<String>,
        periods: Vec<Period>,
        values: Vec<Vec<Option<f64>>>,
    ) -> Result<Self> {
        Self::assemble(countries, names, regions, periods, values, true)
    }

    fn assemble(
        countries: Vec<String>,
        names: Vec<String>,
        regions: Vec<String>,
        periods: Vec<Period>,
        values: Vec<Vec<Option<f64>>>,
        require_history: bool,
    ) -> Result<Self> {
        let n = countries.len();
        if names.len() != n || regions.len() != n || values.len() != n {
            return Err(Error::InvalidPanel(
                "countries, names, regions and value rows differ in length".into(),
            ));
        }
        let unique: BTreeSet<&String> = countries.iter().collect();
        if unique.len() != n {
            return Err(Error::InvalidPanel("duplicate country codes".into()));
        }
        for w in periods.windows(2) {
            if w[1] != w[0].next() {
                return Err(Error::InvalidPanel(format!(
                    "periods {} and {} are not contiguous",
                    w[0], w[1]
                )));
            }
        }
        if let Some(p) = periods.iter().find(|p| p.end - p.start != PERIOD_WIDTH) {
            return Err(Error::InvalidPanel(format!("period {p} is not 5 years wide")));
        }
        let t = periods.len();
        let mut flat = Vec::with_capacity(n * t);
        for (c, row) in values.into_iter().enumerate() {
            if row.len() != t {
                return Err(Error::InvalidPanel(format!(
                    "country {} has {} values for {} periods",
                    countries[c],
                    row.len(),
                    t
                )));
            }
            for (j, v) in row.iter().enumerate() {
                if let Some(v) = *v {
                    if !(v.is_finite() && v > VALUE_BOUNDS.0 && v < VALUE_BOUNDS.1) {
                        return Err(Error::ValueOutOfRange {
                            country: countries[c].clone(),
                            period: periods[j],
                            value: v,
                        });
                    }
                }
            }
            let observed: Vec<usize> = (0..t).filter(|&j| row[j].is_some()).collect();
            if let (Some(&first), Some(&last)) = (observed.first(), observed.last()) {
                if let Some(gap) = (first..=last).find(|&j| row[j].is_none()) {
                    return Err(Error::InternalGap {
                        country: countries[c].clone(),
                        period: periods[gap],
                    });
                }
            }
            if require_history && observed.len() < 2 {
                return Err(Error::InvalidPanel(format!(
                    "country {} has fewer than 2 observed periods",
                    countries[c]
                )));
            }
            flat.extend(row);
        }
        Ok(SeriesPanel {
            countries,
            names,
            regions,
            periods,
            values: flat,
        })
    }

    pub fn n_countries(&self) -> usize {
        self.countries.len()
    }

    pub fn n_periods(&self) -> usize {
        self.periods.len()
    }

    pub fn countries(&self) -> &[String] {
        &self.countries
    }

    pub fn country_names(&self) -> &[String] {
        &self.names
    }

    pub fn regions(&self) -> &[String] {
        &self.regions
    }

    pub fn region(&self, country: usize) -> &str {
        &self.regions[country]
    }

    pub fn periods(&self) -> &[Period] {
        &self.periods
    }

    pub fn country_index(&self, code: &str) -> Option<usize> {
        self.countries.iter().position(|c| c == code)
    }

    pub fn period_index(&self, period: Period) -> Option<usize> {
        self.periods.iter().position(|&p| p == period)
    }

    pub fn value(&self, country: usize, period: usize) -> Option<f64> {
        self.values[country * self.periods.len() + period]
    }

    pub fn row(&self, country: usize) -> &[Option<f64>] {
        let t = self.periods.len();
        &self.values[country * t..(country + 1) * t]
    }

    /// Index range `(first, last)` of observed periods for a country.
    pub fn observed_span(&self, country: usize) -> Option<(usize, usize)> {
        let row = self.row(country);
        let first = row.iter().position(Option::is_some)?;
        let last = row.iter().rposition(Option::is_some)?;
        Some((first, last))
    }

    pub fn n_observed(&self) -> usize {
        self.values.iter().filter(|v| v.is_some()).count()
    }

    pub fn max_observed(&self) -> Option<f64> {
        self.values.iter().flatten().copied().reduce(f64::max)
    }

    /// Splits into periods up to and including `cutoff` and the periods after it.
    pub fn holdout_split(&self, cutoff: Period) -> Result<(SeriesPanel, SeriesPanel)> {
        let k = self.period_index(cutoff).ok_or(Error::PeriodNotFound(cutoff))?;
        let split = |range: std::ops::Range<usize>, require_history: bool| {
            let rows = (0..self.n_countries())
                .map(|c| self.row(c)[range.clone()].to_vec())
                .collect();
            SeriesPanel::assemble(
                self.countries.clone(),
                self.names.clone(),
                self.regions.clone(),
                self.periods[range.clone()].to_vec(),
                rows,
                require_history,
            )
        };
        let train = split(0..k + 1, true)?;
        let test = split(k + 1..self.n_periods(), false)?;
        Ok((train, test))
    }

    /// Keeps only the listed countries, in the given order.
    pub fn select_countries(&self, codes: &[&str]) -> Result<SeriesPanel> {
        let mut idx = Vec::with_capacity(codes.len());
        for code in codes {
            idx.push(
                self.country_index(code)
                    .ok_or_else(|| Error::InvalidPanel(format!("unknown country {code}")))?,
            );
        }
        SeriesPanel::new(
            idx.iter().map(|&c| self.countries[c].clone()).collect(),
            idx.iter().map(|&c| self.names[c].clone()).collect(),
            idx.iter().map(|&c| self.regions[c].clone()).collect(),
            self.periods.clone(),
            idx.iter().map(|&c| self.row(c).to_vec()).collect(),
        )
    }
}

/// Column names used when reading a panel CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnSchema {
    pub country_code: String,
    pub country_name: String,
    pub region: String,
    pub period_start: String,
    pub value: String,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        ColumnSchema {
            country_code: "country_code".into(),
            country_name: "country_name".into(),
            region: "region".into(),
            period_start: "period_start".into(),
            value: "e0".into(),
        }
    }
}

pub fn load_panel(path: impl AsRef<Path>, schema: &ColumnSchema) -> Result<SeriesPanel> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_panel(file, schema)
}

/// Reads a panel from any CSV source; rows may come in any order.
pub fn read_panel<R: std::io::Read>(reader: R, schema: &ColumnSchema) -> Result<SeriesPanel> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            row: 1,
            message: e.to_string(),
        })?
        .clone();
    let column = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            row: 1,
            message: format!("missing column {name:?}"),
        })
    };
    let code_col = column(&schema.country_code)?;
    let region_col = column(&schema.region)?;
    let start_col = column(&schema.period_start)?;
    let value_col = column(&schema.value)?;
    let name_col = headers.iter().position(|h| h == schema.country_name);

    struct CountryMeta {
        name: String,
        region: String,
    }
    let mut meta: BTreeMap<String, CountryMeta> = BTreeMap::new();
    let mut cells: BTreeMap<(String, i32), Option<f64>> = BTreeMap::new();

    for record in rdr.records() {
        let record = record.map_err(|e| Error::Parse {
            row: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let row = record.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize| record.get(i).unwrap_or("");
        let code = field(code_col).to_string();
        if code.is_empty() {
            return Err(Error::Parse {
                row,
                message: "empty country code".into(),
            });
        }
        let start: i32 = field(start_col).parse().map_err(|_| Error::Parse {
            row,
            message: format!("invalid period start {:?}", field(start_col)),
        })?;
        let raw = field(value_col);
        let value = if raw.is_empty() || raw.eq_ignore_ascii_case("na") {
            None
        } else {
            Some(raw.parse::<f64>().map_err(|_| Error::Parse {
                row,
                message: format!("invalid value {raw:?}"),
            })?)
        };
        let region = field(region_col).to_string();
        let name = name_col.map_or_else(|| code.clone(), |i| field(i).to_string());
        match meta.get(&code) {
            Some(m) if m.region != region => {
                return Err(Error::Parse {
                    row,
                    message: format!(
                        "country {code} has conflicting regions {:?} and {region:?}",
                        m.region
                    ),
                })
            }
            Some(_) => {}
            None => {
                meta.insert(code.clone(), CountryMeta { name, region });
            }
        }
        if cells.insert((code.clone(), start), value).is_some() {
            return Err(Error::DuplicateRow {
                country: code,
                period: Period::starting(start),
            });
        }
    }

    if cells.is_empty() {
        return Err(Error::InvalidPanel("no data rows".into()));
    }
    let first = cells.keys().map(|(_, s)| *s).min().unwrap_or_default();
    let last = cells.keys().map(|(_, s)| *s).max().unwrap_or_default();
    if let Some((code, s)) = cells.keys().find(|(_, s)| (s - first) % PERIOD_WIDTH != 0) {
        return Err(Error::InvalidPanel(format!(
            "period start {s} for {code} is not aligned to 5-year periods starting {first}"
        )));
    }
    let periods: Vec<Period> = (first..=last)
        .step_by(PERIOD_WIDTH as usize)
        .map(Period::starting)
        .collect();

    let mut countries = Vec::new();
    let mut names = Vec::new();
    let mut regions = Vec::new();
    let mut values = Vec::new();
    for (code, m) in meta {
        let row = periods
            .iter()
            .map(|p| cells.get(&(code.clone(), p.start)).copied().flatten())
            .collect();
        countries.push(code);
        names.push(m.name);
        regions.push(m.region);
        values.push(row);
    }
    SeriesPanel::new(countries, names, regions, periods, values)
}

/// Writes observed cells in the default column schema, sorted by country then period.
pub fn write_panel(panel: &SeriesPanel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_panel_to(panel, file).map_err(|e| Error::io(path, e))
}

pub fn write_panel_to<W: std::io::Write>(panel: &SeriesPanel, writer: W) -> std::io::Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["country_code", "country_name", "region", "period_start", "e0"])?;
    let mut order: Vec<usize> = (0..panel.n_countries()).collect();
    order.sort_by(|&a, &b| panel.countries[a].cmp(&panel.countries[b]));
    for c in order {
        for (t, p) in panel.periods.iter().enumerate() {
            if let Some(v) = panel.value(c, t) {
                wtr.write_record([
                    panel.countries[c].as_str(),
                    panel.names[c].as_str(),
                    panel.regions[c].as_str(),
                    &p.start.to_string(),
                    &v.to_string(),
                ])?;
            }
        }
    }
    wtr.flush()
}

/// Ground truth for one synthetic country.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCountry {
    pub code: String,
    pub region: String,
    pub initial_level: f64,
    /// Unconstrained spline parameters, `n_basis - 2` values.
    pub beta_star: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShockInjection {
    pub country: String,
    pub period: Period,
    pub magnitude: f64,
}

/// Full description of a synthetic panel and its generating truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_countries: usize,
    pub n_periods: usize,
    pub first_period: Period,
    pub countries: Vec<SyntheticCountry>,
    pub spline: SplineConfig,
    pub tau_eps: f64,
    #[serde(default)]
    pub shocks: Vec<ShockInjection>,
    pub seed: u64,
}

/// Typical unconstrained spline parameters used by [`SyntheticSpec::generate`].
/// They map to gains of roughly 2.5, 3.0, 3.2 years per period and an
/// asymptotic gain of 0.9.
pub const TYPICAL_BETA_STAR: [f64; 4] = [-1.0990, -0.8476, -0.7541, 1.2798];

impl SyntheticSpec {
    /// Random truth around [`TYPICAL_BETA_STAR`] with `n_shocks` shocks of
    /// magnitude uniform in `shock_range`, placed in distinct non-initial cells.
    pub fn generate(
        n_countries: usize,
        n_periods: usize,
        tau_eps: f64,
        n_shocks: usize,
        shock_range: (f64, f64),
        seed: u64,
    ) -> Result<Self> {
        const REGIONS: [&str; 4] = ["Africa", "Americas", "Asia & Oceania", "Europe"];
        if n_periods < 2 || n_countries == 0 {
            return Err(Error::InvalidConfig(
                "synthetic panels need at least 1 country and 2 periods".into(),
            ));
        }
        if n_shocks > n_countries * (n_periods - 1) {
            return Err(Error::InvalidConfig("more shocks than cells".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
        let level = Uniform::new(38.0, 62.0).expect("valid range");
        let jitter = Normal::new(0.0, 0.25).expect("valid sd");
        let countries: Vec<SyntheticCountry> = (0..n_countries)
            .map(|c| SyntheticCountry {
                code: format!("C{:03}", c + 1),
                region: REGIONS[c % REGIONS.len()].to_string(),
                initial_level: level.sample(&mut rng),
                beta_star: TYPICAL_BETA_STAR
                    .iter()
                    .map(|b| b + jitter.sample(&mut rng))
                    .collect(),
            })
            .collect();
        let first_period = Period::starting(1950);
        let magnitude = Uniform::new_inclusive(shock_range.0, shock_range.1)
            .map_err(|e| Error::InvalidConfig(format!("shock range: {e}")))?;
        let mut cells = BTreeSet::new();
        let mut shocks = Vec::with_capacity(n_shocks);
        while shocks.len() < n_shocks {
            let c = rng.random_range(0..n_countries);
            let t = rng.random_range(1..n_periods);
            if cells.insert((c, t)) {
                shocks.push(ShockInjection {
                    country: countries[c].code.clone(),
                    period: first_period.offset(t as i32),
                    magnitude: magnitude.sample(&mut rng),
                });
            }
        }
        Ok(SyntheticSpec {
            n_countries,
            n_periods,
            first_period,
            countries,
            spline: SplineConfig {
                knot_anchor: Some(85.0),
                ..SplineConfig::default()
            },
            tau_eps,
            shocks,
            seed,
        })
    }

    pub fn periods(&self) -> Vec<Period> {
        (0..self.n_periods)
            .map(|t| self.first_period.offset(t as i32))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.countries.len() != self.n_countries {
            return Err(Error::InvalidConfig(format!(
                "n_countries = {} but {} countries listed",
                self.n_countries,
                self.countries.len()
            )));
        }
        if self.n_periods < 2 {
            return Err(Error::InvalidConfig("need at least 2 periods".into()));
        }
        if !(self.tau_eps >= 0.0 && self.tau_eps.is_finite()) {
            return Err(Error::InvalidConfig("tau_eps must be >= 0".into()));
        }
        let periods = self.periods();
        for s in &self.shocks {
            if !(s.magnitude > 0.0 && s.magnitude.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "shock magnitude {} must be positive",
                    s.magnitude
                )));
            }
            if !self.countries.iter().any(|c| c.code == s.country) {
                return Err(Error::InvalidConfig(format!(
                    "shock refers to unknown country {}",
                    s.country
                )));
            }
            match periods.iter().position(|&p| p == s.period) {
                Some(t) if t > 0 => {}
                _ => {
                    return Err(Error::InvalidConfig(format!(
                        "shock period {} must be a non-initial panel period",
                        s.period
                    )))
                }
            }
        }
        Ok(())
    }

    /// Shock magnitude injected at a (country index, period index) cell.
    pub fn shock_at(&self, country: usize, period: usize) -> f64 {
        let code = &self.countries[country].code;
        let label = self.first_period.offset(period as i32);
        self.shocks
            .iter()
            .filter(|s| &s.country == code && s.period == label)
            .map(|s| s.magnitude)
            .sum()
    }
}

const SIMULATION_RETRIES: usize = 100;

/// Forward-simulates `eta[t] = eta[t-1] + f(eta[t-1]) - delta[t] + eps[t]`.
pub fn simulate_panel(spec: &SyntheticSpec) -> Result<(SeriesPanel, SyntheticSpec)> {
    spec.validate()?;
    let anchor = spec.spline.knot_anchor.unwrap_or(VALUE_BOUNDS.1);
    let basis = SplineBasis::new(&spec.spline, anchor)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let periods = spec.periods();

    let mut values = Vec::with_capacity(spec.n_countries);
    for (c, country) in spec.countries.iter().enumerate() {
        let coeffs = Coefficients::from_unconstrained(basis.config(), &country.beta_star)?;
        let mut row = Vec::with_capacity(spec.n_periods);
        let mut level = country.initial_level;
        if !(level > VALUE_BOUNDS.0 && level < VALUE_BOUNDS.1) {
            return Err(Error::Simulation(format!(
                "initial level {level} of {} is outside (15, 110)",
                country.code
            )));
        }
        row.push(Some(level));
        for t in 1..spec.n_periods {
            let mean = level + basis.transition(&coeffs, level) - spec.shock_at(c, t);
            let mut next = None;
            for _ in 0..SIMULATION_RETRIES {
                let candidate = mean + spec.tau_eps * noise.sample(&mut rng);
                if candidate > VALUE_BOUNDS.0 && candidate < VALUE_BOUNDS.1 {
                    next = Some(candidate);
                    break;
                }
                if spec.tau_eps == 0.0 {
                    break;
                }
            }
            level = next.ok_or_else(|| {
                Error::Simulation(format!(
                    "{} in {} escapes (15, 110) after {SIMULATION_RETRIES} retries",
                    country.code, periods[t]
                ))
            })?;
            row.push(Some(level));
        }
        values.push(row);
    }
    let panel = SeriesPanel::new(
        spec.countries.iter().map(|c| c.code.clone()).collect(),
        spec.countries.iter().map(|c| c.code.clone()).collect(),
        spec.countries.iter().map(|c| c.region.clone()).collect(),
        periods,
        values,
    )?;
    Ok((panel, spec.clone()))
}
