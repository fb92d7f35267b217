//! Daily log-return panels and wide price CSV files.

use std::io::{Read, Write};
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const DATE_FORMAT: &str = "%Y-%m-%d";

/// `T × m` matrix of daily log-returns with dates and series names.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnsPanel {
    dates: Vec<NaiveDate>,
    series_ids: Vec<String>,
    log_returns: DMatrix<f64>,
    benchmark_index: usize,
}

impl ReturnsPanel {
    pub fn new(dates: Vec<NaiveDate>, series_ids: Vec<String>, log_returns: DMatrix<f64>) -> Result<Self> {
        let (t, m) = log_returns.shape();
        if dates.len() != t || series_ids.len() != m {
            return Err(Error::Structure(format!(
                "panel has {t}×{m} returns but {} dates and {} series names",
                dates.len(),
                series_ids.len()
            )));
        }
        if m == 0 {
            return Err(Error::Structure("panel has no series".into()));
        }
        if let Some(i) = dates.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::Data {
                row: i + 1,
                column: 0,
                detail: "dates are not strictly increasing".into(),
            });
        }
        for i in 0..t {
            for j in 0..m {
                if !log_returns[(i, j)].is_finite() {
                    return Err(Error::Data {
                        row: i,
                        column: j + 1,
                        detail: "non-finite log-return".into(),
                    });
                }
            }
        }
        Ok(ReturnsPanel {
            dates,
            series_ids,
            log_returns,
            benchmark_index: 0,
        })
    }

    /// Attach consecutive business-day dates starting at `start`.
    pub fn with_business_days(start: NaiveDate, series_ids: Vec<String>, log_returns: DMatrix<f64>) -> Result<Self> {
        let dates = business_days(start, log_returns.nrows());
        ReturnsPanel::new(dates, series_ids, log_returns)
    }

    pub fn n_steps(&self) -> usize {
        self.log_returns.nrows()
    }

    pub fn n_series(&self) -> usize {
        self.log_returns.ncols()
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn series_ids(&self) -> &[String] {
        &self.series_ids
    }

    pub fn log_returns(&self) -> &DMatrix<f64> {
        &self.log_returns
    }

    pub fn benchmark_index(&self) -> usize {
        self.benchmark_index
    }

    pub fn row(&self, t: usize) -> DVector<f64> {
        self.log_returns.row(t).transpose()
    }

    /// Read-only view of the rows strictly before `end`.
    pub fn history(&self, end: usize) -> PanelView<'_> {
        PanelView {
            panel: self,
            end: end.min(self.n_steps()),
        }
    }
}

/// Panel truncated at a decision time. Reading a row at or past the cut-off
/// is a contract violation.
#[derive(Debug, Clone, Copy)]
pub struct PanelView<'a> {
    panel: &'a ReturnsPanel,
    end: usize,
}

impl PanelView<'_> {
    pub fn len(&self) -> usize {
        self.end
    }

    pub fn is_empty(&self) -> bool {
        self.end == 0
    }

    pub fn row(&self, t: usize) -> Result<DVector<f64>> {
        if t >= self.end {
            return Err(Error::Contract(format!(
                "look-ahead: row {t} requested from a view truncated at {}",
                self.end
            )));
        }
        Ok(self.panel.row(t))
    }

    pub fn last(&self) -> Option<DVector<f64>> {
        self.end.checked_sub(1).map(|t| self.panel.row(t))
    }
}

pub fn business_days(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(n);
    let mut d = start;
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d += Duration::days(1);
    }
    out
}

/// Parse a wide price CSV (`date,<id>,<id>,...`). The first row supplies the
/// base prices; returns are `log(p_t / p_{t-1})`.
pub fn read_prices<R: Read>(reader: R) -> Result<ReturnsPanel> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.len() < 2 {
        return Err(Error::Data {
            row: 0,
            column: 0,
            detail: "expected a date column followed by at least one price column".into(),
        });
    }
    let series_ids: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let m = series_ids.len();
    let mut dates = Vec::new();
    let mut prices: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        if rec.len() != m + 1 {
            return Err(Error::Data {
                row,
                column: rec.len().min(m + 1),
                detail: format!("expected {} cells, found {}", m + 1, rec.len()),
            });
        }
        let date = NaiveDate::parse_from_str(&rec[0], DATE_FORMAT).map_err(|e| Error::Data {
            row,
            column: 0,
            detail: format!("bad date '{}': {e}", &rec[0]),
        })?;
        if dates.last().is_some_and(|&d| date <= d) {
            return Err(Error::Data {
                row,
                column: 0,
                detail: "dates are not strictly increasing".into(),
            });
        }
        let mut values = Vec::with_capacity(m);
        for j in 0..m {
            let cell = &rec[j + 1];
            if cell.is_empty() {
                return Err(Error::Data {
                    row,
                    column: j + 1,
                    detail: "missing price".into(),
                });
            }
            let v: f64 = cell.parse().map_err(|_| Error::Data {
                row,
                column: j + 1,
                detail: format!("unparseable price '{cell}'"),
            })?;
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Data {
                    row,
                    column: j + 1,
                    detail: format!("price {v} is not positive"),
                });
            }
            values.push(v);
        }
        dates.push(date);
        prices.push(values);
    }
    if prices.len() < 2 {
        return Err(Error::Data {
            row: prices.len(),
            column: 0,
            detail: "need at least two price rows".into(),
        });
    }
    let t = prices.len() - 1;
    let returns = DMatrix::from_fn(t, m, |i, j| (prices[i + 1][j] / prices[i][j]).ln());
    ReturnsPanel::new(dates[1..].to_vec(), series_ids, returns)
}

pub fn load_prices(path: &Path) -> Result<ReturnsPanel> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::from(e).context(format!("opening prices file {}", path.display())))?;
    read_prices(std::io::BufReader::new(file)).map_err(|e| e.context(format!("loading {}", path.display())))
}

/// Write a panel as prices starting from `base_price`; the base row is dated
/// one business day before the first return.
pub fn write_prices<W: Write>(panel: &ReturnsPanel, base_price: f64, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["date".to_string()];
    header.extend(panel.series_ids.iter().cloned());
    w.write_record(&header)?;
    let first = panel.dates.first().copied().unwrap_or(NaiveDate::MIN);
    let mut base_date = first - Duration::days(1);
    while matches!(base_date.weekday(), Weekday::Sat | Weekday::Sun) {
        base_date -= Duration::days(1);
    }
    let m = panel.n_series();
    let mut price = vec![base_price; m];
    let mut write_row = |date: NaiveDate, price: &[f64]| -> Result<()> {
        let mut rec = vec![date.format(DATE_FORMAT).to_string()];
        rec.extend(price.iter().map(|p| p.to_string()));
        w.write_record(&rec)?;
        Ok(())
    };
    write_row(base_date, &price)?;
    for t in 0..panel.n_steps() {
        for (j, p) in price.iter_mut().enumerate() {
            *p *= panel.log_returns[(t, j)].exp();
        }
        write_row(panel.dates[t], &price)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_prices(panel: &ReturnsPanel, base_price: f64, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)
        .map_err(|e| Error::from(e).context(format!("creating {}", path.display())))?;
    write_prices(panel, base_price, std::io::BufWriter::new(file))
}
