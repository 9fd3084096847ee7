//! Feature encodings, the elasticity design vector and dataset CSV I/O.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simcore::TransactionRecord;

pub const N_DOW: usize = 7;
pub const N_WOY: usize = 52;
pub const N_FOURIER: usize = 4;

/// Category cardinalities and optional blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSchema {
    pub n_pos: usize,
    pub n_tf: usize,
    /// Number of sine/cosine pairs over days-before-departure appended to
    /// the elasticity design. 0 disables the block.
    pub dbd_fourier_terms: usize,
    pub horizon_days: u32,
}

impl Default for FeatureSchema {
    fn default() -> Self {
        Self {
            n_pos: 2,
            n_tf: 10,
            dbd_fourier_terms: 0,
            horizon_days: 365,
        }
    }
}

/// Categorical content of a feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Categories {
    pub pos: u8,
    pub tf: u8,
    pub dow: u8,
    pub woy: u8,
}

impl From<&TransactionRecord> for Categories {
    fn from(r: &TransactionRecord) -> Self {
        Self {
            pos: r.pos,
            tf: r.tf,
            dow: r.dow,
            woy: r.woy,
        }
    }
}

impl FeatureSchema {
    pub fn validate(&self) -> Result<()> {
        if self.n_pos == 0 || self.n_tf == 0 {
            return Err(Error::Config("schema needs at least one POS and one TF".into()));
        }
        if self.dbd_fourier_terms > 0 && self.horizon_days == 0 {
            return Err(Error::Config("dbd basis needs a positive horizon".into()));
        }
        Ok(())
    }

    /// Named blocks of the nuisance feature vector X.
    pub fn feature_layout(&self) -> Vec<(&'static str, Range<usize>)> {
        let mut at = 0;
        let mut block = |name, len| {
            let r = at..at + len;
            at += len;
            (name, r)
        };
        vec![
            block("intercept", 1),
            block("pos", self.n_pos),
            block("tf", self.n_tf),
            block("dow", N_DOW),
            block("fourier", N_FOURIER),
        ]
    }

    pub fn feature_dim(&self) -> usize {
        1 + self.n_pos + self.n_tf + N_DOW + N_FOURIER
    }

    pub fn design_dim(&self) -> usize {
        1 + (self.n_pos - 1) + (self.n_tf - 1) + 2 * self.dbd_fourier_terms
    }

    /// Parameter names of the elasticity design, in order.
    pub fn design_names(&self) -> Vec<String> {
        let mut names = vec!["theta_intercept".to_string()];
        names.extend((1..self.n_pos).map(|p| format!("theta_pos{p}")));
        names.extend((1..self.n_tf).map(|t| format!("theta_tf{t}")));
        for k in 1..=self.dbd_fourier_terms {
            names.push(format!("theta_dbd_sin{k}"));
            names.push(format!("theta_dbd_cos{k}"));
        }
        names
    }

    pub fn check(&self, c: Categories) -> Result<()> {
        let bad = |what: &str, v: u8, n: usize| {
            Err(Error::Data(format!("unknown {what} category {v} (expected < {n})")))
        };
        if c.pos as usize >= self.n_pos {
            return bad("pos", c.pos, self.n_pos);
        }
        if c.tf as usize >= self.n_tf {
            return bad("tf", c.tf, self.n_tf);
        }
        if c.dow as usize >= N_DOW {
            return bad("dow", c.dow, N_DOW);
        }
        if c.woy as usize >= N_WOY {
            return bad("woy", c.woy, N_WOY);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElasticityDesign {
    pub values: Vec<f64>,
}

/// First two yearly harmonics of the week of year.
pub fn fourier_seasonality(woy: u8) -> Result<[f64; 4]> {
    if woy as usize >= N_WOY {
        return Err(Error::Domain(format!("week of year {woy} outside 0..52")));
    }
    Ok(fourier_unchecked(woy))
}

fn fourier_unchecked(woy: u8) -> [f64; 4] {
    // exact quarter-period values keep the encoding free of 1e-17 residue
    let trig = |k: usize| -> (f64, f64) {
        match (k * woy as usize) % N_WOY {
            0 => (0.0, 1.0),
            13 => (1.0, 0.0),
            26 => (0.0, -1.0),
            39 => (-1.0, 0.0),
            m => {
                let a = 2.0 * PI * m as f64 / N_WOY as f64;
                (a.sin(), a.cos())
            }
        }
    };
    let (s1, c1) = trig(1);
    let (s2, c2) = trig(2);
    [s1, c1, s2, c2]
}

fn write_features(c: Categories, schema: &FeatureSchema, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    out[0] = 1.0;
    let mut at = 1;
    out[at + c.pos as usize] = 1.0;
    at += schema.n_pos;
    out[at + c.tf as usize] = 1.0;
    at += schema.n_tf;
    out[at + c.dow as usize] = 1.0;
    at += N_DOW;
    out[at..at + N_FOURIER].copy_from_slice(&fourier_unchecked(c.woy));
}

/// Nuisance-stage features: intercept, full one-hots of POS, TF and DOW,
/// then the four seasonal terms.
pub fn encode_features(record: &TransactionRecord, schema: &FeatureSchema) -> Result<FeatureVector> {
    let c = Categories::from(record);
    schema.check(c)?;
    let mut values = vec![0.0; schema.feature_dim()];
    write_features(c, schema, &mut values);
    Ok(FeatureVector { values })
}

pub fn decode_features(fv: &FeatureVector, schema: &FeatureSchema) -> Result<Categories> {
    if fv.values.len() != schema.feature_dim() {
        return Err(Error::Dimension {
            expected: schema.feature_dim(),
            got: fv.values.len(),
        });
    }
    let layout = schema.feature_layout();
    let hot = |r: &Range<usize>, name: &str| -> Result<u8> {
        let slots: Vec<usize> = r.clone().filter(|&i| fv.values[i] == 1.0).collect();
        match slots.as_slice() {
            [i] if r.clone().all(|j| j == *i || fv.values[j] == 0.0) => Ok((i - r.start) as u8),
            _ => Err(Error::Data(format!("{name} block is not one-hot"))),
        }
    };
    let f = &fv.values[layout[4].1.clone()];
    let angle = f[0].atan2(f[1]).rem_euclid(2.0 * PI);
    let woy = ((angle * N_WOY as f64 / (2.0 * PI)).round() as usize % N_WOY) as u8;
    Ok(Categories {
        pos: hot(&layout[1].1, "pos")?,
        tf: hot(&layout[2].1, "tf")?,
        dow: hot(&layout[3].1, "dow")?,
        woy,
    })
}

fn write_design(pos: u8, tf: u8, booking_day: u32, schema: &FeatureSchema, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    out[0] = 1.0;
    if pos > 0 {
        out[pos as usize] = 1.0;
    }
    let tf_at = schema.n_pos;
    if tf > 0 {
        out[tf_at + tf as usize - 1] = 1.0;
    }
    if schema.dbd_fourier_terms > 0 {
        let dbd = schema.horizon_days.saturating_sub(1 + booking_day) as f64;
        let base = schema.n_pos + schema.n_tf - 1;
        for k in 0..schema.dbd_fourier_terms {
            let a = 2.0 * PI * (k + 1) as f64 * dbd / schema.horizon_days as f64;
            out[base + 2 * k] = a.sin();
            out[base + 2 * k + 1] = a.cos();
        }
    }
}

/// Intercept plus reference-level-dropped indicators of POS and TF
/// (and the optional days-before-departure block).
pub fn build_elasticity_design(record: &TransactionRecord, schema: &FeatureSchema) -> Result<ElasticityDesign> {
    schema.check(Categories::from(record))?;
    let mut values = vec![0.0; schema.design_dim()];
    write_design(record.pos, record.tf, record.booking_day, schema, &mut values);
    Ok(ElasticityDesign { values })
}

/// Design row of a (pos, tf) combo with the optional DBD block at zero.
pub fn combo_design(pos: u8, tf: u8, schema: &FeatureSchema) -> Result<ElasticityDesign> {
    schema.check(Categories { pos, tf, dow: 0, woy: 0 })?;
    let mut values = vec![0.0; schema.design_dim()];
    write_design(pos, tf, 0, schema, &mut values);
    let base = schema.n_pos + schema.n_tf - 1;
    values[base..].iter_mut().for_each(|v| *v = 0.0);
    Ok(ElasticityDesign { values })
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    n_rows: usize,
    n_cols: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        Self {
            n_rows,
            n_cols,
            data: vec![0.0; n_rows * n_cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * n_cols);
        for r in rows {
            crate::error::check_dim(n_cols, r.len())?;
            data.extend_from_slice(r);
        }
        Ok(Self {
            n_rows: rows.len(),
            n_cols,
            data,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n_cols + j]
    }

    /// Rows selected by `idx`, in that order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.n_cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            n_rows: idx.len(),
            n_cols: self.n_cols,
            data,
        }
    }
}

/// Observations of one market sorted by `obs_index`, with encoded X and W.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub market_id: String,
    pub schema: FeatureSchema,
    pub records: Vec<TransactionRecord>,
    pub group_ids: Option<Vec<u32>>,
    pub x: FeatureMatrix,
    pub w: FeatureMatrix,
}

impl Dataset {
    pub fn new(
        market_id: impl Into<String>,
        schema: FeatureSchema,
        records: Vec<TransactionRecord>,
        group_ids: Option<Vec<u32>>,
    ) -> Result<Self> {
        schema.validate()?;
        if let Some(g) = &group_ids {
            crate::error::check_dim(records.len(), g.len())?;
        }
        let mut order: Vec<usize> = (0..records.len()).collect();
        order.sort_by_key(|&i| records[i].obs_index);
        if order.windows(2).any(|w| records[w[0]].obs_index == records[w[1]].obs_index) {
            return Err(Error::Data("duplicate obs_index".into()));
        }
        let group_ids = group_ids.map(|g| order.iter().map(|&i| g[i]).collect());
        let records: Vec<TransactionRecord> = order.iter().map(|&i| records[i].clone()).collect();

        let mut x = FeatureMatrix::zeros(records.len(), schema.feature_dim());
        let mut w = FeatureMatrix::zeros(records.len(), schema.design_dim());
        for (i, r) in records.iter().enumerate() {
            let c = Categories::from(r);
            schema.check(c).map_err(|e| Error::Schema {
                row: i + 1,
                msg: e.to_string(),
            })?;
            write_features(c, &schema, x.row_mut(i));
            write_design(r.pos, r.tf, r.booking_day, &schema, w.row_mut(i));
        }
        Ok(Self {
            market_id: market_id.into(),
            schema,
            records,
            group_ids,
            x,
            w,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    departure_id: u32,
    booking_day: u32,
    obs_index: u64,
    woy: u8,
    dow: u8,
    pos: u8,
    tf: u8,
    avg_price: f64,
    bookings: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    group_id: Option<u32>,
}

const HEADER: [&str; 9] = [
    "departure_id",
    "booking_day",
    "obs_index",
    "woy",
    "dow",
    "pos",
    "tf",
    "avg_price",
    "bookings",
];

pub fn read_csv<R: Read>(reader: R, market_id: &str, schema: &FeatureSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    let has_group = match cols.len() {
        9 => false,
        10 if cols[9] == "group_id" => true,
        _ => {
            return Err(Error::Schema {
                row: 0,
                msg: format!("unexpected header {cols:?}"),
            })
        }
    };
    if cols[..9] != HEADER {
        return Err(Error::Schema {
            row: 0,
            msg: format!("unexpected header {cols:?}"),
        });
    }

    let mut records = Vec::new();
    let mut groups = Vec::new();
    for (i, row) in rdr.deserialize::<CsvRow>().enumerate() {
        let row = row.map_err(|e| Error::Parse {
            line: e.position().map_or(i as u64 + 2, |p| p.line()),
            msg: e.to_string(),
        })?;
        let c = Categories {
            pos: row.pos,
            tf: row.tf,
            dow: row.dow,
            woy: row.woy,
        };
        let data_row = i + 1;
        schema.check(c).map_err(|e| Error::Schema {
            row: data_row,
            msg: e.to_string(),
        })?;
        if !(row.avg_price.is_finite() && row.avg_price >= 0.0) || (row.bookings > 0 && row.avg_price <= 0.0) {
            return Err(Error::Schema {
                row: data_row,
                msg: format!("invalid avg_price {}", row.avg_price),
            });
        }
        if has_group {
            groups.push(row.group_id.ok_or_else(|| Error::Schema {
                row: data_row,
                msg: "missing group_id".into(),
            })?);
        }
        records.push(TransactionRecord {
            departure_id: row.departure_id,
            booking_day: row.booking_day,
            obs_index: row.obs_index,
            woy: row.woy,
            dow: row.dow,
            pos: row.pos,
            tf: row.tf,
            avg_price: row.avg_price,
            bookings: row.bookings,
        });
    }
    Dataset::new(market_id, schema.clone(), records, has_group.then_some(groups))
}

pub fn write_csv<W: Write>(dataset: &Dataset, writer: W) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    let mut header: Vec<&str> = HEADER.to_vec();
    if dataset.group_ids.is_some() {
        header.push("group_id");
    }
    wtr.write_record(&header)?;
    for (i, r) in dataset.records.iter().enumerate() {
        wtr.serialize(CsvRow {
            departure_id: r.departure_id,
            booking_day: r.booking_day,
            obs_index: r.obs_index,
            woy: r.woy,
            dow: r.dow,
            pos: r.pos,
            tf: r.tf,
            avg_price: r.avg_price,
            bookings: r.bookings,
            group_id: dataset.group_ids.as_ref().map(|g| g[i]),
        })?;
    }
    wtr.flush()?;
    Ok(())
}

/// Loads a transaction CSV; the market id is taken from the file stem.
pub fn load_csv(path: &Path, schema: &FeatureSchema) -> Result<Dataset> {
    let market = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_csv(std::fs::File::open(path)?, &market, schema)
}

pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    write_csv(dataset, std::io::BufWriter::new(std::fs::File::create(path)?))
}
