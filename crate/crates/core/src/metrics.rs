//! Combo-level sensitivities, (weighted) MAPE and report files.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dglm::TraceEntry;
use crate::error::{check_dim, Error, Result};
use crate::features::{combo_design, Dataset, FeatureSchema};

/// True mean willingness-to-pay per `[pos][tf]`.
pub type TruthTable = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct ComboEstimate {
    pub pos: u8,
    pub tf: u8,
    /// Effective signed sensitivity `θ̂ᵀW(pos, tf)`.
    pub b: f64,
    /// `−1/b`; `None` when `b ≥ 0`.
    pub alpha: Option<f64>,
    pub true_alpha: Option<f64>,
    pub ape: Option<f64>,
}

pub fn ape(alpha: f64, true_alpha: f64) -> f64 {
    100.0 * (alpha - true_alpha).abs() / true_alpha
}

/// Evaluates `θ̂` at every (POS, TF) combination in (pos, tf) order.
pub fn combo_sensitivities(
    theta_hat: &[f64],
    schema: &FeatureSchema,
    truth: Option<&TruthTable>,
) -> Result<Vec<ComboEstimate>> {
    check_dim(schema.design_dim(), theta_hat.len())?;
    if let Some(t) = truth {
        check_truth(t, schema)?;
    }
    let mut out = Vec::with_capacity(schema.n_pos * schema.n_tf);
    for pos in 0..schema.n_pos as u8 {
        for tf in 0..schema.n_tf as u8 {
            let w = combo_design(pos, tf, schema)?;
            let b: f64 = theta_hat.iter().zip(&w.values).map(|(t, w)| t * w).sum();
            let alpha = (b < 0.0).then(|| -1.0 / b);
            let true_alpha = truth.map(|t| t[pos as usize][tf as usize]);
            let ape = alpha.zip(true_alpha).map(|(a, t)| ape(a, t));
            out.push(ComboEstimate {
                pos,
                tf,
                b,
                alpha,
                true_alpha,
                ape,
            });
        }
    }
    Ok(out)
}

fn apes(estimates: &[ComboEstimate]) -> Result<Vec<f64>> {
    if estimates.is_empty() {
        return Err(Error::Data("no combo estimates".into()));
    }
    estimates
        .iter()
        .map(|e| match (e.alpha, e.true_alpha) {
            (_, None) => Err(Error::Data(format!("combo ({}, {}) has no true alpha", e.pos, e.tf))),
            (None, _) => Err(Error::Sign(format!(
                "combo ({}, {}) has nonnegative sensitivity {}",
                e.pos, e.tf, e.b
            ))),
            (Some(a), Some(t)) => Ok(ape(a, t)),
        })
        .collect()
}

/// Unweighted mean APE, in percent.
pub fn mape(estimates: &[ComboEstimate]) -> Result<f64> {
    let a = apes(estimates)?;
    Ok(a.iter().sum::<f64>() / a.len() as f64)
}

/// Weighted mean APE with weights normalized to sum to one.
pub fn wmape(estimates: &[ComboEstimate], weights: &[f64]) -> Result<f64> {
    check_dim(estimates.len(), weights.len())?;
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::Data("booking weights must be nonnegative".into()));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Data("booking weights sum to zero".into()));
    }
    let a = apes(estimates)?;
    Ok(a.iter().zip(weights).map(|(a, w)| a * w).sum::<f64>() / total)
}

/// Realized bookings per (pos, tf) in combo order, normalized to one.
pub fn booking_weights(ds: &Dataset) -> Result<Vec<f64>> {
    let n_tf = ds.schema.n_tf;
    let mut w = vec![0.0; ds.schema.n_pos * n_tf];
    for r in &ds.records {
        w[r.pos as usize * n_tf + r.tf as usize] += r.bookings as f64;
    }
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return Err(Error::Data("dataset has no bookings".into()));
    }
    Ok(w.into_iter().map(|v| v / total).collect())
}

fn check_truth(t: &TruthTable, schema: &FeatureSchema) -> Result<()> {
    check_dim(schema.n_pos, t.len())?;
    for row in t {
        check_dim(schema.n_tf, row.len())?;
        if row.iter().any(|a| !(*a > 0.0) || !a.is_finite()) {
            return Err(Error::Data("true alphas must be positive".into()));
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct TruthRow {
    pos: u8,
    tf: u8,
    alpha: f64,
}

pub fn write_truth<W: Write>(truth: &TruthTable, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for (p, row) in truth.iter().enumerate() {
        for (t, &alpha) in row.iter().enumerate() {
            wtr.serialize(TruthRow {
                pos: p as u8,
                tf: t as u8,
                alpha,
            })?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Reads a `pos,tf,alpha` table; every combo of `schema` must appear once.
pub fn read_truth<R: Read>(reader: R, schema: &FeatureSchema) -> Result<TruthTable> {
    let mut t = vec![vec![f64::NAN; schema.n_tf]; schema.n_pos];
    let mut rdr = csv::Reader::from_reader(reader);
    for (i, row) in rdr.deserialize::<TruthRow>().enumerate() {
        let row = row.map_err(|e| Error::Parse {
            line: e.position().map_or(i as u64 + 2, |p| p.line()),
            msg: e.to_string(),
        })?;
        let cell = t
            .get_mut(row.pos as usize)
            .and_then(|r| r.get_mut(row.tf as usize))
            .ok_or_else(|| Error::Schema {
                row: i + 1,
                msg: format!("combo ({}, {}) outside the schema", row.pos, row.tf),
            })?;
        if !cell.is_nan() {
            return Err(Error::Schema {
                row: i + 1,
                msg: format!("duplicate combo ({}, {})", row.pos, row.tf),
            });
        }
        *cell = row.alpha;
    }
    if t.iter().flatten().any(|a| a.is_nan()) {
        return Err(Error::Data("truth table is missing combos".into()));
    }
    check_truth(&t, schema)?;
    Ok(t)
}

/// One estimator's output to be reported.
#[derive(Debug, Clone)]
pub struct MethodResult {
    pub name: String,
    /// θ̂ over the elasticity design.
    pub theta: Vec<f64>,
    /// Weekly posterior snapshots; the leading entries of `mu` are θ.
    pub trace: Vec<TraceEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub name: String,
    pub mape: Option<f64>,
    pub wmape: Option<f64>,
}

/// Writes `table.csv`, `summary.txt`, one `alpha_trace_<method>.csv` per
/// method and, given a dataset, `booking_trends.csv` and
/// `price_distribution.csv`.
pub fn build_report(
    dir: &Path,
    schema: &FeatureSchema,
    methods: &[MethodResult],
    truth: Option<&TruthTable>,
    dataset: Option<&Dataset>,
) -> Result<Vec<MethodSummary>> {
    std::fs::create_dir_all(dir)?;
    let weights = dataset.map(booking_weights).transpose()?;
    let mut table = Vec::new();
    let mut summaries = Vec::new();
    for m in methods {
        let est = combo_sensitivities(&m.theta, schema, truth)?;
        let (mape_v, wmape_v) = if truth.is_some() {
            (
                mape(&est).ok(),
                weights.as_ref().and_then(|w| wmape(&est, w).ok()),
            )
        } else {
            (None, None)
        };
        summaries.push(MethodSummary {
            name: m.name.clone(),
            mape: mape_v,
            wmape: wmape_v,
        });
        table.push(est);
        write_alpha_trace(&m.trace, schema, std::fs::File::create(dir.join(format!("alpha_trace_{}.csv", m.name)))?)?;
    }

    let mut wtr = csv::Writer::from_path(dir.join("table.csv"))?;
    let mut header = vec!["pos".to_string(), "tf".to_string()];
    if truth.is_some() {
        header.push("true_alpha".into());
    }
    for m in methods {
        header.push(format!("{}_alpha", m.name));
        if truth.is_some() {
            header.push(format!("{}_ape", m.name));
        }
    }
    wtr.write_record(&header)?;
    let n_combos = schema.n_pos * schema.n_tf;
    for c in 0..n_combos {
        let (pos, tf) = (c / schema.n_tf, c % schema.n_tf);
        let mut rec = vec![pos.to_string(), tf.to_string()];
        if let Some(t) = truth {
            rec.push(t[pos][tf].to_string());
        }
        for est in &table {
            rec.push(est[c].alpha.map_or_else(|| "NA".into(), |a| a.to_string()));
            if truth.is_some() {
                rec.push(est[c].ape.map_or_else(|| "NA".into(), |a| a.to_string()));
            }
        }
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;

    let mut text = String::new();
    for s in &summaries {
        let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| format!("{v:.3}%"));
        writeln!(text, "{}: MAPE {} wMAPE {}", s.name, fmt(s.mape), fmt(s.wmape)).unwrap();
    }
    std::fs::write(dir.join("summary.txt"), text)?;

    if let Some(ds) = dataset {
        write_booking_trends(ds, std::fs::File::create(dir.join("booking_trends.csv"))?)?;
        write_price_distribution(ds, std::fs::File::create(dir.join("price_distribution.csv"))?)?;
    }
    Ok(summaries)
}

/// `week_index,pos,tf,alpha` per trace snapshot and combo.
pub fn write_alpha_trace<W: Write>(trace: &[TraceEntry], schema: &FeatureSchema, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["week_index", "pos", "tf", "alpha"])?;
    let d = schema.design_dim();
    for t in trace {
        if t.mu.len() < d {
            return Err(Error::Dimension {
                expected: d,
                got: t.mu.len(),
            });
        }
        for e in combo_sensitivities(&t.mu[..d], schema, None)? {
            wtr.write_record([
                t.week.to_string(),
                e.pos.to_string(),
                e.tf.to_string(),
                e.alpha.map_or_else(|| "NA".into(), |a| a.to_string()),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Bookings per departure week and POS, including empty weeks.
pub fn write_booking_trends<W: Write>(ds: &Dataset, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["departure_week", "pos", "bookings"])?;
    let Some(last) = ds.records.iter().map(|r| r.departure_id / 7).max() else {
        wtr.flush()?;
        return Ok(());
    };
    let first = ds.records.iter().map(|r| r.departure_id / 7).min().unwrap();
    let n_pos = ds.schema.n_pos;
    let mut counts = vec![0u64; (last - first + 1) as usize * n_pos];
    for r in &ds.records {
        counts[(r.departure_id / 7 - first) as usize * n_pos + r.pos as usize] += r.bookings as u64;
    }
    for (i, c) in counts.iter().enumerate() {
        wtr.write_record([
            (first as usize + i / n_pos).to_string(),
            (i % n_pos).to_string(),
            c.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Booking-weighted price quantiles per (pos, tf).
pub fn write_price_distribution<W: Write>(ds: &Dataset, writer: W) -> Result<()> {
    let n_tf = ds.schema.n_tf;
    let mut cells: Vec<Vec<(f64, u32)>> = vec![Vec::new(); ds.schema.n_pos * n_tf];
    for r in &ds.records {
        if r.bookings > 0 {
            cells[r.pos as usize * n_tf + r.tf as usize].push((r.avg_price, r.bookings));
        }
    }
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["pos", "tf", "bookings", "mean", "p05", "p25", "p50", "p75", "p95"])?;
    for (c, cell) in cells.iter_mut().enumerate() {
        cell.sort_by(|a, b| a.0.total_cmp(&b.0));
        let n: u64 = cell.iter().map(|(_, b)| *b as u64).sum();
        let mut rec = vec![(c / n_tf).to_string(), (c % n_tf).to_string(), n.to_string()];
        if n == 0 {
            rec.extend(std::iter::repeat_n("NA".to_string(), 6));
        } else {
            let mean = cell.iter().map(|(p, b)| p * *b as f64).sum::<f64>() / n as f64;
            rec.push(mean.to_string());
            for q in [0.05, 0.25, 0.5, 0.75, 0.95] {
                rec.push(weighted_quantile(cell, n, q).to_string());
            }
        }
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Lower weighted quantile of sorted `(value, weight)` pairs.
fn weighted_quantile(sorted: &[(f64, u32)], total: u64, q: f64) -> f64 {
    let target = (q * total as f64).ceil().max(1.0) as u64;
    let mut acc = 0;
    for (v, w) in sorted {
        acc += *w as u64;
        if acc >= target {
            return *v;
        }
    }
    sorted.last().map_or(f64::NAN, |x| x.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simcore::{TransactionRecord, DEFAULT_TRUE_ALPHA};
    use proptest::prelude::*;

    fn truth() -> TruthTable {
        DEFAULT_TRUE_ALPHA.iter().map(|r| r.to_vec()).collect()
    }

    fn est(alpha: f64, true_alpha: f64) -> ComboEstimate {
        ComboEstimate {
            pos: 0,
            tf: 0,
            b: -1.0 / alpha,
            alpha: Some(alpha),
            true_alpha: Some(true_alpha),
            ape: Some(ape(alpha, true_alpha)),
        }
    }

    /// θ in reference-level form that reproduces an additive α table.
    fn additive_theta(base: f64, pos1: f64, tf: &[f64]) -> Vec<f64> {
        let mut th = vec![base, pos1];
        th.extend_from_slice(tf);
        th
    }

    #[test]
    fn exact_additive_truth_has_zero_ape() {
        let tf: Vec<f64> = (1..10).map(|t| -0.0001 * t as f64).collect();
        let th = additive_theta(-0.006, 0.0005, &tf);
        let t: TruthTable = (0..2)
            .map(|p| {
                (0..10)
                    .map(|k| {
                        let b = -0.006 + 0.0005 * p as f64 + if k > 0 { tf[k - 1] } else { 0.0 };
                        -1.0 / b
                    })
                    .collect()
            })
            .collect();
        let e = combo_sensitivities(&th, &FeatureSchema::default(), Some(&t)).unwrap();
        assert_eq!(e.len(), 20);
        assert!(e.iter().all(|c| c.ape.unwrap() < 1e-10));
        assert!(mape(&e).unwrap() < 1e-10);
    }

    #[test]
    fn table_one_rows() {
        assert!((est(147.845, 150.0).ape.unwrap() - 1.4).abs() < 0.05);
        assert!((est(182.993, 150.0).ape.unwrap() - 22.0).abs() < 0.05);
    }

    #[test]
    fn table_one_two_stage_column_mean() {
        let apes = [
            1.4, 3.9, 3.3, 7.0, 3.0, 3.7, 1.1, 1.5, 7.3, 3.8, 9.9, 12.1, 6.5, 7.2, 4.5, 4.7, 2.8, 3.6, 11.4, 2.7,
        ];
        let e: Vec<ComboEstimate> = apes.iter().map(|a| est(100.0 + a, 100.0)).collect();
        assert!((mape(&e).unwrap() - 5.07).abs() <= 0.05);
    }

    #[test]
    fn mape_and_wmape_examples() {
        assert!(mape(&[]).is_err());
        assert_eq!(mape(&[est(110.0, 100.0)]).unwrap(), 10.0);
        let e = [est(104.0, 100.0), est(92.0, 100.0)];
        assert!((wmape(&e, &[0.75, 0.25]).unwrap() - 5.0).abs() < 1e-12);
        assert!((wmape(&e, &[3.0, 1.0]).unwrap() - 5.0).abs() < 1e-12);
        assert!((wmape(&e, &[1.0, 1.0]).unwrap() - mape(&e).unwrap()).abs() < 1e-12);
        assert_eq!(wmape(&e, &[0.0, 1.0]).unwrap(), 8.0);
        assert!(wmape(&e, &[0.0, 0.0]).is_err());
        assert!(wmape(&e, &[1.0]).is_err());
    }

    #[test]
    fn positive_sensitivity_has_no_alpha() {
        let mut th = vec![0.0; 11];
        th[0] = 0.001;
        let e = combo_sensitivities(&th, &FeatureSchema::default(), Some(&truth())).unwrap();
        assert!(e.iter().all(|c| c.alpha.is_none() && c.ape.is_none()));
        assert!(matches!(mape(&e), Err(Error::Sign(_))));
        assert!(combo_sensitivities(&th[..5], &FeatureSchema::default(), None).is_err());
    }

    proptest! {
        #[test]
        fn wmape_within_ape_range(
            apes in proptest::collection::vec(0.0f64..50.0, 1..20),
            seed in proptest::collection::vec(0.01f64..1.0, 20),
        ) {
            let e: Vec<ComboEstimate> = apes.iter().map(|a| est(100.0 + a, 100.0)).collect();
            let w = &seed[..e.len()];
            let v = wmape(&e, w).unwrap();
            let actual: Vec<f64> = e.iter().map(|c| c.ape.unwrap()).collect();
            let lo = actual.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = actual.iter().cloned().fold(0.0, f64::max);
            prop_assert!(v >= lo - 1e-9 && v <= hi + 1e-9);

            let mut rev = e.clone();
            rev.reverse();
            prop_assert!((mape(&rev).unwrap() - mape(&e).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn sensitivities_scale_linearly(th in proptest::collection::vec(-0.01f64..0.01, 11), k in 0.1f64..10.0) {
            let s = FeatureSchema::default();
            let a = combo_sensitivities(&th, &s, None).unwrap();
            let scaled: Vec<f64> = th.iter().map(|t| t * k).collect();
            let b = combo_sensitivities(&scaled, &s, None).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((y.b - k * x.b).abs() <= 1e-12 * (1.0 + x.b.abs() * k));
            }
        }
    }

    fn rec(dep: u32, pos: u8, tf: u8, price: f64, bookings: u32, idx: u64) -> TransactionRecord {
        TransactionRecord {
            departure_id: dep,
            booking_day: tf as u32 * 37,
            obs_index: idx,
            woy: 0,
            dow: 0,
            pos,
            tf,
            avg_price: price,
            bookings,
        }
    }

    #[test]
    fn report_files() {
        let records = vec![
            rec(0, 0, 0, 100.0, 3, 0),
            rec(0, 1, 9, 300.0, 1, 1),
            rec(15, 0, 0, 120.0, 1, 2),
        ];
        let ds = Dataset::new("m", FeatureSchema::default(), records, None).unwrap();
        let w = booking_weights(&ds).unwrap();
        assert_eq!(w[0], 0.8);
        assert_eq!(w[19], 0.2);

        let dir = tempfile::tempdir().unwrap();
        let s = FeatureSchema::default();
        let mut th = vec![0.0; 11];
        th[0] = -1.0 / 150.0;
        let methods = [
            MethodResult {
                name: "two_stage".into(),
                theta: th.clone(),
                trace: vec![],
            },
            MethodResult {
                name: "direct".into(),
                theta: th,
                trace: vec![TraceEntry {
                    week: 3,
                    mu: vec![-0.01; 12],
                    sigma_diag: vec![1.0; 12],
                }],
            },
        ];
        let sums = build_report(dir.path(), &s, &methods, Some(&truth()), Some(&ds)).unwrap();
        assert_eq!(sums[0].mape, sums[1].mape);
        let table = std::fs::read_to_string(dir.path().join("table.csv")).unwrap();
        assert_eq!(table.lines().count(), 21);
        assert!(table.starts_with("pos,tf,true_alpha,two_stage_alpha,two_stage_ape,direct_alpha,direct_ape\n"));
        assert!(table.lines().nth(1).unwrap().starts_with("0,0,150,150,0,"));
        let trace = std::fs::read_to_string(dir.path().join("alpha_trace_two_stage.csv")).unwrap();
        assert_eq!(trace, "week_index,pos,tf,alpha\n");
        let trace = std::fs::read_to_string(dir.path().join("alpha_trace_direct.csv")).unwrap();
        assert_eq!(trace.lines().count(), 21);
        let trends = std::fs::read_to_string(dir.path().join("booking_trends.csv")).unwrap();
        assert_eq!(trends.lines().count(), 1 + 3 * 2);
        assert!(trends.contains("\n0,0,3\n"));
        let prices = std::fs::read_to_string(dir.path().join("price_distribution.csv")).unwrap();
        assert!(prices.contains("\n0,0,4,105,100,100,100,100,120\n"), "{prices}");

        let plain = tempfile::tempdir().unwrap();
        let sums = build_report(plain.path(), &s, &methods, None, None).unwrap();
        assert_eq!(sums[0].mape, None);
        let table = std::fs::read_to_string(plain.path().join("table.csv")).unwrap();
        assert!(table.starts_with("pos,tf,two_stage_alpha,direct_alpha\n"));
    }

    #[test]
    fn truth_round_trip() {
        let mut buf = Vec::new();
        write_truth(&truth(), &mut buf).unwrap();
        let s = FeatureSchema::default();
        assert_eq!(read_truth(buf.as_slice(), &s).unwrap(), truth());
        let text = String::from_utf8(buf).unwrap();
        let missing: String = text.lines().take(5).map(|l| format!("{l}\n")).collect();
        assert!(read_truth(missing.as_bytes(), &s).is_err());
        assert!(read_truth("pos,tf,alpha\n0,0,1\n0,0,2\n".as_bytes(), &s).is_err());
        assert!(read_truth("pos,tf,alpha\n5,0,1\n".as_bytes(), &s).is_err());
    }
}
