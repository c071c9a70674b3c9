//! Kaplan-Meier curves, the log-rank test and a Cox proportional-hazards fit
//! (Breslow ties, Newton-Raphson with step halving).

use std::collections::BTreeMap;
use std::io::Read;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};
use thiserror::Error;
use tracing::warn;

#[derive(Debug, Error)]
pub enum SurvivalError {
    #[error("no records")]
    Empty,
    #[error("record {index}: time must be positive, got {time}")]
    NonPositiveTime { index: usize, time: f64 },
    #[error("record {index}: covariate {name} is missing")]
    MissingCovariate { index: usize, name: String },
    #[error("record {index}: covariate {name} is not finite")]
    NonFiniteCovariate { index: usize, name: String },
    #[error("covariate {0} is constant")]
    ConstantCovariate(String),
    #[error("need at least {needed} events, found {found}")]
    TooFewEvents { needed: usize, found: usize },
    #[error("log-rank statistic undefined: no pooled variance")]
    NoVariance,
    #[error("information matrix is singular (collinear covariates?)")]
    Singular,
    #[error("coefficients diverge (monotone likelihood / perfect separation)")]
    MonotoneLikelihood,
    #[error("row {row}: {message}")]
    Parse { row: usize, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    pub time_days: f64,
    /// true when death was observed, false when censored
    pub event: bool,
    #[serde(default)]
    pub covariates: BTreeMap<String, f64>,
    #[serde(default)]
    pub group: Option<String>,
}

impl SurvivalRecord {
    pub fn new(time_days: f64, event: bool) -> Self {
        SurvivalRecord {
            time_days,
            event,
            covariates: BTreeMap::new(),
            group: None,
        }
    }

    pub fn with(mut self, name: &str, value: f64) -> Self {
        self.covariates.insert(name.to_string(), value);
        self
    }
}

fn check_times(records: &[SurvivalRecord]) -> Result<(), SurvivalError> {
    if records.is_empty() {
        return Err(SurvivalError::Empty);
    }
    for (index, r) in records.iter().enumerate() {
        if !(r.time_days > 0.0) || !r.time_days.is_finite() {
            return Err(SurvivalError::NonPositiveTime { index, time: r.time_days });
        }
    }
    Ok(())
}

/// Reads `time_days,event[,group],<covariates...>`. Empty covariate cells
/// are left out of the record's map.
pub fn read_survival_csv<R: Read>(reader: R) -> Result<Vec<SurvivalRecord>, SurvivalError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (t_col, e_col) = match (col("time_days"), col("event")) {
        (Some(t), Some(e)) => (t, e),
        _ => {
            return Err(SurvivalError::Parse {
                row: 0,
                message: "header must contain time_days and event".into(),
            })
        }
    };
    let g_col = col("group");
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let bad = |message: String| SurvivalError::Parse { row, message };
        let time_days: f64 = rec[t_col]
            .parse()
            .map_err(|_| bad(format!("bad time_days {:?}", &rec[t_col])))?;
        let event = match &rec[e_col] {
            "1" | "true" | "True" => true,
            "0" | "false" | "False" => false,
            other => return Err(bad(format!("bad event {other:?}"))),
        };
        let mut r = SurvivalRecord::new(time_days, event);
        r.group = g_col.map(|g| rec[g].to_string()).filter(|g| !g.is_empty());
        for (j, h) in headers.iter().enumerate() {
            if j == t_col || j == e_col || Some(j) == g_col || rec[j].is_empty() {
                continue;
            }
            let v: f64 = rec[j].parse().map_err(|_| bad(format!("bad {h} {:?}", &rec[j])))?;
            r.covariates.insert(h.to_string(), v);
        }
        out.push(r);
    }
    check_times(&out)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmCurve {
    /// Distinct event times, ascending.
    pub times: Vec<f64>,
    /// S(t) just after each event time.
    pub survival: Vec<f64>,
    pub at_risk: Vec<usize>,
    pub deaths: Vec<usize>,
    pub n: usize,
}

impl KmCurve {
    /// Right-continuous step function, 1 before the first event.
    pub fn survival_at(&self, t: f64) -> f64 {
        match self.times.partition_point(|&x| x <= t) {
            0 => 1.0,
            k => self.survival[k - 1],
        }
    }

    /// Earliest time at which S(t) <= 0.5.
    pub fn median(&self) -> Option<f64> {
        self.survival.iter().position(|&s| s <= 0.5).map(|k| self.times[k])
    }
}

pub fn km_estimate(records: &[SurvivalRecord]) -> Result<KmCurve, SurvivalError> {
    check_times(records)?;
    let mut sorted: Vec<(f64, bool)> = records.iter().map(|r| (r.time_days, r.event)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut curve = KmCurve {
        times: vec![],
        survival: vec![],
        at_risk: vec![],
        deaths: vec![],
        n: records.len(),
    };
    let mut s = 1.0;
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        let n_at_risk = sorted.len() - i;
        let mut d = 0;
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == t {
            d += sorted[j].1 as usize;
            j += 1;
        }
        if d > 0 {
            s *= 1.0 - d as f64 / n_at_risk as f64;
            curve.times.push(t);
            curve.survival.push(s);
            curve.at_risk.push(n_at_risk);
            curve.deaths.push(d);
        }
        i = j;
    }
    Ok(curve)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRank {
    pub chi_square: f64,
    pub p_value: f64,
    pub observed_a: f64,
    pub expected_a: f64,
    pub variance: f64,
}

pub fn logrank_test(a: &[SurvivalRecord], b: &[SurvivalRecord]) -> Result<LogRank, SurvivalError> {
    check_times(a)?;
    check_times(b)?;
    let mut pooled: Vec<(f64, bool, bool)> = a
        .iter()
        .map(|r| (r.time_days, r.event, true))
        .chain(b.iter().map(|r| (r.time_days, r.event, false)))
        .collect();
    pooled.sort_by(|x, y| x.0.total_cmp(&y.0));
    let events = pooled.iter().filter(|x| x.1).count();
    if events == 0 {
        return Err(SurvivalError::TooFewEvents { needed: 1, found: 0 });
    }
    let (mut n, mut n_a) = (pooled.len() as f64, a.len() as f64);
    let (mut obs, mut exp, mut var) = (0.0, 0.0, 0.0);
    let mut i = 0;
    while i < pooled.len() {
        let t = pooled[i].0;
        let (mut d, mut d_a, mut leaving, mut leaving_a) = (0.0, 0.0, 0.0, 0.0);
        while i < pooled.len() && pooled[i].0 == t {
            let (_, e, in_a) = pooled[i];
            leaving += 1.0;
            if in_a {
                leaving_a += 1.0;
            }
            if e {
                d += 1.0;
                if in_a {
                    d_a += 1.0;
                }
            }
            i += 1;
        }
        if d > 0.0 {
            obs += d_a;
            exp += d * n_a / n;
            if n > 1.0 {
                var += d * (n_a / n) * (1.0 - n_a / n) * (n - d) / (n - 1.0);
            }
        }
        n -= leaving;
        n_a -= leaving_a;
    }
    if var <= 0.0 {
        return Err(SurvivalError::NoVariance);
    }
    let chi_square = (obs - exp).powi(2) / var;
    let p_value = ChiSquared::new(1.0).expect("1 dof").sf(chi_square);
    Ok(LogRank {
        chi_square,
        p_value,
        observed_a: obs,
        expected_a: exp,
        variance: var,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoxOptions {
    pub max_iter: usize,
    pub tol: f64,
    /// Bound on the standardized coefficient norm beyond which the fit is
    /// declared divergent.
    pub divergence_norm: f64,
}

impl Default for CoxOptions {
    fn default() -> Self {
        CoxOptions {
            max_iter: 50,
            tol: 1e-9,
            divergence_norm: 15.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxCoefficient {
    pub covariate: String,
    pub beta: f64,
    pub se: f64,
    pub hazard_ratio: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub z: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxResult {
    pub coefficients: Vec<CoxCoefficient>,
    pub log_partial_likelihood: f64,
    /// Log partial likelihood after each accepted step, starting at beta = 0.
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub converged: bool,
    pub n: usize,
    pub events: usize,
}

struct Design {
    /// Rows sorted by time descending.
    x: DMatrix<f64>,
    time: Vec<f64>,
    event: Vec<bool>,
}

/// Breslow log partial likelihood, gradient and information at `beta`.
fn partial_likelihood(d: &Design, beta: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
    let p = d.x.ncols();
    let eta = &d.x * beta;
    // shift keeps exp() in range; it cancels in every ratio
    let shift = eta.max();
    let mut s0 = 0.0;
    let mut s1 = DVector::zeros(p);
    let mut s2 = DMatrix::zeros(p, p);
    let mut ll = 0.0;
    let mut grad = DVector::zeros(p);
    let mut info = DMatrix::zeros(p, p);
    let n = d.time.len();
    let mut i = 0;
    while i < n {
        let t = d.time[i];
        let mut j = i;
        while j < n && d.time[j] == t {
            let w = (eta[j] - shift).exp();
            let xj = d.x.row(j).transpose();
            s0 += w;
            s1 += &xj * w;
            s2 += &xj * xj.transpose() * w;
            j += 1;
        }
        let mean = &s1 / s0;
        for k in i..j {
            if d.event[k] {
                ll += eta[k] - shift - s0.ln();
                grad += d.x.row(k).transpose() - &mean;
                info += &s2 / s0 - &mean * mean.transpose();
            }
        }
        i = j;
    }
    (ll, grad, info)
}

fn covariate_column(records: &[SurvivalRecord], name: &str) -> Result<Vec<f64>, SurvivalError> {
    records
        .iter()
        .enumerate()
        .map(|(index, r)| match r.covariates.get(name) {
            None => Err(SurvivalError::MissingCovariate {
                index,
                name: name.to_string(),
            }),
            Some(v) if !v.is_finite() => Err(SurvivalError::NonFiniteCovariate {
                index,
                name: name.to_string(),
            }),
            Some(v) => Ok(*v),
        })
        .collect()
}

pub fn cox_fit(
    records: &[SurvivalRecord],
    covariates: &[&str],
    opts: &CoxOptions,
) -> Result<CoxResult, SurvivalError> {
    check_times(records)?;
    let events = records.iter().filter(|r| r.event).count();
    if events < 2 {
        return Err(SurvivalError::TooFewEvents { needed: 2, found: events });
    }
    let n = records.len();
    let p = covariates.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| records[b].time_days.total_cmp(&records[a].time_days));

    // fit on centred, unit-variance columns; beta maps back by 1/sd
    let mut x = DMatrix::zeros(n, p);
    let mut sd = vec![0.0; p];
    for (c, name) in covariates.iter().enumerate() {
        let col = covariate_column(records, name)?;
        let mean = col.iter().sum::<f64>() / n as f64;
        let s = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        if s == 0.0 {
            return Err(SurvivalError::ConstantCovariate(name.to_string()));
        }
        sd[c] = s;
        for (row, &i) in order.iter().enumerate() {
            x[(row, c)] = (col[i] - mean) / s;
        }
    }
    let design = Design {
        x,
        time: order.iter().map(|&i| records[i].time_days).collect(),
        event: order.iter().map(|&i| records[i].event).collect(),
    };

    let mut beta = DVector::zeros(p);
    let (mut ll, mut grad, mut info) = partial_likelihood(&design, &beta);
    let mut trace = vec![ll];
    let mut iterations = 0;
    while grad.norm() >= opts.tol && iterations < opts.max_iter {
        iterations += 1;
        let step = info.clone().cholesky().ok_or(SurvivalError::Singular)?.solve(&grad);
        let mut scale = 1.0;
        loop {
            let candidate = &beta + &step * scale;
            let (ll_c, g_c, i_c) = partial_likelihood(&design, &candidate);
            if ll_c >= ll || scale < 1e-10 {
                beta = candidate;
                (ll, grad, info) = (ll_c, g_c, i_c);
                break;
            }
            scale *= 0.5;
        }
        trace.push(ll);
        if beta.norm() > opts.divergence_norm {
            return Err(SurvivalError::MonotoneLikelihood);
        }
    }
    let converged = grad.norm() < opts.tol;
    if !converged {
        warn!(iterations, gradient = grad.norm(), "Cox fit did not converge");
    }

    let eig = SymmetricEigen::new(info.clone());
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v.abs())));
    // information collapsing at a large coefficient means the likelihood
    // only plateaus at infinity
    if !(lo > hi * 1e-10) || lo < 1e-8 * events as f64 {
        return Err(if beta.norm() > 5.0 {
            SurvivalError::MonotoneLikelihood
        } else {
            SurvivalError::Singular
        });
    }
    let cov = info.try_inverse().ok_or(SurvivalError::Singular)?;
    let normal = Normal::standard();
    let coefficients = covariates
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let b = beta[c] / sd[c];
            let se = cov[(c, c)].sqrt() / sd[c];
            let z = b / se;
            CoxCoefficient {
                covariate: name.to_string(),
                beta: b,
                se,
                hazard_ratio: b.exp(),
                ci_lower: (b - 1.96 * se).exp(),
                ci_upper: (b + 1.96 * se).exp(),
                z,
                p_value: 2.0 * normal.sf(z.abs()),
            }
        })
        .collect();
    Ok(CoxResult {
        coefficients,
        log_partial_likelihood: ll,
        loglik_trace: trace,
        iterations,
        gradient_norm: grad.norm(),
        converged,
        n,
        events,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dichotomy {
    pub covariate: String,
    /// Values <= threshold are Low.
    pub threshold: f64,
    pub binary: bool,
    pub high: Vec<SurvivalRecord>,
    pub low: Vec<SurvivalRecord>,
}

/// Median split with ties going to Low. A two-valued covariate splits by
/// value instead, with the larger value High.
pub fn dichotomize(records: &[SurvivalRecord], covariate: &str) -> Result<Dichotomy, SurvivalError> {
    if records.is_empty() {
        return Err(SurvivalError::Empty);
    }
    let col = covariate_column(records, covariate)?;
    let mut sorted = col.clone();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let (threshold, binary) = match sorted.len() {
        1 => return Err(SurvivalError::ConstantCovariate(covariate.to_string())),
        2 => (sorted[0], true),
        _ => {
            let mut all = col.clone();
            all.sort_by(f64::total_cmp);
            let m = all.len();
            let median = if m % 2 == 1 {
                all[m / 2]
            } else {
                (all[m / 2 - 1] + all[m / 2]) / 2.0
            };
            (median, false)
        }
    };
    let (mut high, mut low) = (Vec::new(), Vec::new());
    for (r, v) in records.iter().zip(&col) {
        if *v <= threshold {
            low.push(r.clone());
        } else {
            high.push(r.clone());
        }
    }
    Ok(Dichotomy {
        covariate: covariate.to_string(),
        threshold,
        binary,
        high,
        low,
    })
}

/// Both tests for one covariate, for tagging prognostic features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateAnalysis {
    pub covariate: String,
    pub threshold: f64,
    pub binary: bool,
    pub n_high: usize,
    pub n_low: usize,
    pub km_high: KmCurve,
    pub km_low: KmCurve,
    pub logrank: Option<LogRank>,
    pub cox: Option<CoxCoefficient>,
    /// Why a test could not be computed.
    pub notes: Vec<String>,
}

pub fn analyze_covariate(
    records: &[SurvivalRecord],
    covariate: &str,
    opts: &CoxOptions,
) -> Result<CovariateAnalysis, SurvivalError> {
    let split = dichotomize(records, covariate)?;
    let mut notes = Vec::new();
    let logrank = logrank_test(&split.high, &split.low)
        .map_err(|e| notes.push(format!("log-rank: {e}")))
        .ok();
    let cox = match cox_fit(records, &[covariate], opts) {
        Ok(r) => {
            if !r.converged {
                notes.push(format!("cox: not converged after {} iterations", r.iterations));
            }
            r.coefficients.into_iter().next()
        }
        Err(e) => {
            notes.push(format!("cox: {e}"));
            None
        }
    };
    Ok(CovariateAnalysis {
        covariate: covariate.to_string(),
        threshold: split.threshold,
        binary: split.binary,
        n_high: split.high.len(),
        n_low: split.low.len(),
        km_high: km_estimate(&split.high)?,
        km_low: km_estimate(&split.low)?,
        logrank,
        cox,
        notes,
    })
}

const PALETTE: [&str; 4] = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd"];

/// Step-function plot of one or more KM curves.
pub fn km_svg(title: &str, curves: &[(&str, &KmCurve)], t_max: f64) -> String {
    let (w, h, m) = (480.0, 320.0, 48.0);
    let (pw, ph) = (w - 2.0 * m, h - 2.0 * m);
    let t_max = if t_max > 0.0 { t_max } else { 1.0 };
    let sx = |t: f64| m + pw * (t / t_max).min(1.0);
    let sy = |s: f64| m + ph * (1.0 - s);
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    out.push_str(&format!(
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">{}</text>\n",
        w / 2.0,
        xml_escape(title)
    ));
    out.push_str(&format!(
        "<path d=\"M{m} {m} V{} H{}\" fill=\"none\" stroke=\"black\"/>\n",
        m + ph,
        m + pw
    ));
    for k in 0..=4 {
        let s = k as f64 / 4.0;
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{s:.2}</text>\n",
            m - 4.0,
            sy(s) + 4.0
        ));
        let t = t_max * s;
        out.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{t:.0}</text>\n",
            sx(t),
            m + ph + 14.0
        ));
    }
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">Days</text>\n",
        w / 2.0,
        h - 8.0
    ));
    for (i, (label, c)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut d = format!("M{:.1} {:.1}", sx(0.0), sy(1.0));
        for (t, s) in c.times.iter().zip(&c.survival) {
            if *t > t_max {
                break;
            }
            d.push_str(&format!(" H{:.1} V{:.1}", sx(*t), sy(*s)));
        }
        d.push_str(&format!(" H{:.1}", sx(t_max)));
        out.push_str(&format!("<path d=\"{d}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n"));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{} (n={})</text>\n",
            m + pw - 90.0,
            m + 14.0 * (i as f64 + 1.0),
            xml_escape(label),
            c.n
        ));
    }
    out.push_str("</svg>\n");
    out
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
