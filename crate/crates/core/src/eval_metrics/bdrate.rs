//! Bjøntegaard delta rate between two rate-distortion curves.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One operating point of a codec on an image or dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RDPoint {
    pub bpp: f64,
    pub psnr_db: f64,
    /// Absent when the image is too small for five MS-SSIM scales.
    pub msssim: Option<f64>,
    pub msssim_db: Option<f64>,
    pub enc_seconds: f64,
    pub dec_seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QualityMetric {
    Psnr,
    MsSsimDb,
}

impl std::str::FromStr for QualityMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "psnr" => Ok(QualityMetric::Psnr),
            "msssim_db" | "ms-ssim" | "msssim" => Ok(QualityMetric::MsSsimDb),
            other => Err(Error::Config(format!("unknown quality metric `{other}` (psnr, msssim_db)"))),
        }
    }
}

impl QualityMetric {
    fn of(self, p: &RDPoint) -> Result<f64> {
        match self {
            QualityMetric::Psnr => Ok(p.psnr_db),
            QualityMetric::MsSsimDb => p
                .msssim_db
                .ok_or_else(|| Error::Metric("curve point has no MS-SSIM value".into())),
        }
    }
}

/// Operating points of one codec, bpp strictly increasing.
#[derive(Clone, Debug, PartialEq)]
pub struct RDCurve {
    pub label: String,
    pub points: Vec<RDPoint>,
}

impl RDCurve {
    /// Sorts by bpp; fewer than 4 points or repeated bpp values are errors.
    pub fn new(label: impl Into<String>, mut points: Vec<RDPoint>) -> Result<Self> {
        let label = label.into();
        if points.len() < 4 {
            return Err(Error::Metric(format!("curve `{label}` has {} points, need ≥ 4", points.len())));
        }
        if points.iter().any(|p| !(p.bpp > 0.0 && p.bpp.is_finite())) {
            return Err(Error::Metric(format!("curve `{label}` has a non-positive bpp")));
        }
        points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        if points.windows(2).any(|w| w[0].bpp == w[1].bpp) {
            return Err(Error::Metric(format!("curve `{label}` repeats a bpp value")));
        }
        Ok(Self { label, points })
    }

    /// Read a CSV with a `bpp` column and `psnr_db` and/or `msssim_db` columns.
    pub fn from_csv(label: impl Into<String>, text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let headers = reader.headers().map_err(csv_err)?.clone();
        let col = |name: &str| headers.iter().position(|h| h == name);
        let bpp = col("bpp").ok_or_else(|| Error::Metric("curve CSV lacks a `bpp` column".into()))?;
        let (psnr, ms, msdb) = (col("psnr_db"), col("msssim"), col("msssim_db"));
        if psnr.is_none() && msdb.is_none() {
            return Err(Error::Metric("curve CSV needs a `psnr_db` or `msssim_db` column".into()));
        }
        let mut points = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(csv_err)?;
            let num = |i: Option<usize>| -> Result<Option<f64>> {
                match i.and_then(|i| rec.get(i)).filter(|s| !s.is_empty()) {
                    None => Ok(None),
                    Some(s) => s
                        .parse()
                        .map(Some)
                        .map_err(|_| Error::Metric(format!("bad number `{s}` in curve CSV"))),
                }
            };
            points.push(RDPoint {
                bpp: num(Some(bpp))?.ok_or_else(|| Error::Metric("empty bpp cell".into()))?,
                psnr_db: num(psnr)?.unwrap_or(f64::NAN),
                msssim: num(ms)?,
                msssim_db: num(msdb)?,
                enc_seconds: 0.0,
                dec_seconds: 0.0,
            });
        }
        Self::new(label, points)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Metric(format!("curve CSV: {e}"))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BDRateResult {
    /// Average rate difference of `test` against `anchor`; negative is a saving.
    pub percent: f64,
    /// Quality interval both curves cover.
    pub overlap: (f64, f64),
}

/// Least-squares cubic of `ys` against `xs` in the variable `(x − c)/s`.
struct Cubic {
    coef: [f64; 4],
    center: f64,
    scale: f64,
}

impl Cubic {
    fn fit(xs: &[f64], ys: &[f64]) -> Result<Self> {
        let center = xs.iter().sum::<f64>() / xs.len() as f64;
        let scale = xs.iter().map(|x| (x - center).abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        // Normal equations, 4×4, solved by Gaussian elimination with pivoting.
        let mut a = [[0.0f64; 5]; 4];
        for (&x, &y) in xs.iter().zip(ys) {
            let t = (x - center) / scale;
            let pw = [1.0, t, t * t, t * t * t];
            for r in 0..4 {
                for c in 0..4 {
                    a[r][c] += pw[r] * pw[c];
                }
                a[r][4] += pw[r] * y;
            }
        }
        for col in 0..4 {
            let piv = (col..4)
                .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
                .expect("nonempty");
            if a[piv][col].abs() < 1e-12 {
                return Err(Error::Metric("degenerate curve: quality values do not determine a cubic".into()));
            }
            a.swap(col, piv);
            for r in 0..4 {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    for c in col..5 {
                        a[r][c] -= f * a[col][c];
                    }
                }
            }
        }
        let coef = std::array::from_fn(|i| a[i][4] / a[i][i]);
        Ok(Self { coef, center, scale })
    }

    /// `∫ₗₒʰⁱ p(x) dx`.
    fn integral(&self, lo: f64, hi: f64) -> f64 {
        let antider = |x: f64| {
            let t = (x - self.center) / self.scale;
            let mut s = 0.0;
            for (k, &c) in self.coef.iter().enumerate() {
                s += c * t.powi(k as i32 + 1) / (k as f64 + 1.0);
            }
            s * self.scale
        };
        antider(hi) - antider(lo)
    }
}

fn curve_axes(curve: &RDCurve, q: QualityMetric) -> Result<(Vec<f64>, Vec<f64>)> {
    if curve.points.len() < 4 {
        return Err(Error::Metric(format!("curve `{}` has fewer than 4 points", curve.label)));
    }
    let quality: Vec<f64> = curve.points.iter().map(|p| q.of(p)).collect::<Result<_>>()?;
    if quality.iter().any(|v| !v.is_finite()) {
        return Err(Error::Metric(format!("curve `{}` has a non-finite quality value", curve.label)));
    }
    let increasing = curve
        .points
        .windows(2)
        .zip(quality.windows(2))
        .all(|(p, q)| p[1].bpp > p[0].bpp && q[1] > q[0]);
    if !increasing {
        return Err(Error::Metric(format!(
            "curve `{}` is not monotone: quality must rise strictly with bpp",
            curve.label
        )));
    }
    let log_rate = curve.points.iter().map(|p| p.bpp.log10()).collect();
    Ok((quality, log_rate))
}

/// Classic Bjøntegaard rate difference: cubic fit of log₁₀(bpp) against
/// quality per curve, averaged over the common quality interval.
pub fn bd_rate(anchor: &RDCurve, test: &RDCurve, quality: QualityMetric) -> Result<BDRateResult> {
    let (qa, ra) = curve_axes(anchor, quality)?;
    let (qt, rt) = curve_axes(test, quality)?;
    let lo = qa[0].max(qt[0]);
    let hi = qa[qa.len() - 1].min(qt[qt.len() - 1]);
    if !(hi > lo) {
        return Err(Error::Metric(format!(
            "quality ranges of `{}` and `{}` do not overlap",
            anchor.label, test.label
        )));
    }
    let fa = Cubic::fit(&qa, &ra)?;
    let ft = Cubic::fit(&qt, &rt)?;
    let mean_diff = (ft.integral(lo, hi) - fa.integral(lo, hi)) / (hi - lo);
    Ok(BDRateResult {
        percent: (10f64.powf(mean_diff) - 1.0) * 100.0,
        overlap: (lo, hi),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(label: &str, pts: &[(f64, f64)]) -> RDCurve {
        RDCurve::new(
            label,
            pts.iter()
                .map(|&(bpp, psnr_db)| RDPoint {
                    bpp,
                    psnr_db,
                    msssim: None,
                    msssim_db: None,
                    enc_seconds: 0.0,
                    dec_seconds: 0.0,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn cubic_reproduces_cubic() {
        let xs = [28.0, 31.0, 33.5, 36.0, 38.0];
        let p = |x: f64| 0.3 - 0.2 * x + 0.01 * x * x - 1e-4 * x * x * x;
        let ys: Vec<f64> = xs.iter().map(|&x| p(x)).collect();
        let f = Cubic::fit(&xs, &ys).unwrap();
        // ∫ p over [30, 37], evaluated by hand from the antiderivative.
        let anti = |x: f64| 0.3 * x - 0.1 * x * x + 0.01 / 3.0 * x.powi(3) - 2.5e-5 * x.powi(4);
        assert!((f.integral(30.0, 37.0) - (anti(37.0) - anti(30.0))).abs() < 1e-9);
    }

    #[test]
    fn validation_errors() {
        let a = curve("a", &[(0.1, 28.0), (0.2, 30.0), (0.4, 33.0), (0.8, 36.0)]);
        let far = curve("b", &[(0.1, 40.0), (0.2, 41.0), (0.4, 42.0), (0.8, 43.0)]);
        assert!(bd_rate(&a, &far, QualityMetric::Psnr).is_err());
        let bent = curve("c", &[(0.1, 28.0), (0.2, 31.0), (0.4, 30.0), (0.8, 36.0)]);
        assert!(bd_rate(&a, &bent, QualityMetric::Psnr).is_err());
        assert!(RDCurve::new("d", a.points[..3].to_vec()).is_err());
        assert!(bd_rate(&a, &a, QualityMetric::MsSsimDb).is_err());
    }

    #[test]
    fn csv_ingestion() {
        let text = "image,bpp,psnr_db\nx,0.8,36\nx,0.1,28\nx,0.2,30\nx,0.4,33\n";
        let c = RDCurve::from_csv("a", text).unwrap();
        assert_eq!(c.points[0].bpp, 0.1);
        assert_eq!(bd_rate(&c, &c, QualityMetric::Psnr).unwrap().percent, 0.0);
        assert!(RDCurve::from_csv("a", "rate,psnr_db\n1,2\n").is_err());
    }
}
