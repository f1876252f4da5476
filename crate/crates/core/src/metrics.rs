//! Restoration quality metrics: PSNR, single-scale SSIM, the mode-collapse
//! flag/rate, and report aggregation/serialization.
//!
//! PSNR is computed on [0,1]-clamped values with MAX = 1.0, so the numbers
//! match 8-bit PSNR up to quantization. MSE over all pixels and channels;
//! zero MSE maps to a +infinity sentinel that aggregation excludes from the
//! mean (the per-image entry still records it as "inf").
//!
//! SSIM uses the canonical constants: 11x11 Gaussian window, sigma 1.5,
//! K1 = 0.01, K2 = 0.03, L = 1.0, computed per channel over valid (unpadded)
//! window positions and then averaged.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// A decibel value that may be +infinity; serializes as a JSON number or the
/// string "inf" (JSON has no infinity literal).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DbRepr", into = "DbRepr")]
pub struct Db(pub f64);

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum DbRepr {
    Num(f64),
    Text(String),
}

impl From<Db> for DbRepr {
    fn from(v: Db) -> Self {
        if v.0.is_finite() {
            DbRepr::Num(v.0)
        } else {
            DbRepr::Text("inf".into())
        }
    }
}

impl TryFrom<DbRepr> for Db {
    type Error = String;
    fn try_from(r: DbRepr) -> std::result::Result<Self, String> {
        match r {
            DbRepr::Num(v) => Ok(Db(v)),
            DbRepr::Text(s) if s == "inf" => Ok(Db(f64::INFINITY)),
            DbRepr::Text(s) => Err(format!("expected a number or \"inf\", got {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerImageMetrics {
    pub id: String,
    pub psnr: Db,
    pub ssim: f64,
    pub psnr_blur: Db,
    pub collapsed: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub psnr: Db,
    pub ssim: f64,
    pub mcr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_image: Vec<PerImageMetrics>,
    pub aggregate: AggregateMetrics,
}

/// Peak signal-to-noise ratio in dB between two same-shaped images, both
/// clamped to [0,1] first. Identical images give +infinity.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "psnr: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.is_empty() {
        return Err(Error::Contract("psnr of an empty tensor".into()));
    }
    let clamp = |v: f64| v.clamp(0.0, 1.0);
    let mut acc = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = clamp(x.as_f64()) - clamp(y.as_f64());
        acc += d * d;
    }
    let mse = acc / a.len() as f64;
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(-10.0 * mse.log10())
    }
}

/// Single-scale SSIM averaged over channels and valid window positions.
/// Requires at least an 11x11 spatial extent.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "ssim: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (h, w, c) = a.hwc()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Contract(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let window = gaussian_window();
    let mut channel_means = Vec::with_capacity(c);
    for ch in 0..c {
        let mut acc = 0.0f64;
        let mut count = 0usize;
        for y0 in 0..=h - SSIM_WINDOW {
            for x0 in 0..=w - SSIM_WINDOW {
                let (mut ma, mut mb, mut maa, mut mbb, mut mab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let wgt = window[dy * SSIM_WINDOW + dx];
                        let va = a.at3(y0 + dy, x0 + dx, ch).as_f64();
                        let vb = b.at3(y0 + dy, x0 + dx, ch).as_f64();
                        ma += wgt * va;
                        mb += wgt * vb;
                        maa += wgt * va * va;
                        mbb += wgt * vb * vb;
                        mab += wgt * va * vb;
                    }
                }
                let var_a = maa - ma * ma;
                let var_b = mbb - mb * mb;
                let cov = mab - ma * mb;
                let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
                let den = (ma * ma + mb * mb + SSIM_C1) * (var_a + var_b + SSIM_C2);
                acc += num / den;
                count += 1;
            }
        }
        channel_means.push(acc / count as f64);
    }
    Ok(channel_means.iter().sum::<f64>() / c as f64)
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let dy = y as f64 - half;
            let dx = x as f64 - half;
            w.push((-(dy * dy + dx * dx) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
        }
    }
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= sum);
    w
}

/// An image counts as mode-collapsed when deblurring lost strictly more than
/// 3 dB against the blurred input. Infinities follow extended-real rules, so
/// two identical +inf values (NaN difference) do not collapse.
pub fn mode_collapse_flag(psnr_blur: f64, psnr_deblur: f64) -> bool {
    psnr_blur - psnr_deblur > 3.0
}

/// Metrics for one image: deblurred output and blurred input, each against
/// the sharp ground truth.
pub fn per_image_metrics<T: Scalar>(
    id: impl Into<String>,
    deblurred: &Tensor<T>,
    blurred: &Tensor<T>,
    sharp: &Tensor<T>,
) -> Result<PerImageMetrics> {
    let psnr_deblur = psnr(deblurred, sharp)?;
    let psnr_blur = psnr(blurred, sharp)?;
    Ok(PerImageMetrics {
        id: id.into(),
        psnr: Db(psnr_deblur),
        ssim: ssim(deblurred, sharp)?,
        psnr_blur: Db(psnr_blur),
        collapsed: mode_collapse_flag(psnr_blur, psnr_deblur),
    })
}

/// Merge per-image entries into a report. Infinite PSNR entries stay visible
/// per-image but are excluded from the aggregate mean; MCR is the fraction of
/// collapsed images.
pub fn aggregate(per_image: Vec<PerImageMetrics>) -> Result<MetricsReport> {
    if per_image.is_empty() {
        return Err(Error::Contract("aggregate over an empty image list".into()));
    }
    let n = per_image.len() as f64;
    let finite: Vec<f64> = per_image
        .iter()
        .map(|e| e.psnr.0)
        .filter(|v| v.is_finite())
        .collect();
    let psnr = if finite.is_empty() {
        f64::INFINITY
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    };
    let ssim = per_image.iter().map(|e| e.ssim).sum::<f64>() / n;
    let mcr = per_image.iter().filter(|e| e.collapsed).count() as f64 / n;
    Ok(MetricsReport {
        per_image,
        aggregate: AggregateMetrics {
            psnr: Db(psnr),
            ssim,
            mcr,
        },
    })
}

impl MetricsReport {
    pub fn to_json_string(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json_string()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&fs::read_to_string(path)?)
    }
}

/// Aligned comparison table, one row per labeled aggregate, higher-is-better
/// arrows on PSNR/SSIM and lower-is-better on MCR.
pub fn render_table(rows: &[(String, AggregateMetrics)]) -> String {
    let name_w = rows
        .iter()
        .map(|(n, _)| n.chars().count())
        .max()
        .unwrap_or(0)
        .max(3);
    let mut out = format!("{:<name_w$}  {:>8}  {:>7}  {:>6}\n", "run", "PSNR↑", "SSIM↑", "MCR↓");
    for (name, agg) in rows {
        let psnr = if agg.psnr.0.is_finite() {
            format!("{:.3}", agg.psnr.0)
        } else {
            "inf".to_string()
        };
        out.push_str(&format!(
            "{name:<name_w$}  {psnr:>8}  {:>7.4}  {:>6.3}\n",
            agg.ssim, agg.mcr
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn rand_image(h: usize, w: usize, c: usize, rng: &mut Rng) -> Tensor<f64> {
        let data = (0..h * w * c).map(|_| rng.next_f64()).collect();
        Tensor::from_vec(&[h, w, c], data).unwrap()
    }

    #[test]
    fn psnr_zero_mse_is_infinite() {
        let mut rng = Rng::seed_from_u64(1);
        let a = rand_image(4, 4, 3, &mut rng);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_formula_points() {
        // uniform 0.1 offset -> MSE 0.01 -> 20 dB
        let a = Tensor::filled(&[4, 4, 1], 0.2);
        let b = Tensor::filled(&[4, 4, 1], 0.3);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        // all-zeros vs all-ones -> MSE 1 -> 0 dB
        let z = Tensor::filled(&[4, 4, 1], 0.0);
        let o = Tensor::filled(&[4, 4, 1], 1.0);
        assert_eq!(psnr(&z, &o).unwrap(), 0.0);
    }

    #[test]
    fn psnr_clamps_before_comparing() {
        let a = Tensor::filled(&[2, 2, 1], -3.0);
        let b = Tensor::filled(&[2, 2, 1], 0.0);
        assert_eq!(psnr(&a, &b).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_symmetric_and_monotone() {
        let mut rng = Rng::seed_from_u64(2);
        let a = {
            let data = (0..48).map(|_| rng.next_range(0.3, 0.7)).collect();
            Tensor::from_vec(&[4, 4, 3], data).unwrap()
        };
        let delta: Vec<f64> = (0..48).map(|_| rng.next_range(-0.1, 0.1)).collect();
        let mut last = f64::INFINITY;
        for k in 1..=4 {
            let mut b = a.clone();
            for (v, d) in b.data_mut().iter_mut().zip(&delta) {
                *v += k as f64 * d;
            }
            let p = psnr(&a, &b).unwrap();
            assert_eq!(p, psnr(&b, &a).unwrap());
            assert!(p < last, "psnr should strictly decrease: {p} vs {last}");
            last = p;
        }
    }

    #[test]
    fn psnr_shape_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 2, 1]);
        let b = Tensor::<f64>::zeros(&[2, 2, 2]);
        assert!(psnr(&a, &b).is_err());
    }

    #[test]
    fn ssim_self_is_exactly_one() {
        let mut rng = Rng::seed_from_u64(3);
        for _ in 0..3 {
            let a = rand_image(13, 16, 3, &mut rng);
            assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        }
    }

    #[test]
    fn ssim_constant_pair_matches_luminance_term() {
        let a = Tensor::filled(&[12, 12, 1], 0.2);
        let b = Tensor::filled(&[12, 12, 1], 0.7);
        let got = ssim(&a, &b).unwrap();
        let expect = (2.0 * 0.2 * 0.7 + SSIM_C1) / (0.2f64 * 0.2 + 0.7 * 0.7 + SSIM_C1);
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
        assert!(got < 1.0);
    }

    #[test]
    fn ssim_symmetric() {
        let mut rng = Rng::seed_from_u64(4);
        let a = rand_image(14, 12, 2, &mut rng);
        let b = rand_image(14, 12, 2, &mut rng);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn ssim_matches_reference_implementation() {
        // independent reference: per-window loops computing centered moments
        // (sum of w*(x-mu)^2) instead of the E[x^2]-mu^2 form
        fn reference_ssim(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
            let (h, w, c) = a.hwc().unwrap();
            let win = gaussian_window();
            let mut total = 0.0;
            for ch in 0..c {
                let mut acc = 0.0;
                let mut count = 0;
                for y0 in 0..=h - 11 {
                    for x0 in 0..=w - 11 {
                        let mut ma = 0.0;
                        let mut mb = 0.0;
                        for dy in 0..11 {
                            for dx in 0..11 {
                                ma += win[dy * 11 + dx] * a.at3(y0 + dy, x0 + dx, ch);
                                mb += win[dy * 11 + dx] * b.at3(y0 + dy, x0 + dx, ch);
                            }
                        }
                        let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                        for dy in 0..11 {
                            for dx in 0..11 {
                                let da = a.at3(y0 + dy, x0 + dx, ch) - ma;
                                let db = b.at3(y0 + dy, x0 + dx, ch) - mb;
                                let wgt = win[dy * 11 + dx];
                                va += wgt * da * da;
                                vb += wgt * db * db;
                                cov += wgt * da * db;
                            }
                        }
                        acc += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                        count += 1;
                    }
                }
                total += acc / count as f64;
            }
            total / c as f64
        }
        let mut rng = Rng::seed_from_u64(5);
        let a = rand_image(15, 13, 3, &mut rng);
        let mut b = a.clone();
        for v in b.data_mut().iter_mut() {
            *v = (*v + rng.next_range(-0.2, 0.2)).clamp(0.0, 1.0);
        }
        let got = ssim(&a, &b).unwrap();
        let expect = reference_ssim(&a, &b);
        assert!((got - expect).abs() < 1e-8, "{got} vs {expect}");
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Tensor::<f64>::zeros(&[10, 12, 1]);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn collapse_flag_threshold_is_strict() {
        assert!(mode_collapse_flag(26.0, 22.9));
        assert!(!mode_collapse_flag(26.0, 23.0));
        assert!(!mode_collapse_flag(20.0, 35.0));
        // extended-real cases
        assert!(mode_collapse_flag(f64::INFINITY, 20.0));
        assert!(!mode_collapse_flag(20.0, f64::INFINITY));
        assert!(!mode_collapse_flag(f64::INFINITY, f64::INFINITY));
    }

    #[test]
    fn collapse_flag_monotone_in_deblur_psnr() {
        let mut rng = Rng::seed_from_u64(6);
        for _ in 0..100 {
            let blur = rng.next_range(0.0, 40.0);
            let deblur = rng.next_range(0.0, 40.0);
            if mode_collapse_flag(blur, deblur) {
                assert!(mode_collapse_flag(blur, deblur - 1.0));
            }
        }
    }

    fn entry(id: &str, psnr: f64, collapsed: bool) -> PerImageMetrics {
        PerImageMetrics {
            id: id.into(),
            psnr: Db(psnr),
            ssim: 0.9,
            psnr_blur: Db(25.0),
            collapsed,
        }
    }

    #[test]
    fn aggregate_counts_collapses() {
        let entries: Vec<PerImageMetrics> = (0..10)
            .map(|i| entry(&format!("img{i}"), 20.0 + i as f64, i < 2))
            .collect();
        let report = aggregate(entries).unwrap();
        assert_eq!(report.aggregate.mcr, 0.20);
        assert!((report.aggregate.psnr.0 - 24.5).abs() < 1e-12);
        assert!(aggregate(Vec::new()).is_err());
        let one = aggregate(vec![entry("only", 18.0, true)]).unwrap();
        assert_eq!(one.aggregate.mcr, 1.0);
    }

    #[test]
    fn aggregate_excludes_infinite_psnr_from_mean() {
        let report = aggregate(vec![
            entry("a", f64::INFINITY, false),
            entry("b", 30.0, false),
            entry("c", 20.0, false),
        ])
        .unwrap();
        assert_eq!(report.aggregate.psnr.0, 25.0);
    }

    #[test]
    fn report_json_roundtrip_with_infinity() {
        let report = aggregate(vec![
            entry("a", f64::INFINITY, false),
            entry("b", 30.0, true),
        ])
        .unwrap();
        let text = report.to_json_string().unwrap();
        assert!(text.contains("\"inf\""));
        let back = MetricsReport::from_json_str(&text).unwrap();
        assert_eq!(back, report);
        assert_eq!(back.to_json_string().unwrap(), text);
    }

    #[test]
    fn table_is_aligned() {
        let report = aggregate(vec![entry("a", 24.0, false)]).unwrap();
        let text = render_table(&[
            ("baseline".into(), report.aggregate),
            ("map".into(), report.aggregate),
        ]);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].contains("PSNR↑"));
        assert!(lines[1].starts_with("baseline"));
    }
}
