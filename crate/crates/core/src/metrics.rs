//! Distortion and rate metrics, rate-distortion reports and comparison
//! tables.
//!
//! CSV reports use the header
//! `model,psnr_db,bpp,bpp_y,bpp_z,params_total,params_hyper`, one row per
//! image tagged `<model>#<image>` followed by an aggregate row tagged
//! `<model>`. Floats are written with exactly six decimals.

use std::fmt::Write as _;

use crate::data::{crop, pad_reflect, Image};
use crate::error::{Error, Result};
use crate::network::{mse_255, Network, Scope};
use crate::scalar::Scalar;

pub const PSNR_CAP_DB: f64 = 100.0;
pub const CSV_HEADER: &str = "model,psnr_db,bpp,bpp_y,bpp_z,params_total,params_hyper";

/// `10 log10(255^2 / mse)` for an mse on the 0..255 scale, capped at
/// [`PSNR_CAP_DB`].
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (255.0f64 * 255.0 / mse).log10()).min(PSNR_CAP_DB)
}

/// PSNR between two images with values in `[0, 1]`.
pub fn psnr<T: Scalar>(x: &crate::tensor::Tensor<T>, x_hat: &crate::tensor::Tensor<T>) -> Result<f64> {
    Ok(psnr_from_mse(mse_255(x, x_hat)?.as_f64()))
}

pub fn bpp(total_bits: f64, width: usize, height: usize) -> Result<f64> {
    if width * height == 0 {
        return Err(Error::invalid("bpp", "image has no pixels"));
    }
    Ok(total_bits / (width * height) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageMetrics {
    pub name: String,
    pub psnr_db: f64,
    pub bpp_y: f64,
    pub bpp_z: f64,
    /// 0..255-scale mean squared error.
    pub mse: f64,
}

impl ImageMetrics {
    pub fn bpp(&self) -> f64 {
        self.bpp_y + self.bpp_z
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RDReport {
    pub model: String,
    pub images: Vec<ImageMetrics>,
    pub params_total: usize,
    pub params_hyper: usize,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl RDReport {
    pub fn mean_psnr(&self) -> f64 {
        mean(self.images.iter().map(|m| m.psnr_db))
    }

    pub fn mean_bpp(&self) -> f64 {
        self.mean_bpp_y() + self.mean_bpp_z()
    }

    pub fn mean_bpp_y(&self) -> f64 {
        mean(self.images.iter().map(|m| m.bpp_y))
    }

    pub fn mean_bpp_z(&self) -> f64 {
        mean(self.images.iter().map(|m| m.bpp_z))
    }

    pub fn mean_mse(&self) -> f64 {
        mean(self.images.iter().map(|m| m.mse))
    }

    /// Mean per-image `bpp + lambda * mse`.
    pub fn rd_loss(&self, lambda: f64) -> f64 {
        mean(self.images.iter().map(|m| m.bpp() + lambda * m.mse))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        self.write_rows(&mut out);
        out
    }

    fn write_rows(&self, out: &mut String) {
        let mut row = |tag: &str, psnr: f64, y: f64, z: f64| {
            writeln!(out, "{tag},{psnr:.6},{:.6},{y:.6},{z:.6},{},{}", y + z, self.params_total, self.params_hyper).unwrap();
        };
        for m in &self.images {
            row(&format!("{}#{}", self.model, m.name), m.psnr_db, m.bpp_y, m.bpp_z);
        }
        row(&self.model, self.mean_psnr(), self.mean_bpp_y(), self.mean_bpp_z());
    }

    /// Parses reports written by [`RDReport::to_csv`] (several may be
    /// concatenated under one header). Per-image mse is not stored and is
    /// recovered from the PSNR.
    pub fn from_csv(text: &str) -> Result<Vec<RDReport>> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next().map(str::trim) != Some(CSV_HEADER) {
            return Err(Error::invalid("report csv", "missing or wrong header"));
        }
        let mut out = Vec::new();
        let mut pending: Vec<ImageMetrics> = Vec::new();
        for line in lines {
            if line.trim() == CSV_HEADER {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(Error::invalid("report csv", format!("expected 7 fields in {line:?}")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| Error::invalid("report csv", format!("bad number {s:?}")));
            let int = |s: &str| s.parse::<usize>().map_err(|_| Error::invalid("report csv", format!("bad count {s:?}")));
            let (psnr, total, y, z) = (num(f[1])?, num(f[2])?, num(f[3])?, num(f[4])?);
            if (total - (y + z)).abs() > 1.5e-6 {
                return Err(Error::invalid("report csv", format!("bpp {total} is not bpp_y + bpp_z in {line:?}")));
            }
            match f[0].split_once('#') {
                Some((_, name)) => pending.push(ImageMetrics {
                    name: name.to_string(),
                    psnr_db: psnr,
                    bpp_y: y,
                    bpp_z: z,
                    mse: 255.0 * 255.0 / 10f64.powf(psnr / 10.0),
                }),
                None => out.push(RDReport {
                    model: f[0].to_string(),
                    images: std::mem::take(&mut pending),
                    params_total: int(f[5])?,
                    params_hyper: int(f[6])?,
                }),
            }
        }
        if !pending.is_empty() {
            return Err(Error::invalid("report csv", "image rows without an aggregate row"));
        }
        Ok(out)
    }
}

/// Several reports under one header.
pub fn reports_to_csv(reports: &[RDReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        r.write_rows(&mut out);
    }
    out
}

/// Evaluates one image: reflect-padded to the downsampling multiple, hard
/// rounded, with distortion measured on the original region and rates
/// divided by the original pixel count.
pub fn evaluate_image<T: Scalar>(net: &Network<T>, image: &Image<T>) -> Result<ImageMetrics> {
    let s = image.pixels.shape();
    let padded = pad_reflect(&image.pixels, net.downsampling_factor());
    let pass = net.forward_eval(&padded)?;
    let x_hat = crop(&pass.x_hat, 0, 0, s.h, s.w)?;
    let mse = mse_255(&image.pixels, &x_hat)?.as_f64();
    let pixels = s.n * s.h * s.w;
    Ok(ImageMetrics {
        name: image.name.clone(),
        psnr_db: psnr_from_mse(mse),
        bpp_y: pass.rate_y_bits.as_f64() / pixels as f64,
        bpp_z: pass.rate_z_bits.as_f64() / pixels as f64,
        mse,
    })
}

pub fn evaluate<T: Scalar>(net: &Network<T>, images: &[Image<T>], model: &str) -> Result<RDReport> {
    Ok(RDReport {
        model: model.to_string(),
        images: images.iter().map(|im| evaluate_image(net, im)).collect::<Result<_>>()?,
        params_total: net.count_parameters(Scope::Total),
        params_hyper: net.count_parameters(Scope::HyperPath),
    })
}

/// Share of parameters in the hyper path versus share of the bitrate spent
/// on the side latent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioReport {
    pub hyper_param_ratio: f64,
    pub z_rate_ratio: f64,
}

pub fn ratio_report<T: Scalar>(net: &Network<T>, report: &RDReport) -> RatioReport {
    let total = net.count_parameters(Scope::Total);
    let bpp = report.mean_bpp();
    RatioReport {
        hyper_param_ratio: if total == 0 { 0.0 } else { net.count_parameters(Scope::HyperPath) as f64 / total as f64 },
        z_rate_ratio: if bpp > 0.0 { report.mean_bpp_z() / bpp } else { 0.0 },
    }
}

/// One row of a comparison table; deltas are relative to the first model.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub model: String,
    pub psnr_db: f64,
    pub bpp: f64,
    pub params_total: usize,
    pub params_hyper: usize,
    pub d_psnr_db: f64,
    pub d_bpp: f64,
    /// Relative change of the total parameter count, in percent.
    pub d_params_pct: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
}

pub fn compare_models(reports: &[RDReport]) -> Result<Comparison> {
    if reports.len() < 2 {
        return Err(Error::invalid("compare_models", "need at least two reports"));
    }
    let base = &reports[0];
    let rows = reports
        .iter()
        .map(|r| ComparisonRow {
            model: r.model.clone(),
            psnr_db: r.mean_psnr(),
            bpp: r.mean_bpp(),
            params_total: r.params_total,
            params_hyper: r.params_hyper,
            d_psnr_db: r.mean_psnr() - base.mean_psnr(),
            d_bpp: r.mean_bpp() - base.mean_bpp(),
            d_params_pct: if base.params_total == 0 {
                0.0
            } else {
                100.0 * (r.params_total as f64 - base.params_total as f64) / base.params_total as f64
            },
        })
        .collect();
    Ok(Comparison { rows })
}

/// `pruned/origin(x%↓)` in millions, or just the count when unchanged.
pub fn format_param_scale(params: usize, origin: usize) -> String {
    let m = |v: usize| format!("{:.3}M", v as f64 / 1e6);
    if params == origin {
        return m(origin);
    }
    let pct = 100.0 * (origin as f64 - params as f64).abs() / origin.max(1) as f64;
    let arrow = if params < origin { '↓' } else { '↑' };
    format!("{}/{}({pct:.1}%{arrow})", m(params), m(origin))
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,psnr_db,bpp,params_total,params_hyper,d_psnr_db,d_bpp,d_params_pct\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{:.6},{:.6},{},{},{:.6},{:.6},{:.6}",
                r.model, r.psnr_db, r.bpp, r.params_total, r.params_hyper, r.d_psnr_db, r.d_bpp, r.d_params_pct
            )
            .unwrap();
        }
        out
    }

    pub fn to_text(&self) -> String {
        let origin = self.rows[0].params_total;
        let cells: Vec<[String; 5]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.model.clone(),
                    format!("{:.3}@{:.4}", r.psnr_db, r.bpp),
                    format_param_scale(r.params_total, origin),
                    format!("{:+.3}", r.d_psnr_db),
                    format!("{:+.4}", r.d_bpp),
                ]
            })
            .collect();
        let header = ["model", "PSNR@BPP", "params", "dPSNR", "dBPP"];
        let widths: Vec<usize> = (0..5)
            .map(|i| cells.iter().map(|c| c[i].chars().count()).chain([header[i].len()]).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        let mut line = |cols: Vec<&str>| {
            let parts: Vec<String> = cols.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}", w = *w)).collect();
            writeln!(out, "{}", parts.join("  ").trim_end()).unwrap();
        };
        line(header.to_vec());
        for c in &cells {
            line(c.iter().map(String::as_str).collect());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(model: &str, psnr: &[f64], y: &[f64], z: &[f64], params: usize) -> RDReport {
        RDReport {
            model: model.into(),
            images: psnr
                .iter()
                .zip(y)
                .zip(z)
                .enumerate()
                .map(|(i, ((&p, &y), &z))| ImageMetrics { name: format!("im{i}"), psnr_db: p, bpp_y: y, bpp_z: z, mse: 65025.0 / 10f64.powf(p / 10.0) })
                .collect(),
            params_total: params,
            params_hyper: params / 3,
        }
    }

    #[test]
    fn psnr_values() {
        assert!(psnr_from_mse(65025.0).abs() < 1e-12);
        assert_eq!(psnr_from_mse(0.0), 100.0);
        assert!((psnr_from_mse(1.0) - 48.130_803_608_679_1).abs() < 1e-9);
        assert!(psnr_from_mse(2.0) < psnr_from_mse(1.0));
    }

    #[test]
    fn bpp_values() {
        assert_eq!(bpp(1000.0, 100, 100).unwrap(), 0.1);
        assert_eq!(bpp(0.0, 8, 8).unwrap(), 0.0);
        assert!(bpp(1.0, 0, 8).is_err());
        let (a, b) = (bpp(300.0, 10, 10).unwrap(), bpp(700.0, 10, 10).unwrap());
        assert!((a + b - bpp(1000.0, 10, 10).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn csv_round_trip() {
        let r = report("base", &[30.123_456_7, 31.5], &[0.5, 0.612_345_67], &[0.01, 0.02], 1000);
        let text = r.to_csv();
        assert!(text.starts_with(CSV_HEADER));
        let back = RDReport::from_csv(&text).unwrap();
        assert_eq!(back.len(), 1);
        // image rows survive exactly; the aggregate is recomputed from rounded values
        let lines = |t: &str| t.lines().take(3).map(String::from).collect::<Vec<_>>();
        assert_eq!(lines(&back[0].to_csv()), lines(&text));
        let again = back[0].to_csv();
        assert_eq!(RDReport::from_csv(&again).unwrap()[0].to_csv(), again);
        assert!((back[0].mean_psnr() - r.mean_psnr()).abs() < 1e-6);
        assert_eq!(back[0].images.len(), 2);
        assert!((back[0].images[1].bpp_y - 0.612_346).abs() < 1e-12);
        let both = reports_to_csv(&[r.clone(), report("slim", &[30.0], &[0.4], &[0.01], 900)]);
        assert_eq!(RDReport::from_csv(&both).unwrap().len(), 2);
        assert!(RDReport::from_csv("model,x\n").is_err());
    }

    #[test]
    fn comparison_deltas() {
        let a = report("base", &[30.0, 32.0], &[0.5, 0.7], &[0.02, 0.04], 11_582_000);
        let same = compare_models(&[a.clone(), a.clone()]).unwrap();
        assert!(same.rows[1].d_psnr_db == 0.0 && same.rows[1].d_bpp == 0.0 && same.rows[1].d_params_pct == 0.0);
        let b = report("erhp", &[30.5, 31.9], &[0.45, 0.66], &[0.01, 0.03], 7_748_000);
        let c = compare_models(&[a.clone(), b.clone()]).unwrap();
        assert!(c.rows[1].d_params_pct < 0.0);
        let text = c.to_text();
        assert!(text.contains("7.748M/11.582M(33.1%↓)"), "{text}");
        // independent recomputation of the aggregates
        let mean_bpp = ((0.45 + 0.01) + (0.66 + 0.03)) / 2.0;
        assert!((c.rows[1].bpp - mean_bpp).abs() < 1e-12);
        assert!((c.rows[1].psnr_db - 31.2).abs() < 1e-9);
        assert!(compare_models(&[a]).is_err());
    }
}
