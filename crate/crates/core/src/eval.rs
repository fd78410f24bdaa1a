//! Tiled inference and PSNR scoring.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::ImageTensor;
use crate::error::{Error, Result};
use crate::model::{Checkpoint, Tensor, UNet};

/// Peak signal-to-noise ratio in dB. A perfect prediction has no finite
/// value and is reported as `inf`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Psnr {
    Finite(f64),
    Infinite,
}

impl Psnr {
    pub fn finite(self) -> Option<f64> {
        match self {
            Psnr::Finite(v) => Some(v),
            Psnr::Infinite => None,
        }
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Finite(v) => write!(f, "{v:.4}"),
            Psnr::Infinite => f.write_str("inf"),
        }
    }
}

impl FromStr for Psnr {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "inf" => Ok(Psnr::Infinite),
            t => t
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .map(Psnr::Finite)
                .ok_or_else(|| Error::param(format!("not a PSNR value: {s:?}"))),
        }
    }
}

pub fn mse(pred: &ImageTensor, gt: &ImageTensor) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let sum: f64 = pred
        .values()
        .iter()
        .zip(gt.values())
        .map(|(&p, &g)| (p as f64 - g as f64).powi(2))
        .sum();
    Ok(sum / pred.len() as f64)
}

/// `10 * log10(range^2 / MSE)`.
pub fn psnr(pred: &ImageTensor, gt: &ImageTensor, range: f64) -> Result<Psnr> {
    if !(range > 0.0 && range.is_finite()) {
        return Err(Error::param(format!(
            "PSNR range must be positive, got {range}"
        )));
    }
    let mse = mse(pred, gt)?;
    if mse == 0.0 {
        return Ok(Psnr::Infinite);
    }
    Ok(Psnr::Finite(10.0 * (range * range / mse).log10()))
}

/// Intensity span `max - min` of a ground-truth image.
pub fn range_from_gt(gt: &ImageTensor) -> f64 {
    gt.max() as f64 - gt.min() as f64
}

/// Which intensity range PSNR is computed against.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RangeRepr", into = "RangeRepr")]
pub enum RangePolicy {
    /// The same span for every image (255 for 8-bit natural images).
    Fixed(f64),
    /// Each ground-truth image's own `max - min`.
    GroundTruth,
}

impl RangePolicy {
    pub const BSD68: RangePolicy = RangePolicy::Fixed(255.0);

    pub fn range_for(&self, gt: &ImageTensor) -> f64 {
        match *self {
            RangePolicy::Fixed(r) => r,
            RangePolicy::GroundTruth => range_from_gt(gt),
        }
    }
}

impl fmt::Display for RangePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RangePolicy::Fixed(r) => write!(f, "{r}"),
            RangePolicy::GroundTruth => f.write_str("gt"),
        }
    }
}

impl FromStr for RangePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "gt" => Ok(RangePolicy::GroundTruth),
            t => match t.parse::<f64>() {
                Ok(v) if v > 0.0 && v.is_finite() => Ok(RangePolicy::Fixed(v)),
                _ => Err(Error::param(format!(
                    "range must be \"gt\" or a positive number, got {s:?}"
                ))),
            },
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RangeRepr {
    Number(f64),
    Text(String),
}

impl TryFrom<RangeRepr> for RangePolicy {
    type Error = Error;

    fn try_from(r: RangeRepr) -> Result<Self> {
        match r {
            RangeRepr::Number(v) => RangePolicy::from_str(&v.to_string()),
            RangeRepr::Text(s) => RangePolicy::from_str(&s),
        }
    }
}

impl From<RangePolicy> for RangeRepr {
    fn from(p: RangePolicy) -> Self {
        match p {
            RangePolicy::Fixed(v) => RangeRepr::Number(v),
            RangePolicy::GroundTruth => RangeRepr::Text("gt".into()),
        }
    }
}

/// Tiles used by [`predict_tiled`]: the margin rounded up to a multiple of
/// `2^depth` so every window sits on the network's pooling grid.
fn effective_margin(margin: usize, multiple: usize) -> usize {
    margin.div_ceil(multiple) * multiple
}

fn forward_image(net: &UNet, img: &ImageTensor) -> Result<ImageTensor> {
    let out = net.forward(&Tensor::from_images(std::slice::from_ref(img))?)?;
    Ok(out.to_images()?.pop().expect("one image in, one out"))
}

/// Applies `net` to `img` (already in network units) window by window.
///
/// The image is reflect-padded at the bottom/right to a multiple of
/// `2^depth`. Each `tile x tile` output block is computed from a window
/// extended by `margin` pixels of context on every side (clamped at the
/// image border) and only its interior is kept, so with a margin covering
/// the receptive field the result equals one whole-image forward pass.
pub fn predict_tiled(
    net: &UNet,
    img: &ImageTensor,
    tile: usize,
    margin: usize,
) -> Result<ImageTensor> {
    let cfg = net.config();
    let m = cfg.size_multiple();
    if tile == 0 || !tile.is_multiple_of(m) {
        return Err(Error::param(format!(
            "tile {tile} must be a positive multiple of {m} (2^depth)"
        )));
    }
    let margin = effective_margin(margin, m);
    let radius = cfg.receptive_radius();
    if margin < radius {
        log::warn!("tile margin {margin} is below the receptive-field radius {radius}; tile seams may differ from a whole-image pass");
    }
    let (h, w) = img.shape();
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    let padded = img.pad_reflect(0, ph - h, 0, pw - w);
    if ph <= tile && pw <= tile {
        return forward_image(net, &padded)?.crop(0, 0, h, w);
    }
    let mut out = vec![0.0f32; ph * pw];
    for ty in (0..ph).step_by(tile) {
        for tx in (0..pw).step_by(tile) {
            let (y0, x0) = (ty.saturating_sub(margin), tx.saturating_sub(margin));
            let (y1, x1) = ((ty + tile + margin).min(ph), (tx + tile + margin).min(pw));
            let window = padded.crop(y0, x0, y1 - y0, x1 - x0)?;
            let pred = forward_image(net, &window)?;
            let (th, tw) = ((ty + tile).min(ph) - ty, (tx + tile).min(pw) - tx);
            for r in 0..th {
                let src = &pred.values()[(ty - y0 + r) * pred.width() + (tx - x0)..][..tw];
                out[(ty + r) * pw + tx..][..tw].copy_from_slice(src);
            }
        }
    }
    ImageTensor::new(ph, pw, out)?.crop(0, 0, h, w)
}

/// Normalizes `img` with the checkpoint statistics, predicts tile by tile
/// and maps the result back to image intensities.
pub fn predict(
    ck: &Checkpoint,
    img: &ImageTensor,
    tile: usize,
    margin: usize,
) -> Result<ImageTensor> {
    let pred = predict_tiled(&ck.net, &ck.norm.normalize(img), tile, margin)?;
    Ok(ck.norm.denormalize(&pred))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub psnr: Psnr,
    pub range: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Mean over the finite per-image values; `None` if there are none.
    pub mean_psnr: Option<f64>,
    /// Rows with infinite PSNR, left out of the mean.
    pub infinite: usize,
    pub fingerprint: String,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>, fingerprint: String) -> Self {
        let finite: Vec<f64> = rows.iter().filter_map(|r| r.psnr.finite()).collect();
        let mean_psnr =
            (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64);
        Self {
            infinite: rows.len() - finite.len(),
            rows,
            mean_psnr,
            fingerprint,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,psnr_db,range\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.id, r.psnr, r.range);
        }
        let mean = self
            .mean_psnr
            .map_or("nan".to_string(), |m| format!("{m:.4}"));
        let _ = writeln!(s, "mean,{mean},");
        s
    }

    pub fn to_table(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.id.len())
            .max()
            .unwrap_or(0)
            .max(4);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>10}  {:>10}", "id", "PSNR [dB]", "range");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<width$}  {:>10}  {:>10}",
                r.id,
                r.psnr.to_string(),
                r.range
            );
        }
        let mean = self
            .mean_psnr
            .map_or("n/a".to_string(), |m| format!("{m:.4}"));
        let _ = writeln!(s, "{:<width$}  {:>10}", "mean", mean);
        if self.infinite > 0 {
            let _ = writeln!(
                s,
                "note: {} perfect prediction(s) with infinite PSNR excluded from the mean",
                self.infinite
            );
        }
        let _ = writeln!(s, "config: {}", self.fingerprint);
        s
    }
}

/// Scores already computed predictions against their ground truth.
pub fn score(
    items: &[(String, ImageTensor, ImageTensor)],
    policy: RangePolicy,
    fingerprint: String,
) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(items.len());
    for (id, pred, gt) in items {
        let range = policy.range_for(gt);
        let psnr = psnr(pred, gt, range).map_err(|e| Error::param(format!("{id}: {e}")))?;
        rows.push(EvalRow {
            id: id.clone(),
            psnr,
            range,
        });
    }
    Ok(EvalReport::from_rows(rows, fingerprint))
}

/// One test image: an identifier, the noisy input and its ground truth.
#[derive(Clone, Debug)]
pub struct TestItem {
    pub id: String,
    pub noisy: ImageTensor,
    pub gt: ImageTensor,
}

/// Denoises every test image and scores the (unclipped) predictions.
pub fn evaluate(
    ck: &Checkpoint,
    items: &[TestItem],
    policy: RangePolicy,
    tile: usize,
    margin: usize,
) -> Result<(EvalReport, Vec<ImageTensor>)> {
    let mut preds = Vec::with_capacity(items.len());
    for it in items {
        preds.push(predict(ck, &it.noisy, tile, margin)?);
    }
    let scored: Vec<_> = items
        .iter()
        .zip(&preds)
        .map(|(it, p)| (it.id.clone(), p.clone(), it.gt.clone()))
        .collect();
    let report = score(&scored, policy, fingerprint(ck, policy, tile, margin))?;
    Ok((report, preds))
}

fn fingerprint(ck: &Checkpoint, policy: RangePolicy, tile: usize, margin: usize) -> String {
    let mut h = Sha256::new();
    h.update(ck.to_bytes());
    h.update(format!("range={policy};tile={tile};margin={margin}").as_bytes());
    h.finalize()
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// PSNR per method (rows) and dataset (columns).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ComparisonTable {
    pub datasets: Vec<String>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

impl ComparisonTable {
    pub fn render(&self) -> String {
        let name_w = self
            .rows
            .iter()
            .map(|(n, _)| n.len())
            .max()
            .unwrap_or(0)
            .max(6);
        let col_w: Vec<usize> = self.datasets.iter().map(|d| d.len().max(8)).collect();
        let mut s = format!("{:<name_w$}", "method");
        for (d, w) in self.datasets.iter().zip(&col_w) {
            let _ = write!(s, "  {d:>w$}");
        }
        s.push('\n');
        for (name, vals) in &self.rows {
            let _ = write!(s, "{name:<name_w$}");
            for (v, w) in vals.iter().zip(&col_w) {
                let cell = v.map_or("-".to_string(), |v| format!("{v:.2}"));
                let _ = write!(s, "  {cell:>w$}");
            }
            s.push('\n');
        }
        s
    }
}
