//! Blind-spot selection and pixel replacement.
//!
//! A blind spot is a pixel whose value is hidden from the network input and
//! used only as the loss target. Its input value is overwritten by a
//! replacement computed from a `h' x w'` window around it:
//!
//! * `uwCP`: a uniformly drawn window cell, the center included;
//! * `uwoCP`: a uniformly drawn window cell other than the center;
//! * `mean` / `median`: the mean / median of all non-center cells.
//!
//! Windows near the patch border are shifted to lie fully inside the patch;
//! the blind spot's position inside the window moves accordingly.

use std::collections::HashSet;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::ImageTensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplacementKind {
    Uwcp,
    Uwocp,
    Mean,
    Median,
}

impl ReplacementKind {
    pub fn name(self) -> &'static str {
        match self {
            ReplacementKind::Uwcp => "uwcp",
            ReplacementKind::Uwocp => "uwocp",
            ReplacementKind::Mean => "mean",
            ReplacementKind::Median => "median",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplacementStrategy {
    pub kind: ReplacementKind,
    /// Window height and width, both odd and at least 3.
    pub window: [usize; 2],
}

impl ReplacementStrategy {
    pub const DEFAULT_WINDOW: [usize; 2] = [5, 5];

    pub fn new(kind: ReplacementKind) -> Self {
        Self {
            kind,
            window: Self::DEFAULT_WINDOW,
        }
    }

    pub fn with_window(kind: ReplacementKind, height: usize, width: usize) -> Result<Self> {
        let s = Self {
            kind,
            window: [height, width],
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for d in self.window {
            if d < 3 || d % 2 == 0 {
                return Err(Error::param(format!(
                    "replacement window sides must be odd and >= 3, got {:?}",
                    self.window
                )));
            }
        }
        Ok(())
    }
}

/// Values of a neighborhood window (row-major) and the blind spot's
/// position inside it.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub values: Vec<f32>,
    pub height: usize,
    pub width: usize,
    /// Top-left corner of the window in patch coordinates.
    pub origin: (usize, usize),
    pub center: (usize, usize),
}

impl Window {
    fn center_flat(&self) -> usize {
        self.center.0 * self.width + self.center.1
    }

    pub fn center_value(&self) -> f32 {
        self.values[self.center_flat()]
    }

    pub fn non_center(&self) -> impl Iterator<Item = f32> + '_ {
        let skip = self.center_flat();
        self.values
            .iter()
            .enumerate()
            .filter(move |(i, _)| *i != skip)
            .map(|(_, &v)| v)
    }

    /// Mean of the non-center cells, accumulated in `f64` in row-major order.
    pub fn mean_without_center(&self) -> f64 {
        let (sum, n) = self
            .non_center()
            .fold((0.0f64, 0usize), |(s, n), v| (s + v as f64, n + 1));
        sum / n as f64
    }

    /// Median of the non-center cells; an even count averages the two middle
    /// values.
    pub fn median_without_center(&self) -> f64 {
        let mut v: Vec<f32> = self.non_center().collect();
        v.sort_unstable_by(f32::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2] as f64
        } else {
            (v[n / 2 - 1] as f64 + v[n / 2] as f64) / 2.0
        }
    }
}

/// The positions and pre-replacement values of one patch's blind spots.
#[derive(Clone, Debug, PartialEq)]
pub struct BlindSpotBatch {
    pub coords: Vec<(usize, usize)>,
    pub originals: Vec<f32>,
    pub patch_shape: (usize, usize),
}

impl BlindSpotBatch {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Number of blind spots for a patch: `max(1, round(fraction * h * w))`.
pub fn blind_spot_count(shape: (usize, usize), fraction: f64) -> usize {
    ((fraction * (shape.0 * shape.1) as f64).round() as usize).max(1)
}

/// Draws distinct coordinates uniformly without replacement, returned in
/// row-major order.
pub fn select_blind_spots(
    shape: (usize, usize),
    fraction: f64,
    rng: &mut Rng,
) -> Result<Vec<(usize, usize)>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::param(format!(
            "blind-spot fraction must be in (0, 1), got {fraction}"
        )));
    }
    let (h, w) = shape;
    if h == 0 || w == 0 {
        return Err(Error::shape("empty patch"));
    }
    let n = h * w;
    let count = blind_spot_count(shape, fraction).min(n);
    let mut idx = rand::seq::index::sample(rng, n, count).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| (i / w, i % w)).collect())
}

pub fn neighborhood_window(
    patch: &ImageTensor,
    coord: (usize, usize),
    strategy: &ReplacementStrategy,
) -> Result<Window> {
    strategy.validate()?;
    let [wh, ww] = strategy.window;
    let (h, w) = patch.shape();
    if h < wh || w < ww {
        return Err(Error::param(format!(
            "{h}x{w} patch is smaller than the {wh}x{ww} replacement window"
        )));
    }
    let (r, c) = coord;
    if r >= h || c >= w {
        return Err(Error::param(format!(
            "blind spot {coord:?} outside {h}x{w} patch"
        )));
    }
    let r0 = r.saturating_sub(wh / 2).min(h - wh);
    let c0 = c.saturating_sub(ww / 2).min(w - ww);
    let mut values = Vec::with_capacity(wh * ww);
    for rr in r0..r0 + wh {
        for cc in c0..c0 + ww {
            values.push(patch.get(rr, cc));
        }
    }
    Ok(Window {
        values,
        height: wh,
        width: ww,
        origin: (r0, c0),
        center: (r - r0, c - c0),
    })
}

/// Index (row-major, within the window) of the cell a sampling strategy
/// picks. Draws exactly one value from `rng`.
pub fn sample_cell(window: &Window, include_center: bool, rng: &mut Rng) -> usize {
    let n = window.values.len();
    if include_center {
        rng.random_range(0..n)
    } else {
        let k = rng.random_range(0..n - 1);
        if k >= window.center_flat() {
            k + 1
        } else {
            k
        }
    }
}

/// The value written at the blind spot. Only the sampling strategies consume
/// randomness (one draw each).
pub fn replacement_value(window: &Window, kind: ReplacementKind, rng: &mut Rng) -> f32 {
    match kind {
        ReplacementKind::Uwcp => window.values[sample_cell(window, true, rng)],
        ReplacementKind::Uwocp => window.values[sample_cell(window, false, rng)],
        ReplacementKind::Mean => window.mean_without_center() as f32,
        ReplacementKind::Median => window.median_without_center() as f32,
    }
}

/// Returns a copy of `patch` with every coordinate replaced, plus the
/// original values. Windows are read from the unmodified patch; coordinates
/// are processed (and the RNG consumed) in row-major order.
pub fn apply_replacement(
    patch: &ImageTensor,
    coords: &[(usize, usize)],
    strategy: &ReplacementStrategy,
    rng: &mut Rng,
) -> Result<(ImageTensor, BlindSpotBatch)> {
    if coords.is_empty() {
        return Err(Error::param("no blind spots to replace"));
    }
    let mut sorted = coords.to_vec();
    sorted.sort_unstable();
    let unique: HashSet<_> = sorted.iter().collect();
    if unique.len() != sorted.len() {
        return Err(Error::param("duplicate blind-spot coordinates"));
    }
    let mut masked = patch.clone();
    let mut originals = Vec::with_capacity(sorted.len());
    for &(r, c) in &sorted {
        let window = neighborhood_window(patch, (r, c), strategy)?;
        masked.set(r, c, replacement_value(&window, strategy.kind, rng));
        originals.push(patch.get(r, c));
    }
    Ok((
        masked,
        BlindSpotBatch {
            coords: sorted,
            originals,
            patch_shape: patch.shape(),
        },
    ))
}

/// Selects blind spots and masks them in one go.
pub fn mask_patch(
    patch: &ImageTensor,
    fraction: f64,
    strategy: &ReplacementStrategy,
    rng: &mut Rng,
) -> Result<(ImageTensor, BlindSpotBatch)> {
    let coords = select_blind_spots(patch.shape(), fraction, rng)?;
    apply_replacement(patch, &coords, strategy, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;

    fn window3(values: [f32; 9]) -> Window {
        Window {
            values: values.to_vec(),
            height: 3,
            width: 3,
            origin: (0, 0),
            center: (1, 1),
        }
    }

    #[test]
    fn blind_spot_counts() {
        let mut rng = rng_from_seed(0);
        assert_eq!(
            select_blind_spots((64, 64), 0.00198, &mut rng)
                .unwrap()
                .len(),
            8
        );
        assert_eq!(
            select_blind_spots((4, 4), 0.001, &mut rng).unwrap().len(),
            1
        );
        assert!(select_blind_spots((4, 4), 0.0, &mut rng).is_err());
        assert!(select_blind_spots((4, 4), 1.0, &mut rng).is_err());
        let a = select_blind_spots((64, 64), 0.01, &mut rng_from_seed(3)).unwrap();
        assert_eq!(
            a,
            select_blind_spots((64, 64), 0.01, &mut rng_from_seed(3)).unwrap()
        );
    }

    #[test]
    fn windows_shift_inside_the_patch() {
        let patch = ImageTensor::from_fn(64, 64, |r, c| (r * 64 + c) as f32);
        let s = ReplacementStrategy::new(ReplacementKind::Mean);
        let w = neighborhood_window(&patch, (32, 32), &s).unwrap();
        assert_eq!((w.origin, w.center), ((30, 30), (2, 2)));
        let w = neighborhood_window(&patch, (0, 0), &s).unwrap();
        assert_eq!((w.origin, w.center), ((0, 0), (0, 0)));
        let w = neighborhood_window(&patch, (63, 63), &s).unwrap();
        assert_eq!((w.origin, w.center), ((59, 59), (4, 4)));
        assert_eq!(w.center_value(), patch.get(63, 63));
        let w = neighborhood_window(&patch, (1, 62), &s).unwrap();
        assert_eq!((w.origin, w.center), ((0, 59), (1, 3)));
        assert!(neighborhood_window(&ImageTensor::filled(4, 8, 0.0), (0, 0), &s).is_err());
        assert!(ReplacementStrategy::with_window(ReplacementKind::Mean, 4, 5).is_err());
    }

    #[test]
    fn mean_and_median_examples() {
        let mut rng = rng_from_seed(0);
        let spike = window3([0.0, 0.0, 0.0, 0.0, 100.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(
            replacement_value(&spike, ReplacementKind::Mean, &mut rng),
            0.0
        );
        assert_eq!(
            replacement_value(&spike, ReplacementKind::Median, &mut rng),
            0.0
        );
        let ramp = window3([1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        assert_eq!(
            replacement_value(&ramp, ReplacementKind::Mean, &mut rng),
            5.0
        );
        assert_eq!(
            replacement_value(&ramp, ReplacementKind::Median, &mut rng),
            5.0
        );
    }

    #[test]
    fn uwocp_never_returns_center_and_is_uniform() {
        let w = Window {
            values: (0..25).map(|v| v as f32).collect(),
            height: 5,
            width: 5,
            origin: (0, 0),
            center: (2, 2),
        };
        let mut rng = rng_from_seed(9);
        let mut hist = [0usize; 25];
        let draws = 100_000;
        for _ in 0..draws {
            hist[replacement_value(&w, ReplacementKind::Uwocp, &mut rng) as usize] += 1;
        }
        assert_eq!(hist[12], 0);
        for (i, &count) in hist.iter().enumerate().filter(|(i, _)| *i != 12) {
            let f = count as f64 / draws as f64;
            assert!((f - 1.0 / 24.0).abs() < 0.005, "cell {i}: {f}");
        }
    }

    #[test]
    fn constant_patch_is_unchanged_by_mean() {
        let patch = ImageTensor::filled(8, 8, 3.5);
        let s = ReplacementStrategy::new(ReplacementKind::Mean);
        let (masked, batch) =
            apply_replacement(&patch, &[(4, 4)], &s, &mut rng_from_seed(0)).unwrap();
        assert_eq!(masked, patch);
        assert_eq!(batch.originals, vec![3.5]);
        assert!(apply_replacement(&patch, &[(1, 1), (1, 1)], &s, &mut rng_from_seed(0)).is_err());
    }

    fn arb_patch() -> impl Strategy<Value = ImageTensor> {
        (5usize..12, 5usize..12).prop_flat_map(|(h, w)| {
            proptest::collection::vec(-100.0f32..100.0, h * w)
                .prop_map(move |v| ImageTensor::new(h, w, v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn center_value_never_leaks(
            patch in arb_patch(),
            r in 0usize..12, c in 0usize..12,
            v in -1000.0f32..1000.0,
            kind in prop_oneof![Just(ReplacementKind::Uwocp), Just(ReplacementKind::Mean), Just(ReplacementKind::Median)],
            seed in any::<u64>(),
        ) {
            let coord = (r % patch.height(), c % patch.width());
            let s = ReplacementStrategy::new(kind);
            let (a, _) = apply_replacement(&patch, &[coord], &s, &mut rng_from_seed(seed)).unwrap();
            let mut altered = patch.clone();
            altered.set(coord.0, coord.1, v);
            let (b, _) = apply_replacement(&altered, &[coord], &s, &mut rng_from_seed(seed)).unwrap();
            prop_assert_eq!(a.get(coord.0, coord.1).to_bits(), b.get(coord.0, coord.1).to_bits());
        }

        #[test]
        fn only_blind_spots_change(patch in arb_patch(), seed in any::<u64>(), kind_ix in 0usize..4) {
            let kind = [ReplacementKind::Uwcp, ReplacementKind::Uwocp, ReplacementKind::Mean, ReplacementKind::Median][kind_ix];
            let s = ReplacementStrategy::new(kind);
            let mut rng = rng_from_seed(seed);
            let (masked, batch) = mask_patch(&patch, 0.05, &s, &mut rng).unwrap();
            for r in 0..patch.height() {
                for c in 0..patch.width() {
                    if !batch.coords.contains(&(r, c)) {
                        prop_assert_eq!(masked.get(r, c).to_bits(), patch.get(r, c).to_bits());
                    }
                }
            }
            for (&(r, c), &o) in batch.coords.iter().zip(&batch.originals) {
                prop_assert_eq!(o, patch.get(r, c));
                if matches!(kind, ReplacementKind::Mean | ReplacementKind::Median) {
                    let w = neighborhood_window(&patch, (r, c), &s).unwrap();
                    let lo = w.non_center().fold(f32::INFINITY, f32::min);
                    let hi = w.non_center().fold(f32::NEG_INFINITY, f32::max);
                    let v = masked.get(r, c);
                    prop_assert!(v >= lo && v <= hi);
                }
            }
        }

        #[test]
        fn selection_is_distinct_with_exact_count(h in 1usize..512, w in 1usize..512, f in 0.0001f64..0.5, seed in any::<u64>()) {
            let coords = select_blind_spots((h, w), f, &mut rng_from_seed(seed)).unwrap();
            let expected = ((f * (h * w) as f64).round() as usize).max(1);
            prop_assert_eq!(coords.len(), expected);
            let set: HashSet<_> = coords.iter().collect();
            prop_assert_eq!(set.len(), coords.len());
            prop_assert!(coords.iter().all(|&(r, c)| r < h && c < w));
        }
    }
}
