//! Clicks: data model, disk-map rasterisation, the corrective-click simulator
//! and fixed-size padding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default padded click count per polarity.
pub const N1: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarity {
    #[serde(rename = "pos", alias = "positive")]
    Positive,
    #[serde(rename = "neg", alias = "negative")]
    Negative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Click {
    /// Column.
    pub x: usize,
    /// Row.
    pub y: usize,
    pub polarity: Polarity,
    /// Interaction step; assigned by [`ClickSet::push`].
    #[serde(default)]
    pub order: usize,
}

impl Click {
    pub fn new(x: usize, y: usize, polarity: Polarity) -> Self {
        Self { x, y, polarity, order: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickSet {
    pub positives: Vec<Click>,
    pub negatives: Vec<Click>,
}

impl ClickSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn of(&self, polarity: Polarity) -> &[Click] {
        match polarity {
            Polarity::Positive => &self.positives,
            Polarity::Negative => &self.negatives,
        }
    }

    /// Whether a click of the same polarity sits at the same pixel.
    pub fn contains(&self, click: &Click) -> bool {
        self.of(click.polarity).iter().any(|c| c.x == click.x && c.y == click.y)
    }

    /// Appends a click, stamping its order. Duplicate coordinates within a
    /// polarity are rejected.
    pub fn push(&mut self, mut click: Click) -> Result<Click> {
        click.order = self.len();
        let list = match click.polarity {
            Polarity::Positive => &mut self.positives,
            Polarity::Negative => &mut self.negatives,
        };
        if list.iter().any(|c| c.x == click.x && c.y == click.y) {
            return Err(Error::Contract(format!("duplicate click at ({}, {})", click.x, click.y)));
        }
        list.push(click);
        Ok(click)
    }

    /// Removes the most recent click of either polarity.
    pub fn pop(&mut self) -> Option<Click> {
        let last_pos = self.positives.last().map(|c| c.order);
        let last_neg = self.negatives.last().map(|c| c.order);
        match (last_pos, last_neg) {
            (Some(p), Some(n)) if n > p => self.negatives.pop(),
            (Some(_), _) => self.positives.pop(),
            (None, Some(_)) => self.negatives.pop(),
            (None, None) => None,
        }
    }

    /// All clicks in interaction order.
    pub fn history(&self) -> Vec<Click> {
        let mut all: Vec<Click> = self.positives.iter().chain(&self.negatives).copied().collect();
        all.sort_by_key(|c| c.order);
        all
    }

    fn check_bounds(&self, h: usize, w: usize) -> Result<()> {
        for c in self.positives.iter().chain(&self.negatives) {
            if c.x >= w || c.y >= h {
                return Err(Error::Contract(format!("click ({}, {}) outside {h}x{w} image", c.x, c.y)));
            }
        }
        Ok(())
    }
}

/// Click coordinates padded to `n1` entries per polarity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedClicks {
    pub n1: usize,
    pub positive: Vec<(usize, usize)>,
    pub positive_valid: Vec<bool>,
    pub negative: Vec<(usize, usize)>,
    pub negative_valid: Vec<bool>,
}

impl PaddedClicks {
    /// Coordinate carried by padding entries.
    pub const SENTINEL: (usize, usize) = (usize::MAX, usize::MAX);

    pub fn points(&self, polarity: Polarity) -> (&[(usize, usize)], &[bool]) {
        match polarity {
            Polarity::Positive => (&self.positive, &self.positive_valid),
            Polarity::Negative => (&self.negative, &self.negative_valid),
        }
    }

    pub fn num_valid(&self) -> usize {
        self.positive_valid.iter().chain(&self.negative_valid).filter(|&&v| v).count()
    }
}

pub fn pad(clicks: &ClickSet, n1: usize) -> Result<PaddedClicks> {
    let one = |list: &[Click], what: &str| -> Result<(Vec<(usize, usize)>, Vec<bool>)> {
        if list.len() > n1 {
            return Err(Error::Contract(format!("{} {what} clicks exceed the padded size {n1}", list.len())));
        }
        let mut pts: Vec<(usize, usize)> = list.iter().map(|c| (c.x, c.y)).collect();
        let mut valid = vec![true; pts.len()];
        pts.resize(n1, PaddedClicks::SENTINEL);
        valid.resize(n1, false);
        Ok((pts, valid))
    };
    let (positive, positive_valid) = one(&clicks.positives, "positive")?;
    let (negative, negative_valid) = one(&clicks.negatives, "negative")?;
    Ok(PaddedClicks { n1, positive, positive_valid, negative, negative_valid })
}

/// Three-channel dense prompt `[H, W, 3]`: previous mask probability,
/// positive disk map, negative disk map.
#[derive(Clone, Debug, PartialEq)]
pub struct DensePrompt<T> {
    pub map: Tensor<T>,
}

impl<T: Scalar> DensePrompt<T> {
    pub fn height(&self) -> usize {
        self.map.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.map.shape()[1]
    }

    pub fn channel(&self, c: usize) -> Vec<T> {
        self.map.data().chunks(3).map(|p| p[c]).collect()
    }
}

/// Rasterises clicks as radius-1 disks next to the previous mask.
pub fn rasterize<T: Scalar>(clicks: &ClickSet, prev_mask: &Tensor<T>, height: usize, width: usize) -> Result<DensePrompt<T>> {
    if prev_mask.len() != height * width {
        return Err(Error::Contract(format!(
            "previous mask has {} pixels, expected {height}x{width}",
            prev_mask.len()
        )));
    }
    clicks.check_bounds(height, width)?;
    let mut map = vec![T::zero(); height * width * 3];
    for (i, &p) in prev_mask.data().iter().enumerate() {
        map[i * 3] = p;
    }
    for (channel, list) in [(1, &clicks.positives), (2, &clicks.negatives)] {
        for c in list {
            for (dx, dy) in [(0isize, 0isize), (-1, 0), (1, 0), (0, -1), (0, 1)] {
                let (x, y) = (c.x as isize + dx, c.y as isize + dy);
                if x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height {
                    map[(y as usize * width + x as usize) * 3 + channel] = T::one();
                }
            }
        }
    }
    Ok(DensePrompt { map: Tensor::from_vec(&[height, width, 3], map)? })
}

/// 4-connected components of `mask`, each as row-major pixel indices.
/// Components are ordered by their first pixel in row-major order.
pub fn connected_components(mask: &BinaryMask) -> Vec<Vec<usize>> {
    let (h, w) = (mask.height(), mask.width());
    let bits = mask.bits();
    let mut seen = vec![false; h * w];
    let mut comps = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !bits[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        seen[start] = true;
        stack.push(start);
        while let Some(p) = stack.pop() {
            comp.push(p);
            let (x, y) = (p % w, p / w);
            let mut visit = |q: usize| {
                if bits[q] && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
        comp.sort_unstable();
        comps.push(comp);
    }
    comps
}

fn intersect(f: &[f64], q: usize, p: usize) -> f64 {
    ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
}

/// Exact squared Euclidean distance transform along one line
/// (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s = intersect(f, q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = intersect(f, q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared distance from every pixel of `inside` to the nearest pixel
/// outside it, where everything beyond the image border counts as outside.
/// Returned on the `(h + 2) x (w + 2)` padded grid.
fn squared_distance_to_outside(inside: &[bool], h: usize, w: usize) -> Vec<f64> {
    let (ph, pw) = (h + 2, w + 2);
    // larger than any squared distance on the grid, small enough to stay exact
    let far = (2 * (ph * ph + pw * pw) + 1) as f64;
    let mut grid = vec![0f64; ph * pw];
    for y in 0..h {
        for x in 0..w {
            if inside[y * w + x] {
                grid[(y + 1) * pw + x + 1] = far;
            }
        }
    }
    let mut col = vec![0f64; ph];
    let mut out = vec![0f64; ph.max(pw)];
    for x in 0..pw {
        for y in 0..ph {
            col[y] = grid[y * pw + x];
        }
        edt_1d(&col, &mut out[..ph]);
        for y in 0..ph {
            grid[y * pw + x] = out[y];
        }
    }
    let mut row = vec![0f64; pw];
    for y in 0..ph {
        row.copy_from_slice(&grid[y * pw..][..pw]);
        edt_1d(&row, &mut out[..pw]);
        grid[y * pw..][..pw].copy_from_slice(&out[..pw]);
    }
    grid
}

/// Places the next corrective click.
///
/// The error region `pred XOR gt` is split into 4-connected components; the
/// largest one wins (ties: earliest first pixel in row-major order). The click
/// goes to the pixel of that component farthest from its complement (ties:
/// earliest in row-major order). It is positive when the component is
/// missed foreground. Returns `None` when the masks agree everywhere.
pub fn next_click(pred: &BinaryMask, gt: &BinaryMask) -> Result<Option<Click>> {
    let err = pred.xor(gt)?;
    let comps = connected_components(&err);
    let Some(best) = comps.iter().fold(None::<&Vec<usize>>, |acc, c| match acc {
        Some(a) if a.len() >= c.len() => Some(a),
        _ => Some(c),
    }) else {
        return Ok(None);
    };
    let (h, w) = (err.height(), err.width());
    // distance transform over the component's bounding box plus a margin
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for &p in best {
        let (x, y) = (p % w, p / w);
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let (bw, bh) = (x1 - x0 + 1, y1 - y0 + 1);
    let mut inside = vec![false; bw * bh];
    for &p in best {
        inside[(p / w - y0) * bw + (p % w - x0)] = true;
    }
    let dist = squared_distance_to_outside(&inside, bh, bw);
    let mut best_px = best[0];
    let mut best_d = -1.0;
    for &p in best {
        let d = dist[(p / w - y0 + 1) * (bw + 2) + (p % w - x0 + 1)];
        if d > best_d {
            best_d = d;
            best_px = p;
        }
    }
    let (x, y) = (best_px % w, best_px / w);
    debug_assert!(x < w && y < h);
    let polarity = if gt.get(x, y) { Polarity::Positive } else { Polarity::Negative };
    Ok(Some(Click::new(x, y, polarity)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(h: usize, w: usize, lo: usize, hi: usize) -> BinaryMask {
        let mut m = BinaryMask::new(h, w);
        for y in lo..=hi {
            for x in lo..=hi {
                m.set(x, y, true);
            }
        }
        m
    }

    #[test]
    fn single_click_disk_has_five_pixels() {
        let mut cs = ClickSet::new();
        cs.push(Click::new(10, 10, Polarity::Positive)).unwrap();
        let p = rasterize::<f32>(&cs, &Tensor::zeros(&[32, 32]), 32, 32).unwrap();
        assert_eq!(p.channel(1).iter().filter(|&&v| v == 1.0).count(), 5);
        assert!(p.channel(2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn corner_click_is_clipped() {
        let mut cs = ClickSet::new();
        cs.push(Click::new(0, 0, Polarity::Negative)).unwrap();
        let p = rasterize::<f64>(&cs, &Tensor::zeros(&[8, 8]), 8, 8).unwrap();
        assert_eq!(p.channel(2).iter().filter(|&&v| v == 1.0).count(), 3);
    }

    #[test]
    fn empty_prompt_is_all_zero() {
        let p = rasterize::<f32>(&ClickSet::new(), &Tensor::zeros(&[8, 8]), 8, 8).unwrap();
        assert!(p.map.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rasterize_rejects_shape_mismatch_and_out_of_bounds() {
        assert!(rasterize::<f32>(&ClickSet::new(), &Tensor::zeros(&[4, 4]), 8, 8).is_err());
        let mut cs = ClickSet::new();
        cs.push(Click::new(8, 0, Polarity::Positive)).unwrap();
        assert!(rasterize::<f32>(&cs, &Tensor::zeros(&[8, 8]), 8, 8).is_err());
    }

    #[test]
    fn square_gives_centre_click() {
        let gt = square(10, 10, 2, 6);
        let c = next_click(&BinaryMask::new(10, 10), &gt).unwrap().unwrap();
        assert_eq!((c.x, c.y, c.polarity), (4, 4, Polarity::Positive));
    }

    #[test]
    fn single_extra_pixel_gives_negative_click() {
        let gt = square(10, 10, 2, 6);
        let mut pred = gt.clone();
        pred.set(8, 1, true);
        let c = next_click(&pred, &gt).unwrap().unwrap();
        assert_eq!((c.x, c.y, c.polarity), (8, 1, Polarity::Negative));
    }

    #[test]
    fn largest_component_wins() {
        // 12-pixel (3x4) false negative and a 3-pixel false positive
        let mut gt = BinaryMask::new(10, 10);
        for y in 1..4 {
            for x in 5..9 {
                gt.set(x, y, true);
            }
        }
        let mut pred = gt.clone();
        for y in 1..4 {
            for x in 5..9 {
                pred.set(x, y, false);
            }
        }
        for x in 0..3 {
            pred.set(x, 8, true);
        }
        let c = next_click(&pred, &gt).unwrap().unwrap();
        assert!((5..9).contains(&c.x) && (1..4).contains(&c.y));
        assert_eq!(c.polarity, Polarity::Positive);
    }

    #[test]
    fn agreement_yields_no_click() {
        let gt = square(6, 6, 1, 3);
        assert_eq!(next_click(&gt, &gt).unwrap(), None);
    }

    #[test]
    fn pad_counts() {
        let mut cs = ClickSet::new();
        for i in 0..3 {
            cs.push(Click::new(i, 0, Polarity::Positive)).unwrap();
        }
        let p = pad(&cs, N1).unwrap();
        assert_eq!(p.positive_valid, [vec![true; 3], vec![false; 21]].concat());
        assert_eq!(p.negative_valid, vec![false; 24]);
        assert_eq!(p.positive[5], PaddedClicks::SENTINEL);

        let empty = pad(&ClickSet::new(), N1).unwrap();
        assert_eq!(empty.num_valid(), 0);

        let mut full = ClickSet::new();
        for i in 0..24 {
            full.push(Click::new(i, 1, Polarity::Positive)).unwrap();
        }
        assert!(pad(&full, N1).unwrap().positive_valid.iter().all(|&v| v));
        full.push(Click::new(24, 1, Polarity::Positive)).unwrap();
        assert!(pad(&full, N1).is_err());
    }

    #[test]
    fn push_rejects_duplicates_and_pop_follows_order() {
        let mut cs = ClickSet::new();
        cs.push(Click::new(1, 1, Polarity::Positive)).unwrap();
        cs.push(Click::new(2, 2, Polarity::Negative)).unwrap();
        cs.push(Click::new(3, 3, Polarity::Positive)).unwrap();
        assert!(cs.push(Click::new(1, 1, Polarity::Positive)).is_err());
        assert_eq!(cs.pop().unwrap().order, 2);
        assert_eq!(cs.pop().unwrap().polarity, Polarity::Negative);
        assert_eq!(cs.history().len(), 1);
    }

    #[test]
    fn click_json_shape() {
        let c: Click = serde_json::from_str(r#"{"x": 3, "y": 4, "polarity": "neg"}"#).unwrap();
        assert_eq!(c, Click::new(3, 4, Polarity::Negative));
    }
}
