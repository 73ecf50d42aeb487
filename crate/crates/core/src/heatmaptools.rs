//! Heatmap post-processing: region pooling, translation averaging, sliding
//! windows over large images, pattern masking and rendering.

use crate::error::{Error, Result};
use crate::explain::{Explainer, Heatmap};
use crate::network::Network;
use crate::tensor::{spatial_dims, Tensor};

/// Assignment of every input feature to exactly one region.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionPartition {
    labels: Vec<usize>,
    region_count: usize,
}

impl RegionPartition {
    pub fn new(labels: Vec<usize>, region_count: usize) -> Result<Self> {
        if let Some((i, &r)) = labels.iter().enumerate().find(|(_, &r)| r >= region_count) {
            return Err(Error::invalid(format!(
                "feature {i} assigned to region {r}, but only {region_count} regions exist"
            )));
        }
        Ok(RegionPartition {
            labels,
            region_count,
        })
    }

    pub fn single(features: usize) -> Self {
        RegionPartition {
            labels: vec![0; features],
            region_count: 1,
        }
    }

    /// One region per spatial location, summing over channels (e.g. RGB).
    pub fn per_pixel(shape: &[usize]) -> Self {
        let (c, h, w) = spatial_dims(shape);
        let labels = (0..c).flat_map(|_| 0..h * w).collect();
        RegionPartition {
            labels,
            region_count: h * w,
        }
    }

    /// Four quadrants in row-major order (top-left, top-right, bottom-left,
    /// bottom-right); the lower/right halves take the middle row/column.
    pub fn quadrants(shape: &[usize]) -> Self {
        let (c, h, w) = spatial_dims(shape);
        let mut labels = Vec::with_capacity(c * h * w);
        for _ in 0..c {
            for y in 0..h {
                for x in 0..w {
                    labels.push(2 * usize::from(2 * y + 1 >= h) + usize::from(2 * x + 1 >= w));
                }
            }
        }
        RegionPartition {
            labels,
            region_count: 4,
        }
    }

    /// Region 0 is the box `[top, bottom) × [left, right)`, region 1 its context.
    pub fn bounding_box(
        shape: &[usize],
        top: usize,
        left: usize,
        bottom: usize,
        right: usize,
    ) -> Self {
        let (c, h, w) = spatial_dims(shape);
        let mut labels = Vec::with_capacity(c * h * w);
        for _ in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let inside = (top..bottom).contains(&y) && (left..right).contains(&x);
                    labels.push(usize::from(!inside));
                }
            }
        }
        RegionPartition {
            labels,
            region_count: 2,
        }
    }

    pub fn region_count(&self) -> usize {
        self.region_count
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

/// Sums relevance within each region.
pub fn pool_relevance(heatmap: &Heatmap, partition: &RegionPartition) -> Result<Vec<f64>> {
    let scores = heatmap.scores().data();
    if partition.labels.len() != scores.len() {
        return Err(Error::invalid(format!(
            "partition covers {} features, heatmap has {}",
            partition.labels.len(),
            scores.len()
        )));
    }
    let mut out = vec![0.0; partition.region_count];
    for (&r, &s) in partition.labels.iter().zip(scores) {
        out[r] += s;
    }
    Ok(out)
}

/// A set of integer `(dy, dx)` translations with zero-fill boundaries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TranslationSet {
    shifts: Vec<(isize, isize)>,
}

impl TranslationSet {
    pub fn new(shifts: Vec<(isize, isize)>) -> Result<Self> {
        if shifts.is_empty() {
            return Err(Error::invalid("translation set is empty"));
        }
        Ok(TranslationSet { shifts })
    }

    pub fn identity() -> Self {
        TranslationSet {
            shifts: vec![(0, 0)],
        }
    }

    /// All shifts with `|dy|, |dx| ≤ radius`.
    pub fn around(radius: usize) -> Self {
        let r = radius as isize;
        let shifts = (-r..=r)
            .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
            .collect();
        TranslationSet { shifts }
    }

    pub fn shifts(&self) -> &[(isize, isize)] {
        &self.shifts
    }

    pub fn contains_identity(&self) -> bool {
        self.shifts.contains(&(0, 0))
    }
}

/// Moves content by `(dy, dx)` over the trailing two axes; vacated cells are
/// zero and content leaving the frame is lost.
pub fn translate(t: &Tensor, dy: isize, dx: isize) -> Tensor {
    let (c, h, w) = t.spatial_dims();
    let mut out = Tensor::zeros(t.shape());
    let src = t.data();
    let dst = out.data_mut();
    for ch in 0..c {
        for y in 0..h {
            let sy = y as isize - dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = x as isize - dx;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                dst[(ch * h + y) * w + x] = src[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    out
}

/// `R*(x) = 1/|T| Σ_τ τ⁻¹(R(τ(x)))`.
pub fn translation_average<E: Explainer + ?Sized>(
    explainer: &E,
    network: &Network,
    image: &Tensor,
    class_index: usize,
    shifts: &TranslationSet,
) -> Result<Heatmap> {
    let mut sum: Option<Tensor> = None;
    let mut explained = 0.0;
    let mut method = None;
    for &(dy, dx) in &shifts.shifts {
        let h = explainer.explain(network, &translate(image, dy, dx), class_index)?;
        let back = translate(h.scores(), -dy, -dx);
        explained += h.explained_value();
        method.get_or_insert_with(|| h.method().clone());
        sum = Some(match sum {
            None => back,
            Some(acc) => acc.add(&back)?,
        });
    }
    let n = shifts.shifts.len() as f64;
    let scores = sum.expect("translation set is non-empty").scale(1.0 / n);
    Ok(Heatmap::new(scores, explained / n, method.unwrap()))
}

/// Top-left corners of all windows of size `window` placed with `stride`.
fn window_origins(big: &[usize], window: &[usize], stride: usize) -> Result<Vec<(usize, usize)>> {
    if stride == 0 {
        return Err(Error::invalid("stride must be positive"));
    }
    if big.len() != window.len()
        || big[..big.len().saturating_sub(2)] != window[..window.len().saturating_sub(2)]
    {
        return Err(Error::invalid(format!(
            "image {big:?} is not a larger version of window {window:?}"
        )));
    }
    let (_, bh, bw) = spatial_dims(big);
    let (_, wh, ww) = spatial_dims(window);
    if bh < wh || bw < ww {
        return Err(Error::invalid(format!(
            "image {bh}×{bw} is smaller than the {wh}×{ww} window"
        )));
    }
    let ys: Vec<usize> = (0..=bh - wh).step_by(stride).collect();
    let xs: Vec<usize> = (0..=bw - ww).step_by(stride).collect();
    Ok(ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| (y, x)))
        .collect())
}

fn crop(big: &Tensor, window: &[usize], y0: usize, x0: usize) -> Tensor {
    let (c, bh, bw) = big.spatial_dims();
    let (_, h, w) = spatial_dims(window);
    let mut data = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            let start = (ch * bh + y0 + y) * bw + x0;
            data.extend_from_slice(&big.data()[start..start + w]);
        }
    }
    Tensor::new(window.to_vec(), data).expect("window shape")
}

/// Explains `g(X) = Σ_s f(X[s])` over all window placements `s` by adding
/// each window's heatmap into place. Overlaps accumulate without averaging.
pub fn sliding_window_explain<E: Explainer + ?Sized>(
    explainer: &E,
    network: &Network,
    big_image: &Tensor,
    stride: usize,
    class_index: usize,
) -> Result<Heatmap> {
    let window = network.input_shape();
    let origins = window_origins(big_image.shape(), window, stride)?;
    let (c, bh, bw) = big_image.spatial_dims();
    let (_, h, w) = spatial_dims(window);
    let mut acc = Tensor::zeros(big_image.shape());
    let mut g = 0.0;
    let mut method = None;
    for (y0, x0) in origins {
        let hm = explainer.explain(network, &crop(big_image, window, y0, x0), class_index)?;
        g += hm.explained_value();
        method.get_or_insert_with(|| hm.method().clone());
        let src = hm.scores().data();
        let dst = acc.data_mut();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    dst[(ch * bh + y0 + y) * bw + x0 + x] += src[(ch * h + y) * w + x];
                }
            }
        }
    }
    Ok(Heatmap::new(acc, g, method.unwrap()))
}

/// Number of windows covering each position of the big image.
pub fn window_coverage(big_shape: &[usize], window: &[usize], stride: usize) -> Result<Tensor> {
    let origins = window_origins(big_shape, window, stride)?;
    let (c, bh, bw) = spatial_dims(big_shape);
    let (_, h, w) = spatial_dims(window);
    let mut cov = Tensor::zeros(big_shape);
    let dst = cov.data_mut();
    for (y0, x0) in origins {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    dst[(ch * bh + y0 + y) * bw + x0 + x] += 1.0;
                }
            }
        }
    }
    Ok(cov)
}

/// Display view of a sliding-window heatmap: scores divided by coverage
/// (uncovered positions stay zero).
pub fn coverage_normalized(heatmap: &Heatmap, coverage: &Tensor) -> Result<Tensor> {
    heatmap
        .scores()
        .zip_map(coverage, |s, c| if c > 0.0 { s / c } else { 0.0 })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Normalization {
    /// Divide the clipped-positive heatmap by its maximum.
    Rescale,
    /// Clip at the given percentile (0–100) of the positive part, then rescale.
    ClipPercentile(f64),
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization::ClipPercentile(99.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pattern {
    pub image: Tensor,
    /// Set when the heatmap had no positive relevance; the pattern is zero.
    pub degenerate: bool,
}

/// `P(x) = x ⊙ normalize(R(x))` with negative relevance clipped to zero.
pub fn pattern(image: &Tensor, heatmap: &Heatmap, normalization: Normalization) -> Result<Pattern> {
    heatmap.scores().expect_shape(image.shape())?;
    let positive = heatmap.scores().map(|v| v.max(0.0));
    let scale = match normalization {
        Normalization::Rescale => positive.data().iter().cloned().fold(0.0, f64::max),
        Normalization::ClipPercentile(p) => {
            if !(0.0..=100.0).contains(&p) {
                return Err(Error::invalid(format!("percentile {p} outside [0, 100]")));
            }
            percentile(positive.data(), p)
        }
    };
    if !(scale > 0.0) {
        return Ok(Pattern {
            image: Tensor::zeros(image.shape()),
            degenerate: true,
        });
    }
    let mask = positive.map(|v| (v / scale).min(1.0));
    Ok(Pattern {
        image: image.mul(&mask)?,
        degenerate: false,
    })
}

/// Nearest-rank percentile.
fn percentile(values: &[f64], p: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Colormap {
    /// Blue (negative) through white (zero) to red (positive), symmetric
    /// around zero.
    DivergingRedBlue,
    /// White to red; negative scores render white.
    SequentialRed,
}

/// Renders a heatmap (channels summed) as a binary PPM (P6, maxval 255).
pub fn render_heatmap(heatmap: &Heatmap, colormap: Colormap) -> Vec<u8> {
    let (c, h, w) = heatmap.scores().spatial_dims();
    let plane = h * w;
    let mut pooled = vec![0.0; plane];
    for ch in 0..c {
        for (p, v) in pooled
            .iter_mut()
            .zip(&heatmap.scores().data()[ch * plane..(ch + 1) * plane])
        {
            *p += v;
        }
    }
    let scale = match colormap {
        Colormap::DivergingRedBlue => pooled.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        Colormap::SequentialRed => pooled.iter().fold(0.0f64, |m, &v| m.max(v)),
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * plane);
    for &v in &pooled {
        let t = if scale > 0.0 { v / scale } else { 0.0 };
        let rgb = match colormap {
            Colormap::DivergingRedBlue if t < 0.0 => {
                let g = fade(-t);
                [g, g, 255]
            }
            _ => {
                let g = fade(t.max(0.0));
                [255, g, g]
            }
        };
        out.extend_from_slice(&rgb);
    }
    out
}

/// Channel intensity for the non-dominant channels at strength `t ∈ [0, 1]`.
fn fade(t: f64) -> u8 {
    (255.0 * (1.0 - t.min(1.0))).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explain::{Method, MethodTag, RuleConfig};
    use crate::fixtures;

    fn hm(shape: &[usize], v: Vec<f64>) -> Heatmap {
        Heatmap::new(Tensor::new(shape.to_vec(), v).unwrap(), 0.0, MethodTag::Lrp)
    }

    #[test]
    fn pooling_conserves() {
        let h = hm(&[3, 2, 2], (0..12).map(|i| i as f64 * 0.25 - 1.0).collect());
        let single = pool_relevance(&h, &RegionPartition::single(12)).unwrap();
        assert_eq!(single, vec![h.total()]);
        let px = pool_relevance(&h, &RegionPartition::per_pixel(&[3, 2, 2])).unwrap();
        assert_eq!(px.len(), 4);
        assert_eq!(px.iter().sum::<f64>(), h.total());
        assert_eq!(px[0], -1.0 + 0.0 + 1.0);
    }

    #[test]
    fn partition_errors() {
        assert!(RegionPartition::new(vec![0, 2], 2).is_err());
        let h = hm(&[3], vec![1.0, 2.0, 3.0]);
        assert!(pool_relevance(&h, &RegionPartition::single(2)).is_err());
    }

    #[test]
    fn bounding_box_split() {
        let p = RegionPartition::bounding_box(&[3, 3], 0, 0, 2, 2);
        assert_eq!(p.labels(), &[0, 0, 1, 0, 0, 1, 1, 1, 1]);
    }

    #[test]
    fn translate_zero_fills() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let s = translate(&t, 0, 1);
        assert_eq!(s.data(), &[0.0, 1.0, 2.0, 0.0, 4.0, 5.0]);
        let back = translate(&s, 0, -1);
        assert_eq!(back.data(), &[1.0, 2.0, 0.0, 4.0, 5.0, 0.0]);
    }

    #[test]
    fn translation_identity_is_plain_explanation() {
        let net = fixtures::max_network();
        let x = Tensor::from_vec(vec![0.8, 0.3]);
        let m = Method::Lrp(RuleConfig::alpha_beta(&net, 1.0, 0.0));
        let avg = translation_average(&m, &net, &x, 0, &TranslationSet::identity()).unwrap();
        assert_eq!(avg, m.explain(&net, &x, 0).unwrap());
    }

    #[test]
    fn shifted_out_pixels_contribute_nothing() {
        // An explainer that echoes its input: a pixel pushed out of frame
        // comes back as zero for that shift.
        let echo =
            |_: &Network, x: &Tensor, _: usize| Ok(Heatmap::new(x.clone(), 0.0, MethodTag::Random));
        let net = fixtures::max_network();
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let set = TranslationSet::new(vec![(0, 0), (0, 1)]).unwrap();
        let avg = translation_average(&echo, &net, &x, 0, &set).unwrap();
        assert_eq!(avg.scores().data(), &[1.0, 1.0]);
    }

    #[test]
    fn pattern_cases() {
        let x = Tensor::from_vec(vec![0.2, 0.9, 0.5]);
        let ones = hm(&[3], vec![1.0; 3]);
        assert_eq!(pattern(&x, &ones, Normalization::Rescale).unwrap().image, x);
        let zeros = hm(&[3], vec![0.0; 3]);
        let p = pattern(&x, &zeros, Normalization::Rescale).unwrap();
        assert!(p.degenerate);
        assert_eq!(p.image.data(), &[0.0; 3]);
        let mixed = hm(&[3], vec![-4.0, 2.0, 1.0]);
        let p = pattern(&x, &mixed, Normalization::Rescale).unwrap();
        assert_eq!(p.image.data(), &[0.0, 0.9, 0.25]);
    }

    #[test]
    fn percentile_clip() {
        let x = Tensor::full(&[4], 1.0);
        let h = hm(&[4], vec![1.0, 2.0, 3.0, 100.0]);
        let p = pattern(&x, &h, Normalization::ClipPercentile(75.0)).unwrap();
        assert_eq!(p.image.data(), &[1.0 / 3.0, 2.0 / 3.0, 1.0, 1.0]);
    }

    #[test]
    fn render_cases() {
        let header = b"P6\n2 2\n255\n".len();
        let zero = render_heatmap(&hm(&[2, 2], vec![0.0; 4]), Colormap::DivergingRedBlue);
        assert!(zero[header..].chunks(3).all(|px| px == [255, 255, 255]));

        let one = render_heatmap(
            &hm(&[2, 2], vec![0.0, 0.0, 3.0, 0.0]),
            Colormap::SequentialRed,
        );
        assert_eq!(&one[header + 6..header + 9], &[255, 0, 0]);

        let v = vec![0.5, -1.0, 0.25, 0.0];
        let pos = render_heatmap(&hm(&[2, 2], v.clone()), Colormap::DivergingRedBlue);
        let neg = render_heatmap(
            &hm(&[2, 2], v.iter().map(|x| -x).collect()),
            Colormap::DivergingRedBlue,
        );
        let swapped: Vec<u8> = pos[header..]
            .chunks(3)
            .flat_map(|px| [px[2], px[1], px[0]])
            .collect();
        assert_eq!(&neg[header..], swapped.as_slice());
    }
}
