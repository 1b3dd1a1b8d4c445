//! Temporal-consistency and edit-fidelity metrics.
//!
//! Tem-Con here is a pixel-feature surrogate: cosine similarity of
//! mean-centred 4×4 patch means between adjacent frames. Edit accuracy
//! uses ground-truth effect statistics from [`crate::synthvid`].

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{ensure, Result};
use crate::localadapt::EditMask;
use crate::numkit::Tensor;
use crate::synthvid::{EditTask, RenderedFrame};
use crate::video::FrameSequence;

pub const FEATURE_PATCH: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlowConfig {
    pub block: usize,
    pub radius: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self { block: 4, radius: 4 }
    }
}

/// Per-block integer displacement `d` with `b(p) ≈ a(p − d)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowField {
    pub block: usize,
    pub radius: usize,
    pub rows: usize,
    pub cols: usize,
    pub vectors: Vec<(i32, i32)>,
}

impl FlowField {
    pub fn at_block(&self, by: usize, bx: usize) -> (i32, i32) {
        self.vectors[by * self.cols + bx]
    }

    /// Displacement for pixel `(y, x)`.
    pub fn at_pixel(&self, y: usize, x: usize) -> (i32, i32) {
        self.at_block(y / self.block, x / self.block)
    }
}

fn check_frame(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    let s = t.shape();
    ensure!(s.len() == 3 && s[2] == 3, Dimension, "{what}: expected [H, W, 3], got {s:?}");
    ensure!(
        t.data().iter().all(|v| (0.0..=1.0).contains(v)),
        Range,
        "{what}: pixel values outside [0, 1]"
    );
    Ok((s[0], s[1]))
}

#[inline]
fn clamped(img: &Tensor, w: usize, h: usize, y: i64, x: i64, c: usize) -> f32 {
    let yy = y.clamp(0, h as i64 - 1) as usize;
    let xx = x.clamp(0, w as i64 - 1) as usize;
    img.data()[(yy * w + xx) * 3 + c]
}

/// Exhaustive block matching by sum of absolute differences. Reads outside
/// the frame clamp to the nearest edge pixel. Ties go to the smallest
/// `|dx| + |dy|`, then to the lexicographically smallest `(dx, dy)`.
pub fn block_flow(src_a: &Tensor, src_b: &Tensor, block: usize, radius: usize) -> Result<FlowField> {
    src_a.ensure_shape(src_b, "block_flow")?;
    let (h, w) = check_frame(src_a, "block_flow")?;
    check_frame(src_b, "block_flow")?;
    ensure!(block > 0 && h % block == 0 && w % block == 0, Contract, "block {block} must divide {h}x{w}");
    ensure!(radius < h.min(w), Contract, "radius {radius} must be below image size {}", h.min(w));
    let (rows, cols) = (h / block, w / block);
    let r = radius as i32;
    let vectors = (0..rows * cols)
        .into_par_iter()
        .map(|bi| {
            let (by, bx) = (bi / cols, bi % cols);
            let mut best = (f32::INFINITY, i32::MAX, (0i32, 0i32));
            for dx in -r..=r {
                for dy in -r..=r {
                    let mut sad = 0.0f32;
                    for y in by * block..(by + 1) * block {
                        for x in bx * block..(bx + 1) * block {
                            for c in 0..3 {
                                let b = src_b.data()[(y * w + x) * 3 + c];
                                let a = clamped(src_a, w, h, y as i64 - dy as i64, x as i64 - dx as i64, c);
                                sad += (a - b).abs();
                            }
                        }
                    }
                    let l1 = dx.abs() + dy.abs();
                    let key = (sad, l1, (dx, dy));
                    if key.0 < best.0 || (key.0 == best.0 && (key.1, key.2) < (best.1, best.2)) {
                        best = key;
                    }
                }
            }
            best.2
        })
        .collect();
    Ok(FlowField {
        block,
        radius,
        rows,
        cols,
        vectors,
    })
}

/// `out(p) = img(p − d(p))`, edge-clamped.
pub fn warp(img: &Tensor, flow: &FlowField) -> Result<Tensor> {
    let s = img.shape();
    ensure!(
        s.len() == 3 && s[0] == flow.rows * flow.block && s[1] == flow.cols * flow.block,
        Dimension,
        "warp: image {s:?} does not match flow grid"
    );
    let (h, w) = (s[0], s[1]);
    let mut out = Vec::with_capacity(img.len());
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = flow.at_pixel(y, x);
            for c in 0..3 {
                out.push(clamped(img, w, h, y as i64 - dy as i64, x as i64 - dx as i64, c));
            }
        }
    }
    Tensor::new(s.to_vec(), out)
}

/// Mean-centred grid of patch means.
pub fn frame_feature(img: &Tensor) -> Result<Vec<f64>> {
    let (h, w) = check_frame(img, "frame_feature")?;
    let p = FEATURE_PATCH;
    ensure!(h % p == 0 && w % p == 0, Dimension, "frame {h}x{w} not divisible into {p}x{p} patches");
    let mut f = vec![0.0f64; (h / p) * (w / p) * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                f[((y / p) * (w / p) + x / p) * 3 + c] += f64::from(img.data()[(y * w + x) * 3 + c]);
            }
        }
    }
    let n = (p * p) as f64;
    f.iter_mut().for_each(|v| *v /= n);
    let mean = f.iter().sum::<f64>() / f.len() as f64;
    f.iter_mut().for_each(|v| *v -= mean);
    Ok(f)
}

/// Cosine similarity; two zero vectors count as identical.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let aa: f64 = a.iter().map(|x| x * x).sum();
    let bb: f64 = b.iter().map(|x| x * x).sum();
    if aa == 0.0 && bb == 0.0 {
        1.0
    } else if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        (dot / (aa * bb).sqrt()).clamp(-1.0, 1.0)
    }
}

/// Mean adjacent-pair cosine similarity and the `N − 1` pair series.
pub fn tem_con(seq: &FrameSequence) -> Result<(f64, Vec<f64>)> {
    ensure!(seq.len() >= 2, Contract, "tem_con needs at least two frames, got {}", seq.len());
    let feats = seq.frames().par_iter().map(frame_feature).collect::<Result<Vec<_>>>()?;
    let series: Vec<f64> = feats.windows(2).map(|w| cosine(&w[0], &w[1])).collect();
    Ok((series.iter().sum::<f64>() / series.len() as f64, series))
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| f64::from(x - y).powi(2))
        .sum::<f64>()
        / a.len() as f64
}

/// Flow-warped error between adjacent edited frames, with flow estimated
/// on the source. Returns the mean and the `N − 1` series.
pub fn pixel_mse(edited: &FrameSequence, source: &FrameSequence, flow: FlowConfig) -> Result<(f64, Vec<f64>)> {
    ensure!(
        edited.len() == source.len(),
        Contract,
        "edited has {} frames, source {}",
        edited.len(),
        source.len()
    );
    ensure!(edited.len() >= 2, Contract, "pixel_mse needs at least two frames");
    ensure!(
        edited.frame(0).shape() == source.frame(0).shape(),
        Dimension,
        "edited and source frame shapes differ"
    );
    edited.ensure_unit_range("edited")?;
    source.ensure_unit_range("source")?;
    let series = (1..edited.len())
        .into_par_iter()
        .map(|t| {
            let f = block_flow(source.frame(t - 1), source.frame(t), flow.block, flow.radius)?;
            let warped = warp(edited.frame(t - 1), &f)?;
            // Max possible MSE on [0, 1] pixels is 1.
            Ok(mse(edited.frame(t), &warped) / 1.0)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok((series.iter().sum::<f64>() / series.len() as f64, series))
}

/// Whether one edited frame moved at least halfway from the source
/// statistic toward the ground-truth statistic.
pub fn frame_edit_success(task: &EditTask, edited: &Tensor, frame: &RenderedFrame) -> bool {
    let s_src = task.statistic(&frame.image, frame);
    let s_gt = task.statistic(&task.apply(frame), frame);
    let s_ed = task.statistic(edited, frame);
    let denom = s_gt - s_src;
    if denom.abs() < 1e-9 {
        (s_ed - s_gt).abs() <= 1e-3
    } else {
        (s_ed - s_src) / denom >= 0.5
    }
}

/// Fraction of frames whose effect statistic passed the halfway point.
/// `truth` supplies per-frame ground truth (masks, background, shapes).
pub fn edit_accuracy(edited: &FrameSequence, task: &EditTask, truth: &[RenderedFrame]) -> Result<(f64, Vec<bool>)> {
    ensure!(
        truth.len() == edited.len(),
        Contract,
        "{} ground-truth frames for {} edited frames",
        truth.len(),
        edited.len()
    );
    edited.ensure_unit_range("edited")?;
    for (i, (e, t)) in edited.frames().iter().zip(truth).enumerate() {
        ensure!(
            e.shape() == t.image.shape(),
            Dimension,
            "frame {i}: edited {:?} vs truth {:?}",
            e.shape(),
            t.image.shape()
        );
    }
    let series: Vec<bool> = edited
        .frames()
        .par_iter()
        .zip(truth)
        .map(|(e, t)| frame_edit_success(task, e, t))
        .collect();
    let acc = series.iter().filter(|b| **b).count() as f64 / series.len() as f64;
    Ok((acc, series))
}

/// Flicker near mask edges: the per-frame mean absolute residual
/// `|edited − reference|` over the `radius` boundary band of that frame's
/// mask, then its population variance across frames.
pub fn band_flicker(edited: &FrameSequence, reference: &FrameSequence, masks: &[EditMask], radius: usize) -> Result<f64> {
    ensure!(
        edited.len() == reference.len() && edited.len() == masks.len(),
        Contract,
        "band_flicker: {} edited, {} reference, {} masks",
        edited.len(),
        reference.len(),
        masks.len()
    );
    ensure!(!edited.is_empty(), Contract, "band_flicker on an empty sequence");
    let per_frame: Vec<f64> = (0..edited.len())
        .map(|f| {
            let band = masks[f].boundary_band(radius);
            let (e, r) = (edited.frame(f).data(), reference.frame(f).data());
            let (mut sum, mut n) = (0.0f64, 0usize);
            for (p, &b) in band.data().iter().enumerate() {
                if b != 0 {
                    for c in 0..3 {
                        sum += f64::from((e[p * 3 + c] - r[p * 3 + c]).abs());
                    }
                    n += 3;
                }
            }
            if n == 0 {
                0.0
            } else {
                sum / n as f64
            }
        })
        .collect();
    let m = per_frame.iter().sum::<f64>() / per_frame.len() as f64;
    Ok(per_frame.iter().map(|v| (v - m).powi(2)).sum::<f64>() / per_frame.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub tem_con: f64,
    pub tem_con_series: Vec<f64>,
    pub pixel_mse: f64,
    pub pixel_mse_series: Vec<f64>,
    pub edit_accuracy: Option<f64>,
    pub edit_series: Vec<bool>,
    pub flow: FlowConfig,
}

impl MetricsReport {
    pub fn evaluate(
        edited: &FrameSequence,
        source: &FrameSequence,
        task: Option<(&EditTask, &[RenderedFrame])>,
        flow: FlowConfig,
    ) -> Result<Self> {
        let (tc, tcs) = tem_con(edited)?;
        let (pm, pms) = pixel_mse(edited, source, flow)?;
        let (acc, series) = match task {
            Some((t, truth)) => {
                let (a, s) = edit_accuracy(edited, t, truth)?;
                (Some(a), s)
            }
            None => (None, Vec::new()),
        };
        Ok(Self {
            tem_con: tc,
            tem_con_series: tcs,
            pixel_mse: pm,
            pixel_mse_series: pms,
            edit_accuracy: acc,
            edit_series: series,
            flow,
        })
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<36} {:>10}", "metric", "value");
        let _ = writeln!(s, "{:<36} {:>10.6}", "Tem-Con (pixel-feature surrogate)", self.tem_con);
        let _ = writeln!(s, "{:<36} {:>10.6}", "Pixel-MSE", self.pixel_mse);
        match self.edit_accuracy {
            Some(a) => {
                let _ = writeln!(s, "{:<36} {:>10.6}", "edit accuracy", a);
            }
            None => {
                let _ = writeln!(s, "{:<36} {:>10}", "edit accuracy", "n/a");
            }
        }
        let _ = writeln!(s, "flow: block {} radius {}", self.flow.block, self.flow.radius);
        s
    }

    /// Header row then one summary row.
    pub fn to_csv(&self) -> String {
        let acc = self.edit_accuracy.map(|a| a.to_string()).unwrap_or_default();
        format!("tem_con,pixel_mse,edit_accuracy\n{},{},{}\n", self.tem_con, self.pixel_mse, acc)
    }

    /// Per-pair series; row `t` holds pair `(t − 1, t)`.
    pub fn series_csv(&self) -> String {
        let mut s = String::from("pair,tem_con,pixel_mse\n");
        for (i, (a, b)) in self.tem_con_series.iter().zip(&self.pixel_mse_series).enumerate() {
            let _ = writeln!(s, "{},{a},{b}", i + 1);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::EditInstruction;
    use crate::error::Error;
    use crate::rng::Rng;
    use crate::synthvid::{render_video, Motion, SceneSpec, ShapeKind, ShapeSpec};
    use proptest::prelude::*;
    use crate::localadapt::MaskSource;
    use rand::SeedableRng;

    fn rand_frame(n: usize, seed: u64) -> Tensor {
        let mut rng = Rng::seed_from_u64(seed);
        Tensor::uniform([n, n, 3], 0.5, &mut rng).map(|v| v + 0.5)
    }

    /// `b(y, x) = a(y − sy, x − sx)` with edge clamping.
    fn shifted(a: &Tensor, sx: i64, sy: i64) -> Tensor {
        let (h, w) = (a.shape()[0], a.shape()[1]);
        let mut out = Vec::new();
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                for c in 0..3 {
                    out.push(clamped(a, w, h, y - sy, x - sx, c));
                }
            }
        }
        Tensor::new(vec![h, w, 3], out).unwrap()
    }

    fn seq(frames: Vec<Tensor>) -> FrameSequence {
        FrameSequence::new(frames).unwrap()
    }

    #[test]
    fn tem_con_extremes() {
        let a = rand_frame(16, 1);
        let (v, s) = tem_con(&seq(vec![a.clone(), a.clone(), a.clone()])).unwrap();
        assert_eq!(v, 1.0);
        assert_eq!(s.len(), 2);
        let (v, _) = tem_con(&seq(vec![a.clone(), a.map(|x| 1.0 - x)])).unwrap();
        assert!((v + 1.0).abs() < 1e-12);
        let flat = Tensor::full([8, 8, 3], 0.3);
        assert_eq!(tem_con(&seq(vec![flat.clone(), flat])).unwrap().0, 1.0);
        assert!(matches!(tem_con(&seq(vec![a])), Err(Error::Contract(_))));
    }

    #[test]
    fn tem_con_matches_direct_oracle() {
        let frames: Vec<Tensor> = (0..5).map(|i| rand_frame(8, 10 + i)).collect();
        let oracle: Vec<f64> = frames
            .windows(2)
            .map(|w| {
                let feat = |t: &Tensor| {
                    let mut v = Vec::new();
                    for py in 0..2 {
                        for px in 0..2 {
                            for c in 0..3 {
                                let mut s = 0.0f64;
                                for y in 0..4 {
                                    for x in 0..4 {
                                        s += f64::from(t.data()[((py * 4 + y) * 8 + px * 4 + x) * 3 + c]);
                                    }
                                }
                                v.push(s / 16.0);
                            }
                        }
                    }
                    let m = v.iter().sum::<f64>() / v.len() as f64;
                    v.into_iter().map(|x| x - m).collect::<Vec<_>>()
                };
                let (a, b) = (feat(&w[0]), feat(&w[1]));
                let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
                let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                dot / (na * nb)
            })
            .collect();
        let (mean, series) = tem_con(&seq(frames)).unwrap();
        for (a, b) in series.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!((mean - oracle.iter().sum::<f64>() / 4.0).abs() < 1e-6);
    }

    #[test]
    fn tem_con_is_one_for_positive_scaling_only() {
        let a = rand_frame(8, 3);
        // Positive proportional features: affine brightening about the mean.
        let m = a.mean() as f32;
        let b = a.map(|v| m + 0.5 * (v - m));
        assert!((tem_con(&seq(vec![a.clone(), b])).unwrap().0 - 1.0).abs() < 1e-9);
        let c = rand_frame(8, 4);
        assert!(tem_con(&seq(vec![a, c])).unwrap().0 < 1.0 - 1e-6);
    }

    #[test]
    fn flow_cases() {
        let a = rand_frame(16, 5);
        let f = block_flow(&a, &a, 4, 4).unwrap();
        assert!(f.vectors.iter().all(|v| *v == (0, 0)));
        let b = shifted(&a, 2, -1);
        let f = block_flow(&a, &b, 4, 4).unwrap();
        for by in 0..4 {
            for bx in 0..4 {
                if (1..3).contains(&by) && (1..3).contains(&bx) {
                    assert_eq!(f.at_block(by, bx), (2, -1));
                }
            }
        }
        let far = shifted(&a, 7, 0);
        let f = block_flow(&a, &far, 4, 2).unwrap();
        assert!(f.vectors.iter().all(|(dx, dy)| dx.abs() <= 2 && dy.abs() <= 2));
        assert!(matches!(block_flow(&a, &a, 4, 16), Err(Error::Contract(_))));
        assert!(matches!(block_flow(&a, &a, 5, 2), Err(Error::Contract(_))));
    }

    #[test]
    fn flow_ties_prefer_small_then_lexicographic() {
        let flat = Tensor::full([8, 8, 3], 0.4);
        assert!(block_flow(&flat, &flat, 4, 3).unwrap().vectors.iter().all(|v| *v == (0, 0)));
        // A horizontal stripe pattern is invariant to dx shifts of its period.
        let mut a = Tensor::zeros([16, 16, 3]);
        for y in 0..16 {
            for x in 0..16 {
                let v = if x % 2 == 0 { 0.9 } else { 0.1 };
                a.data_mut()[(y * 16 + x) * 3..(y * 16 + x) * 3 + 3].fill(v);
            }
        }
        let b = shifted(&a, 1, 0);
        let f = block_flow(&a, &b, 4, 3).unwrap();
        // Interior block: candidates dx=-1 and dx=1 tie; lexicographic order picks -1.
        assert_eq!(f.at_block(0, 1), (-1, 0));
        assert_eq!(block_flow(&a, &b, 4, 3).unwrap(), f);
    }

    #[test]
    fn pixel_mse_cases() {
        let a = rand_frame(16, 6);
        let still = seq(vec![a.clone(); 4]);
        assert_eq!(pixel_mse(&still, &still, FlowConfig::default()).unwrap().0, 0.0);

        // Rigid motion of a pattern with margins so edge clamping is exact.
        let mut base = Tensor::full([24, 24, 3], 0.5);
        let inner = rand_frame(8, 7);
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..3 {
                    base.data_mut()[((y + 8) * 24 + x + 8) * 3 + c] = inner.data()[(y * 8 + x) * 3 + c];
                }
            }
        }
        let frames: Vec<Tensor> = (0..4).map(|i| shifted(&base, i, -(i / 2))).collect();
        let moving = seq(frames);
        assert!(pixel_mse(&moving, &moving, FlowConfig::default()).unwrap().0 < 1e-6);

        // Alternating inversion on a static source: brute-force oracle.
        let bin = a.map(|v| if v > 0.5 { 1.0 } else { 0.0 });
        let edited = seq(vec![bin.clone(), bin.map(|v| 1.0 - v), bin.clone()]);
        let src = seq(vec![a.clone(); 3]);
        let oracle: f64 = {
            let inv = bin.map(|v| 1.0 - v);
            let d: f64 = bin.data().iter().zip(inv.data()).map(|(x, y)| f64::from(x - y).powi(2)).sum();
            d / bin.len() as f64
        };
        let (v, _) = pixel_mse(&edited, &src, FlowConfig::default()).unwrap();
        assert!((v - oracle).abs() < 1e-12);
        assert_eq!(v, 1.0);

        let short = seq(vec![a.clone(); 2]);
        assert!(matches!(pixel_mse(&short, &src, FlowConfig::default()), Err(Error::Contract(_))));
        let bad = seq(vec![a.map(|v| v * 2.0); 3]);
        assert!(matches!(pixel_mse(&bad, &src, FlowConfig::default()), Err(Error::Range(_))));
    }

    fn scene() -> SceneSpec {
        SceneSpec {
            background: 1,
            bg_colors: [[0.3, 0.3, 0.35], [0.6, 0.55, 0.5]],
            shapes: vec![ShapeSpec {
                kind: ShapeKind::Circle,
                color: [0.9, 0.2, 0.1],
                size: 5.0,
                start: (10.0, 12.0),
                motion: Motion::Linear { vx: 0.5, vy: 0.0 },
            }],
            resolution: 32,
            frames: 6,
            seed: 2,
            exit: false,
        }
    }

    #[test]
    fn edit_accuracy_cases() {
        let v = render_video(&scene()).unwrap();
        for text in ["recolor_fg:0.6", "darken_bg:0.4", "swap_shape:2", "invert_style", "add_glow:0.8", "brighten_bg:0.5"] {
            let task = EditTask::new(EditInstruction::parse(text).unwrap());
            let gt: Vec<Tensor> = v.frames.iter().map(|f| task.apply(f)).collect();
            assert_eq!(edit_accuracy(&seq(gt.clone()), &task, &v.frames).unwrap().0, 1.0, "{text}");
            assert_eq!(edit_accuracy(&v.sequence(), &task, &v.frames).unwrap().0, 0.0, "{text}");
            let half: Vec<Tensor> = (0..6).map(|i| if i % 2 == 0 { gt[i].clone() } else { v.frames[i].image.clone() }).collect();
            assert_eq!(edit_accuracy(&seq(half), &task, &v.frames).unwrap().0, 0.5, "{text}");
        }
        let task = EditTask::new(EditInstruction::parse("invert_style").unwrap());
        assert!(matches!(edit_accuracy(&v.sequence(), &task, &v.frames[..3]), Err(Error::Contract(_))));
    }

    #[test]
    fn report_formats() {
        let v = render_video(&scene()).unwrap();
        let task = EditTask::new(EditInstruction::parse("invert_style").unwrap());
        let r = MetricsReport::evaluate(&v.sequence(), &v.sequence(), Some((&task, &v.frames)), FlowConfig::default()).unwrap();
        assert!(r.to_csv().starts_with("tem_con,pixel_mse,edit_accuracy\n"));
        assert_eq!(r.tem_con_series.len(), 5);
        assert!(r.to_table().contains("Tem-Con (pixel-feature surrogate)"));
        assert_eq!(r.series_csv().lines().count(), 6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn flow_recovers_shifts(dx in -3i64..=3, dy in -3i64..=3, seed in 0u64..1000) {
            let a = rand_frame(16, seed);
            let b = shifted(&a, dx, dy);
            let f = block_flow(&a, &b, 4, 3).unwrap();
            // Blocks whose source window stays in frame.
            prop_assert_eq!(f.at_block(1, 1), (dx as i32, dy as i32));
            prop_assert_eq!(f.at_block(2, 2), (dx as i32, dy as i32));
        }

        #[test]
        fn tem_con_bounded(seed in 0u64..1000) {
            let frames: Vec<Tensor> = (0..3).map(|i| rand_frame(8, seed * 7 + i)).collect();
            let (v, _) = tem_con(&seq(frames)).unwrap();
            prop_assert!((-1.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn band_flicker_oracle() {
        let n = 8;
        let mask = EditMask::from_fn(n, n, MaskSource::GroundTruth, |y, x| (2..6).contains(&y) && (2..6).contains(&x));
        let band = mask.boundary_band(1);
        let reference = FrameSequence::new(vec![Tensor::zeros([n, n, 3]); 2]).unwrap();
        // Frame 0 exact, frame 1 off by 0.2 on every band pixel: residuals 0 and 0.2, variance 0.01.
        let off = Tensor::new([n, n, 3], (0..n * n * 3).map(|i| if band.data()[i / 3] != 0 { 0.2 } else { 0.0 }).collect()).unwrap();
        let edited = FrameSequence::new(vec![Tensor::zeros([n, n, 3]), off]).unwrap();
        let v = band_flicker(&edited, &reference, &[mask.clone(), mask.clone()], 1).unwrap();
        assert!((v - 0.01).abs() < 1e-9, "{v}");
        assert_eq!(band_flicker(&reference, &reference, &[mask.clone(), mask.clone()], 1).unwrap(), 0.0);
        assert!(band_flicker(&reference, &reference, &[mask], 1).is_err());
    }
}
