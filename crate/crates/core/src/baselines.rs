//! Model-agnostic perturbation baselines and the standardized conversion
//! from saliency maps to bounding boxes.
//!
//! Both baselines perturb the image in 8x8-pixel patch units and replace
//! masked patches with black pixels. Occlusion slides one patch at a time;
//! the randomized-mask baseline draws mask combinations with a fixed
//! fraction of patches removed and weights kept cells by the model's score
//! on the masked image.
//!
//! Saliency maps are converted to boxes by one fixed recipe: min-max
//! normalize, threshold at the 90th percentile of non-zero values, extract
//! 8-connected components, drop components under 16 native pixels, rank by
//! mean saliency, keep at most the top 10.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::image::GrayImage;
use crate::scoring::{make_counterfactual, score_sequence};
use crate::services::{bounded_parallel_map, ScoringService};

/// Nonnegative importance field, row-major, at patch-grid or pixel
/// resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub width: u32,
    pub height: u32,
    pub values: Vec<f64>,
}

impl SaliencyMap {
    pub fn new(width: u32, height: u32, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::ZeroDimension { width, height });
        }
        if values.len() != (width as usize) * (height as usize) {
            return Err(Error::BadBufferLength {
                width,
                height,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteSaliency);
        }
        Ok(SaliencyMap {
            width,
            height,
            values,
        })
    }

    /// Render with values min-max scaled to 0..=255 (constant maps go to 0).
    pub fn to_image(&self) -> GrayImage {
        let min = self.values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = self
            .values
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let data: Vec<u8> = if max > min {
            self.values
                .iter()
                .map(|&v| ((v - min) / (max - min) * 255.0 + 0.5).floor() as u8)
                .collect()
        } else {
            vec![0; self.values.len()]
        };
        GrayImage::new(self.width, self.height, data).expect("dims validated")
    }
}

/// Square patch tiling of the working resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch_size: u32,
    pub grid_w: u32,
    pub grid_h: u32,
}

impl PatchGrid {
    /// The patch size must divide both image dimensions.
    pub fn new(image_dims: (u32, u32), patch_size: u32) -> Result<Self> {
        let (w, h) = image_dims;
        if patch_size == 0 || w % patch_size != 0 || h % patch_size != 0 {
            return Err(Error::PatchSize {
                patch: patch_size,
                width: w,
                height: h,
            });
        }
        Ok(PatchGrid {
            patch_size,
            grid_w: w / patch_size,
            grid_h: h / patch_size,
        })
    }

    pub fn cells(&self) -> usize {
        (self.grid_w as usize) * (self.grid_h as usize)
    }

    /// Pixel box of the cell at a row-major index.
    pub fn cell_box(&self, index: usize) -> BBox {
        let cx = (index as u32) % self.grid_w;
        let cy = (index as u32) / self.grid_w;
        BBox::new(
            cx * self.patch_size,
            cy * self.patch_size,
            (cx + 1) * self.patch_size,
            (cy + 1) * self.patch_size,
        )
        .expect("patch boxes are valid")
    }
}

/// Slide a black patch over every grid position and record the clamped
/// total log-probability drop it causes.
pub fn occlusion_map(
    model: &dyn ScoringService,
    img: &GrayImage,
    question: &str,
    forced_text: &str,
    grid: &PatchGrid,
    in_flight: usize,
) -> Result<SaliencyMap> {
    let original = score_sequence(model, img, question, forced_text)?;
    let indices: Vec<usize> = (0..grid.cells()).collect();
    let scored = bounded_parallel_map(&indices, in_flight, |&idx| {
        let run = || -> Result<f64> {
            let cf = make_counterfactual(img, &[grid.cell_box(idx)])?;
            let perturbed = score_sequence(model, &cf.image, question, forced_text)?;
            if original.len() != perturbed.len() {
                return Err(Error::SequenceLengthMismatch {
                    original: original.len(),
                    perturbed: perturbed.len(),
                });
            }
            let drop: f64 = original
                .logprobs()
                .iter()
                .zip(perturbed.logprobs())
                .map(|(o, p)| o - p)
                .sum();
            Ok(drop.max(0.0))
        };
        run().map_err(|e| {
            let b = grid.cell_box(idx);
            Error::Service {
                endpoint: format!("occlusion patch ({}, {})", b.x1(), b.y1()),
                reason: e.to_string(),
            }
        })
    });
    let mut values = Vec::with_capacity(scored.len());
    for v in scored {
        values.push(v?);
    }
    SaliencyMap::new(grid.grid_w, grid.grid_h, values)
}

/// Randomized-mask saliency: draw `n_masks` combinations with exactly
/// `floor(cells * mask_fraction)` patches blacked out, weight each mask by
/// `exp(mean token logprob)` on the masked image, and average the weights
/// over the masks that keep each cell.
#[allow(clippy::too_many_arguments)]
pub fn rise_map(
    model: &dyn ScoringService,
    img: &GrayImage,
    question: &str,
    forced_text: &str,
    grid: &PatchGrid,
    n_masks: usize,
    mask_fraction: f64,
    seed: u64,
    in_flight: usize,
) -> Result<SaliencyMap> {
    if n_masks == 0 {
        return Err(Error::InvalidParams("n_masks must be >= 1".to_string()));
    }
    if !(0.0..=1.0).contains(&mask_fraction) {
        return Err(Error::InvalidParams(format!(
            "mask_fraction = {mask_fraction}"
        )));
    }
    let cells = grid.cells();
    let k = ((cells as f64) * mask_fraction).floor() as usize;
    if k == 0 || k > cells {
        return Err(Error::InvalidParams(format!(
            "mask_fraction {mask_fraction} masks {k} of {cells} cells"
        )));
    }
    // Mask generation is sequential from the seed; scoring may run
    // concurrently afterwards.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masks: Vec<Vec<bool>> = (0..n_masks)
        .map(|_| {
            let mut cells_idx: Vec<u32> = (0..cells as u32).collect();
            // Partial Fisher-Yates: the first k entries become the masked cells.
            for i in 0..k {
                let j = rng.random_range(i as u32..cells as u32) as usize;
                cells_idx.swap(i, j);
            }
            let mut masked = vec![false; cells];
            for &c in &cells_idx[..k] {
                masked[c as usize] = true;
            }
            masked
        })
        .collect();

    let weights = bounded_parallel_map(&masks, in_flight, |masked| {
        let run = || -> Result<f64> {
            let boxes: Vec<BBox> = masked
                .iter()
                .enumerate()
                .filter(|(_, &m)| m)
                .map(|(i, _)| grid.cell_box(i))
                .collect();
            let cf = make_counterfactual(img, &boxes)?;
            let scored = score_sequence(model, &cf.image, question, forced_text)?;
            Ok(scored.mean_logprob().exp())
        };
        run()
    });

    let mut importance = vec![0.0; cells];
    let mut keep_counts = vec![0usize; cells];
    for (mask_idx, w) in weights.into_iter().enumerate() {
        let w = w.map_err(|e| Error::Service {
            endpoint: format!("rise mask {mask_idx}"),
            reason: e.to_string(),
        })?;
        for (cell, &masked) in masks[mask_idx].iter().enumerate() {
            if !masked {
                importance[cell] += w;
                keep_counts[cell] += 1;
            }
        }
    }
    for (imp, &count) in importance.iter_mut().zip(&keep_counts) {
        *imp /= count.max(1) as f64;
    }
    SaliencyMap::new(grid.grid_w, grid.grid_h, importance)
}

/// 90th percentile by linear interpolation at rank `(n-1) * 0.9` over
/// ascending values.
fn percentile90(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    debug_assert!(n > 0);
    let rank = (n - 1) as f64 * 0.9;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    if lo + 1 < n {
        sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac
    } else {
        sorted[lo]
    }
}

/// Convert a saliency map into at most ten bounding boxes at the native
/// resolution. Constant maps produce no boxes.
pub fn saliency_to_boxes(map: &SaliencyMap, native: (u32, u32)) -> Result<Vec<BBox>> {
    if map.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteSaliency);
    }
    let min = map.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = map.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max <= min {
        return Ok(Vec::new());
    }
    let norm: Vec<f64> = map
        .values
        .iter()
        .map(|&v| (v - min) / (max - min))
        .collect();
    let mut nonzero: Vec<f64> = norm.iter().cloned().filter(|&v| v > 0.0).collect();
    nonzero.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let threshold = percentile90(&nonzero);

    // Upscale the normalized map to native resolution by nearest neighbor;
    // the 16-pixel minimum is defined at pixel level.
    let (nw, nh) = native;
    if nw == 0 || nh == 0 {
        return Err(Error::ZeroDimension {
            width: nw,
            height: nh,
        });
    }
    let native_value = |x: u32, y: u32| -> f64 {
        let sx = (x as u64 * map.width as u64 / nw as u64) as usize;
        let sy = (y as u64 * map.height as u64 / nh as u64) as usize;
        norm[sy * map.width as usize + sx]
    };

    // 8-connected components over the thresholded native-resolution mask.
    let idx = |x: u32, y: u32| (y as usize) * (nw as usize) + (x as usize);
    let mut label = vec![usize::MAX; (nw as usize) * (nh as usize)];
    struct Component {
        pixels: u64,
        value_sum: f64,
        min_x: u32,
        min_y: u32,
        max_x: u32,
        max_y: u32,
    }
    let mut components: Vec<Component> = Vec::new();
    let mut stack = Vec::new();
    for y in 0..nh {
        for x in 0..nw {
            if label[idx(x, y)] != usize::MAX || native_value(x, y) < threshold {
                continue;
            }
            let id = components.len();
            components.push(Component {
                pixels: 0,
                value_sum: 0.0,
                min_x: x,
                min_y: y,
                max_x: x,
                max_y: y,
            });
            label[idx(x, y)] = id;
            stack.push((x, y));
            while let Some((cx, cy)) = stack.pop() {
                let c = &mut components[id];
                c.pixels += 1;
                c.value_sum += native_value(cx, cy);
                c.min_x = c.min_x.min(cx);
                c.min_y = c.min_y.min(cy);
                c.max_x = c.max_x.max(cx);
                c.max_y = c.max_y.max(cy);
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dx == 0 && dy == 0 {
                            continue;
                        }
                        let nx = cx as i64 + dx;
                        let ny = cy as i64 + dy;
                        if nx < 0 || ny < 0 || nx >= nw as i64 || ny >= nh as i64 {
                            continue;
                        }
                        let (nx, ny) = (nx as u32, ny as u32);
                        if label[idx(nx, ny)] == usize::MAX && native_value(nx, ny) >= threshold {
                            label[idx(nx, ny)] = id;
                            stack.push((nx, ny));
                        }
                    }
                }
            }
        }
    }

    let mut ranked: Vec<(f64, u64, BBox)> = components
        .iter()
        .filter(|c| c.pixels >= 16)
        .map(|c| {
            let bbox = BBox::new(c.min_x, c.min_y, c.max_x + 1, c.max_y + 1)
                .expect("component boxes are valid");
            (c.value_sum / c.pixels as f64, c.pixels, bbox)
        })
        .collect();
    // Mean saliency descending; ties by larger area, then top-left order.
    ranked.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .expect("finite means")
            .then(b.1.cmp(&a.1))
            .then(a.2.y1().cmp(&b.2.y1()))
            .then(a.2.x1().cmp(&b.2.x1()))
            .then(a.2.y2().cmp(&b.2.y2()))
            .then(a.2.x2().cmp(&b.2.x2()))
    });
    Ok(ranked.into_iter().take(10).map(|(_, _, b)| b).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::samples::Mode;
    use crate::scoring::ScoredSequence;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct EvidenceModel {
        evidence: BBox,
        baseline: f64,
        calls: AtomicUsize,
    }

    impl ScoringService for EvidenceModel {
        fn generate(&self, _: &GrayImage, _: &str, _: Mode) -> Result<String> {
            Ok("yes".to_string())
        }

        fn score(&self, img: &GrayImage, q: &str, forced: &str) -> Result<ScoredSequence> {
            self.calls.fetch_add(1, Ordering::Relaxed);
            let mean = img.mean_in_box(&self.evidence)?;
            let lp = -0.1 - 0.01 * (mean - self.baseline).abs();
            let tokens: Vec<String> = forced.split_whitespace().map(str::to_string).collect();
            let n = tokens.len();
            ScoredSequence::new(q.into(), forced.into(), tokens, vec![lp; n])
        }
    }

    struct ConstantModel;
    impl ScoringService for ConstantModel {
        fn generate(&self, _: &GrayImage, _: &str, _: Mode) -> Result<String> {
            Ok("yes".to_string())
        }
        fn score(&self, _: &GrayImage, q: &str, forced: &str) -> Result<ScoredSequence> {
            let tokens: Vec<String> = forced.split_whitespace().map(str::to_string).collect();
            let n = tokens.len();
            ScoredSequence::new(q.into(), forced.into(), tokens, vec![-0.25; n])
        }
    }

    #[test]
    fn patch_grid_requires_divisibility() {
        assert!(PatchGrid::new((224, 224), 8).is_ok());
        assert!(PatchGrid::new((224, 224), 9).is_err());
        assert!(PatchGrid::new((224, 224), 0).is_err());
        let g = PatchGrid::new((224, 224), 8).unwrap();
        assert_eq!((g.grid_w, g.grid_h), (28, 28));
        // one occlusion pass = 784 patch calls plus the original
        assert_eq!(g.cells(), 784);
    }

    #[test]
    fn occlusion_ignoring_model_gives_zero_map() {
        let img = GrayImage::filled(32, 32, 100).unwrap();
        let grid = PatchGrid::new((32, 32), 8).unwrap();
        let map = occlusion_map(&ConstantModel, &img, "q", "yes", &grid, 1).unwrap();
        assert!(map.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn occlusion_peaks_on_the_evidence_patch() {
        let mut img = GrayImage::filled(32, 32, 20).unwrap();
        let evidence = BBox::new(8, 16, 16, 24).unwrap();
        for y in 16..24 {
            for x in 8..16 {
                img.set(x, y, 250);
            }
        }
        let baseline = img.mean_in_box(&evidence).unwrap();
        let model = EvidenceModel {
            evidence,
            baseline,
            calls: AtomicUsize::new(0),
        };
        let grid = PatchGrid::new((32, 32), 8).unwrap();
        let map = occlusion_map(&model, &img, "q", "yes", &grid, 1).unwrap();
        // patch (1, 2) covers the evidence box exactly
        let peak = 2 * 4 + 1;
        let best = map
            .values
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(best, peak);
        for (i, &v) in map.values.iter().enumerate() {
            if i != peak {
                assert!(v < map.values[peak]);
            }
        }
        // one original + one call per patch
        assert_eq!(model.calls.load(Ordering::Relaxed), 17);
    }

    #[test]
    fn occlusion_is_order_independent() {
        let mut img = GrayImage::filled(16, 16, 30).unwrap();
        img.set(3, 3, 250);
        img.set(12, 12, 250);
        let evidence = BBox::new(0, 0, 8, 8).unwrap();
        let model = EvidenceModel {
            evidence,
            baseline: img.mean_in_box(&evidence).unwrap(),
            calls: AtomicUsize::new(0),
        };
        let grid = PatchGrid::new((16, 16), 8).unwrap();
        let a = occlusion_map(&model, &img, "q", "yes", &grid, 1).unwrap();
        let b = occlusion_map(&model, &img, "q", "yes", &grid, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rise_constant_model_keeps_cells_equal() {
        let img = GrayImage::filled(16, 16, 90).unwrap();
        let grid = PatchGrid::new((16, 16), 8).unwrap();
        let map = rise_map(&ConstantModel, &img, "q", "yes", &grid, 1, 0.5, 3, 1).unwrap();
        let kept: Vec<f64> = map.values.iter().cloned().filter(|&v| v > 0.0).collect();
        assert_eq!(kept.len(), 2);
        assert!((kept[0] - kept[1]).abs() < 1e-15);
        assert_eq!(map.values.iter().filter(|&&v| v == 0.0).count(), 2);
    }

    #[test]
    fn rise_is_seed_deterministic() {
        let mut img = GrayImage::filled(32, 32, 50).unwrap();
        img.set(20, 20, 255);
        let evidence = BBox::new(16, 16, 24, 24).unwrap();
        let model = EvidenceModel {
            evidence,
            baseline: img.mean_in_box(&evidence).unwrap(),
            calls: AtomicUsize::new(0),
        };
        let grid = PatchGrid::new((32, 32), 8).unwrap();
        let a = rise_map(&model, &img, "q", "yes", &grid, 16, 0.5, 42, 1).unwrap();
        let b = rise_map(&model, &img, "q", "yes", &grid, 16, 0.5, 42, 2).unwrap();
        assert_eq!(a, b);
        let c = rise_map(&model, &img, "q", "yes", &grid, 16, 0.5, 43, 1).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rise_evidence_cell_beats_average() {
        let mut img = GrayImage::filled(32, 32, 20).unwrap();
        for y in 8..16 {
            for x in 8..16 {
                img.set(x, y, 250);
            }
        }
        let evidence = BBox::new(8, 8, 16, 16).unwrap();
        let evidence_cell = 4 + 1;
        let grid = PatchGrid::new((32, 32), 8).unwrap();
        let mut wins = 0;
        for seed in 0..10u64 {
            let model = EvidenceModel {
                evidence,
                baseline: img.mean_in_box(&evidence).unwrap(),
                calls: AtomicUsize::new(0),
            };
            let map = rise_map(&model, &img, "q", "yes", &grid, 64, 0.5, seed, 1).unwrap();
            let others: Vec<f64> = map
                .values
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != evidence_cell)
                .map(|(_, &v)| v)
                .collect();
            let mean_others: f64 = others.iter().sum::<f64>() / others.len() as f64;
            if map.values[evidence_cell] > mean_others {
                wins += 1;
            }
        }
        assert_eq!(wins, 10);
    }

    fn block_map(dims: (u32, u32), block: BBox, value: f64) -> SaliencyMap {
        let mut values = vec![0.0; (dims.0 as usize) * (dims.1 as usize)];
        for y in block.y1()..block.y2() {
            for x in block.x1()..block.x2() {
                values[(y as usize) * (dims.0 as usize) + (x as usize)] = value;
            }
        }
        SaliencyMap::new(dims.0, dims.1, values).unwrap()
    }

    #[test]
    fn saliency_block_fixtures() {
        // 6x6 block of 1.0 anchored at (10,10): 36 px >= 16, one box.
        let map = block_map((224, 224), BBox::new(10, 10, 16, 16).unwrap(), 1.0);
        let boxes = saliency_to_boxes(&map, (224, 224)).unwrap();
        assert_eq!(boxes, vec![BBox::new(10, 10, 16, 16).unwrap()]);

        // 3x3 block: 9 px < 16, dropped.
        let map = block_map((224, 224), BBox::new(10, 10, 13, 13).unwrap(), 1.0);
        assert_eq!(saliency_to_boxes(&map, (224, 224)).unwrap(), vec![]);

        // Constant map: no boxes.
        let flat = SaliencyMap::new(8, 8, vec![3.0; 64]).unwrap();
        assert_eq!(saliency_to_boxes(&flat, (224, 224)).unwrap(), vec![]);
    }

    #[test]
    fn saliency_caps_at_ten_boxes() {
        // 25 equal blocks all pass the percentile; the cap keeps 10, ranked
        // by the area-then-top-left tie rule.
        let mut values = vec![0.0; 224 * 224];
        for by in 0..5u32 {
            for bx in 0..5u32 {
                for y in 0..6u32 {
                    for x in 0..6u32 {
                        let (px, py) = (bx * 40 + x, by * 40 + y);
                        values[(py as usize) * 224 + px as usize] = 1.0;
                    }
                }
            }
        }
        let map = SaliencyMap::new(224, 224, values).unwrap();
        let boxes = saliency_to_boxes(&map, (224, 224)).unwrap();
        assert_eq!(boxes.len(), 10);
        assert_eq!(boxes[0], BBox::new(0, 0, 6, 6).unwrap());
        for b in &boxes {
            assert!(b.area() >= 16);
            assert!(b.x2() <= 224 && b.y2() <= 224);
        }
    }

    #[test]
    fn saliency_percentile_prunes_low_valued_components() {
        // 25 blocks with distinct values: the 90th percentile keeps only
        // the top few.
        let mut values = vec![0.0; 224 * 224];
        for by in 0..5u32 {
            for bx in 0..5u32 {
                let v = 1.0 + (by * 5 + bx) as f64;
                for y in 0..6u32 {
                    for x in 0..6u32 {
                        let (px, py) = (bx * 40 + x, by * 40 + y);
                        values[(py as usize) * 224 + px as usize] = v;
                    }
                }
            }
        }
        let map = SaliencyMap::new(224, 224, values).unwrap();
        let boxes = saliency_to_boxes(&map, (224, 224)).unwrap();
        assert_eq!(boxes.len(), 3);
        // highest-valued block (25.0) sits at the bottom-right corner
        assert_eq!(boxes[0], BBox::new(160, 160, 166, 166).unwrap());
    }

    #[test]
    fn saliency_grid_map_upscales_before_component_rules() {
        // A single hot cell in a 28x28 grid covers 8x8 = 64 native pixels.
        let mut values = vec![0.0; 28 * 28];
        values[5 * 28 + 7] = 2.0;
        let map = SaliencyMap::new(28, 28, values).unwrap();
        let boxes = saliency_to_boxes(&map, (224, 224)).unwrap();
        assert_eq!(boxes, vec![BBox::new(56, 40, 64, 48).unwrap()]);
    }

    #[test]
    fn saliency_conversion_is_deterministic() {
        let mut values = vec![0.0; 28 * 28];
        for (i, v) in values.iter_mut().enumerate() {
            *v = ((i * 7919) % 101) as f64 / 100.0;
        }
        let map = SaliencyMap::new(28, 28, values).unwrap();
        let a = saliency_to_boxes(&map, (224, 224)).unwrap();
        let b = saliency_to_boxes(&map, (224, 224)).unwrap();
        assert_eq!(a, b);
    }
}
