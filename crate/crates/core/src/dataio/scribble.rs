//! Scribbles traced inside eroded ground-truth regions.

use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::{LabelMap, UNKNOWN};

#[derive(Debug, Clone, PartialEq)]
pub struct ScribbleConfig {
    pub stroke_width: usize,
    /// Strokes aim for a length in `min_len * [2, 5]`.
    pub min_len: usize,
    pub erosion_radius: usize,
}

impl Default for ScribbleConfig {
    fn default() -> Self {
        ScribbleConfig {
            stroke_width: 1,
            min_len: 6,
            erosion_radius: 2,
        }
    }
}

/// Pixels of `label` whose whole `(2r+1)^2` neighborhood (clipped to the image) has that label.
pub fn erode(mask: &LabelMap, label: u8, r: usize) -> Vec<bool> {
    let (w, h) = (mask.width(), mask.height());
    let mut out = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) != label {
                continue;
            }
            let mut inside = true;
            'scan: for yy in y.saturating_sub(r)..(y + r + 1).min(h) {
                for xx in x.saturating_sub(r)..(x + r + 1).min(w) {
                    if mask.get(xx, yy) != label {
                        inside = false;
                        break 'scan;
                    }
                }
            }
            out[y * w + x] = inside;
        }
    }
    out
}

const STEPS: [(isize, isize); 4] = [(1, 0), (0, 1), (-1, 0), (0, -1)];

/// A 4-connected random stroke inside `allowed`, starting at `start`.
fn trace<R: Rng + ?Sized>(allowed: &[bool], w: usize, h: usize, start: usize, target: usize, rng: &mut R) -> Vec<usize> {
    let mut path = vec![start];
    let mut visited = vec![false; w * h];
    visited[start] = true;
    let mut dir = rng.random_range(0..4);
    let mut cur = start;
    while path.len() < target {
        if rng.random_bool(0.25) {
            dir = (dir + if rng.random_bool(0.5) { 1 } else { 3 }) % 4;
        }
        let mut moved = false;
        for turn in [0, 1, 3, 2] {
            let d = (dir + turn) % 4;
            let (x, y) = ((cur % w) as isize + STEPS[d].0, (cur / w) as isize + STEPS[d].1);
            if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
                continue;
            }
            let next = y as usize * w + x as usize;
            if allowed[next] && !visited[next] {
                visited[next] = true;
                path.push(next);
                cur = next;
                dir = d;
                moved = true;
                break;
            }
        }
        if !moved {
            break;
        }
    }
    path
}

/// One stroke per label present in `mask`; every scribbled pixel carries its true label.
pub fn synth_scribbles<R: Rng + ?Sized>(
    mask: &LabelMap,
    num_labels: usize,
    cfg: &ScribbleConfig,
    rng: &mut R,
) -> Result<LabelMap> {
    let (w, h) = (mask.width(), mask.height());
    let mut out = LabelMap::unknown(w, h);
    for label in 0..num_labels as u8 {
        let region: Vec<usize> = (0..w * h).filter(|&p| mask.data()[p] == label).collect();
        if region.is_empty() {
            continue;
        }
        let eroded = erode(mask, label, cfg.erosion_radius);
        let interior: Vec<usize> = (0..w * h).filter(|&p| eroded[p]).collect();
        if interior.is_empty() {
            log::warn!("label {label} too thin to erode; scribbling a single pixel");
            // deepest pixel under a 1-pixel erosion if any, else any pixel of the label
            let shallow = erode(mask, label, 1);
            let p = (0..w * h).find(|&p| shallow[p]).unwrap_or(region[region.len() / 2]);
            out.data_mut()[p] = label;
            continue;
        }
        let start = interior[rng.random_range(0..interior.len())];
        let target = rng.random_range(2 * cfg.min_len..=5 * cfg.min_len);
        let path = trace(&eroded, w, h, start, target, rng);
        let half = (cfg.stroke_width.max(1) - 1) / 2;
        for &p in &path {
            let (x, y) = (p % w, p / w);
            for yy in y.saturating_sub(half)..(y + half + 1).min(h) {
                for xx in x.saturating_sub(half)..(x + half + 1).min(w) {
                    if eroded[yy * w + xx] {
                        out.set(xx, yy, label);
                    }
                }
            }
        }
    }
    if out.data().iter().all(|&v| v == UNKNOWN) {
        return Err(Error::Input("mask has no labels to scribble".into()));
    }
    Ok(out)
}
