//! Mask pictures and spatial keep-probability maps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::data::Dataset;
use super::eval::EVAL_BATCH;
use crate::backbone::{forward, DynamicParams, Mode, ViTConfig};
use crate::error::{Error, Result};
use crate::inference::PruneSchedule;
use crate::params::bind_frozen;
use crate::tensorcore::Graph;

/// Patch keep bits `[image][stage][position]` from inference-mode pruning.
pub fn stage_masks(
    params: &DynamicParams,
    cfg: &ViTConfig,
    schedule: &PruneSchedule,
    data: &Dataset,
) -> Result<Vec<Vec<Vec<bool>>>> {
    let n = cfg.num_patches();
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for (bi, chunk) in idx.chunks(EVAL_BATCH).enumerate() {
        let (images, _) = data.batch(chunk);
        let mut g = Graph::new();
        let pv = bind_frozen(&mut g, params);
        let fwd = forward(&mut g, &images, &pv, cfg, schedule, Mode::Infer { seed: bi as u64 })?;
        for b in 0..chunk.len() {
            out.push(
                fwd.kept
                    .iter()
                    .map(|stage| {
                        let mut bits = vec![false; n];
                        for &j in &stage[b] {
                            bits[j] = true;
                        }
                        bits
                    })
                    .collect(),
            );
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct Sidecar<'a> {
    image: usize,
    grid: usize,
    patch_size: usize,
    /// One row of 0/1 keep bits per stage, row-major over the patch grid.
    stages: Vec<Vec<u8>>,
    files: &'a [String],
}

/// Write `image_{i}_stage_{s}.ppm` with dropped patches darkened to a
/// quarter of their brightness, plus `image_{i}.json` holding the bits.
pub fn export_mask_viz(
    images: &Dataset,
    masks: &[Vec<Vec<bool>>],
    patch_size: usize,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if masks.len() != images.len() {
        return Err(Error::Config(format!(
            "{} mask sets for {} images",
            masks.len(),
            images.len()
        )));
    }
    if patch_size == 0 || !images.height.is_multiple_of(patch_size) || !images.width.is_multiple_of(patch_size) {
        return Err(Error::Config(format!(
            "patch size {patch_size} does not tile {}×{} images",
            images.height, images.width
        )));
    }
    let (h, w) = (images.height, images.width);
    let grid_w = w / patch_size;
    let n = (h / patch_size) * grid_w;
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for (i, stages) in masks.iter().enumerate() {
        let img = images.image(i);
        let mut names = Vec::new();
        for (s, bits) in stages.iter().enumerate() {
            if bits.len() != n {
                return Err(Error::Config(format!("mask has {} bits for {n} patches", bits.len())));
            }
            let mut ppm = format!("P6\n{w} {h}\n255\n").into_bytes();
            for y in 0..h {
                for x in 0..w {
                    let keep = bits[(y / patch_size) * grid_w + x / patch_size];
                    for c in 0..3 {
                        let ch = if images.channels == 3 { c } else { 0 };
                        let v = img[(ch * h + y) * w + x];
                        ppm.push(if keep { v } else { v / 4 });
                    }
                }
            }
            let name = format!("image_{i}_stage_{s}.ppm");
            let path = out_dir.join(&name);
            fs::write(&path, ppm)?;
            written.push(path);
            names.push(name);
        }
        let sidecar = Sidecar {
            image: i,
            grid: grid_w,
            patch_size,
            stages: stages.iter().map(|b| b.iter().map(|&k| u8::from(k)).collect()).collect(),
            files: &names,
        };
        let path = out_dir.join(format!("image_{i}.json"));
        fs::write(&path, serde_json::to_string_pretty(&sidecar)?)?;
        written.push(path);
    }
    Ok(written)
}

/// Read back a binary PPM written by [`export_mask_viz`]: `(width, height, rgb)`.
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let bad = || Error::Config(format!("{} is not a binary PPM", path.display()));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let data = bytes.get(pos + 1..pos + 1 + 3 * w * h).ok_or_else(bad)?;
    Ok((w, h, data.to_vec()))
}

/// Mean keep decision per grid position, one map per stage.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KeepStats {
    pub grid: usize,
    pub images: usize,
    /// `[stage][row·grid + col]`, each in `[0, 1]`.
    pub stages: Vec<Vec<f64>>,
}

impl KeepStats {
    pub fn stage_mean(&self, s: usize) -> f64 {
        let v = &self.stages[s];
        v.iter().sum::<f64>() / v.len() as f64
    }

    /// `stage,row,c0,...` with one line per grid row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,row");
        for c in 0..self.grid {
            let _ = write!(out, ",c{c}");
        }
        out.push('\n');
        for (s, map) in self.stages.iter().enumerate() {
            for (r, row) in map.chunks(self.grid).enumerate() {
                let _ = write!(out, "{s},{r}");
                for v in row {
                    let _ = write!(out, ",{v:.6}");
                }
                out.push('\n');
            }
        }
        out
    }
}

pub fn keep_prob_stats(
    params: &DynamicParams,
    cfg: &ViTConfig,
    schedule: &PruneSchedule,
    data: &Dataset,
) -> Result<KeepStats> {
    let masks = stage_masks(params, cfg, schedule, data)?;
    Ok(keep_stats_from_masks(&masks, cfg.grid()))
}

pub fn keep_stats_from_masks(masks: &[Vec<Vec<bool>>], grid: usize) -> KeepStats {
    let stages_n = masks.first().map_or(0, Vec::len);
    let n = grid * grid;
    let mut stages = vec![vec![0.0; n]; stages_n];
    for per_image in masks {
        for (acc, bits) in stages.iter_mut().zip(per_image) {
            for (a, &b) in acc.iter_mut().zip(bits) {
                *a += f64::from(u8::from(b));
            }
        }
    }
    let count = masks.len().max(1) as f64;
    for map in &mut stages {
        for v in map.iter_mut() {
            *v /= count;
        }
    }
    KeepStats {
        grid,
        images: masks.len(),
        stages,
    }
}
