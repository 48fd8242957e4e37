use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{mean_gate, Model};
use crate::synthdata::Dataset;

/// Mean gate value over the class-signal and context-signal dimensions.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GateSummary {
    pub class_dims: f64,
    pub context_dims: f64,
    pub per_dim: Vec<f64>,
}

impl GateSummary {
    pub fn from_gate(gate: &Tensor, class_dims: Range<usize>, context_dims: Range<usize>) -> Self {
        let per_dim = mean_gate(gate);
        let avg = |r: Range<usize>| {
            let n = r.len().max(1) as f64;
            per_dim[r].iter().sum::<f64>() / n
        };
        Self {
            class_dims: avg(class_dims),
            context_dims: avg(context_dims),
            per_dim,
        }
    }

    pub fn focuses_on_class(&self) -> bool {
        self.class_dims > self.context_dims
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeatmapExport {
    pub files: Vec<PathBuf>,
    pub summary: GateSummary,
}

/// Binary greyscale PGM, one byte per pixel, row-major.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::InvalidTensor(format!(
            "{} pixels for a {width}x{height} image",
            pixels.len()
        )));
    }
    let mut w = crate::io::create(path)?;
    write!(w, "P5\n{width} {height}\n255\n").map_err(|e| Error::io(path, e))?;
    w.write_all(pixels).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn gray(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// One image per class: every sample is a `d_f x 1` column of gate values
/// (white = 1), columns ordered as in `data`. Also writes `gate_summary.json`.
pub fn export_attention_heatmaps(
    model: &Model,
    data: &Dataset,
    class_dims: Range<usize>,
    context_dims: Range<usize>,
    out_dir: &Path,
) -> Result<HeatmapExport> {
    let gate = model.encode(&data.features())?.gate;
    let d = gate.cols();
    if class_dims.end > d || context_dims.end > d {
        return Err(Error::Config(format!(
            "signal dimension ranges exceed feature dim {d}"
        )));
    }
    let labels = data.labels();
    let mut files = Vec::new();
    for c in 0..data.num_classes {
        let members: Vec<usize> = (0..labels.len()).filter(|&k| labels[k] == c).collect();
        if members.is_empty() {
            continue;
        }
        let width = members.len();
        let mut pixels = vec![0u8; width * d];
        for (col, &k) in members.iter().enumerate() {
            for (row, &v) in gate.row_slice(k).iter().enumerate() {
                pixels[row * width + col] = gray(v);
            }
        }
        let path = out_dir.join(format!("gate_class_{c:02}.pgm"));
        write_pgm(&path, width, d, &pixels)?;
        files.push(path);
    }
    let summary = GateSummary::from_gate(&gate, class_dims, context_dims);
    let path = out_dir.join("gate_summary.json");
    let json = serde_json::to_string_pretty(&summary).expect("serializable");
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(HeatmapExport { files, summary })
}
