//! Per-class channel heatmaps of the high-level tap and the gated
//! middle-level tap.

use std::fs;
use std::path::Path;

use crate::backbone::ModelParams;
use crate::datagen::{encode_pgm, Dataset};
use crate::error::{Error, Result};
use crate::resample;
use crate::tensor::{write_t4, Shape, Tensor4};
use crate::trainer::{self, TrainConfig};

/// Mid-gray written for maps without contrast.
pub const FLAT_GRAY: u8 = 128;

/// Min-max normalization to 8 bits; constant maps become [`FLAT_GRAY`].
pub fn normalize_u8(values: &[f32]) -> Vec<u8> {
    let min = values.iter().copied().fold(f32::INFINITY, f32::min);
    let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let range = max - min;
    if !range.is_finite() || range <= 0.0 {
        return vec![FLAT_GRAY; values.len()];
    }
    values
        .iter()
        .map(|&v| ((v - min) / range * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// One exported map.
#[derive(Clone, Debug, PartialEq)]
pub struct MapRecord {
    pub sample: usize,
    pub label: usize,
    pub prediction: usize,
    pub level: &'static str,
    pub channel: usize,
    pub file: String,
    pub min: f32,
    pub max: f32,
}

pub const INDEX_HEADER: &str = "sample,label,prediction,level,channel,file,min,max";

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes, for the first `limit` samples, the high-level channels of
/// `class_id` and the matching gated middle-level channels, upsampled to
/// the input size. Returns the rows of `index.csv`, which is written too.
pub fn export(
    params: &ModelParams<f32>,
    cfg: &TrainConfig,
    data: &Dataset,
    class_id: usize,
    limit: usize,
    raw: bool,
    out: &Path,
) -> Result<Vec<MapRecord>> {
    let bb = &cfg.backbone;
    if class_id >= bb.num_classes {
        return Err(Error::Config(format!("class {class_id} is out of range for {} classes", bb.num_classes)));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let count = limit.min(data.len());
    let idx: Vec<usize> = (0..count).collect();
    let batch = trainer::infer(params, &data.images.select_batch(&idx), cfg)?;
    let (ih, iw) = (bb.input_h, bb.input_w);
    let s = bb.num_classes;
    let mut records = Vec::new();
    for k in 0..count {
        let logits = &batch.logits.data()[k * s..(k + 1) * s];
        let prediction = (0..s).fold(0, |b, i| if logits[i] > logits[b] { i } else { b });
        let levels = [
            ("high", &batch.f_h, bb.spec_high().group(class_id)),
            ("mid", &batch.gated, bb.spec_mid().group(class_id)),
        ];
        for (level, maps, group) in levels {
            let ms = maps.shape();
            for (j, c) in group.enumerate() {
                let plane = Tensor4::from_vec(Shape::new(1, 1, ms.h, ms.w), maps.plane(k, c).to_vec())?;
                let up = resample::upsample(&plane, cfg.loss.upsample, ih, iw)?;
                let stem = format!("sample{k:04}_{level}{j}");
                let file = format!("{stem}.pgm");
                write(&out.join(&file), &encode_pgm(&normalize_u8(up.data()), iw, ih)?)?;
                if raw {
                    let mut bytes = Vec::new();
                    write_t4(&up, &mut bytes).map_err(|e| Error::io(out, e))?;
                    write(&out.join(format!("{stem}.t4")), &bytes)?;
                }
                records.push(MapRecord {
                    sample: k,
                    label: data.labels[k],
                    prediction,
                    level,
                    channel: c,
                    file,
                    min: up.data().iter().copied().fold(f32::INFINITY, f32::min),
                    max: up.data().iter().copied().fold(f32::NEG_INFINITY, f32::max),
                });
            }
        }
    }
    let mut csv = String::from(INDEX_HEADER);
    csv.push('\n');
    for r in &records {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.sample, r.label, r.prediction, r.level, r.channel, r.file, r.min, r.max
        ));
    }
    write(&out.join("index.csv"), csv.as_bytes())?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_spans_full_range() {
        assert_eq!(normalize_u8(&[1.0, 2.0, 3.0]), vec![0, 128, 255]);
    }

    #[test]
    fn constant_map_is_mid_gray() {
        assert_eq!(normalize_u8(&[0.3; 5]), vec![FLAT_GRAY; 5]);
    }
}
