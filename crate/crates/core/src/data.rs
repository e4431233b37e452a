//! Dataset ingestion (IDX files and the synthetic left-of task) and
//! bit-exact persistence of models, optimizer state, and training progress.

use crate::config;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::train::{Optimizer, PlateauState, Progress, TrainSession};
use byteorder::{BigEndian, LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Read;
use std::path::Path;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labeled image set. Labels are 1-based; all images share one shape.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<u32>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Mean over all pixels of all images (the training-split statistic).
    pub fn pixel_mean(&self) -> f32 {
        let mut sum = 0.0f64;
        let mut count = 0usize;
        for img in &self.images {
            for &v in img.data() {
                sum += v as f64;
            }
            count += img.len();
        }
        if count == 0 {
            0.0
        } else {
            (sum / count as f64) as f32
        }
    }

    pub fn subtract_mean(&mut self, mean: f32) {
        for img in &mut self.images {
            for v in img.data_mut() {
                *v -= mean;
            }
        }
    }
}

/// Compute the training-split pixel mean and subtract it from both splits.
/// Returns the mean for persistence.
pub fn normalize_pair(train: &mut Dataset, val: &mut Dataset) -> f32 {
    let mean = train.pixel_mean();
    train.subtract_mean(mean);
    val.subtract_mean(mean);
    mean
}

// ---------------------------------------------------------------------------
// IDX format.
// ---------------------------------------------------------------------------

fn idx_data_err(what: &str, e: std::io::Error) -> Error {
    Error::data(format!("idx: {what}: {e}"))
}

/// Parse an IDX image file (big-endian magic 0x00000803) into raw bytes.
pub fn read_idx_images<R: Read>(mut r: R) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = r
        .read_u32::<BigEndian>()
        .map_err(|e| idx_data_err("truncated image header", e))?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::data(format!(
            "idx: bad image magic: expected {IDX_IMAGES_MAGIC:#010x}, got {magic:#010x}"
        )));
    }
    let count = r
        .read_u32::<BigEndian>()
        .map_err(|e| idx_data_err("truncated image count", e))? as usize;
    let rows = r
        .read_u32::<BigEndian>()
        .map_err(|e| idx_data_err("truncated image rows", e))? as usize;
    let cols = r
        .read_u32::<BigEndian>()
        .map_err(|e| idx_data_err("truncated image cols", e))? as usize;
    let mut pixels = vec![0u8; count * rows * cols];
    r.read_exact(&mut pixels)
        .map_err(|e| idx_data_err("truncated image payload", e))?;
    Ok((count, rows, cols, pixels))
}

/// Parse an IDX label file (big-endian magic 0x00000801).
pub fn read_idx_labels<R: Read>(mut r: R) -> Result<Vec<u8>> {
    let magic = r
        .read_u32::<BigEndian>()
        .map_err(|e| idx_data_err("truncated label header", e))?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::data(format!(
            "idx: bad label magic: expected {IDX_LABELS_MAGIC:#010x}, got {magic:#010x}"
        )));
    }
    let count = r
        .read_u32::<BigEndian>()
        .map_err(|e| idx_data_err("truncated label count", e))? as usize;
    let mut labels = vec![0u8; count];
    r.read_exact(&mut labels)
        .map_err(|e| idx_data_err("truncated label payload", e))?;
    Ok(labels)
}

/// Load a paired IDX image/label set. Pixels are scaled to [0, 1]; labels are
/// shifted to 1-based (`classes` bounds the raw values). Mean subtraction is
/// a separate step so the training-split mean can be reused for validation.
pub fn load_idx_from_readers<R1: Read, R2: Read>(
    images: R1,
    labels: R2,
    classes: usize,
) -> Result<Dataset> {
    let (count, rows, cols, pixels) = read_idx_images(images)?;
    let raw_labels = read_idx_labels(labels)?;
    if raw_labels.len() != count {
        return Err(Error::data(format!(
            "idx: image/label count mismatch: {count} images vs {} labels",
            raw_labels.len()
        )));
    }
    let mut ds = Dataset {
        images: Vec::with_capacity(count),
        labels: Vec::with_capacity(count),
        classes,
    };
    for i in 0..count {
        let start = i * rows * cols;
        let data: Vec<f32> = pixels[start..start + rows * cols]
            .iter()
            .map(|&b| b as f32 / 255.0)
            .collect();
        ds.images.push(Tensor::new(vec![1, rows, cols], data)?);
        let raw = raw_labels[i] as usize;
        if raw >= classes {
            return Err(Error::data(format!(
                "idx: label {raw} out of range for {classes} classes (sample {i})"
            )));
        }
        ds.labels.push(raw as u32 + 1);
    }
    Ok(ds)
}

pub fn load_idx(images_path: &Path, labels_path: &Path, classes: usize) -> Result<Dataset> {
    let images = std::fs::File::open(images_path)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", images_path.display())))?;
    let labels = std::fs::File::open(labels_path)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", labels_path.display())))?;
    load_idx_from_readers(
        std::io::BufReader::new(images),
        std::io::BufReader::new(labels),
        classes,
    )
}

// ---------------------------------------------------------------------------
// Synthetic left-of task.
// ---------------------------------------------------------------------------

pub const TASK_IMAGE_SIZE: usize = 24;
pub const TASK_LAYOUT: usize = 6;
const GLYPH_SIZE: usize = 4;

// 4x4 bit patterns, contrast-normalized to unit peak amplitude. Both glyphs
// appear in every image regardless of class, so bag-of-content statistics
// are identical across classes by construction.
const GLYPH_PLUS: [u8; 16] = [0, 1, 1, 0, 1, 1, 1, 1, 1, 1, 1, 1, 0, 1, 1, 0];
const GLYPH_CROSS: [u8; 16] = [1, 0, 0, 1, 0, 1, 1, 0, 0, 1, 1, 0, 1, 0, 0, 1];

fn glyph_amplitude(_bits: &[u8; 16]) -> f32 {
    1.0
}

/// Placement of the two glyphs on the 6x6 layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Placement {
    pub row_a: usize,
    pub col_a: usize,
    pub row_b: usize,
    pub col_b: usize,
}

impl Placement {
    /// 1 when glyph A sits strictly left of glyph B, 2 otherwise. Columns are
    /// always distinct by construction, so mirroring an image flips the label.
    pub fn label(&self) -> u32 {
        if self.col_a < self.col_b {
            1
        } else {
            2
        }
    }
}

/// Paint one 24x24 sample for a placement.
pub fn render_sample(p: &Placement) -> Tensor<f32> {
    let mut img = Tensor::zeros(&[1, TASK_IMAGE_SIZE, TASK_IMAGE_SIZE]);
    let mut paint = |bits: &[u8; 16], row: usize, col: usize| {
        let amp = glyph_amplitude(bits);
        for gy in 0..GLYPH_SIZE {
            for gx in 0..GLYPH_SIZE {
                if bits[gy * GLYPH_SIZE + gx] == 1 {
                    let y = row * GLYPH_SIZE + gy;
                    let x = col * GLYPH_SIZE + gx;
                    img.data_mut()[y * TASK_IMAGE_SIZE + x] = amp;
                }
            }
        }
    };
    paint(&GLYPH_PLUS, p.row_a, p.col_a);
    paint(&GLYPH_CROSS, p.row_b, p.col_b);
    img
}

/// Generate the synthetic context task: two distinct glyphs at random cells
/// of the 6x6 layout (always in different columns), labeled by whether glyph
/// A is strictly left of glyph B. Deterministic per seed.
pub fn gen_context_task(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ds = Dataset {
        images: Vec::with_capacity(n),
        labels: Vec::with_capacity(n),
        classes: 2,
    };
    for _ in 0..n {
        let row_a = rng.gen_range(0..TASK_LAYOUT);
        let col_a = rng.gen_range(0..TASK_LAYOUT);
        let row_b = rng.gen_range(0..TASK_LAYOUT);
        let col_b = loop {
            let c = rng.gen_range(0..TASK_LAYOUT);
            if c != col_a {
                break c;
            }
        };
        let p = Placement {
            row_a,
            col_a,
            row_b,
            col_b,
        };
        ds.images.push(render_sample(&p));
        ds.labels.push(p.label());
    }
    ds
}

// ---------------------------------------------------------------------------
// Checkpoints.
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 4] = b"HRNN";
const CHECKPOINT_VERSION: u32 = 1;

fn write_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    buf.write_u64::<LittleEndian>(name.len() as u64).unwrap();
    buf.extend_from_slice(name.as_bytes());
    buf.write_u64::<LittleEndian>(t.shape().len() as u64).unwrap();
    for &d in t.shape() {
        buf.write_u64::<LittleEndian>(d as u64).unwrap();
    }
    for &v in t.data() {
        buf.write_f32::<LittleEndian>(v).unwrap();
    }
}

fn read_tensor<R: Read>(r: &mut R) -> Result<(String, Tensor<f32>)> {
    let err = |what: &'static str| move |e: std::io::Error| Error::checkpoint(format!("{what}: {e}"));
    let name_len = r.read_u64::<LittleEndian>().map_err(err("tensor name length"))? as usize;
    if name_len > 4096 {
        return Err(Error::checkpoint(format!(
            "implausible tensor name length {name_len}"
        )));
    }
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name).map_err(err("tensor name"))?;
    let name = String::from_utf8(name)
        .map_err(|_| Error::checkpoint("tensor name is not valid UTF-8".to_string()))?;
    let rank = r.read_u64::<LittleEndian>().map_err(err("tensor rank"))? as usize;
    if rank > 8 {
        return Err(Error::checkpoint(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.read_u64::<LittleEndian>().map_err(err("tensor extent"))? as usize);
    }
    let len: usize = shape.iter().product();
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        data.push(r.read_f32::<LittleEndian>().map_err(err("tensor values"))?);
    }
    Ok((name, Tensor::new(shape, data)?))
}

/// Serialize a full training session: model config, every parameter and
/// velocity tensor, optimizer scalars, progress counters, and the pixel
/// mean, closed by a CRC32 over all preceding bytes.
pub fn checkpoint_bytes(sess: &TrainSession) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.write_u32::<LittleEndian>(CHECKPOINT_VERSION).unwrap();

    let config_text = config::emit_model_config(&sess.model.config);
    buf.write_u64::<LittleEndian>(config_text.len() as u64).unwrap();
    buf.extend_from_slice(config_text.as_bytes());

    buf.write_f32::<LittleEndian>(sess.pixel_mean).unwrap();
    buf.write_u64::<LittleEndian>(sess.seed).unwrap();
    buf.write_u64::<LittleEndian>(sess.progress.epoch as u64).unwrap();
    buf.write_u64::<LittleEndian>(sess.progress.step as u64).unwrap();
    buf.write_u64::<LittleEndian>(sess.progress.global_step as u64).unwrap();

    buf.write_f32::<LittleEndian>(sess.opt.lr).unwrap();
    buf.write_f32::<LittleEndian>(sess.opt.momentum).unwrap();
    buf.write_f32::<LittleEndian>(sess.opt.weight_decay).unwrap();
    buf.write_u64::<LittleEndian>(sess.opt.patience as u64).unwrap();
    buf.write_f64::<LittleEndian>(sess.opt.plateau.best).unwrap();
    buf.write_u64::<LittleEndian>(sess.opt.plateau.since_best as u64).unwrap();

    let names = sess.model.param_names();
    buf.write_u64::<LittleEndian>(names.len() as u64).unwrap();
    sess.model.visit(&mut |name, t| write_tensor(&mut buf, &name, t));

    buf.write_u64::<LittleEndian>(sess.opt.velocity.len() as u64).unwrap();
    for (name, t) in names.iter().zip(&sess.opt.velocity) {
        write_tensor(&mut buf, &format!("velocity.{name}"), t);
    }

    let crc = crc32fast::hash(&buf);
    buf.write_u32::<LittleEndian>(crc).unwrap();
    buf
}

pub fn save_checkpoint(path: &Path, sess: &TrainSession) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(sess))
        .map_err(|e| Error::data(format!("cannot write checkpoint {}: {e}", path.display())))
}

/// Reverse of [`checkpoint_bytes`]; refuses unknown versions and corrupt
/// payloads (CRC mismatch) before touching any content.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<TrainSession> {
    if bytes.len() < 12 {
        return Err(Error::checkpoint("file too short".to_string()));
    }
    if &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(Error::checkpoint(format!(
            "bad magic: expected {CHECKPOINT_MAGIC:?}, got {:?}",
            &bytes[0..4]
        )));
    }
    let (payload, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored_crc = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    let actual_crc = crc32fast::hash(payload);
    if stored_crc != actual_crc {
        return Err(Error::checkpoint(format!(
            "checksum failure: stored {stored_crc:#010x}, computed {actual_crc:#010x}"
        )));
    }

    let mut r = &payload[4..];
    let err = |what: &'static str| move |e: std::io::Error| Error::checkpoint(format!("{what}: {e}"));
    let version = r.read_u32::<LittleEndian>().map_err(err("version"))?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::checkpoint(format!(
            "version mismatch: expected {CHECKPOINT_VERSION}, got {version}"
        )));
    }
    let config_len = r.read_u64::<LittleEndian>().map_err(err("config length"))? as usize;
    if config_len > r.len() {
        return Err(Error::checkpoint("truncated config block".to_string()));
    }
    let (config_bytes, rest) = r.split_at(config_len);
    r = rest;
    let config_text = std::str::from_utf8(config_bytes)
        .map_err(|_| Error::checkpoint("config block is not valid UTF-8".to_string()))?;
    let model_config = config::parse_model_config(config_text)?;

    let pixel_mean = r.read_f32::<LittleEndian>().map_err(err("pixel mean"))?;
    let seed = r.read_u64::<LittleEndian>().map_err(err("seed"))?;
    let epoch = r.read_u64::<LittleEndian>().map_err(err("epoch"))? as usize;
    let step = r.read_u64::<LittleEndian>().map_err(err("step"))? as usize;
    let global_step = r.read_u64::<LittleEndian>().map_err(err("global step"))? as usize;

    let lr = r.read_f32::<LittleEndian>().map_err(err("lr"))?;
    let momentum = r.read_f32::<LittleEndian>().map_err(err("momentum"))?;
    let weight_decay = r.read_f32::<LittleEndian>().map_err(err("weight decay"))?;
    let patience = r.read_u64::<LittleEndian>().map_err(err("patience"))? as usize;
    let plateau_best = r.read_f64::<LittleEndian>().map_err(err("plateau best"))?;
    let plateau_since = r.read_u64::<LittleEndian>().map_err(err("plateau counter"))? as usize;

    let mut model = Model::<f32>::zeros(model_config)?;
    let expected_names = model.param_names();

    let param_count = r.read_u64::<LittleEndian>().map_err(err("parameter count"))? as usize;
    if param_count != expected_names.len() {
        return Err(Error::checkpoint(format!(
            "parameter count mismatch: file has {param_count}, config needs {}",
            expected_names.len()
        )));
    }
    for expected in &expected_names {
        let (name, tensor) = read_tensor(&mut r)?;
        if &name != expected {
            return Err(Error::checkpoint(format!(
                "unexpected tensor '{name}' (expected '{expected}')"
            )));
        }
        let mut placed = false;
        model.visit_mut(&mut |n, t| {
            if n == name && t.shape() == tensor.shape() {
                t.data_mut().copy_from_slice(tensor.data());
                placed = true;
            }
        });
        if !placed {
            return Err(Error::checkpoint(format!(
                "tensor '{name}' does not match the config shape"
            )));
        }
    }

    let velocity_count = r.read_u64::<LittleEndian>().map_err(err("velocity count"))? as usize;
    if velocity_count != expected_names.len() {
        return Err(Error::checkpoint(format!(
            "velocity count mismatch: file has {velocity_count}, config needs {}",
            expected_names.len()
        )));
    }
    let mut velocity = Vec::with_capacity(velocity_count);
    for expected in &expected_names {
        let (name, tensor) = read_tensor(&mut r)?;
        let want = format!("velocity.{expected}");
        if name != want {
            return Err(Error::checkpoint(format!(
                "unexpected tensor '{name}' (expected '{want}')"
            )));
        }
        velocity.push(tensor);
    }

    Ok(TrainSession {
        model,
        opt: Optimizer {
            velocity,
            lr,
            momentum,
            weight_decay,
            patience,
            plateau: PlateauState {
                best: plateau_best,
                since_best: plateau_since,
            },
        },
        progress: Progress {
            epoch,
            step,
            global_step,
        },
        seed,
        pixel_mean,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<TrainSession> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::data(format!("cannot read checkpoint {}: {e}", path.display())))?;
    checkpoint_from_bytes(&bytes)
}


#[cfg(test)]
mod tests {
    use super::test_support::{idx_image_bytes, idx_label_bytes};
    use super::*;

    #[test]
    fn idx_fixture_roundtrip() {
        // Hand-built 4-image fixture: 28x28, pixel value = 10 * sample index.
        let pixels: Vec<u8> = (0..4).flat_map(|i| vec![i as u8 * 10; 28 * 28]).collect();
        let images = idx_image_bytes(4, 28, 28, &pixels);
        let labels = idx_label_bytes(&[3, 1, 4, 1]);
        let ds = load_idx_from_readers(&images[..], &labels[..], 10).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.images[0].shape(), &[1, 28, 28]);
        assert_eq!(ds.labels, vec![4, 2, 5, 2]);
        assert!((ds.images[2].data()[0] - 20.0 / 255.0).abs() < 1e-7);
    }

    #[test]
    fn idx_empty_label_file_is_count_mismatch() {
        let pixels = vec![0u8; 2 * 4 * 4];
        let images = idx_image_bytes(2, 4, 4, &pixels);
        let labels = idx_label_bytes(&[]);
        let err = load_idx_from_readers(&images[..], &labels[..], 10).unwrap_err();
        assert!(err.to_string().contains("count mismatch"), "{err}");
    }

    #[test]
    fn idx_wrong_magic_names_expected_and_actual() {
        let mut images = idx_image_bytes(1, 2, 2, &[0; 4]);
        images[3] = 0x99;
        let labels = idx_label_bytes(&[0]);
        let err = load_idx_from_readers(&images[..], &labels[..], 10).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("0x00000803") && msg.contains("0x00000899"), "{msg}");
    }

    #[test]
    fn idx_rejects_every_truncation() {
        let pixels: Vec<u8> = (0..2 * 3 * 3).map(|i| i as u8).collect();
        let images = idx_image_bytes(2, 3, 3, &pixels);
        let labels = idx_label_bytes(&[1, 0]);
        // Any strict prefix of either file must fail.
        for cut in 0..images.len() {
            assert!(
                load_idx_from_readers(&images[..cut], &labels[..], 10).is_err(),
                "image prefix of length {cut} accepted"
            );
        }
        for cut in 0..labels.len() {
            assert!(
                load_idx_from_readers(&images[..], &labels[..cut], 10).is_err(),
                "label prefix of length {cut} accepted"
            );
        }
        assert!(load_idx_from_readers(&images[..], &labels[..], 10).is_ok());
    }

    #[test]
    fn task_label_follows_column_order() {
        let p = Placement { row_a: 2, col_a: 0, row_b: 4, col_b: 5 };
        assert_eq!(p.label(), 1);
        let p = Placement { row_a: 2, col_a: 5, row_b: 4, col_b: 0 };
        assert_eq!(p.label(), 2);
    }

    #[test]
    fn mirrored_sample_flips_label() {
        let p = Placement { row_a: 1, col_a: 2, row_b: 3, col_b: 4 };
        let mirrored = Placement {
            row_a: p.row_a,
            col_a: TASK_LAYOUT - 1 - p.col_a,
            row_b: p.row_b,
            col_b: TASK_LAYOUT - 1 - p.col_b,
        };
        assert_ne!(p.label(), mirrored.label());

        // The rendered mirrored image equals the column-reversed original.
        let img = render_sample(&p);
        let mir = render_sample(&mirrored);
        for y in 0..TASK_IMAGE_SIZE {
            for x in 0..TASK_IMAGE_SIZE {
                assert_eq!(
                    img.data()[y * TASK_IMAGE_SIZE + x],
                    mir.data()[y * TASK_IMAGE_SIZE + (TASK_IMAGE_SIZE - 1 - x)]
                );
            }
        }
    }

    #[test]
    fn task_is_deterministic_and_seed_sensitive() {
        let a = gen_context_task(50, 7);
        let b = gen_context_task(50, 7);
        let c = gen_context_task(50, 8);
        assert_eq!(a.labels, b.labels);
        for (x, y) in a.images.iter().zip(&b.images) {
            assert_eq!(x.data(), y.data());
        }
        assert_ne!(a.labels, c.labels);
    }

    #[test]
    fn task_classes_are_balanced() {
        let ds = gen_context_task(10_000, 1234);
        let ones = ds.labels.iter().filter(|&&l| l == 1).count() as f64 / 10_000.0;
        assert!((0.48..=0.52).contains(&ones), "class-1 share {ones}");
    }

    #[test]
    fn glyphs_render_with_unit_amplitude_and_stay_distinct() {
        let p = Placement { row_a: 0, col_a: 0, row_b: 0, col_b: 5 };
        let img = render_sample(&p);
        let max = img.data().iter().cloned().fold(0.0f32, f32::max);
        assert_eq!(max, 1.0);
        // Both glyphs present: plus has 12 on-pixels, cross has 8.
        let on = img.data().iter().filter(|&&v| v > 0.0).count();
        assert_eq!(on, 20);
        // Patterns differ cellwise.
        let a: Vec<f32> = (0..4)
            .flat_map(|y| (0..4).map(move |x| (y, x)))
            .map(|(y, x)| img.data()[y * TASK_IMAGE_SIZE + x])
            .collect();
        let b: Vec<f32> = (0..4)
            .flat_map(|y| (0..4).map(move |x| (y, x)))
            .map(|(y, x)| img.data()[y * TASK_IMAGE_SIZE + 20 + x])
            .collect();
        assert_ne!(a, b);
    }
}
