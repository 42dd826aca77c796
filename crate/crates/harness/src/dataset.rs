//! Image sequences in the common benchmark layout: `img/0001.jpg`, ... plus
//! a `groundtruth_rect.txt` of top-left `x,y,w,h` lines.

use crate::error::{HarnessError, Result};
use sdt_core::{BoundingBox, Image};
use std::fs;
use std::path::{Path, PathBuf};

const IMAGE_EXTENSIONS: [&str; 4] = ["jpg", "jpeg", "png", "bmp"];
pub const GROUNDTRUTH_FILE: &str = "groundtruth_rect.txt";

#[derive(Debug, Clone)]
enum Frames {
    Files(Vec<PathBuf>),
    Memory(Vec<Image>),
}

/// How many ground-truth lines a sequence must provide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroundTruth {
    /// one box per frame, needed for scoring
    Full,
    /// only the first box is required, enough for tracking
    FirstOnly,
}

#[derive(Debug, Clone)]
pub struct SequenceDataset {
    pub name: String,
    frames: Frames,
    pub ground_truth: Vec<BoundingBox>,
    pub color: bool,
}

impl SequenceDataset {
    pub fn from_images(name: impl Into<String>, frames: Vec<Image>, ground_truth: Vec<BoundingBox>) -> Result<Self> {
        if frames.len() < 2 {
            return Err(HarnessError::Validation("a sequence needs at least 2 frames".into()));
        }
        if ground_truth.len() != frames.len() {
            return Err(HarnessError::Validation(format!(
                "{} frames but {} ground-truth boxes",
                frames.len(),
                ground_truth.len()
            )));
        }
        let color = frames[0].is_color();
        Ok(Self { name: name.into(), frames: Frames::Memory(frames), ground_truth, color })
    }

    pub fn len(&self) -> usize {
        match &self.frames {
            Frames::Files(f) => f.len(),
            Frames::Memory(f) => f.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Whether every frame has a ground-truth box.
    pub fn has_full_ground_truth(&self) -> bool {
        self.ground_truth.len() == self.len()
    }

    /// Frame `i`, 0-based.
    pub fn frame(&self, i: usize) -> Result<Image> {
        match &self.frames {
            Frames::Files(f) => load_image(&f[i]),
            Frames::Memory(f) => Ok(f[i].clone()),
        }
    }

    /// Writes the sequence in the directory layout read by [`load_sequence`].
    pub fn write(&self, dir: &Path) -> Result<()> {
        let img_dir = dir.join("img");
        fs::create_dir_all(&img_dir)?;
        for i in 0..self.len() {
            save_png(&self.frame(i)?, &img_dir.join(format!("{:04}.png", i + 1)))?;
        }
        let mut gt = String::new();
        for b in &self.ground_truth {
            let [x, y, w, h] = b.to_top_left();
            gt.push_str(&format!("{x},{y},{w},{h}\n"));
        }
        fs::write(dir.join(GROUNDTRUTH_FILE), gt)?;
        Ok(())
    }
}

/// Parses ground-truth lines; commas, tabs and spaces all separate fields.
pub fn parse_ground_truth(text: &str, path: &Path) -> Result<Vec<BoundingBox>> {
    let mut boxes = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |why: &str| HarnessError::file(path, format!("line {}: {why}: {line:?}", n + 1));
        let fields: Vec<f64> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("unparsable number"))?;
        let [x, y, w, h] = fields[..] else {
            return Err(bad("expected 4 fields"));
        };
        let b = BoundingBox::from_top_left(x, y, w, h);
        b.validate().map_err(|e| bad(&e.to_string()))?;
        boxes.push(b);
    }
    Ok(boxes)
}

fn frame_number(path: &Path) -> Option<u64> {
    path.file_stem()?.to_str()?.parse().ok()
}

/// Loads `dir/img/*` and `dir/groundtruth_rect.txt`.
pub fn load_sequence(dir: &Path, mode: GroundTruth) -> Result<SequenceDataset> {
    let img_dir = dir.join("img");
    let entries = fs::read_dir(&img_dir).map_err(|e| HarnessError::file(&img_dir, e.to_string()))?;
    let mut frames: Vec<(u64, PathBuf)> = Vec::new();
    for entry in entries {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        let n = frame_number(&path).ok_or_else(|| HarnessError::file(&path, "frame file name is not a number"))?;
        frames.push((n, path));
    }
    frames.sort();
    if frames.len() < 2 {
        return Err(HarnessError::file(&img_dir, format!("found {} frames, need at least 2", frames.len())));
    }
    let first = frames[0].0;
    for (i, (n, path)) in frames.iter().enumerate() {
        if *n != first + i as u64 {
            return Err(HarnessError::file(path, format!("frame {} is missing", first + i as u64)));
        }
    }
    let gt_path = dir.join(GROUNDTRUTH_FILE);
    let text = fs::read_to_string(&gt_path).map_err(|e| HarnessError::file(&gt_path, e.to_string()))?;
    let ground_truth = parse_ground_truth(&text, &gt_path)?;
    let ok = match mode {
        GroundTruth::Full => ground_truth.len() == frames.len(),
        GroundTruth::FirstOnly => !ground_truth.is_empty() && ground_truth.len() <= frames.len(),
    };
    if !ok {
        return Err(HarnessError::file(
            &gt_path,
            format!("{} ground-truth lines for {} frames", ground_truth.len(), frames.len()),
        ));
    }
    let paths: Vec<PathBuf> = frames.into_iter().map(|(_, p)| p).collect();
    let color = load_image(&paths[0])?.is_color();
    let name = dir
        .canonicalize()
        .ok()
        .and_then(|d| d.file_name().map(|s| s.to_string_lossy().into_owned()))
        .unwrap_or_else(|| dir.display().to_string());
    Ok(SequenceDataset { name, frames: Frames::Files(paths), ground_truth, color })
}

/// Decodes an image file; gray files stay single-channel.
pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|source| HarnessError::Image { path: path.into(), source })?;
    let color = img.color().has_color();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, bytes) = if color { (3, img.to_rgb8().into_raw()) } else { (1, img.to_luma8().into_raw()) };
    let data = bytes.into_iter().map(|b| b as f32 / 255.0).collect();
    Ok(Image::new(w, h, channels, data)?)
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    let (w, h) = (img.width() as u32, img.height() as u32);
    let bytes: Vec<u8> = img.data().iter().map(|&v| to_byte(v)).collect();
    let res = if img.channels() == 3 {
        image::RgbImage::from_raw(w, h, bytes).expect("sized buffer").save(path)
    } else {
        image::GrayImage::from_raw(w, h, bytes).expect("sized buffer").save(path)
    };
    res.map_err(|source| HarnessError::Image { path: path.into(), source })
}
