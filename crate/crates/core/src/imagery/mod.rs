//! Raster types and their on-disk formats.
//!
//! Images are 8-bit RGB PNGs, label maps are 8-bit single-channel PNGs with
//! `255` reserved for void, and flow fields use the Middlebury `.flo` layout.

mod flow;
mod manifest;

use std::path::{Path, PathBuf};

use image::{ColorType, DynamicImage, GrayImage, ImageReader, RgbImage};
use thiserror::Error;

pub use flow::{read_flow, write_flow, FLOW_MAGIC};
pub use manifest::{
    load_manifest, load_ratings, parse_manifest, parse_ratings, write_manifest, write_ratings,
    DatasetManifest, ManifestEntry, Ratings, Tier,
};

/// Reserved label value for unlabeled pixels.
pub const VOID: u8 = 255;

#[derive(Debug, Error)]
pub enum ImageryError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: corrupt or unreadable image: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("{path}: unsupported pixel format {format}")]
    UnsupportedFormat { path: PathBuf, format: String },
    #[error("invalid dimensions {width}x{height}")]
    BadDimensions { width: usize, height: usize },
    #[error("buffer length {actual} does not match {expected}")]
    BadLength { expected: usize, actual: usize },
    #[error("label value {value} at pixel {index} is out of range for {num_classes} classes")]
    LabelOutOfRange {
        value: u8,
        index: usize,
        num_classes: usize,
    },
    #[error("invalid class count {0} (must be 1..=255)")]
    BadClassCount(usize),
    #[error("bad magic {0} in flow file")]
    BadMagic(f32),
    #[error("truncated flow payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("non-finite flow vector at pixel {0}")]
    NonFiniteFlow(usize),
    #[error("{path}:{line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{0}")]
    Csv(#[from] csv::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ImageryError + '_ {
    move |source| ImageryError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn check_dims(width: usize, height: usize) -> Result<(), ImageryError> {
    if width == 0 || height == 0 || width > u32::MAX as usize || height > u32::MAX as usize {
        return Err(ImageryError::BadDimensions { width, height });
    }
    Ok(())
}

/// An 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, ImageryError> {
        check_dims(width, height)?;
        let expected = width * height * 3;
        if data.len() != expected {
            return Err(ImageryError::BadLength {
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self, ImageryError> {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixel_at(y * self.width + x)
    }

    pub fn pixel_at(&self, index: usize) -> [u8; 3] {
        let o = index * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    /// Pixel color with each channel scaled to `[0, 1]`.
    pub fn color_at(&self, index: usize) -> [f64; 3] {
        let p = self.pixel_at(index);
        [
            f64::from(p[0]) / 255.0,
            f64::from(p[1]) / 255.0,
            f64::from(p[2]) / 255.0,
        ]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let o = (y * self.width + x) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    pub fn same_size<T: Raster>(&self, other: &T) -> bool {
        self.width == other.raster_width() && self.height == other.raster_height()
    }
}

/// Anything with a pixel grid, for dimension checks across types.
pub trait Raster {
    fn raster_width(&self) -> usize;
    fn raster_height(&self) -> usize;
}

impl Raster for Frame {
    fn raster_width(&self) -> usize {
        self.width
    }
    fn raster_height(&self) -> usize {
        self.height
    }
}

impl Raster for LabelMap {
    fn raster_width(&self) -> usize {
        self.width
    }
    fn raster_height(&self) -> usize {
        self.height
    }
}

impl Raster for FlowField {
    fn raster_width(&self) -> usize {
        self.width
    }
    fn raster_height(&self) -> usize {
        self.height
    }
}

/// Per-pixel class indices; [`VOID`] marks unlabeled pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    labels: Vec<u8>,
    num_classes: usize,
}

impl LabelMap {
    pub fn new(
        width: usize,
        height: usize,
        labels: Vec<u8>,
        num_classes: usize,
    ) -> Result<Self, ImageryError> {
        check_dims(width, height)?;
        if num_classes == 0 || num_classes > usize::from(VOID) {
            return Err(ImageryError::BadClassCount(num_classes));
        }
        if labels.len() != width * height {
            return Err(ImageryError::BadLength {
                expected: width * height,
                actual: labels.len(),
            });
        }
        if let Some((index, &value)) = labels
            .iter()
            .enumerate()
            .find(|(_, &v)| v != VOID && usize::from(v) >= num_classes)
        {
            return Err(ImageryError::LabelOutOfRange {
                value,
                index,
                num_classes,
            });
        }
        Ok(Self {
            width,
            height,
            labels,
            num_classes,
        })
    }

    pub fn filled(
        width: usize,
        height: usize,
        label: u8,
        num_classes: usize,
    ) -> Result<Self, ImageryError> {
        Self::new(width, height, vec![label; width * height], num_classes)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Writes a label, rejecting values outside the class range.
    pub fn set(&mut self, x: usize, y: usize, label: u8) -> Result<(), ImageryError> {
        if label != VOID && usize::from(label) >= self.num_classes {
            return Err(ImageryError::LabelOutOfRange {
                value: label,
                index: y * self.width + x,
                num_classes: self.num_classes,
            });
        }
        self.labels[y * self.width + x] = label;
        Ok(())
    }

    pub fn count_void(&self) -> usize {
        self.labels.iter().filter(|&&l| l == VOID).count()
    }

    pub fn same_size<T: Raster>(&self, other: &T) -> bool {
        self.width == other.raster_width() && self.height == other.raster_height()
    }

    /// Number of pixels whose label differs from `other`.
    pub fn diff_count(&self, other: &LabelMap) -> usize {
        self.labels
            .iter()
            .zip(&other.labels)
            .filter(|(a, b)| a != b)
            .count()
    }
}

/// Per-pixel forward displacement `(u, v)` from frame `t` to frame `t+1`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    vectors: Vec<[f32; 2]>,
}

impl FlowField {
    pub fn new(width: usize, height: usize, vectors: Vec<[f32; 2]>) -> Result<Self, ImageryError> {
        check_dims(width, height)?;
        if vectors.len() != width * height {
            return Err(ImageryError::BadLength {
                expected: width * height,
                actual: vectors.len(),
            });
        }
        if let Some(i) = vectors
            .iter()
            .position(|v| !v[0].is_finite() || !v[1].is_finite())
        {
            return Err(ImageryError::NonFiniteFlow(i));
        }
        Ok(Self {
            width,
            height,
            vectors,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Result<Self, ImageryError> {
        Self::new(width, height, vec![[0.0, 0.0]; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn vectors(&self) -> &[[f32; 2]] {
        &self.vectors
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 2] {
        self.vectors[y * self.width + x]
    }
}

/// Ordered class names with display colors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Palette {
    entries: Vec<(String, [u8; 3])>,
}

impl Palette {
    pub fn new(entries: Vec<(String, [u8; 3])>) -> Result<Self, ImageryError> {
        if entries.is_empty() || entries.len() > usize::from(VOID) {
            return Err(ImageryError::BadClassCount(entries.len()));
        }
        let mut names: Vec<&str> = entries.iter().map(|(n, _)| n.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(ImageryError::Manifest {
                path: PathBuf::new(),
                line: 0,
                message: format!("duplicate class name {:?}", w[0]),
            });
        }
        Ok(Self { entries })
    }

    /// The 11-class CamVid road-scene palette.
    pub fn camvid() -> Self {
        let e = [
            ("Building", [128, 0, 0]),
            ("Tree", [128, 128, 0]),
            ("Sky", [128, 128, 128]),
            ("Car", [64, 0, 128]),
            ("Sign", [192, 128, 128]),
            ("Road", [128, 64, 128]),
            ("Pedestrian", [64, 64, 0]),
            ("Fence", [64, 64, 128]),
            ("Pole", [192, 192, 128]),
            ("Sidewalk", [0, 0, 192]),
            ("Bicycle", [0, 128, 192]),
        ];
        Self {
            entries: e.iter().map(|(n, c)| ((*n).to_string(), *c)).collect(),
        }
    }

    /// Palette for synthetic corpora: `background` followed by `object<k>`.
    pub fn synthetic(num_classes: usize) -> Self {
        let entries = (0..num_classes)
            .map(|c| {
                let name = if c == 0 {
                    "background".to_string()
                } else {
                    format!("object{c}")
                };
                (name, crate::datasets::synth::class_color(c))
            })
            .collect();
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, class: usize) -> &str {
        &self.entries[class].0
    }

    pub fn color(&self, class: usize) -> [u8; 3] {
        self.entries[class].1
    }

    pub fn entries(&self) -> &[(String, [u8; 3])] {
        &self.entries
    }

    /// Reads a `name,r,g,b` CSV.
    pub fn load(path: &Path) -> Result<Self, ImageryError> {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut entries = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let bad = |message: String| ImageryError::Manifest {
                path: path.to_path_buf(),
                line: i + 2,
                message,
            };
            if rec.len() != 4 {
                return Err(bad(format!("expected 4 fields, found {}", rec.len())));
            }
            let mut rgb = [0u8; 3];
            for (k, v) in rgb.iter_mut().enumerate() {
                *v = rec[k + 1]
                    .trim()
                    .parse()
                    .map_err(|_| bad(format!("bad color component {:?}", &rec[k + 1])))?;
            }
            entries.push((rec[0].to_string(), rgb));
        }
        Self::new(entries).map_err(|e| match e {
            ImageryError::Manifest { line, message, .. } => ImageryError::Manifest {
                path: path.to_path_buf(),
                line,
                message,
            },
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ImageryError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["name", "r", "g", "b"])?;
        for (name, c) in &self.entries {
            w.write_record([
                name.clone(),
                c[0].to_string(),
                c[1].to_string(),
                c[2].to_string(),
            ])?;
        }
        w.flush().map_err(io_err(path))?;
        Ok(())
    }
}

fn open_image(path: &Path) -> Result<DynamicImage, ImageryError> {
    let reader = ImageReader::open(path)
        .map_err(io_err(path))?
        .with_guessed_format()
        .map_err(io_err(path))?;
    reader.decode().map_err(|e| ImageryError::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Loads an 8-bit RGB image. An alpha channel, if present, is dropped.
pub fn load_image(path: &Path) -> Result<Frame, ImageryError> {
    let img = open_image(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = match img {
        DynamicImage::ImageRgb8(buf) => buf.into_raw(),
        DynamicImage::ImageRgba8(buf) => buf
            .into_raw()
            .chunks_exact(4)
            .flat_map(|p| [p[0], p[1], p[2]])
            .collect(),
        other => {
            return Err(ImageryError::UnsupportedFormat {
                path: path.to_path_buf(),
                format: format!("{:?}", other.color()),
            })
        }
    };
    Frame::new(w, h, data)
}

pub fn write_image(path: &Path, frame: &Frame) -> Result<(), ImageryError> {
    let buf = RgbImage::from_raw(
        frame.width as u32,
        frame.height as u32,
        frame.data.clone(),
    )
    .expect("frame buffer length is validated at construction");
    buf.save(path).map_err(|e| ImageryError::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Loads a single-channel 8-bit label raster.
pub fn load_labels(path: &Path, num_classes: usize) -> Result<LabelMap, ImageryError> {
    let img = open_image(path)?;
    if img.color() != ColorType::L8 {
        return Err(ImageryError::UnsupportedFormat {
            path: path.to_path_buf(),
            format: format!("{:?}", img.color()),
        });
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    LabelMap::new(w, h, img.into_luma8().into_raw(), num_classes)
}

pub fn write_labels(path: &Path, labels: &LabelMap) -> Result<(), ImageryError> {
    let buf = GrayImage::from_raw(
        labels.width as u32,
        labels.height as u32,
        labels.labels.clone(),
    )
    .expect("label buffer length is validated at construction");
    buf.save(path).map_err(|e| ImageryError::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Renders a label map through a palette (void pixels are black).
pub fn colorize(labels: &LabelMap, palette: &Palette) -> Frame {
    let data = labels
        .labels
        .iter()
        .flat_map(|&l| {
            if l == VOID || usize::from(l) >= palette.len() {
                [0, 0, 0]
            } else {
                palette.color(usize::from(l))
            }
        })
        .collect();
    Frame::new(labels.width, labels.height, data).expect("same dimensions as the label map")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn white_pixel_loads_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.png");
        RgbImage::from_raw(1, 1, vec![255, 255, 255])
            .unwrap()
            .save(&p)
            .unwrap();
        let f = load_image(&p).unwrap();
        assert_eq!(f, Frame::new(1, 1, vec![255, 255, 255]).unwrap());
    }

    #[test]
    fn camvid_sized_frame_byte_count() {
        let f = Frame::filled(480, 360, [1, 2, 3]).unwrap();
        assert_eq!(f.data().len(), 518_400);
    }

    #[test]
    fn frame_rejects_bad_buffers() {
        assert!(Frame::new(0, 3, vec![]).is_err());
        assert!(Frame::new(2, 2, vec![0; 11]).is_err());
    }

    #[test]
    fn sixteen_bit_image_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("deep.png");
        let img = image::ImageBuffer::<image::Rgb<u16>, _>::from_raw(2, 1, vec![0u16; 6]).unwrap();
        img.save(&p).unwrap();
        assert!(matches!(
            load_image(&p),
            Err(ImageryError::UnsupportedFormat { .. })
        ));
    }

    #[test]
    fn corrupt_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.png");
        std::fs::write(&p, b"\x89PNG\r\n\x1a\nnot really").unwrap();
        assert!(matches!(load_image(&p), Err(ImageryError::Decode { .. })));
        assert!(matches!(
            load_image(&dir.path().join("nope.png")),
            Err(ImageryError::Io { .. })
        ));
    }

    #[test]
    fn label_loading_rules() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.png");

        GrayImage::from_raw(3, 2, vec![0; 6]).unwrap().save(&p).unwrap();
        let l = load_labels(&p, 11).unwrap();
        assert!(l.labels().iter().all(|&v| v == 0));

        GrayImage::from_raw(3, 1, vec![0, 255, 10]).unwrap().save(&p).unwrap();
        let l = load_labels(&p, 11).unwrap();
        assert_eq!(l.labels(), &[0, VOID, 10]);
        assert_eq!(l.count_void(), 1);

        GrayImage::from_raw(3, 1, vec![0, 12, 1]).unwrap().save(&p).unwrap();
        assert!(matches!(
            load_labels(&p, 11),
            Err(ImageryError::LabelOutOfRange { value: 12, .. })
        ));
    }

    #[test]
    fn palette_rejects_duplicates_and_roundtrips() {
        assert!(Palette::new(vec![("a".into(), [0; 3]), ("a".into(), [1; 3])]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pal.csv");
        let pal = Palette::camvid();
        pal.save(&p).unwrap();
        assert_eq!(Palette::load(&p).unwrap(), pal);
        assert_eq!(pal.len(), 11);
    }

    fn arb_frame() -> impl Strategy<Value = Frame> {
        (1usize..9, 1usize..9).prop_flat_map(|(w, h)| {
            proptest::collection::vec(any::<u8>(), w * h * 3)
                .prop_map(move |d| Frame::new(w, h, d).unwrap())
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn image_roundtrip(f in arb_frame()) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("f.png");
            write_image(&p, &f).unwrap();
            prop_assert_eq!(load_image(&p).unwrap(), f);
        }

        #[test]
        fn label_roundtrip(w in 1usize..9, h in 1usize..9, seed in any::<u64>()) {
            let labels: Vec<u8> = (0..w * h)
                .map(|i| {
                    let v = (seed.wrapping_mul(6364136223846793005).wrapping_add(i as u64) >> 33) % 12;
                    if v == 11 { VOID } else { v as u8 }
                })
                .collect();
            let l = LabelMap::new(w, h, labels, 11).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("l.png");
            write_labels(&p, &l).unwrap();
            prop_assert_eq!(load_labels(&p, 11).unwrap(), l);
        }
    }
}
