//! Rasters: grayscale frames, label maps, instance maps and masks, with
//! binary PGM (P5) I/O.

use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor};
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder, ImageFormat, ImageReader};

use crate::error::{invalid, Error, Result};

/// Label value excluded from every metric and from the training loss.
pub const IGNORE_LABEL: u16 = 255;

/// Row-major `height × width` raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

/// Per-pixel class ids, [`IGNORE_LABEL`] marks unlabelled pixels.
pub type LabelMap = Grid<u16>;
/// Per-pixel instance ids, 0 means "no instance".
pub type InstanceMap = Grid<u16>;
/// `true` marks invalid (ambiguous) pixels.
pub type InvalidMask = Grid<bool>;

impl<T: Copy> Grid<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return invalid(format!("{height}×{width} raster with {} samples", data.len()));
        }
        Ok(Grid { width, height, data })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> T) -> Result<Self> {
        let data = (0..height)
            .flat_map(|y| (0..width).map(move |x| (y, x)))
            .map(|(y, x)| f(y, x))
            .collect();
        Self::new(height, width, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    pub fn crop(&self, rect: Rect) -> Result<Self> {
        rect.check_inside(self.height, self.width)?;
        Self::from_fn(rect.height, rect.width, |y, x| self.get(rect.y + y, rect.x + x))
    }
}

/// Axis-aligned pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Rect {
    pub fn full(height: usize, width: usize) -> Self {
        Rect {
            x: 0,
            y: 0,
            width,
            height,
        }
    }

    pub fn check_inside(&self, height: usize, width: usize) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.x + self.width > width || self.y + self.height > height {
            return invalid(format!("crop {self:?} outside {height}×{width}"));
        }
        Ok(())
    }
}

/// 8-bit grayscale frame, at least 8×8.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage(Grid<u8>);

impl GrayImage {
    pub const MIN_SIDE: usize = 8;

    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height < Self::MIN_SIDE || width < Self::MIN_SIDE {
            return invalid(format!("image {height}×{width} smaller than 8×8"));
        }
        Grid::new(height, width, data).map(GrayImage)
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> u8) -> Result<Self> {
        let g = Grid::from_fn(height, width, f)?;
        Self::new(height, width, g.data)
    }

    pub fn grid(&self) -> &Grid<u8> {
        &self.0
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    pub fn data(&self) -> &[u8] {
        &self.0.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.0.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.0.get(y, x)
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.0.set(y, x, v)
    }

    pub fn crop(&self, rect: Rect) -> Result<Self> {
        let g = self.0.crop(rect)?;
        Self::new(g.height, g.width, g.data)
    }

    pub fn save_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        save_pgm8(path, self.height(), self.width(), self.data())
    }

    pub fn load_pgm(path: impl AsRef<Path>) -> Result<Self> {
        let (h, w, data) = load_pgm(path)?;
        let data = data
            .into_iter()
            .map(|v| u8::try_from(v).map_err(|_| Error::InvalidArgument("16-bit PGM given as frame".into())))
            .collect::<Result<_>>()?;
        Self::new(h, w, data)
    }
}

impl Grid<u16> {
    /// Writes an 8-bit PGM when every value fits, 16-bit otherwise.
    pub fn save_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        if self.data.iter().all(|&v| v <= 255) {
            let bytes: Vec<u8> = self.data.iter().map(|&v| v as u8).collect();
            save_pgm8(path, self.height, self.width, &bytes)
        } else {
            // the pnm encoder has no 16-bit path, so write the raster by hand
            let mut out = format!("P5\n{} {}\n65535\n", self.width, self.height).into_bytes();
            out.extend(self.data.iter().flat_map(|v| v.to_be_bytes()));
            std::fs::write(path, out)?;
            Ok(())
        }
    }

    pub fn load_pgm(path: impl AsRef<Path>) -> Result<Self> {
        let (h, w, data) = load_pgm(path)?;
        Self::new(h, w, data)
    }
}

impl Grid<bool> {
    /// Stored as 0/255.
    pub fn save_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| if v { 255 } else { 0 }).collect();
        save_pgm8(path, self.height, self.width, &bytes)
    }

    /// Any non-zero sample is treated as set.
    pub fn load_pgm(path: impl AsRef<Path>) -> Result<Self> {
        let (h, w, data) = load_pgm(path)?;
        Self::new(h, w, data.into_iter().map(|v| v != 0).collect())
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }
}

pub fn save_pgm8(path: impl AsRef<Path>, height: usize, width: usize, data: &[u8]) -> Result<()> {
    write_pgm(path, height, width, data, ExtendedColorType::L8)
}

fn write_pgm(
    path: impl AsRef<Path>,
    height: usize,
    width: usize,
    bytes: &[u8],
    color: ExtendedColorType,
) -> Result<()> {
    let out = BufWriter::new(File::create(path)?);
    PnmEncoder::new(out)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(bytes, width as u32, height as u32, color)?;
    Ok(())
}

/// Reads any 8- or 16-bit PGM as `(height, width, samples)`.
pub fn load_pgm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u16>)> {
    let reader = ImageReader::with_format(BufReader::new(File::open(path)?), ImageFormat::Pnm);
    from_dynamic(reader.decode()?)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>)> {
    let reader = ImageReader::with_format(Cursor::new(bytes), ImageFormat::Pnm);
    from_dynamic(reader.decode()?)
}

fn from_dynamic(img: DynamicImage) -> Result<(usize, usize, Vec<u16>)> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = match img {
        DynamicImage::ImageLuma8(g) => g.into_raw().into_iter().map(u16::from).collect(),
        DynamicImage::ImageLuma16(g) => g.into_raw(),
        other => {
            return Err(Error::Format {
                format: "PGM",
                reason: format!("expected grayscale, got {:?}", other.color()),
            })
        }
    };
    Ok((h, w, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_min_size() {
        assert!(GrayImage::filled(7, 20, 0).is_err());
        assert!(GrayImage::filled(8, 8, 0).is_ok());
    }

    #[test]
    fn pgm_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let img = GrayImage::from_fn(9, 13, |y, x| (y * 13 + x) as u8).unwrap();
        let p = dir.path().join("a.pgm");
        img.save_pgm(&p).unwrap();
        assert_eq!(GrayImage::load_pgm(&p).unwrap(), img);
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5"));

        let labels = LabelMap::from_fn(3, 4, |y, x| (y * 1000 + x) as u16).unwrap();
        labels.save_pgm(&p).unwrap();
        assert_eq!(LabelMap::load_pgm(&p).unwrap(), labels);

        let small = LabelMap::from_fn(3, 4, |y, _| y as u16).unwrap();
        small.save_pgm(&p).unwrap();
        assert_eq!(LabelMap::load_pgm(&p).unwrap(), small);

        let mask = InvalidMask::from_fn(5, 5, |y, x| y == x).unwrap();
        mask.save_pgm(&p).unwrap();
        assert_eq!(InvalidMask::load_pgm(&p).unwrap(), mask);
        assert_eq!(mask.count(), 5);
    }

    #[test]
    fn crop_bounds() {
        let g = LabelMap::from_fn(4, 6, |y, x| (y * 6 + x) as u16).unwrap();
        let c = g
            .crop(Rect {
                x: 2,
                y: 1,
                width: 3,
                height: 2,
            })
            .unwrap();
        assert_eq!(c.data(), &[8, 9, 10, 14, 15, 16]);
        assert!(g
            .crop(Rect {
                x: 4,
                y: 0,
                width: 3,
                height: 1
            })
            .is_err());
    }
}
