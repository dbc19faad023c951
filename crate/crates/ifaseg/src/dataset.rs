//! Directory-backed datasets.
//!
//! ```text
//! root/<category>/images/<id>.png   RGB or grey, any bit depth
//! root/<category>/masks/<id>.png    8-bit grey, 255 foreground, 0 background
//! ```
//!
//! Categories are the sub-directories of `root` in byte order of their
//! names; the category id is the position in that order. Items are the
//! `<id>.png` stems in byte order, and every image needs a mask with the same
//! stem and vice versa. The layout and every mask are checked when the
//! dataset is opened; images are read on demand.

use std::fs;
use std::path::{Path, PathBuf};

use ifaseg_core::episodes::{Dataset, Sample};
use ifaseg_core::image::{BinaryMask, Image};

use crate::error::{io, Error, Result};

#[derive(Debug, Clone, PartialEq)]
struct CategoryDir {
    name: String,
    dir: PathBuf,
    stems: Vec<String>,
    masks: Vec<BinaryMask>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectoryDataset {
    root: PathBuf,
    domain: String,
    categories: Vec<CategoryDir>,
}

fn layout_error(path: &Path, message: impl Into<String>) -> Error {
    Error::Layout {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = fs::read_dir(dir)
        .map_err(io(dir))?
        .map(|e| e.map(|e| e.path()).map_err(io(dir)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

fn png_stems(dir: &Path) -> Result<Vec<String>> {
    if !dir.is_dir() {
        return Err(layout_error(dir, "missing directory"));
    }
    let mut stems = Vec::new();
    for p in sorted_entries(dir)? {
        let is_png = p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
        match (p.is_file() && is_png, p.file_stem().and_then(|s| s.to_str())) {
            (true, Some(stem)) => stems.push(stem.to_string()),
            _ => return Err(layout_error(&p, "expected only <id>.png files")),
        }
    }
    Ok(stems)
}

impl DirectoryDataset {
    pub fn open(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(layout_error(root, "dataset root is not a directory"));
        }
        let mut categories = Vec::new();
        for dir in sorted_entries(root)? {
            if !dir.is_dir() {
                return Err(layout_error(&dir, "expected only category directories in the dataset root"));
            }
            let name = dir
                .file_name()
                .and_then(|n| n.to_str())
                .ok_or_else(|| layout_error(&dir, "category name is not UTF-8"))?
                .to_string();
            let images = png_stems(&dir.join("images"))?;
            let masks = png_stems(&dir.join("masks"))?;
            if let Some(s) = images.iter().find(|s| !masks.contains(s)) {
                return Err(layout_error(&dir.join("images").join(format!("{s}.png")), "image has no mask"));
            }
            if let Some(s) = masks.iter().find(|s| !images.contains(s)) {
                return Err(layout_error(&dir.join("masks").join(format!("{s}.png")), "mask has no image"));
            }
            let masks = images
                .iter()
                .map(|s| read_mask(&dir.join("masks").join(format!("{s}.png"))))
                .collect::<Result<Vec<_>>>()?;
            categories.push(CategoryDir {
                name,
                dir,
                stems: images,
                masks,
            });
        }
        if categories.is_empty() {
            log::warn!("dataset root {} holds no categories", root.display());
        }
        let domain = root
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("dataset")
            .to_string();
        Ok(DirectoryDataset {
            root: root.to_path_buf(),
            domain,
            categories,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn read(&self, c: usize, i: usize) -> Result<Sample> {
        let cat = &self.categories[c];
        let file = format!("{}.png", cat.stems[i]);
        let (ip, mp) = (cat.dir.join("images").join(&file), cat.dir.join("masks").join(&file));
        let image = read_image(&ip)?;
        let mask = cat.masks[i].clone();
        if (image.height(), image.width()) != (mask.height(), mask.width()) {
            return Err(layout_error(
                &mp,
                format!(
                    "mask is {}x{} but its image is {}x{}",
                    mask.height(),
                    mask.width(),
                    image.height(),
                    image.width()
                ),
            ));
        }
        Ok(Sample::new(image, mask)?)
    }
}

fn open_png(path: &Path) -> Result<image::DynamicImage> {
    image::ImageReader::open(path)
        .map_err(io(path))?
        .with_guessed_format()
        .map_err(io(path))?
        .decode()
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

pub fn read_image(path: &Path) -> Result<Image> {
    let rgb = open_png(path)?.to_rgb32f();
    let (w, h) = rgb.dimensions();
    Ok(Image::new(h as usize, w as usize, rgb.into_raw())?)
}

/// Reads an 8-bit grey mask; any value besides 0 and 255 is an error.
pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let img = open_png(path)?;
    let grey = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(layout_error(
                path,
                format!("mask must be 8-bit greyscale, found {:?}", other.color()),
            ))
        }
    };
    let (w, h) = grey.dimensions();
    let mut data = Vec::with_capacity((w * h) as usize);
    for (x, y, p) in grey.enumerate_pixels() {
        match p.0[0] {
            0 => data.push(0),
            255 => data.push(1),
            v => {
                return Err(layout_error(
                    path,
                    format!("mask value {v} at ({x}, {y}); only 0 and 255 are allowed"),
                ))
            }
        }
    }
    Ok(BinaryMask::new(h as usize, w as usize, data)?)
}

impl Dataset for DirectoryDataset {
    fn domain(&self) -> &str {
        &self.domain
    }

    fn category_count(&self) -> usize {
        self.categories.len()
    }

    fn category_id(&self, c: usize) -> u32 {
        c as u32
    }

    fn category_name(&self, c: usize) -> String {
        self.categories[c].name.clone()
    }

    fn category_len(&self, c: usize) -> usize {
        self.categories[c].stems.len()
    }

    fn load(&self, c: usize, i: usize) -> ifaseg_core::Result<Sample> {
        if c >= self.categories.len() || i >= self.categories[c].stems.len() {
            return Err(ifaseg_core::Error::Dataset(format!("no item {i} in category {c}")));
        }
        self.read(c, i).map_err(|e| match e {
            Error::Core(inner) => inner,
            other => ifaseg_core::Error::Dataset(other.to_string()),
        })
    }
}

/// Writes any dataset in the directory layout, one sub-directory per
/// category named after it, items numbered `0000.png` upwards.
pub fn write_dataset(ds: &dyn Dataset, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(io(root))?;
    for c in 0..ds.category_count() {
        let dir = root.join(ds.category_name(c));
        let (idir, mdir) = (dir.join("images"), dir.join("masks"));
        fs::create_dir_all(&idir).map_err(io(&idir))?;
        fs::create_dir_all(&mdir).map_err(io(&mdir))?;
        for i in 0..ds.category_len(c) {
            let s = ds.load(c, i)?;
            let file = format!("{i:04}.png");
            write_image(&s.image, &idir.join(&file))?;
            write_mask(&s.mask, &mdir.join(&file))?;
        }
    }
    Ok(())
}

pub fn write_image(img: &Image, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = img
        .pixels()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, bytes)
        .expect("pixel buffer matches the image size");
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = mask.data().iter().map(|&v| v * 255).collect();
    let buf = image::GrayImage::from_raw(mask.width() as u32, mask.height() as u32, bytes)
        .expect("mask buffer matches the mask size");
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}
