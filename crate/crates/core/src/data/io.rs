//! Dataset directories: `images/` plus `annotations/` with matching stems.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;

use super::annotation::{parse_annotation, serialize_annotation, Annotation};
use super::{DatasetRecord, Pixels, Source};
use crate::error::{Error, Result};

const IMAGE_EXTENSIONS: [&str; 4] = ["jpg", "jpeg", "png", "JPG"];

/// Reads an image and resizes it to `size`×`size` (no letterboxing, so
/// normalized box coordinates carry over unchanged).
pub fn load_image(path: &Path, size: usize) -> Result<Pixels> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let img = if img.width() as usize == size && img.height() as usize == size {
        img
    } else {
        image::imageops::resize(&img, size as u32, size as u32, FilterType::Triangle)
    };
    Pixels::from_rgb8(size, size, img.as_raw())
}

pub fn save_png(pixels: &Pixels, path: &Path) -> Result<()> {
    let img = image::RgbImage::from_raw(pixels.width as u32, pixels.height as u32, pixels.to_rgb8())
        .ok_or_else(|| Error::InvalidArgument("pixel buffer size".into()))?;
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn find_image(dir: &Path, stem: &str) -> Option<PathBuf> {
    IMAGE_EXTENSIONS
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
}

/// Loads every annotation under `root/annotations` with its image from
/// `root/images`, in file-name order.
pub fn load_dataset(root: &Path, image_size: usize) -> Result<Vec<DatasetRecord>> {
    let ann_dir = root.join("annotations");
    let img_dir = root.join("images");
    let entries = std::fs::read_dir(&ann_dir).map_err(|e| Error::io(&ann_dir, e))?;
    let mut xmls: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "xml"))
        .collect();
    xmls.sort();
    let mut out = Vec::with_capacity(xmls.len());
    for xml_path in xmls {
        let stem = xml_path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let text = std::fs::read_to_string(&xml_path).map_err(|e| Error::io(&xml_path, e))?;
        let ann = parse_annotation(&text)
            .map_err(|e| Error::Annotation(format!("{}: {e}", xml_path.display())))?;
        let img_path = find_image(&img_dir, &stem).ok_or_else(|| {
            Error::io(
                img_dir.join(format!("{stem}.*")),
                std::io::Error::new(std::io::ErrorKind::NotFound, "no image for annotation"),
            )
        })?;
        out.push(DatasetRecord {
            id: stem,
            pixels: load_image(&img_path, image_size)?,
            boxes: ann.boxes,
            source: Source::Real,
        });
    }
    Ok(out)
}

/// Writes records as PNG images plus XML annotations.
pub fn export_dataset(records: &[DatasetRecord], root: &Path) -> Result<()> {
    let img_dir = root.join("images");
    let ann_dir = root.join("annotations");
    for d in [&img_dir, &ann_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for r in records {
        let file = format!("{}.png", r.id);
        save_png(&r.pixels, &img_dir.join(&file))?;
        let ann = Annotation {
            filename: file,
            width: r.pixels.width,
            height: r.pixels.height,
            boxes: r.boxes.clone(),
        };
        let path = ann_dir.join(format!("{}.xml", r.id));
        std::fs::write(&path, serialize_annotation(&ann)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
