//! PNG images, index masks, colour visualisations and paired directories.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use ovseg_core::{ImageTensor, SegMap, Tensor};

use crate::error::{invalid, CliError, CliResult};

fn open(path: &Path) -> CliResult<image::DynamicImage> {
    if !path.exists() {
        return Err(CliError::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    image::open(path).map_err(|e| CliError::format(path, e.to_string()))
}

/// RGB image with intensities in `[0, 1]`.
pub fn load_image(path: &Path) -> CliResult<ImageTensor> {
    let img = open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(ImageTensor::from_fn(h, w, |c, y, x| img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0))
}

pub fn save_image(path: &Path, image: &ImageTensor) -> CliResult<()> {
    let (h, w) = (image.height(), image.width());
    let out = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        Rgb([0, 1, 2].map(|c| (image.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    out.save(path).map_err(|e| CliError::format(path, e.to_string()))
}

/// Single-channel 8-bit mask of class indices.
pub fn load_index_png(path: &Path) -> CliResult<SegMap> {
    let img = open(path)?;
    if !matches!(img, image::DynamicImage::ImageLuma8(_)) {
        return Err(CliError::format(path, "index masks must be 8-bit single-channel PNGs"));
    }
    let img = img.to_luma8();
    let labels = img.pixels().map(|p| p[0] as u32).collect();
    Ok(SegMap::new(img.height() as usize, img.width() as usize, labels)?)
}

pub fn save_index_png(path: &Path, map: &SegMap) -> CliResult<()> {
    if let Some(&l) = map.labels.iter().find(|&&l| l > 255) {
        return Err(invalid(format!("label {l} does not fit an 8-bit index PNG")));
    }
    let img = GrayImage::from_fn(map.width as u32, map.height as u32, |x, y| {
        Luma([map.get(y as usize, x as usize) as u8])
    });
    img.save(path).map_err(|e| CliError::format(path, e.to_string()))
}

/// Distinct display colour for class `k`.
pub fn palette(k: u32) -> [u8; 3] {
    const BASE: [[u8; 3]; 12] = [
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
        [210, 245, 60],
        [250, 190, 212],
        [0, 128, 128],
        [170, 110, 40],
    ];
    let base = BASE[k as usize % BASE.len()];
    let round = (k as usize / BASE.len()) as u8;
    base.map(|v| v.wrapping_add(round.wrapping_mul(67)))
}

pub fn save_color_png(path: &Path, map: &SegMap) -> CliResult<()> {
    let img = RgbImage::from_fn(map.width as u32, map.height as u32, |x, y| {
        Rgb(palette(map.get(y as usize, x as usize)))
    });
    img.save(path).map_err(|e| CliError::format(path, e.to_string()))
}

/// Nearest-neighbour resampling of per-class maps `N×h×w` to `N×H×W`.
pub fn resize_planes(t: &Tensor, height: usize, width: usize) -> Tensor {
    let s = t.shape();
    let (n, h, w) = (s[0], s[1], s[2]);
    Tensor::from_fn(&[n, height, width], |i| {
        let (k, rem) = (i / (height * width), i % (height * width));
        let (y, x) = (rem / width * h / height, rem % width * w / width);
        t.data()[(k * h + y) * w + x]
    })
}

/// PNG files of a directory keyed by file stem.
pub fn png_files(dir: &Path) -> CliResult<BTreeMap<String, PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

/// Files present in both directories, by stem. Any file without a
/// partner is an error naming every orphan.
pub fn pair_dirs(left: &Path, right: &Path) -> CliResult<Vec<(String, PathBuf, PathBuf)>> {
    let (a, b) = (png_files(left)?, png_files(right)?);
    let mut orphans: Vec<String> = a
        .keys()
        .filter(|k| !b.contains_key(*k))
        .map(|k| left.join(format!("{k}.png")).display().to_string())
        .collect();
    orphans.extend(b.keys().filter(|k| !a.contains_key(*k)).map(|k| right.join(format!("{k}.png")).display().to_string()));
    if !orphans.is_empty() {
        return Err(invalid(format!("unpaired files: {}", orphans.join(", "))));
    }
    if a.is_empty() {
        return Err(invalid(format!("no PNG files in {}", left.display())));
    }
    Ok(a.into_iter().map(|(k, p)| {
        let q = b[&k].clone();
        (k, p, q)
    }).collect())
}

/// Externally prepared training pairs: `dir/images/*.png` with index masks
/// of the same stem in `dir/masks/`.
pub fn read_pairs(dir: &Path) -> CliResult<Vec<(String, ImageTensor, SegMap)>> {
    let mut out = Vec::new();
    for (stem, img, mask) in pair_dirs(&dir.join("images"), &dir.join("masks"))? {
        let image = load_image(&img)?;
        let mask = load_index_png(&mask)?;
        if (mask.height, mask.width) != (image.height(), image.width()) {
            return Err(invalid(format!("{stem}: mask size differs from image size")));
        }
        out.push((stem, image, mask));
    }
    Ok(out)
}

/// Class names from a comma-separated list or, when `list` names an
/// existing file, one per non-empty line of that file.
pub fn parse_classes(list: &str) -> CliResult<Vec<String>> {
    let path = Path::new(list);
    let names: Vec<String> = if path.is_file() {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect()
    } else {
        ovseg_core::encoders::parse_class_list(list).into_iter().filter(|n| !n.is_empty()).collect()
    };
    if names.is_empty() {
        return Err(invalid("class list is empty"));
    }
    Ok(names)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let m = SegMap::new(2, 3, vec![0, 1, 2, 255, 7, 0]).unwrap();
        save_index_png(&p, &m).unwrap();
        assert_eq!(load_index_png(&p).unwrap().labels, m.labels);
        let too_big = SegMap::new(1, 1, vec![300]).unwrap();
        assert!(save_index_png(&p, &too_big).is_err());
    }

    #[test]
    fn image_round_trip_is_8_bit() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.png");
        let img = ImageTensor::from_fn(4, 5, |c, y, x| ((c * 20 + y * 5 + x) as f64) / 255.0);
        save_image(&p, &img).unwrap();
        let back = load_image(&p).unwrap();
        for (a, b) in img.tensor().data().iter().zip(back.tensor().data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let color = dir.path().join("c.png");
        save_image(&color, &img).unwrap();
        assert!(load_index_png(&color).is_err());
    }

    #[test]
    fn pairing_reports_orphans() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        std::fs::create_dir_all(&a).unwrap();
        std::fs::create_dir_all(&b).unwrap();
        let m = SegMap::new(1, 1, vec![0]).unwrap();
        for p in [a.join("x.png"), b.join("x.png"), a.join("only_a.png"), b.join("only_b.png")] {
            save_index_png(&p, &m).unwrap();
        }
        let err = pair_dirs(&a, &b).unwrap_err().to_string();
        assert!(err.contains("only_a.png") && err.contains("only_b.png"), "{err}");
        std::fs::remove_file(a.join("only_a.png")).unwrap();
        std::fs::remove_file(b.join("only_b.png")).unwrap();
        assert_eq!(pair_dirs(&a, &b).unwrap().len(), 1);
    }

    #[test]
    fn class_lists() {
        assert_eq!(parse_classes("sky, road").unwrap(), vec!["sky", "road"]);
        assert!(parse_classes(" , ").is_err());
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("classes.txt");
        std::fs::write(&f, "sky\n\nwater\n").unwrap();
        assert_eq!(parse_classes(f.to_str().unwrap()).unwrap(), vec!["sky", "water"]);
    }

    #[test]
    fn palette_distinguishes_first_classes() {
        let colours: std::collections::HashSet<_> = (0..24).map(palette).collect();
        assert_eq!(colours.len(), 24);
    }
}
