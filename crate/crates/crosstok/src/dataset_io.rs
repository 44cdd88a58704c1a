//! Writing synthetic splits to disk.
//!
//! Layout under the output directory, per split (`train`, `val`):
//!
//! * `00000.xyz` (or `.bin`), one file per cloud;
//! * `00000.labels` with one part id per line, for per-point labels;
//! * `labels.txt` with `<file> <class>` rows for per-cloud and image labels;
//! * `00000.pgm` for images (plain graymap, values scaled to 0..=255).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crosstok_core::data::LabeledImage;
use crosstok_core::{Labels, PointCloud};

use crate::points_io::{write_points, PointFormat, PointsError};

fn write(path: &Path, text: &str) -> Result<(), PointsError> {
    fs::write(path, text).map_err(|source| PointsError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn mkdir(dir: &Path) -> Result<(), PointsError> {
    fs::create_dir_all(dir).map_err(|source| PointsError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

/// Returns the number of files written.
pub fn write_clouds(dir: &Path, clouds: &[PointCloud<f32>], format: PointFormat) -> Result<usize, PointsError> {
    mkdir(dir)?;
    let mut index = String::new();
    let mut files = 0;
    for (i, c) in clouds.iter().enumerate() {
        let name = format!("{i:05}.{}", format.extension());
        write_points(&dir.join(&name), c, format)?;
        files += 1;
        match &c.labels {
            Labels::Cloud(l) => writeln!(index, "{name} {l}").unwrap(),
            Labels::Points(l) => {
                let body: String = l.iter().map(|v| format!("{v}\n")).collect();
                write(&dir.join(format!("{i:05}.labels")), &body)?;
                files += 1;
            }
            Labels::None => {}
        }
    }
    if !index.is_empty() {
        write(&dir.join("labels.txt"), &index)?;
        files += 1;
    }
    Ok(files)
}

pub fn write_images(dir: &Path, images: &[LabeledImage<f32>]) -> Result<usize, PointsError> {
    mkdir(dir)?;
    let mut index = String::new();
    for (i, s) in images.iter().enumerate() {
        let name = format!("{i:05}.pgm");
        write(&dir.join(&name), &pgm(s))?;
        writeln!(index, "{name} {}", s.label).unwrap();
    }
    write(&dir.join("labels.txt"), &index)?;
    Ok(images.len() + 1)
}

fn pgm(s: &LabeledImage<f32>) -> String {
    let im = &s.image;
    let mut out = format!("P2\n{} {}\n255\n", im.width, im.height);
    for y in 0..im.height {
        let row: Vec<String> = (0..im.width)
            .map(|x| ((im.at(y, x, 0).clamp(0.0, 1.0) * 255.0).round() as u8).to_string())
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}
