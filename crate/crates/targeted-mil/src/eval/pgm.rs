//! Binary portable-graymap (P5) export for qualitative reconstruction
//! figures, plus a loader for round-trip checks.

use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::EvalError;
use crate::data::Bag;
use crate::model::TargetedMILModel;
use crate::numerics::Tensor;

/// Writes `pixels` (row-major values in [0,1]) as a binary P5 graymap
/// with max value 255; pixel byte = round(255·value).
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[f64]) -> Result<(), EvalError> {
    if width == 0 || height == 0 || pixels.len() != width * height {
        return Err(EvalError::InvalidArgument(format!(
            "pixel count {} does not match {width}×{height}",
            pixels.len()
        )));
    }
    if pixels.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        return Err(EvalError::InvalidArgument(
            "pixels must lie in [0,1]".into(),
        ));
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write!(w, "P5\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = pixels.iter().map(|&p| (255.0 * p).round() as u8).collect();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

/// Reads a binary P5 graymap back into [0,1] values.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f64>), EvalError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0;
    let mut token = |bytes: &[u8]| -> Result<String, EvalError> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(EvalError::InvalidArgument(
                "truncated graymap header".into(),
            ));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(&bytes)? != "P5" {
        return Err(EvalError::InvalidArgument(
            "not a binary portable graymap (missing P5)".into(),
        ));
    }
    let parse = |s: String| -> Result<usize, EvalError> {
        s.parse()
            .map_err(|_| EvalError::InvalidArgument(format!("bad graymap header token '{s}'")))
    };
    let width = parse(token(&bytes)?)?;
    let height = parse(token(&bytes)?)?;
    let maxval = parse(token(&bytes)?)?;
    if maxval != 255 {
        return Err(EvalError::InvalidArgument(format!(
            "unsupported max value {maxval}, expected 255"
        )));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let expected = width * height;
    if bytes.len() < pos || bytes.len() - pos != expected {
        return Err(EvalError::InvalidArgument(format!(
            "raster holds {} bytes, expected {expected}",
            bytes.len().saturating_sub(pos)
        )));
    }
    let pixels = bytes[pos..].iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok((width, height, pixels))
}

/// Tiles `images` (each s×s, row-major, values in [0,1]) into a
/// rows×cols grid image.
fn tile(images: &[Vec<f64>], rows: usize, cols: usize, s: usize) -> Vec<f64> {
    let (width, height) = (cols * s, rows * s);
    let mut grid = vec![0.0; width * height];
    for (k, img) in images.iter().enumerate() {
        let (r, c) = (k / cols, k % cols);
        for y in 0..s {
            let dst = (r * s + y) * width + c * s;
            grid[dst..dst + s].copy_from_slice(&img[y * s..(y + 1) * s]);
        }
    }
    grid
}

/// Derives the two output paths for [`reconstruct_grid`] from one base
/// path: `recon.pgm` → `recon-originals.pgm` and
/// `recon-reconstructions.pgm`.
pub fn grid_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "grid".to_owned());
    let ext = path
        .extension()
        .map(|e| e.to_string_lossy().into_owned())
        .unwrap_or_else(|| "pgm".to_owned());
    let with = |tag: &str| path.with_file_name(format!("{stem}-{tag}.{ext}"));
    (with("originals"), with("reconstructions"))
}

/// Writes two grids — the original instances and their reconstructions
/// `decode(encoder mean)` — as P5 graymap files next to `path` (see
/// [`grid_paths`]). Instances are taken from `bags` with true-target
/// instances first (top rows), preserving bag order within each class,
/// so the qualitative target/non-target contrast is visible at a glance.
pub fn reconstruct_grid(
    model: &TargetedMILModel,
    bags: &[Bag],
    rows: usize,
    cols: usize,
    path: &Path,
) -> Result<(PathBuf, PathBuf), EvalError> {
    if rows == 0 || cols == 0 {
        return Err(EvalError::InvalidArgument("grid must be at least 1×1".into()));
    }
    let m = model.hyper().m;
    let s = (m as f64).sqrt().round() as usize;
    if s * s != m {
        return Err(EvalError::NotSquare(m));
    }
    let needed = rows * cols;
    let mut picked: Vec<(u8, &[f64])> = Vec::new();
    for bag in bags {
        if bag.m() != m {
            return Err(EvalError::Model(crate::model::ModelError::DimMismatch {
                expected: m,
                got: bag.m(),
            }));
        }
        for (label, x) in bag.instance_labels().iter().zip(bag.instances()) {
            picked.push((*label, x));
        }
    }
    if picked.len() < needed {
        return Err(EvalError::InsufficientInstances {
            needed,
            got: picked.len(),
        });
    }
    picked.sort_by_key(|(label, _)| std::cmp::Reverse(*label));
    picked.truncate(needed);

    let originals: Vec<Vec<f64>> = picked.iter().map(|(_, x)| x.to_vec()).collect();
    let batch = Tensor::new(
        vec![needed, m],
        originals.iter().flatten().copied().collect(),
    )?;
    let (means, _) = model.encode_batch(&batch);
    let recon = model.decode_batch(&means);
    let reconstructions: Vec<Vec<f64>> = recon.data().chunks_exact(m).map(<[f64]>::to_vec).collect();

    let (orig_path, recon_path) = grid_paths(path);
    write_pgm(&orig_path, cols * s, rows * s, &tile(&originals, rows, cols, s))?;
    write_pgm(
        &recon_path,
        cols * s,
        rows * s,
        &tile(&reconstructions, rows, cols, s),
    )?;
    Ok((orig_path, recon_path))
}

/// Mean per-pixel squared reconstruction error, split by the hidden
/// instance label: `(error on true-target instances, error on
/// non-target instances)`.
pub fn reconstruction_error_split(
    model: &TargetedMILModel,
    bags: &[Bag],
) -> Result<(f64, f64), EvalError> {
    let m = model.hyper().m;
    let (mut err, mut count) = ([0.0; 2], [0usize; 2]);
    for bag in bags {
        if bag.m() != m {
            return Err(EvalError::Model(crate::model::ModelError::DimMismatch {
                expected: m,
                got: bag.m(),
            }));
        }
        let x = bag.to_tensor();
        let (means, _) = model.encode_batch(&x);
        let recon = model.decode_batch(&means);
        for ((label, orig), rec) in bag
            .instance_labels()
            .iter()
            .zip(bag.instances())
            .zip(recon.data().chunks_exact(m))
        {
            let mse = orig
                .iter()
                .zip(rec)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                / m as f64;
            let side = usize::from(*label == 1);
            err[side] += mse;
            count[side] += 1;
        }
    }
    if count[0] == 0 || count[1] == 0 {
        return Err(EvalError::Empty(
            "need both target and non-target instances",
        ));
    }
    Ok((err[1] / count[1] as f64, err[0] / count[0] as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelHyper;

    #[test]
    fn pgm_round_trip_is_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let pixels: Vec<f64> = (0..12).map(|i| i as f64 / 11.0).collect();
        write_pgm(&path, 4, 3, &pixels).unwrap();
        let (w, h, back) = read_pgm(&path).unwrap();
        assert_eq!((w, h), (4, 3));
        for (a, b) in pixels.iter().zip(&back) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn pgm_rejects_bad_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        assert!(write_pgm(&path, 2, 2, &[0.0; 3]).is_err());
        assert!(write_pgm(&path, 2, 1, &[0.5, 1.5]).is_err());
        std::fs::write(&path, b"P6\n1 1\n255\nx").unwrap();
        assert!(read_pgm(&path).is_err());
        std::fs::write(&path, b"P5\n2 2\n255\nab").unwrap();
        assert!(read_pgm(&path).is_err());
    }

    #[test]
    fn exact_bytes_are_reproduced() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        write_pgm(&path, 2, 1, &[0.0, 1.0]).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"P5\n2 1\n255\n\x00\xff");
    }

    #[test]
    fn tiling_places_images_row_major() {
        // Two 2×2 images side by side in a 1×2 grid.
        let a = vec![0.1, 0.2, 0.3, 0.4];
        let b = vec![0.5, 0.6, 0.7, 0.8];
        let grid = tile(&[a, b], 1, 2, 2);
        assert_eq!(grid, vec![0.1, 0.2, 0.5, 0.6, 0.3, 0.4, 0.7, 0.8]);
    }

    #[test]
    fn zero_model_reconstructions_are_uniform_midgray() {
        let model = TargetedMILModel::zeroed(ModelHyper {
            m: 4,
            d: 2,
            alpha: 1.0,
            decoder_noise_var: 0.1,
        })
        .unwrap();
        let bags = vec![
            Bag::new(vec![0.0, 0.1, 0.2, 0.3, 1.0, 0.9, 0.8, 0.7], 4, vec![0, 1]).unwrap(),
            Bag::new(vec![0.5; 8], 4, vec![1, 0]).unwrap(),
        ];
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("grid.pgm");
        let (orig_path, recon_path) = reconstruct_grid(&model, &bags, 2, 2, &base).unwrap();
        assert!(orig_path.ends_with("grid-originals.pgm"));
        assert!(recon_path.ends_with("grid-reconstructions.pgm"));
        let (w, h, recon) = read_pgm(&recon_path).unwrap();
        assert_eq!((w, h), (4, 4));
        // logistic(0) = 0.5 → byte 128 → 128/255 everywhere.
        for &p in &recon {
            assert!((p - 128.0 / 255.0).abs() < 1e-12);
        }
        // Targets come first in the grid: the first original tile is the
        // bag-0 target instance (1.0, 0.9, 0.8, 0.7).
        let (_, _, originals) = read_pgm(&orig_path).unwrap();
        assert!((originals[0] - 1.0).abs() < 1e-12);
        assert!((originals[1] - (255.0f64 * 0.9).round() / 255.0).abs() < 1e-12);
    }

    #[test]
    fn grid_errors_on_non_square_or_short_input() {
        let model = TargetedMILModel::zeroed(ModelHyper {
            m: 3,
            d: 2,
            alpha: 1.0,
            decoder_noise_var: 0.1,
        })
        .unwrap();
        let bag = Bag::new(vec![0.1, 0.2, 0.3], 3, vec![1]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("grid.pgm");
        assert!(matches!(
            reconstruct_grid(&model, &[bag], 1, 1, &base),
            Err(EvalError::NotSquare(3))
        ));

        let model4 = TargetedMILModel::zeroed(ModelHyper {
            m: 4,
            d: 2,
            alpha: 1.0,
            decoder_noise_var: 0.1,
        })
        .unwrap();
        let small = Bag::new(vec![0.5; 4], 4, vec![1]).unwrap();
        assert!(matches!(
            reconstruct_grid(&model4, &[small], 2, 3, &base),
            Err(EvalError::InsufficientInstances { needed: 6, got: 1 })
        ));
    }

    #[test]
    fn error_split_separates_labels() {
        // A model that reconstructs everything as 0.5: instances at 0.5
        // have zero error, instances at 1.0 have 0.25 error.
        let model = TargetedMILModel::zeroed(ModelHyper {
            m: 4,
            d: 2,
            alpha: 1.0,
            decoder_noise_var: 0.1,
        })
        .unwrap();
        let bags = vec![Bag::new(
            vec![0.5, 0.5, 0.5, 0.5, 1.0, 1.0, 1.0, 1.0],
            4,
            vec![1, 0],
        )
        .unwrap()];
        let (target_err, nontarget_err) = reconstruction_error_split(&model, &bags).unwrap();
        assert!(target_err.abs() < 1e-12);
        assert!((nontarget_err - 0.25).abs() < 1e-12);

        let unlabeled = vec![Bag::new(vec![0.5; 4], 4, vec![0]).unwrap()];
        assert!(reconstruction_error_split(&model, &unlabeled).is_err());
    }
}
