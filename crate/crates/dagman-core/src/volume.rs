//! 3D volumes: synthetic generation, the `.vol` on-disk format, trilinear
//! resampling and the two-view random-crop augmentation.
//!
//! `.vol` format: one UTF-8 JSON header line
//! `{"shape":[d,h,w],"spacing":[sz,sy,sx],"dtype":"f32le"}` terminated by
//! `\n`, followed immediately by d·h·w little-endian 32-bit floats in
//! C-order (w fastest). Masks use `"dtype":"u8"` with one byte per cell.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag};

/// A 3D scalar grid with voxel spacing in mm. Shape is (depth, height,
/// width); data is C-ordered with width fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub data: Vec<f32>,
    pub shape: [usize; 3],
    pub spacing: [f32; 3],
}

impl Volume {
    pub fn new(data: Vec<f32>, shape: [usize; 3], spacing: [f32; 3]) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::validation("shape", "all dimensions must be >= 1"));
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::validation("spacing", "all components must be > 0"));
        }
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "volume data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("data", "intensities must be finite"));
        }
        Ok(Volume {
            data,
            shape,
            spacing,
        })
    }

    pub fn zeros(shape: [usize; 3], spacing: [f32; 3]) -> Self {
        Volume {
            data: vec![0.0; shape.iter().product()],
            shape,
            spacing,
        }
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[(z * self.shape[1] + y) * self.shape[2] + x]
    }

    pub fn n_voxels(&self) -> usize {
        self.data.len()
    }
}

/// Lesion geometry families used as synthetic class labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeometryFamily {
    Sphere,
    Cube,
    Shell,
}

impl GeometryFamily {
    pub fn from_class(class_id: usize) -> Self {
        match class_id {
            0 => GeometryFamily::Sphere,
            1 => GeometryFamily::Cube,
            _ => GeometryFamily::Shell,
        }
    }
}

/// Recipe for one synthetic volume. `class_id` selects the lesion
/// geometry family (0 sphere, 1 cube, 2 shell).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SyntheticSpec {
    pub shape: [usize; 3],
    pub num_lesions: usize,
    pub lesion_radius_range: (f64, f64),
    pub lesion_intensity: f32,
    pub background_noise_sigma: f64,
    pub num_classes: usize,
    pub class_id: usize,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&d| d == 0) {
            return Err(Error::validation("shape", "all dimensions must be >= 1"));
        }
        let (rmin, rmax) = self.lesion_radius_range;
        if !(rmin > 0.0) || rmax < rmin {
            return Err(Error::validation(
                "lesion_radius_range",
                "need 0 < min <= max",
            ));
        }
        if self.num_lesions > 0 {
            let reach = rmax.ceil() as usize;
            for (i, &d) in self.shape.iter().enumerate() {
                if 2 * reach + 1 > d {
                    return Err(Error::validation(
                        "lesion_radius_range",
                        format!("radius {rmax} does not fit inside dimension {i} of size {d}"),
                    ));
                }
            }
        }
        if self.background_noise_sigma < 0.0 {
            return Err(Error::validation(
                "background_noise_sigma",
                "must be >= 0",
            ));
        }
        if self.num_classes == 0 || self.num_classes > 3 {
            return Err(Error::validation(
                "num_classes",
                "supported class counts are 1..=3 (sphere/cube/shell)",
            ));
        }
        if self.class_id >= self.num_classes {
            return Err(Error::validation(
                "class_id",
                format!(
                    "class_id {} out of range for {} classes",
                    self.class_id, self.num_classes
                ),
            ));
        }
        Ok(())
    }
}

/// Deterministic synthetic volume: Gaussian background noise plus seeded
/// lesions of the class geometry at integer voxel centers.
pub fn generate_synthetic_volume(spec: &SyntheticSpec, seed: u64) -> Result<Volume> {
    spec.validate()?;
    let n: usize = spec.shape.iter().product();
    let mut rng = rng::stream(seed, &[tag::VOLUME_GEN]);

    let mut data = vec![0.0f32; n];
    if spec.background_noise_sigma > 0.0 {
        let dist = rand_distr::Normal::new(0.0f64, spec.background_noise_sigma)
            .expect("sigma checked by validate");
        for v in data.iter_mut() {
            *v = rng.sample(dist) as f32;
        }
    }

    let family = GeometryFamily::from_class(spec.class_id);
    let [sd, sh, sw] = spec.shape;
    for _ in 0..spec.num_lesions {
        let (rmin, rmax) = spec.lesion_radius_range;
        let r: f64 = rng.random_range(rmin..=rmax);
        let reach = r.ceil() as i64;
        let cz = rng.random_range(reach..=(sd as i64 - 1 - reach));
        let cy = rng.random_range(reach..=(sh as i64 - 1 - reach));
        let cx = rng.random_range(reach..=(sw as i64 - 1 - reach));
        stamp_lesion(
            &mut data,
            spec.shape,
            family,
            [cz, cy, cx],
            r,
            spec.lesion_intensity,
        );
    }
    Volume::new(data, spec.shape, [1.0, 1.0, 1.0])
}

fn stamp_lesion(
    data: &mut [f32],
    shape: [usize; 3],
    family: GeometryFamily,
    center: [i64; 3],
    r: f64,
    intensity: f32,
) {
    let reach = r.ceil() as i64;
    let [_, sh, sw] = shape;
    let inner2 = (0.6 * r) * (0.6 * r);
    let r2 = r * r;
    for dz in -reach..=reach {
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let inside = match family {
                    GeometryFamily::Sphere => {
                        (dz * dz + dy * dy + dx * dx) as f64 <= r2
                    }
                    GeometryFamily::Cube => {
                        dz.abs().max(dy.abs()).max(dx.abs()) as f64 <= r
                    }
                    GeometryFamily::Shell => {
                        let d2 = (dz * dz + dy * dy + dx * dx) as f64;
                        d2 <= r2 && d2 > inner2
                    }
                };
                if inside {
                    let (z, y, x) = (center[0] + dz, center[1] + dy, center[2] + dx);
                    let idx = (z as usize * sh + y as usize) * sw + x as usize;
                    data[idx] += intensity;
                }
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct VolHeader {
    shape: [usize; 3],
    spacing: [f32; 3],
    dtype: String,
}

pub fn save_volume(v: &Volume, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = VolHeader {
        shape: v.shape,
        spacing: v.spacing,
        dtype: "f32le".to_string(),
    };
    serde_json::to_writer(&mut w, &header).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(b"\n")?;
    for &val in &v.data {
        w.write_all(&val.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Export a binary cell grid (1 = masked) as a `.vol` with dtype u8.
pub fn save_mask_volume(cells: &[u8], grid_shape: [usize; 3], path: &Path) -> Result<()> {
    if cells.len() != grid_shape.iter().product::<usize>() {
        return Err(Error::Shape("mask/grid size mismatch".into()));
    }
    let mut w = BufWriter::new(File::create(path)?);
    let header = VolHeader {
        shape: grid_shape,
        spacing: [1.0, 1.0, 1.0],
        dtype: "u8".to_string(),
    };
    serde_json::to_writer(&mut w, &header).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(b"\n")?;
    w.write_all(cells)?;
    w.flush()?;
    Ok(())
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header_bytes = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = r.read(&mut byte)?;
        if n == 0 {
            return Err(Error::Format("malformed header: missing newline".into()));
        }
        if byte[0] == b'\n' {
            break;
        }
        header_bytes.push(byte[0]);
        if header_bytes.len() > 4096 {
            return Err(Error::Format("malformed header: too long".into()));
        }
    }
    let header: VolHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Format(format!("malformed header: {e}")))?;
    let n: usize = header.shape.iter().product();

    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let data = match header.dtype.as_str() {
        "f32le" => {
            if payload.len() != n * 4 {
                return Err(Error::Format(format!(
                    "payload size mismatch: expected {} bytes, found {}",
                    n * 4,
                    payload.len()
                )));
            }
            payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect()
        }
        "u8" => {
            if payload.len() != n {
                return Err(Error::Format(format!(
                    "payload size mismatch: expected {} bytes, found {}",
                    n,
                    payload.len()
                )));
            }
            payload.iter().map(|&b| b as f32).collect()
        }
        other => {
            return Err(Error::Format(format!("malformed header: unknown dtype {other:?}")));
        }
    };
    Volume::new(data, header.shape, header.spacing)
}

/// Trilinear resample onto a new voxel spacing. Output shape is
/// round(shape·spacing/target) per dimension; border samples clamp.
pub fn resample(v: &Volume, target_spacing: [f32; 3]) -> Result<Volume> {
    if target_spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::validation("target_spacing", "must be > 0"));
    }
    let mut out_shape = [0usize; 3];
    for i in 0..3 {
        out_shape[i] =
            ((v.shape[i] as f64) * (v.spacing[i] as f64) / (target_spacing[i] as f64)).round()
                as usize;
        if out_shape[i] == 0 {
            return Err(Error::validation(
                "target_spacing",
                format!("degenerate output shape in dimension {i}"),
            ));
        }
    }
    let scale: Vec<f64> = (0..3)
        .map(|i| target_spacing[i] as f64 / v.spacing[i] as f64)
        .collect();
    let [sd, sh, sw] = v.shape;
    let mut data = Vec::with_capacity(out_shape.iter().product());
    for z in 0..out_shape[0] {
        let (z0, z1, fz) = axis_coords(z as f64 * scale[0], sd);
        for y in 0..out_shape[1] {
            let (y0, y1, fy) = axis_coords(y as f64 * scale[1], sh);
            for x in 0..out_shape[2] {
                let (x0, x1, fx) = axis_coords(x as f64 * scale[2], sw);
                let sample = |zz: usize, yy: usize, xx: usize| -> f64 {
                    v.data[(zz * sh + yy) * sw + xx] as f64
                };
                let c00 = sample(z0, y0, x0) * (1.0 - fx) + sample(z0, y0, x1) * fx;
                let c01 = sample(z0, y1, x0) * (1.0 - fx) + sample(z0, y1, x1) * fx;
                let c10 = sample(z1, y0, x0) * (1.0 - fx) + sample(z1, y0, x1) * fx;
                let c11 = sample(z1, y1, x0) * (1.0 - fx) + sample(z1, y1, x1) * fx;
                let c0 = c00 * (1.0 - fy) + c01 * fy;
                let c1 = c10 * (1.0 - fy) + c11 * fy;
                data.push((c0 * (1.0 - fz) + c1 * fz) as f32);
            }
        }
    }
    Volume::new(data, out_shape, target_spacing)
}

#[inline]
fn axis_coords(coord: f64, dim: usize) -> (usize, usize, f64) {
    let lo = coord.floor();
    let frac = coord - lo;
    let i0 = (lo.max(0.0) as usize).min(dim - 1);
    let i1 = (i0 + 1).min(dim - 1);
    (i0, i1, frac)
}

/// Two random crops from one source volume.
#[derive(Clone, Debug)]
pub struct ViewPair {
    pub u: Volume,
    pub v: Volume,
    pub crop_origins: [[usize; 3]; 2],
    pub source_id: u64,
}

/// Draw two independently positioned crops, uniform over valid origins.
/// Deterministic for a fixed seed.
pub fn random_crop_views(v: &Volume, crop_shape: [usize; 3], seed: u64) -> Result<ViewPair> {
    for i in 0..3 {
        if crop_shape[i] == 0 || crop_shape[i] > v.shape[i] {
            return Err(Error::validation(
                "crop_shape",
                format!(
                    "crop {:?} does not fit inside volume {:?}",
                    crop_shape, v.shape
                ),
            ));
        }
    }
    let mut rng = rng::stream(seed, &[tag::CROP]);
    let mut draw_origin = |rng: &mut rand_chacha::ChaCha8Rng| {
        let mut o = [0usize; 3];
        for i in 0..3 {
            o[i] = rng.random_range(0..=(v.shape[i] - crop_shape[i]));
        }
        o
    };
    let o_u = draw_origin(&mut rng);
    let o_v = draw_origin(&mut rng);
    debug_assert!((0..3).all(|i| o_u[i] + crop_shape[i] <= v.shape[i]));
    debug_assert!((0..3).all(|i| o_v[i] + crop_shape[i] <= v.shape[i]));
    Ok(ViewPair {
        u: extract_crop(v, o_u, crop_shape),
        v: extract_crop(v, o_v, crop_shape),
        crop_origins: [o_u, o_v],
        source_id: 0,
    })
}

fn extract_crop(v: &Volume, origin: [usize; 3], crop: [usize; 3]) -> Volume {
    let [_, sh, sw] = v.shape;
    let mut data = Vec::with_capacity(crop.iter().product());
    for z in 0..crop[0] {
        for y in 0..crop[1] {
            let base = ((origin[0] + z) * sh + origin[1] + y) * sw + origin[2];
            data.extend_from_slice(&v.data[base..base + crop[2]]);
        }
    }
    Volume {
        data,
        shape: crop,
        spacing: v.spacing,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(shape: [usize; 3]) -> SyntheticSpec {
        SyntheticSpec {
            shape,
            num_lesions: 1,
            lesion_radius_range: (4.0, 4.0),
            lesion_intensity: 1.0,
            background_noise_sigma: 0.0,
            num_classes: 3,
            class_id: 0,
        }
    }

    #[test]
    fn no_sources_no_noise_gives_zero_volume() {
        let mut s = spec([32, 32, 32]);
        s.num_lesions = 0;
        let v = generate_synthetic_volume(&s, 11).unwrap();
        assert!(v.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn generation_is_deterministic() {
        let mut s = spec([32, 32, 32]);
        s.background_noise_sigma = 0.3;
        s.num_lesions = 3;
        let a = generate_synthetic_volume(&s, 42).unwrap();
        let b = generate_synthetic_volume(&s, 42).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_volume(&s, 43).unwrap();
        assert_ne!(a, c);
    }

    /// Independent voxel-counting oracle: number of integer offsets within
    /// Euclidean distance r of the origin.
    fn sphere_voxel_count(r: f64) -> usize {
        let reach = r.ceil() as i64;
        let mut count = 0;
        for dz in -reach..=reach {
            for dy in -reach..=reach {
                for dx in -reach..=reach {
                    if (dz * dz + dy * dy + dx * dx) as f64 <= r * r {
                        count += 1;
                    }
                }
            }
        }
        count
    }

    #[test]
    fn sphere_volume_matches_voxelization_oracle() {
        let expected = sphere_voxel_count(4.0);
        for seed in [0u64, 9, 1234] {
            let v = generate_synthetic_volume(&spec([32, 32, 32]), seed).unwrap();
            let got = v.data.iter().filter(|&&x| x >= 0.5).count();
            assert_eq!(got, expected, "seed {seed}");
        }
    }

    #[test]
    fn cube_and_shell_counts_match_oracles() {
        let mut s = spec([32, 32, 32]);
        s.class_id = 1;
        let v = generate_synthetic_volume(&s, 5).unwrap();
        let side = 2 * 4 + 1;
        assert_eq!(
            v.data.iter().filter(|&&x| x >= 0.5).count(),
            side * side * side
        );

        s.class_id = 2;
        let v = generate_synthetic_volume(&s, 5).unwrap();
        let outer = sphere_voxel_count(4.0);
        let inner = sphere_voxel_count(0.6 * 4.0);
        assert_eq!(v.data.iter().filter(|&&x| x >= 0.5).count(), outer - inner);
    }

    #[test]
    fn invalid_specs_name_the_field() {
        let mut s = spec([8, 8, 8]);
        s.lesion_radius_range = (4.0, 4.0);
        match generate_synthetic_volume(&s, 0) {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "lesion_radius_range"),
            other => panic!("expected validation error, got {other:?}"),
        }
        let mut s = spec([32, 32, 32]);
        s.class_id = 7;
        match generate_synthetic_volume(&s, 0) {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "class_id"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn vol_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.vol");
        let mut s = spec([9, 7, 5]);
        s.background_noise_sigma = 1.3;
        s.num_lesions = 0;
        let mut v = generate_synthetic_volume(&s, 3).unwrap();
        v.spacing = [2.0, 0.7, 1.25];
        save_volume(&v, &path).unwrap();
        let r = load_volume(&path).unwrap();
        assert_eq!(v.shape, r.shape);
        assert_eq!(v.spacing, r.spacing);
        assert_eq!(
            v.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            r.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn truncated_payload_reports_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.vol");
        let v = Volume::zeros([2, 2, 2], [1.0; 3]);
        save_volume(&v, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        match load_volume(&path) {
            Err(Error::Format(msg)) => assert!(msg.contains("payload size mismatch"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn payload_size_arithmetic() {
        let dir = tempfile::tempdir().unwrap();
        let ok = dir.path().join("ok.vol");
        let mut f = File::create(&ok).unwrap();
        f.write_all(br#"{"shape":[2,2,2],"spacing":[1.0,1.0,1.0],"dtype":"f32le"}"#)
            .unwrap();
        f.write_all(b"\n").unwrap();
        for i in 0..8 {
            f.write_all(&(i as f32).to_le_bytes()).unwrap();
        }
        drop(f);
        let v = load_volume(&ok).unwrap();
        assert_eq!(v.data.len(), 8);

        let bad = dir.path().join("bad.vol");
        let mut f = File::create(&bad).unwrap();
        f.write_all(br#"{"shape":[2,2,2],"spacing":[1.0,1.0,1.0],"dtype":"f32le"}"#)
            .unwrap();
        f.write_all(b"\n").unwrap();
        for i in 0..7 {
            f.write_all(&(i as f32).to_le_bytes()).unwrap();
        }
        drop(f);
        assert!(matches!(load_volume(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn mask_vol_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.vol");
        save_mask_volume(&[1, 0, 0, 1, 1, 0, 0, 1], [2, 2, 2], &path).unwrap();
        let v = load_volume(&path).unwrap();
        assert_eq!(v.data, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn resample_identity_when_spacing_matches() {
        let mut s = spec([8, 6, 10]);
        s.background_noise_sigma = 0.5;
        s.num_lesions = 0;
        let v = generate_synthetic_volume(&s, 77).unwrap();
        let r = resample(&v, v.spacing).unwrap();
        assert_eq!(r.shape, v.shape);
        assert_eq!(r.data, v.data);
    }

    #[test]
    fn resample_preserves_constants() {
        let v = Volume::new(vec![3.25; 4 * 4 * 4], [4, 4, 4], [1.0, 1.0, 1.0]).unwrap();
        let r = resample(&v, [1.6, 0.8, 2.0]).unwrap();
        assert!(r.data.iter().all(|&x| x == 3.25));
    }

    #[test]
    fn downsample_matches_trilinear_oracle_on_ramp() {
        // Linear ramp along x; oracle evaluates the trilinear formula in f64.
        let shape = [4usize, 4, 8];
        let mut data = Vec::new();
        for _z in 0..4 {
            for _y in 0..4 {
                for x in 0..8 {
                    data.push(x as f32 * 0.5);
                }
            }
        }
        let v = Volume::new(data, shape, [1.0, 1.0, 1.0]).unwrap();
        let r = resample(&v, [2.0, 2.0, 2.0]).unwrap();
        assert_eq!(r.shape, [2, 2, 4]);
        for z in 0..2 {
            for y in 0..2 {
                for x in 0..4 {
                    // Source coordinate is exactly 2x; ramp value = coord * 0.5.
                    let src = (x as f64) * 2.0;
                    let expected = src.min(7.0) * 0.5;
                    let got = r.at(z, y, x) as f64;
                    assert!((got - expected).abs() < 1e-6, "({z},{y},{x})");
                }
            }
        }
    }

    #[test]
    fn crop_equal_to_volume_is_identity() {
        let mut s = spec([6, 6, 6]);
        s.background_noise_sigma = 0.2;
        s.num_lesions = 0;
        let v = generate_synthetic_volume(&s, 8).unwrap();
        let pair = random_crop_views(&v, [6, 6, 6], 123).unwrap();
        assert_eq!(pair.crop_origins, [[0, 0, 0], [0, 0, 0]]);
        assert_eq!(pair.u.data, v.data);
        assert_eq!(pair.v.data, v.data);
    }

    #[test]
    fn crops_are_deterministic_per_seed() {
        let mut s = spec([16, 16, 16]);
        s.background_noise_sigma = 0.2;
        s.num_lesions = 0;
        let v = generate_synthetic_volume(&s, 8).unwrap();
        let a = random_crop_views(&v, [8, 8, 8], 5).unwrap();
        let b = random_crop_views(&v, [8, 8, 8], 5).unwrap();
        assert_eq!(a.crop_origins, b.crop_origins);
        assert_eq!(a.u.data, b.u.data);
        let c = random_crop_views(&v, [8, 8, 8], 6).unwrap();
        assert!(a.crop_origins != c.crop_origins || a.u.data != c.u.data);
    }

    #[test]
    fn oversized_crop_is_rejected() {
        let v = Volume::zeros([4, 4, 4], [1.0; 3]);
        assert!(matches!(
            random_crop_views(&v, [5, 4, 4], 0),
            Err(Error::Validation { .. })
        ));
    }

    proptest! {
        #[test]
        fn crops_stay_in_bounds(
            d in 1usize..12, h in 1usize..12, w in 1usize..12,
            cd in 1usize..12, ch in 1usize..12, cw in 1usize..12,
            seed in 0u64..1000,
        ) {
            let v = Volume::zeros([d.max(cd), h.max(ch), w.max(cw)], [1.0; 3]);
            let crop = [cd.min(d.max(cd)), ch.min(h.max(ch)), cw.min(w.max(cw))];
            let pair = random_crop_views(&v, crop, seed).unwrap();
            for o in pair.crop_origins {
                for i in 0..3 {
                    prop_assert!(o[i] + crop[i] <= v.shape[i]);
                }
            }
        }
    }
}
