//! On-disk formats.
//!
//! Every raster is a headerless file of 32-bit little-endian IEEE-754 floats
//! in row-major order, `height · width · components` values long. Vector
//! fields interleave their two components per voxel as `(dy, dx)`.
//! A JSON manifest next to the rasters describes shape, order and optional
//! SHA-256 checksums (lowercase hex of the raw file bytes). File names in a
//! manifest are relative to the manifest's directory.
//!
//! Values are stored as `f32`, so saving an `f64` image rounds it once;
//! load → save → load is bit-exact.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datamodel::{
    min_max_normalize, FitConfig, Image, ImageSeries, MaskSet, ParametricMaps, VectorField,
    VelocityFieldSet,
};
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::optimizer::JointSolution;
use crate::phantom::{PhantomConfig, PhantomScene};
use crate::signal_model::synthesize;

pub const FORMAT_VERSION: u32 = 1;
pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const LITTLE_ENDIAN: &str = "little";

/// Manifest of an image series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeriesManifest {
    pub version: u32,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub timestamps_ms: Vec<f64>,
    /// (row, col) spacing in mm.
    pub spacing_mm: [f64; 2],
    pub files: Vec<String>,
    pub endianness: String,
    /// Apply global min-max normalization after loading.
    #[serde(default)]
    pub normalize: bool,
    /// Stored value that corresponds to zero signal.
    #[serde(default)]
    pub zero_level: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RasterKind {
    /// Two files: T1 (ms) then M0. T1 = 0 marks unfitted voxels.
    Maps,
    /// One binary mask per frame.
    Masks,
    /// One 2-component velocity field per non-reference frame.
    VelocityFields,
    /// One 2-component displacement per frame.
    Displacements,
}

/// Manifest for maps, masks and vector fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RasterManifest {
    pub version: u32,
    pub kind: RasterKind,
    pub height: usize,
    pub width: usize,
    pub components: usize,
    pub endianness: String,
    pub files: Vec<String>,
    /// Frame count of the series, for velocity fields.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub integration_steps: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<Vec<String>>,
}

/// Summary written next to a fitted solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitReport {
    pub schema_version: u32,
    /// `joint` or `uncorrected`.
    pub mode: String,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub reference_index: usize,
    pub iterations: usize,
    pub converged: bool,
    pub fitted_voxels: usize,
    pub initial_loss: LossBreakdown,
    pub final_loss: LossBreakdown,
    pub config: FitConfig,
}

impl FitReport {
    pub fn new(mode: &str, solution: &JointSolution, config: &FitConfig) -> Self {
        let (height, width) = solution.maps.shape();
        let first = solution.trace.first().copied().unwrap_or_default();
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            mode: mode.into(),
            frames: solution.registered.len(),
            height,
            width,
            reference_index: solution.fields.reference_index,
            iterations: solution.iterations,
            converged: solution.converged,
            fitted_voxels: solution.maps.t1.data.iter().filter(|&&t| t > 0.0).count(),
            initial_loss: first,
            final_loss: solution.trace.last().copied().unwrap_or(first),
            config: config.clone(),
        }
    }
}

/// `scene.json` of a phantom directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub version: u32,
    pub seed: u64,
    pub config: PhantomConfig,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn parse_err(path: &Path, message: impl ToString) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

fn base_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn file_stem(manifest: &Path) -> String {
    manifest
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data".into())
}

/// Write values as f32 LE; returns the SHA-256 of the bytes.
pub fn write_raw(path: &Path, values: impl IntoIterator<Item = f64>) -> Result<String> {
    let bytes: Vec<u8> = values.into_iter().flat_map(|v| (v as f32).to_le_bytes()).collect();
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

/// Read exactly `count` f32 LE values.
pub fn read_raw(path: &Path, count: usize, sha256: Option<&str>) -> Result<Vec<f64>> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingFrame(path.to_path_buf()))
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    if bytes.len() != count * 4 {
        return Err(Error::SizeMismatch {
            path: path.to_path_buf(),
            expected: count * 4,
            found: bytes.len(),
        });
    }
    if let Some(expected) = sha256 {
        if !hex(&Sha256::digest(&bytes)).eq_ignore_ascii_case(expected) {
            return Err(Error::Checksum(path.to_path_buf()));
        }
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

pub fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Encode(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| parse_err(path, e))
}

fn check_endianness(path: &Path, tag: &str) -> Result<()> {
    if tag != LITTLE_ENDIAN {
        return Err(parse_err(path, format!("unsupported endianness {tag:?}")));
    }
    Ok(())
}

fn check_version(path: &Path, version: u32) -> Result<()> {
    if version != FORMAT_VERSION {
        return Err(parse_err(path, format!("unsupported format version {version}")));
    }
    Ok(())
}

fn checksum_list(path: &Path, sums: &Option<Vec<String>>, files: usize) -> Result<Vec<Option<String>>> {
    match sums {
        None => Ok(vec![None; files]),
        Some(s) if s.len() == files => Ok(s.iter().cloned().map(Some).collect()),
        Some(s) => Err(parse_err(path, format!("{} checksums for {files} files", s.len()))),
    }
}

/// Save a series as `<manifest>` plus `<stem>_NNN.f32` frame files.
pub fn save_series(series: &ImageSeries, manifest: &Path) -> Result<()> {
    write_series(series, manifest, false)
}

/// As [`save_series`], with the manifest's normalize-on-load flag set as given.
pub fn write_series(series: &ImageSeries, manifest: &Path, normalize: bool) -> Result<()> {
    let dir = base_dir(manifest);
    let stem = file_stem(manifest);
    let (h, w) = series.shape();
    let mut files = Vec::new();
    let mut sums = Vec::new();
    for (i, frame) in series.frames.iter().enumerate() {
        let name = format!("{stem}_{i:03}.f32");
        sums.push(write_raw(&dir.join(&name), frame.data.iter().copied())?);
        files.push(name);
    }
    let m = SeriesManifest {
        version: FORMAT_VERSION,
        height: h,
        width: w,
        frames: series.len(),
        timestamps_ms: series.timestamps.clone(),
        spacing_mm: [series.spacing.0, series.spacing.1],
        files,
        endianness: LITTLE_ENDIAN.into(),
        normalize,
        zero_level: series.zero_level,
        sha256: Some(sums),
    };
    save_json(&m, manifest)
}

pub fn load_series(manifest: &Path) -> Result<ImageSeries> {
    load_series_with(manifest, true)
}

fn load_series_with(manifest: &Path, honor_normalize: bool) -> Result<ImageSeries> {
    let m: SeriesManifest = load_json(manifest)?;
    check_version(manifest, m.version)?;
    check_endianness(manifest, &m.endianness)?;
    if m.timestamps_ms.len() != m.frames {
        return Err(parse_err(
            manifest,
            format!("{} timestamps for {} frames", m.timestamps_ms.len(), m.frames),
        ));
    }
    let dir = base_dir(manifest);
    if m.files.len() < m.frames {
        let missing = m.files.len();
        return Err(Error::MissingFrame(dir.join(format!("<frame {missing}>"))));
    }
    if m.files.len() > m.frames {
        return Err(parse_err(manifest, format!("{} files for {} frames", m.files.len(), m.frames)));
    }
    let sums = checksum_list(manifest, &m.sha256, m.files.len())?;
    let mut frames = Vec::with_capacity(m.frames);
    for (name, sum) in m.files.iter().zip(&sums) {
        let data = read_raw(&dir.join(name), m.height * m.width, sum.as_deref())?;
        frames.push(Image::new(m.height, m.width, data)?);
    }
    let mut series = ImageSeries::new(frames, m.timestamps_ms, (m.spacing_mm[0], m.spacing_mm[1]))?;
    series.zero_level = m.zero_level;
    if m.normalize && honor_normalize {
        series = min_max_normalize(&series)?;
    }
    Ok(series)
}

fn save_raster(
    manifest: &Path,
    kind: RasterKind,
    shape: (usize, usize),
    components: usize,
    layers: &[Vec<f64>],
    suffixes: &[String],
    extra: impl FnOnce(&mut RasterManifest),
) -> Result<()> {
    let dir = base_dir(manifest);
    let stem = file_stem(manifest);
    let mut files = Vec::new();
    let mut sums = Vec::new();
    for (layer, suffix) in layers.iter().zip(suffixes) {
        let name = format!("{stem}_{suffix}.f32");
        sums.push(write_raw(&dir.join(&name), layer.iter().copied())?);
        files.push(name);
    }
    let mut m = RasterManifest {
        version: FORMAT_VERSION,
        kind,
        height: shape.0,
        width: shape.1,
        components,
        endianness: LITTLE_ENDIAN.into(),
        files,
        frames: None,
        reference_index: None,
        integration_steps: None,
        sha256: Some(sums),
    };
    extra(&mut m);
    save_json(&m, manifest)
}

fn load_raster(manifest: &Path, kind: RasterKind, components: usize) -> Result<(RasterManifest, Vec<Vec<f64>>)> {
    let m: RasterManifest = load_json(manifest)?;
    check_version(manifest, m.version)?;
    check_endianness(manifest, &m.endianness)?;
    if m.kind != kind {
        return Err(parse_err(manifest, format!("expected {kind:?}, found {:?}", m.kind)));
    }
    if m.components != components {
        return Err(parse_err(manifest, format!("expected {components} components, found {}", m.components)));
    }
    let dir = base_dir(manifest);
    let sums = checksum_list(manifest, &m.sha256, m.files.len())?;
    let layers = m
        .files
        .iter()
        .zip(&sums)
        .map(|(name, sum)| read_raw(&dir.join(name), m.height * m.width * components, sum.as_deref()))
        .collect::<Result<Vec<_>>>()?;
    Ok((m, layers))
}

fn flatten(field: &VectorField) -> Vec<f64> {
    field.data.iter().flat_map(|d| [d[0], d[1]]).collect()
}

fn unflatten(h: usize, w: usize, data: &[f64]) -> VectorField {
    VectorField {
        height: h,
        width: w,
        data: data.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
    }
}

pub fn save_maps(maps: &ParametricMaps, manifest: &Path) -> Result<()> {
    save_raster(
        manifest,
        RasterKind::Maps,
        maps.shape(),
        1,
        &[maps.t1.data.clone(), maps.m0.data.clone()],
        &["t1".into(), "m0".into()],
        |_| {},
    )
}

pub fn load_maps(manifest: &Path) -> Result<ParametricMaps> {
    let (m, layers) = load_raster(manifest, RasterKind::Maps, 1)?;
    let [t1, m0]: [Vec<f64>; 2] = layers
        .try_into()
        .map_err(|_| parse_err(manifest, "maps need exactly two files (t1, m0)"))?;
    Ok(ParametricMaps {
        t1: Image::new(m.height, m.width, t1)?,
        m0: Image::new(m.height, m.width, m0)?,
    })
}

pub fn save_masks(masks: &MaskSet, manifest: &Path) -> Result<()> {
    let shape = masks.masks.first().map(Image::shape).unwrap_or((0, 0));
    let layers: Vec<Vec<f64>> = masks.masks.iter().map(|m| m.data.clone()).collect();
    let suffixes: Vec<String> = (0..layers.len()).map(|i| format!("{i:03}")).collect();
    save_raster(manifest, RasterKind::Masks, shape, 1, &layers, &suffixes, |_| {})
}

pub fn load_masks(manifest: &Path) -> Result<MaskSet> {
    let (m, layers) = load_raster(manifest, RasterKind::Masks, 1)?;
    let masks = layers
        .into_iter()
        .map(|d| Image::new(m.height, m.width, d))
        .collect::<Result<Vec<_>>>()?;
    let set = MaskSet { masks };
    let n = set.masks.len();
    set.validate(n, (m.height, m.width))?;
    Ok(set)
}

/// Velocity fields; files are named by the frame they move.
pub fn save_fields(fields: &VelocityFieldSet, integration_steps: u32, manifest: &Path) -> Result<()> {
    let shape = fields.fields.first().map(VectorField::shape).unwrap_or((0, 0));
    let layers: Vec<Vec<f64>> = fields.fields.iter().map(flatten).collect();
    let suffixes: Vec<String> = (0..layers.len())
        .map(|s| format!("{:03}", fields.frame_of_slot(s)))
        .collect();
    save_raster(manifest, RasterKind::VelocityFields, shape, 2, &layers, &suffixes, |m| {
        m.frames = Some(fields.frame_count());
        m.reference_index = Some(fields.reference_index);
        m.integration_steps = Some(integration_steps);
    })
}

/// Returns the fields and the stored integration step count.
pub fn load_fields(manifest: &Path) -> Result<(VelocityFieldSet, u32)> {
    let (m, layers) = load_raster(manifest, RasterKind::VelocityFields, 2)?;
    let missing = |what: &str| parse_err(manifest, format!("missing {what}"));
    let frames = m.frames.ok_or_else(|| missing("frames"))?;
    let set = VelocityFieldSet {
        fields: layers.iter().map(|d| unflatten(m.height, m.width, d)).collect(),
        reference_index: m.reference_index.ok_or_else(|| missing("reference_index"))?,
    };
    set.validate(frames, (m.height, m.width))?;
    Ok((set, m.integration_steps.ok_or_else(|| missing("integration_steps"))?))
}

pub fn save_displacements(fields: &[VectorField], manifest: &Path) -> Result<()> {
    let shape = fields.first().map(VectorField::shape).unwrap_or((0, 0));
    let layers: Vec<Vec<f64>> = fields.iter().map(flatten).collect();
    let suffixes: Vec<String> = (0..layers.len()).map(|i| format!("{i:03}")).collect();
    save_raster(manifest, RasterKind::Displacements, shape, 2, &layers, &suffixes, |_| {})
}

pub fn load_displacements(manifest: &Path) -> Result<Vec<VectorField>> {
    let (m, layers) = load_raster(manifest, RasterKind::Displacements, 2)?;
    Ok(layers.iter().map(|d| unflatten(m.height, m.width, d)).collect())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Phantom directory: `scene.json`, `series.json`, `masks.json`,
/// `truth_maps.json`, `truth_motion.json` and their rasters. The series is
/// stored raw with the normalize-on-load flag set, so `load_series` on it
/// yields fitting input; [`load_phantom`] returns it raw.
pub fn save_phantom(scene: &PhantomScene, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    save_json(
        &SceneManifest {
            version: FORMAT_VERSION,
            seed: scene.seed,
            config: scene.config.clone(),
        },
        &dir.join("scene.json"),
    )?;
    write_series(&scene.series, &dir.join("series.json"), true)?;
    save_masks(&scene.truth_masks, &dir.join("masks.json"))?;
    save_maps(&scene.truth_maps, &dir.join("truth_maps.json"))?;
    save_displacements(&scene.truth_motion, &dir.join("truth_motion.json"))
}

pub fn load_phantom(dir: &Path) -> Result<PhantomScene> {
    let scene: SceneManifest = load_json(&dir.join("scene.json"))?;
    Ok(PhantomScene {
        config: scene.config,
        seed: scene.seed,
        truth_maps: load_maps(&dir.join("truth_maps.json"))?,
        truth_masks: load_masks(&dir.join("masks.json"))?,
        truth_motion: load_displacements(&dir.join("truth_motion.json"))?,
        series: load_series_with(&dir.join("series.json"), false)?,
    })
}

/// Solution directory: `maps.json`, `fields.json`, `registered.json`,
/// `trace.json` and `report.json`.
pub fn save_solution(solution: &JointSolution, report: &FitReport, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    save_maps(&solution.maps, &dir.join("maps.json"))?;
    save_fields(&solution.fields, solution.integration_steps, &dir.join("fields.json"))?;
    save_series(&solution.registered, &dir.join("registered.json"))?;
    save_json(&solution.trace, &dir.join("trace.json"))?;
    save_json(report, &dir.join("report.json"))
}

/// Rebuild a solution from disk; synthetic frames are re-synthesized from
/// the stored maps.
pub fn load_solution(dir: &Path) -> Result<JointSolution> {
    let maps = load_maps(&dir.join("maps.json"))?;
    let (fields, integration_steps) = load_fields(&dir.join("fields.json"))?;
    let registered = load_series(&dir.join("registered.json"))?;
    let trace: Vec<LossBreakdown> = load_json(&dir.join("trace.json"))?;
    let report: FitReport = load_json(&dir.join("report.json"))?;
    let synthetic = registered.with_frames(synthesize(&maps, &registered.timestamps, registered.zero_level));
    Ok(JointSolution {
        maps,
        fields,
        registered,
        synthetic,
        level_traces: vec![trace.clone()],
        trace,
        converged: report.converged,
        iterations: report.iterations,
        integration_steps,
    })
}

fn config_table(path: &Path, overrides: &[(String, String)]) -> Result<toml::Table> {
    let mut table = if path.as_os_str().is_empty() {
        toml::Table::new()
    } else {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.parse().map_err(|e: toml::de::Error| parse_err(path, e.message()))?
    };
    for (key, raw) in overrides {
        let value: toml::Value = match format!("v = {raw}").parse::<toml::Table>() {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            // Bare words become strings.
            Err(_) => toml::Value::String(raw.clone()),
        };
        table.insert(key.clone(), value);
    }
    Ok(table)
}

fn config_from_table<T: DeserializeOwned>(path: &Path, table: toml::Table) -> Result<T> {
    table.try_into().map_err(|e: toml::de::Error| Error::InvalidConfig(format!("{}: {}", path.display(), e.message())))
}

/// Load a key-value (TOML) config file; `overrides` (`key`, `value`) win
/// over file entries. An empty `path` starts from defaults.
pub fn load_fit_config(path: &Path, overrides: &[(String, String)]) -> Result<FitConfig> {
    let config: FitConfig = config_from_table(path, config_table(path, overrides)?)?;
    config.validate()?;
    Ok(config)
}

pub fn load_phantom_config(path: &Path, overrides: &[(String, String)]) -> Result<PhantomConfig> {
    let config: PhantomConfig = config_from_table(path, config_table(path, overrides)?)?;
    config.validate()?;
    Ok(config)
}

/// Colormap anchors (perceptually uniform, dark purple → yellow), evenly
/// spaced; the 256-entry table interpolates linearly between them.
pub const COLORMAP_ANCHORS: [[u8; 3]; 9] = [
    [68, 1, 84],
    [71, 44, 122],
    [59, 81, 139],
    [44, 113, 142],
    [33, 144, 141],
    [39, 173, 129],
    [92, 200, 99],
    [170, 220, 50],
    [253, 231, 37],
];

/// The 256-entry lookup table used by [`export_t1_png`].
pub fn colormap() -> [[u8; 3]; 256] {
    let segments = (COLORMAP_ANCHORS.len() - 1) as f64;
    std::array::from_fn(|i| {
        let pos = i as f64 / 255.0 * segments;
        let k = (pos.floor() as usize).min(COLORMAP_ANCHORS.len() - 2);
        let f = pos - k as f64;
        let (a, b) = (COLORMAP_ANCHORS[k], COLORMAP_ANCHORS[k + 1]);
        std::array::from_fn(|c| (a[c] as f64 + f * (b[c] as f64 - a[c] as f64)).round() as u8)
    })
}

/// Colormap index of a T1 value; `None` for unfitted voxels.
pub fn colormap_index(t1: f64, range: (f64, f64)) -> Option<usize> {
    if !(t1.is_finite() && t1 > 0.0) {
        return None;
    }
    let f = ((t1 - range.0) / (range.1 - range.0)).clamp(0.0, 1.0);
    Some((f * 255.0).round() as usize)
}

/// Render the T1 map as an 8-bit RGB PNG, clamped to `range` (ms).
pub fn export_t1_png(maps: &ParametricMaps, range: (f64, f64), path: &Path) -> Result<()> {
    if !(range.0 < range.1 && range.0.is_finite() && range.1.is_finite()) {
        return Err(Error::InvalidConfig(format!("display range {range:?} needs min < max")));
    }
    let lut = colormap();
    let (h, w) = maps.shape();
    let pixels: Vec<u8> = maps
        .t1
        .data
        .iter()
        .flat_map(|&t| colormap_index(t, range).map_or([0, 0, 0], |i| lut[i]))
        .collect();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let encoder = image::codecs::png::PngEncoder::new(BufWriter::new(file));
    image::ImageEncoder::write_image(encoder, &pixels, w as u32, h as u32, image::ExtendedColorType::Rgb8)
        .map_err(|e| Error::Encode(e.to_string()))
}
