//! Synthetic cross-view world: colored disk landmarks on a ground plane,
//! rendered top-down as aerial tiles and from street level as panoramas,
//! plus the dataset index and image I/O that tie samples together.
//!
//! Generation is a pure function of the scene spec and modes: the same
//! seed yields byte-identical files.

mod ppm;

pub use ppm::{load_ppm, read_ppm, save_ppm, write_ppm};

use crate::geo::{covers, AerialTile, GeoLocation};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Flat synthetic mapping between world meters and degrees around
/// (0, 0): one meter is 1e-5 degrees on both axes.
pub const DEG_PER_M: f64 = 1e-5;

pub fn world_to_geo(x_m: f64, y_m: f64) -> GeoLocation {
    GeoLocation {
        lat: y_m * DEG_PER_M,
        lon: x_m * DEG_PER_M,
    }
}

pub fn geo_to_world(loc: GeoLocation) -> (f64, f64) {
    (loc.lon / DEG_PER_M, loc.lat / DEG_PER_M)
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad ppm: {0}")]
    BadPpm(&'static str),
    #[error("bad index: {0}")]
    BadIndex(String),
    #[error("referenced file missing: {0}")]
    MissingFile(PathBuf),
    #[error("layout infeasible: {0}")]
    Infeasible(String),
}

/// Interleaved HWC image with float values in [0, 1]. Pixel `(y, x)`
/// covers the unit square `[x, x+1) × [y, y+1)` in sampling coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(h: usize, w: usize, c: usize) -> Self {
        Self {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, ch: usize) -> f32 {
        self.data[(y * self.w + x) * self.c + ch]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, ch: usize, v: f32) {
        self.data[(y * self.w + x) * self.c + ch] = v;
    }

    pub fn fill(&mut self, color: &[f32]) {
        for y in 0..self.h {
            for x in 0..self.w {
                for ch in 0..self.c {
                    self.set(y, x, ch, color[ch]);
                }
            }
        }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Bilinear resample to a new size (half-pixel-centered sampling,
    /// edges clamped). The same size returns an identical image.
    pub fn resize_bilinear(&self, h: usize, w: usize) -> Image {
        let mut out = Image::new(h, w, self.c);
        let sy = self.h as f64 / h as f64;
        let sx = self.w as f64 / w as f64;
        for y in 0..h {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.h - 1);
            let wy = (fy - y0 as f64) as f32;
            for x in 0..w {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.w - 1);
                let wx = (fx - x0 as f64) as f32;
                for ch in 0..self.c {
                    let top = self.get(y0, x0, ch) * (1.0 - wx) + self.get(y0, x1, ch) * wx;
                    let bot = self.get(y1, x0, ch) * (1.0 - wx) + self.get(y1, x1, ch) * wx;
                    out.set(y, x, ch, top * (1.0 - wy) + bot * wy);
                }
            }
        }
        out
    }

    /// Horizontal cyclic roll by `shift` columns (panorama rotation).
    pub fn roll_columns(&self, shift: usize) -> Image {
        let mut out = Image::new(self.h, self.w, self.c);
        for y in 0..self.h {
            for x in 0..self.w {
                let sx = (x + shift) % self.w;
                for ch in 0..self.c {
                    out.set(y, x, ch, self.get(y, sx, ch));
                }
            }
        }
        out
    }
}

/// Parameters of the synthetic world.
#[derive(Clone, Debug)]
pub struct SceneSpec {
    pub seed: u64,
    pub world_side_m: f64,
    pub landmarks: usize,
    pub radius_range_m: (f64, f64),
    pub palette: usize,
    /// amplitude of the smooth terrain color field; 0 keeps the ground
    /// a single uniform color
    pub terrain_amp: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Landmark {
    pub x_m: f64,
    pub y_m: f64,
    pub radius_m: f64,
    pub color: [f32; 3],
}

pub struct World {
    pub spec: SceneSpec,
    pub landmarks: Vec<Landmark>,
    terrain: TerrainField,
}

/// Smooth seeded color field: a few low-frequency plane waves per
/// channel, so different regions of the world carry different ground
/// tints the way real terrain does.
#[derive(Clone, Debug)]
struct TerrainField {
    // per channel, per wave: (fx, fy, phase, amplitude)
    waves: Vec<[(f64, f64, f64, f64); 3]>,
}

impl TerrainField {
    fn generate(rng: &mut ChaCha8Rng, world_side: f64) -> Self {
        let waves = (0..3)
            .map(|_| {
                let mut per_channel = [(0.0, 0.0, 0.0, 0.0); 3];
                for w in per_channel.iter_mut() {
                    let wavelength = rng.gen_range(world_side / 16.0..world_side / 4.0);
                    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                    *w = (
                        angle.cos() / wavelength,
                        angle.sin() / wavelength,
                        rng.gen_range(0.0..std::f64::consts::TAU),
                        rng.gen_range(0.5..1.0),
                    );
                }
                per_channel
            })
            .collect();
        Self { waves }
    }

    fn sample(&self, x: f64, y: f64) -> [f64; 3] {
        let mut out = [0.0; 3];
        for per_channel in &self.waves {
            for (c, &(fx, fy, phase, amp)) in per_channel.iter().enumerate() {
                out[c] += amp * (std::f64::consts::TAU * (fx * x + fy * y) + phase).sin();
            }
        }
        out
    }
}

impl World {
    /// World with explicit landmarks; the terrain field still derives
    /// from the spec seed.
    pub fn with_landmarks(spec: SceneSpec, landmarks: Vec<Landmark>) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let terrain = TerrainField::generate(&mut rng, spec.world_side_m);
        Self {
            spec,
            landmarks,
            terrain,
        }
    }

    /// Ground color at a world position: the base color shifted by the
    /// terrain field, scaled by the spec's terrain amplitude.
    pub fn ground_color(&self, x_m: f64, y_m: f64) -> [f32; 3] {
        let t = self.terrain.sample(x_m, y_m);
        let mut c = AERIAL_GROUND;
        for (ch, v) in c.iter_mut().zip(t) {
            *ch = (*ch + (self.spec.terrain_amp * v / 3.0) as f32).clamp(0.0, 1.0);
        }
        c
    }
}

/// Evenly spread hues at fixed saturation/value.
pub fn palette_color(i: usize, palette: usize) -> [f32; 3] {
    let hue = 360.0 * i as f32 / palette.max(1) as f32;
    hsv_to_rgb(hue, 0.78, 0.92)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

pub fn generate_world(spec: &SceneSpec) -> World {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let terrain = TerrainField::generate(&mut rng, spec.world_side_m);
    let half = spec.world_side_m / 2.0;
    let (rmin, rmax) = spec.radius_range_m;
    let landmarks = (0..spec.landmarks)
        .map(|_| {
            let x_m = rng.gen_range(-half..half);
            let y_m = rng.gen_range(-half..half);
            let radius_m = if rmax > rmin {
                rng.gen_range(rmin..rmax)
            } else {
                rmin
            };
            let color = palette_color(rng.gen_range(0..spec.palette.max(1)), spec.palette);
            Landmark {
                x_m,
                y_m,
                radius_m,
                color,
            }
        })
        .collect();
    World {
        spec: spec.clone(),
        landmarks,
        terrain,
    }
}

const AERIAL_GROUND: [f32; 3] = [0.16, 0.20, 0.13];
const PANO_SKY: [f32; 3] = [0.53, 0.70, 0.92];
const PANO_GROUND: [f32; 3] = [0.33, 0.28, 0.22];

/// Indices of landmarks whose center lies within the tile footprint
/// (closed boundary); exactly these are drawn by [`render_aerial`].
pub fn aerial_visible(world: &World, tile: &AerialTile) -> Vec<usize> {
    let (cx, cy) = geo_to_world(tile.center);
    let half = tile.extent_m / 2.0;
    world
        .landmarks
        .iter()
        .enumerate()
        .filter(|(_, lm)| (lm.x_m - cx).abs() <= half && (lm.y_m - cy).abs() <= half)
        .map(|(i, _)| i)
        .collect()
}

/// Indices of landmarks within `view_range_m` of a ground location;
/// exactly these are drawn by [`render_panorama`].
pub fn panorama_visible(world: &World, loc_m: (f64, f64), view_range_m: f64) -> Vec<usize> {
    world
        .landmarks
        .iter()
        .enumerate()
        .filter(|(_, lm)| {
            let d = ((lm.x_m - loc_m.0).powi(2) + (lm.y_m - loc_m.1).powi(2)).sqrt();
            d > 0.0 && d <= view_range_m
        })
        .map(|(i, _)| i)
        .collect()
}

/// Top-down orthographic render: ground color plus filled disks, north
/// at the top row, east at the right column.
pub fn render_aerial(world: &World, tile: &AerialTile) -> Image {
    let side = tile.side_px;
    let mut img = Image::new(side, side, 3);
    let (cx, cy) = geo_to_world(tile.center);
    let m_per_px = tile.extent_m / side as f64;
    for y in 0..side {
        for x in 0..side {
            let wx = cx - tile.extent_m / 2.0 + (x as f64 + 0.5) * m_per_px;
            let wy = cy + tile.extent_m / 2.0 - (y as f64 + 0.5) * m_per_px;
            let g = world.ground_color(wx, wy);
            for ch in 0..3 {
                img.set(y, x, ch, g[ch]);
            }
        }
    }
    for &li in &aerial_visible(world, tile) {
        let lm = &world.landmarks[li];
        let px = (lm.x_m - cx + tile.extent_m / 2.0) / m_per_px;
        let py = (cy + tile.extent_m / 2.0 - lm.y_m) / m_per_px;
        let pr = lm.radius_m / m_per_px;
        let y_lo = ((py - pr).floor().max(0.0)) as usize;
        let y_hi = ((py + pr).ceil().min(side as f64)) as usize;
        let x_lo = ((px - pr).floor().max(0.0)) as usize;
        let x_hi = ((px + pr).ceil().min(side as f64)) as usize;
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                let dx = x as f64 + 0.5 - px;
                let dy = y as f64 + 0.5 - py;
                if dx * dx + dy * dy <= pr * pr {
                    for ch in 0..3 {
                        img.set(y, x, ch, lm.color[ch]);
                    }
                }
            }
        }
    }
    img
}

/// Street-level cylindrical render. Column `j` covers azimuth
/// `heading_deg + fov_deg * j / w` (azimuth 0 = north, clockwise via
/// east). Each visible landmark paints a vertical bar centered on the
/// horizon whose angular width and height shrink with distance; nearer
/// landmarks occlude farther ones.
pub fn render_panorama(
    world: &World,
    loc_m: (f64, f64),
    h: usize,
    w: usize,
    heading_deg: f64,
    fov_deg: f64,
    view_range_m: f64,
) -> Image {
    let mut img = Image::new(h, w, 3);
    let horizon = h / 2;
    for x in 0..w {
        // each ground column shows the terrain a few meters out along
        // its azimuth; with zero terrain amplitude this is one color
        let az = (heading_deg + fov_deg * (x as f64 + 0.5) / w as f64).to_radians();
        let probe = (loc_m.0 + 6.0 * az.sin(), loc_m.1 + 6.0 * az.cos());
        let tint = world.ground_color(probe.0, probe.1);
        let ground = [
            (PANO_GROUND[0] + tint[0] - AERIAL_GROUND[0]).clamp(0.0, 1.0),
            (PANO_GROUND[1] + tint[1] - AERIAL_GROUND[1]).clamp(0.0, 1.0),
            (PANO_GROUND[2] + tint[2] - AERIAL_GROUND[2]).clamp(0.0, 1.0),
        ];
        for y in 0..h {
            let color = if y < horizon { PANO_SKY } else { ground };
            for ch in 0..3 {
                img.set(y, x, ch, color[ch]);
            }
        }
    }

    let mut vis = panorama_visible(world, loc_m, view_range_m);
    // painter's order: far to near, so near bars overwrite
    vis.sort_by(|&a, &b| {
        let da = dist2(&world.landmarks[a], loc_m);
        let db = dist2(&world.landmarks[b], loc_m);
        db.partial_cmp(&da).unwrap().then(b.cmp(&a))
    });

    let wrap = (fov_deg - 360.0).abs() < 1e-9;
    for &li in &vis {
        let lm = &world.landmarks[li];
        let (dx, dy) = (lm.x_m - loc_m.0, lm.y_m - loc_m.1);
        let dist = (dx * dx + dy * dy).sqrt();
        let mut az = dx.atan2(dy).to_degrees();
        if az < 0.0 {
            az += 360.0;
        }
        let mut rel = az - heading_deg;
        rel = rel.rem_euclid(360.0);
        let half_ang = (lm.radius_m / dist).atan().to_degrees();
        let col_center = rel / fov_deg * w as f64;
        let half_cols = (half_ang / fov_deg * w as f64).max(0.5);
        let half_h = ((lm.radius_m / dist).atan() / (std::f64::consts::PI / 4.0)
            * (h as f64 / 2.0))
            .max(0.5)
            .min(h as f64 / 2.0);
        let y_lo = ((horizon as f64 - half_h).floor().max(0.0)) as usize;
        let y_hi = ((horizon as f64 + half_h).ceil().min(h as f64)) as usize;
        let c_lo = (col_center - half_cols).floor() as isize;
        let c_hi = (col_center + half_cols).ceil() as isize;
        for cj in c_lo..c_hi {
            let x = if wrap {
                cj.rem_euclid(w as isize) as usize
            } else if cj < 0 || cj >= w as isize {
                continue;
            } else {
                cj as usize
            };
            for y in y_lo..y_hi {
                for ch in 0..3 {
                    img.set(y, x, ch, lm.color[ch]);
                }
            }
        }
    }
    img
}

fn dist2(lm: &Landmark, loc: (f64, f64)) -> f64 {
    (lm.x_m - loc.0).powi(2) + (lm.y_m - loc.1).powi(2)
}

/// Query placement relative to its aerial tile.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Placement {
    /// Query at the exact tile center, tiles spread so none overlap.
    Aligned,
    /// Query uniform within the tile; overlapping tiles become
    /// neighbors.
    Offset,
}

#[derive(Clone, Debug)]
pub struct DatasetModes {
    pub placement: Placement,
    pub unknown_orientation: bool,
    pub fov_deg: f64,
}

impl Default for DatasetModes {
    fn default() -> Self {
        Self {
            placement: Placement::Aligned,
            unknown_orientation: false,
            fov_deg: 360.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RenderParams {
    pub pano_h: usize,
    pub pano_w: usize,
    pub aerial_px: usize,
    pub tile_extent_m: f64,
}

impl Default for RenderParams {
    fn default() -> Self {
        Self {
            pano_h: 64,
            pano_w: 256,
            aerial_px: 128,
            tile_extent_m: 40.0,
        }
    }
}

/// One street/aerial pair with its geodetic metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub street_path: String,
    pub aerial_path: String,
    pub query: GeoLocation,
    pub tile: AerialTile,
    pub offset_m: (f64, f64),
    pub split: String,
    pub neighbors: Vec<String>,
}

pub struct DatasetIndex {
    pub records: Vec<SampleRecord>,
    root: PathBuf,
}

pub const INDEX_HEADER: &str =
    "id,street,aerial,lat,lon,center_lat,center_lon,extent_m,off_x_m,off_y_m,split,neighbors";

impl DatasetIndex {
    /// Build an in-memory index (no file backing); paths stay relative
    /// to the current directory.
    pub fn from_records(records: Vec<SampleRecord>) -> Self {
        Self {
            records,
            root: PathBuf::from("."),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn street_image(&self, i: usize) -> Result<Image, DataError> {
        load_ppm(&self.root.join(&self.records[i].street_path))
    }

    pub fn aerial_image(&self, i: usize) -> Result<Image, DataError> {
        load_ppm(&self.root.join(&self.records[i].aerial_path))
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.records.iter().position(|r| r.id == id)
    }

    /// Indices of the records carrying a split tag.
    pub fn split_indices(&self, split: &str) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut out = String::new();
        out.push_str(INDEX_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.id,
                r.street_path,
                r.aerial_path,
                r.query.lat,
                r.query.lon,
                r.tile.center.lat,
                r.tile.center.lon,
                r.tile.extent_m,
                r.offset_m.0,
                r.offset_m.1,
                r.split,
                r.neighbors.join(";")
            ));
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(out.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path)
            .map_err(|_| DataError::MissingFile(path.to_path_buf()))?;
        let root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == INDEX_HEADER => {}
            _ => return Err(DataError::BadIndex("missing or wrong header".into())),
        }
        let mut records = Vec::new();
        for (ln, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 12 {
                return Err(DataError::BadIndex(format!(
                    "line {}: expected 12 fields, got {}",
                    ln + 2,
                    f.len()
                )));
            }
            let num = |s: &str| -> Result<f64, DataError> {
                s.parse()
                    .map_err(|_| DataError::BadIndex(format!("line {}: bad number {s:?}", ln + 2)))
            };
            let query = GeoLocation {
                lat: num(f[3])?,
                lon: num(f[4])?,
            };
            let tile = AerialTile {
                center: GeoLocation {
                    lat: num(f[5])?,
                    lon: num(f[6])?,
                },
                extent_m: num(f[7])?,
                side_px: 0,
            };
            let neighbors = if f[11].is_empty() {
                Vec::new()
            } else {
                f[11].split(';').map(str::to_string).collect()
            };
            records.push(SampleRecord {
                id: f[0].to_string(),
                street_path: f[1].to_string(),
                aerial_path: f[2].to_string(),
                query,
                tile,
                offset_m: (num(f[8])?, num(f[9])?),
                split: f[10].to_string(),
                neighbors,
            });
        }
        let mut index = Self { records, root };
        index.fix_side_px()?;
        index.validate()?;
        Ok(index)
    }

    fn fix_side_px(&mut self) -> Result<(), DataError> {
        for i in 0..self.records.len() {
            let img = self.aerial_image(i)?;
            self.records[i].tile.side_px = img.w;
        }
        Ok(())
    }

    fn validate(&self) -> Result<(), DataError> {
        for r in &self.records {
            if self.records.iter().filter(|o| o.id == r.id).count() != 1 {
                return Err(DataError::BadIndex(format!("duplicate id {}", r.id)));
            }
            let sp = self.root.join(&r.street_path);
            if !sp.exists() {
                return Err(DataError::MissingFile(sp));
            }
            for n in &r.neighbors {
                let other = self
                    .index_of(n)
                    .ok_or_else(|| DataError::BadIndex(format!("unknown neighbor {n}")))?;
                if !self.records[other].neighbors.contains(&r.id) {
                    return Err(DataError::BadIndex(format!(
                        "neighbor relation not symmetric: {} -> {n}",
                        r.id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Generate a dataset: a world, one panorama/tile pair per sample, an
/// index CSV. Offset mode records the true in-tile offset and declares
/// every pair of mutually covering tiles as neighbors.
pub fn emit_dataset(
    spec: &SceneSpec,
    n: usize,
    modes: &DatasetModes,
    params: &RenderParams,
    out_dir: &Path,
) -> Result<DatasetIndex, DataError> {
    assert!(n >= 1, "need at least one sample");
    let world = generate_world(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(0x5eed));
    let extent = params.tile_extent_m;
    let half_world = spec.world_side_m / 2.0;

    // tile centers and query locations in world meters
    let mut centers: Vec<(f64, f64)> = Vec::with_capacity(n);
    let mut queries: Vec<(f64, f64)> = Vec::with_capacity(n);
    match modes.placement {
        Placement::Aligned => {
            let g = (n as f64).sqrt().ceil() as usize;
            let spacing = spec.world_side_m / g as f64;
            if spacing < extent * 1.01 {
                return Err(DataError::Infeasible(format!(
                    "{n} aligned tiles of {extent} m need a world wider than {} m",
                    spec.world_side_m
                )));
            }
            let slack = (spacing - extent * 1.01) / 2.0;
            for i in 0..n {
                let (gr, gc) = (i / g, i % g);
                let cx = -half_world + (gc as f64 + 0.5) * spacing + rng.gen_range(-slack..slack);
                let cy = -half_world + (gr as f64 + 0.5) * spacing + rng.gen_range(-slack..slack);
                centers.push((cx, cy));
                queries.push((cx, cy));
            }
        }
        Placement::Offset => {
            let lo = -(half_world - extent / 2.0);
            let hi = half_world - extent / 2.0;
            for _ in 0..n {
                let c = (rng.gen_range(lo..hi), rng.gen_range(lo..hi));
                let q = (
                    c.0 + rng.gen_range(-extent / 2.0..extent / 2.0),
                    c.1 + rng.gen_range(-extent / 2.0..extent / 2.0),
                );
                centers.push(c);
                queries.push(q);
            }
        }
    }

    std::fs::create_dir_all(out_dir.join("street"))?;
    std::fs::create_dir_all(out_dir.join("aerial"))?;

    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("{i:04}");
        let tile = AerialTile {
            center: world_to_geo(centers[i].0, centers[i].1),
            extent_m: extent,
            side_px: params.aerial_px,
        };
        let heading = if modes.unknown_orientation {
            rng.gen_range(0.0..360.0)
        } else {
            0.0
        };
        let pano = render_panorama(
            &world,
            queries[i],
            params.pano_h,
            params.pano_w,
            heading,
            modes.fov_deg,
            extent,
        );
        let aerial = render_aerial(&world, &tile);
        let street_path = format!("street/{id}.ppm");
        let aerial_path = format!("aerial/{id}.ppm");
        save_ppm(&pano, &out_dir.join(&street_path))?;
        save_ppm(&aerial, &out_dir.join(&aerial_path))?;
        records.push(SampleRecord {
            id,
            street_path,
            aerial_path,
            query: world_to_geo(queries[i].0, queries[i].1),
            tile,
            offset_m: (queries[i].0 - centers[i].0, queries[i].1 - centers[i].1),
            split: "train".to_string(),
            neighbors: Vec::new(),
        });
    }

    // neighbors: tiles covering each other's query, symmetrized
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let (qi, tj) = (records[i].query, records[j].tile);
            let (qj, ti) = (records[j].query, records[i].tile);
            if covers(qi, &tj) || covers(qj, &ti) {
                let id = records[j].id.clone();
                records[i].neighbors.push(id);
            }
        }
    }

    let index = DatasetIndex {
        records,
        root: out_dir.to_path_buf(),
    };
    index.save(&out_dir.join("index.csv"))?;
    Ok(index)
}
