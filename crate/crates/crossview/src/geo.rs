//! Geometric utilities: the polar warp that reshapes aerial tiles into
//! panorama-like layouts, great-circle distance for meter-level
//! evaluation, and the tile-coverage predicate behind the hit rate.

use crate::data::Image;
use thiserror::Error;

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

#[derive(Debug, Error, PartialEq)]
pub enum GeoError {
    #[error("latitude {0} outside [-90, 90] or longitude {1} outside [-180, 180)")]
    BadLocation(f64, f64),
    #[error("polar transform requires a square input, got {0}x{1}")]
    NonSquare(usize, usize),
    #[error("query pixel ({0}, {1}) outside the image")]
    QueryOutside(f64, f64),
    #[error("tile extent must be positive, got {0}")]
    BadExtent(f64),
}

/// WGS-84-style spherical coordinates in degrees.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeoLocation {
    pub lat: f64,
    pub lon: f64,
}

impl GeoLocation {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..180.0).contains(&lon) {
            return Err(GeoError::BadLocation(lat, lon));
        }
        Ok(Self { lat, lon })
    }
}

/// One reference aerial image: a square ground footprint centered on a
/// location, rendered at some pixel resolution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AerialTile {
    pub center: GeoLocation,
    pub extent_m: f64,
    pub side_px: usize,
}

impl AerialTile {
    pub fn new(center: GeoLocation, extent_m: f64, side_px: usize) -> Result<Self, GeoError> {
        if extent_m <= 0.0 {
            return Err(GeoError::BadExtent(extent_m));
        }
        Ok(Self {
            center,
            extent_m,
            side_px,
        })
    }
}

/// Haversine great-circle distance in meters on a spherical earth.
pub fn geodesic_m(a: GeoLocation, b: GeoLocation) -> f64 {
    let lat1 = a.lat.to_radians();
    let lat2 = b.lat.to_radians();
    let dlat = (b.lat - a.lat).to_radians();
    let dlon = (b.lon - a.lon).to_radians();
    let s1 = (dlat / 2.0).sin();
    let s2 = (dlon / 2.0).sin();
    let h = s1 * s1 + lat1.cos() * lat2.cos() * s2 * s2;
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Longitude difference normalized into [-180, 180).
fn lon_delta(a: f64, b: f64) -> f64 {
    let mut d = a - b;
    while d < -180.0 {
        d += 360.0;
    }
    while d >= 180.0 {
        d -= 360.0;
    }
    d
}

/// True iff the query's local planar offset from the tile center is
/// within ±extent/2 on both axes (closed boundary), using an
/// equirectangular approximation around the tile center.
pub fn covers(q: GeoLocation, tile: &AerialTile) -> bool {
    let m_per_deg = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
    let dy = (q.lat - tile.center.lat) * m_per_deg;
    let dx = lon_delta(q.lon, tile.center.lon) * tile.center.lat.to_radians().cos() * m_per_deg;
    let half = tile.extent_m / 2.0;
    dx.abs() <= half && dy.abs() <= half
}

/// Bilinear sample with pixel `i` spanning `[i, i+1)`. Coordinates
/// strictly outside the `[0, w] × [0, h]` square read zero; within the
/// half-pixel boundary band the edge value extends, so a warp whose
/// sample points stay on the image never invents new values.
fn sample(img: &Image, x: f64, y: f64, ch: usize) -> f32 {
    let (h, w) = (img.h as f64, img.w as f64);
    if x < 0.0 || x > w || y < 0.0 || y > h {
        return 0.0;
    }
    let xx = (x - 0.5).clamp(0.0, w - 1.0);
    let yy = (y - 0.5).clamp(0.0, h - 1.0);
    let x0 = xx.floor() as usize;
    let y0 = yy.floor() as usize;
    let x1 = (x0 + 1).min(img.w - 1);
    let y1 = (y0 + 1).min(img.h - 1);
    let fx = (xx - x0 as f64) as f32;
    let fy = (yy - y0 as f64) as f32;
    let v00 = img.get(y0, x0, ch);
    let v01 = img.get(y0, x1, ch);
    let v10 = img.get(y1, x0, ch);
    let v11 = img.get(y1, x1, ch);
    let top = v00 * (1.0 - fx) + v01 * fx;
    let bot = v10 * (1.0 - fx) + v11 * fx;
    top * (1.0 - fy) + bot * fy
}

fn polar_from_center(
    aerial: &Image,
    cx: f64,
    cy: f64,
    out_h: usize,
    out_w: usize,
) -> Result<Image, GeoError> {
    if aerial.h != aerial.w {
        return Err(GeoError::NonSquare(aerial.h, aerial.w));
    }
    let a = aerial.h as f64;
    let mut out = Image::new(out_h, out_w, aerial.c);
    for i in 0..out_h {
        // top row reads the image-edge circle, bottom row hugs the center
        let r = (a / 2.0) * (out_h - i) as f64 / out_h as f64;
        for j in 0..out_w {
            let theta = 2.0 * std::f64::consts::PI * j as f64 / out_w as f64;
            let sx = cx + r * theta.sin();
            let sy = cy - r * theta.cos();
            for ch in 0..aerial.c {
                out.set(i, j, ch, sample(aerial, sx, sy, ch));
            }
        }
    }
    Ok(out)
}

/// Warp a square aerial image into a panorama-like layout: radius maps
/// to row (near the center at the bottom), azimuth to column with
/// column 0 facing north and angles running clockwise.
pub fn polar_transform(aerial: &Image, out_h: usize, out_w: usize) -> Result<Image, GeoError> {
    let c = aerial.h as f64 / 2.0;
    polar_from_center(aerial, c, c, out_h, out_w)
}

/// Polar warp recentered on an arbitrary query pixel, for tiles where
/// the query is not at the image center.
pub fn polar_transform_at(
    aerial: &Image,
    query_px: (f64, f64),
    out_h: usize,
    out_w: usize,
) -> Result<Image, GeoError> {
    let (qx, qy) = query_px;
    if qx < 0.0 || qy < 0.0 || qx > aerial.w as f64 || qy > aerial.h as f64 {
        return Err(GeoError::QueryOutside(qx, qy));
    }
    polar_from_center(aerial, qx, qy, out_h, out_w)
}
