//! Equidistant fisheye camera model: coordinate maps between a flat
//! (pinhole) image and a fisheye image, and inverse-warped frame resampling.
//!
//! The projection is r = focal * theta with theta the incidence angle, the
//! standard wide-angle model. Other radial models could slot in behind
//! [`FisheyeIntrinsics`], but only equidistant is implemented.

use crate::error::{Error, Result};
use crate::tensor::{Dims4, Scalar, Tensor4};

/// Pinhole intrinsics for the flat image side.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PinholeIntrinsics {
    pub focal: f64,
    pub center_x: f64,
    pub center_y: f64,
    pub width: usize,
    pub height: usize,
}

impl PinholeIntrinsics {
    /// Centered intrinsics for a width x height image.
    pub fn centered(focal: f64, width: usize, height: usize) -> Self {
        PinholeIntrinsics {
            focal,
            center_x: (width as f64 - 1.0) / 2.0,
            center_y: (height as f64 - 1.0) / 2.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0) {
            return Err(Error::Config(format!("pinhole focal must be > 0, got {}", self.focal)));
        }
        if self.width < 2 || self.height < 2 {
            return Err(Error::Config("pinhole image must be at least 2x2".into()));
        }
        if !inside_rect(self.center_x, self.center_y, self.width, self.height) {
            return Err(Error::Config("pinhole center lies outside the image".into()));
        }
        Ok(())
    }
}

/// Equidistant fisheye intrinsics. `focal` is in pixels per radian and `fov`
/// is the full view angle in radians (at most a hemisphere).
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FisheyeIntrinsics {
    pub focal: f64,
    pub center_x: f64,
    pub center_y: f64,
    pub fov: f64,
    pub width: usize,
    pub height: usize,
}

impl FisheyeIntrinsics {
    /// Centered intrinsics whose valid disc exactly fills min(width, height).
    pub fn disc_filling(fov: f64, width: usize, height: usize) -> Self {
        let radius = (width.min(height) as f64 - 1.0) / 2.0;
        FisheyeIntrinsics {
            focal: radius / (fov / 2.0),
            center_x: (width as f64 - 1.0) / 2.0,
            center_y: (height as f64 - 1.0) / 2.0,
            fov,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0) {
            return Err(Error::Config(format!("fisheye focal must be > 0, got {}", self.focal)));
        }
        if !(self.fov > 0.0 && self.fov <= std::f64::consts::PI) {
            return Err(Error::Config(format!(
                "fisheye fov must be in (0, pi], got {}",
                self.fov
            )));
        }
        if self.width < 2 || self.height < 2 {
            return Err(Error::Config("fisheye image must be at least 2x2".into()));
        }
        if !inside_rect(self.center_x, self.center_y, self.width, self.height) {
            return Err(Error::Config("fisheye center lies outside the image".into()));
        }
        Ok(())
    }

    /// Image radius of the field-of-view boundary: focal * fov / 2.
    pub fn max_radius(&self) -> f64 {
        self.focal * self.fov / 2.0
    }
}

fn inside_rect(x: f64, y: f64, width: usize, height: usize) -> bool {
    x >= 0.0 && y >= 0.0 && x <= width as f64 - 1.0 && y <= height as f64 - 1.0
}

/// Maps a flat pixel to its fisheye pixel. Returns `None` when the ray falls
/// outside the fisheye field of view.
pub fn flat_to_fisheye_coord(
    p: (f64, f64),
    flat: &PinholeIntrinsics,
    fe: &FisheyeIntrinsics,
) -> Option<(f64, f64)> {
    let dx = p.0 - flat.center_x;
    let dy = p.1 - flat.center_y;
    let rho = dx.hypot(dy);
    let theta = (rho / flat.focal).atan();
    if theta > fe.fov / 2.0 {
        return None;
    }
    let r = fe.focal * theta;
    if rho == 0.0 {
        return Some((fe.center_x, fe.center_y));
    }
    Some((fe.center_x + r * dx / rho, fe.center_y + r * dy / rho))
}

/// Exact inverse of [`flat_to_fisheye_coord`] on its valid domain. Returns
/// `None` when the fisheye radius exceeds focal * fov / 2.
pub fn fisheye_to_flat_coord(
    q: (f64, f64),
    flat: &PinholeIntrinsics,
    fe: &FisheyeIntrinsics,
) -> Option<(f64, f64)> {
    let dx = q.0 - fe.center_x;
    let dy = q.1 - fe.center_y;
    let r = dx.hypot(dy);
    let theta = r / fe.focal;
    if theta > fe.fov / 2.0 {
        return None;
    }
    if r == 0.0 {
        return Some((flat.center_x, flat.center_y));
    }
    let rho = flat.focal * theta.tan();
    Some((flat.center_x + rho * dx / r, flat.center_y + rho * dy / r))
}

/// Resampling direction for [`warp_frame`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WarpDirection {
    FlatToFisheye,
    FisheyeToFlat,
}

/// Bilinear lookup on one H x W slice; `None` outside [0, w-1] x [0, h-1].
fn bilinear<S: Scalar>(slice: &[S], width: usize, height: usize, x: f64, y: f64) -> Option<S> {
    if !(x >= 0.0 && y >= 0.0 && x <= (width - 1) as f64 && y <= (height - 1) as f64) {
        return None;
    }
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = S::from_f64(x - x0 as f64);
    let fy = S::from_f64(y - y0 as f64);
    let one = S::one();
    let v00 = slice[y0 * width + x0];
    let v01 = slice[y0 * width + x1];
    let v10 = slice[y1 * width + x0];
    let v11 = slice[y1 * width + x1];
    let top = v00 * (one - fx) + v01 * fx;
    let bot = v10 * (one - fx) + v11 * fx;
    Some(top * (one - fy) + bot * fy)
}

/// Inverse-warps every frame and channel of `frames` through the fisheye
/// model: each destination pixel samples the source image bilinearly at its
/// mapped coordinate. Pixels with no valid source get `fill`.
pub fn warp_frame<S: Scalar>(
    frames: &Tensor4<S>,
    direction: WarpDirection,
    flat: &PinholeIntrinsics,
    fe: &FisheyeIntrinsics,
    fill: f64,
) -> Result<Tensor4<S>> {
    flat.validate()?;
    fe.validate()?;
    let src = frames.dims();
    let (src_w, src_h, dst_w, dst_h) = match direction {
        WarpDirection::FlatToFisheye => (flat.width, flat.height, fe.width, fe.height),
        WarpDirection::FisheyeToFlat => (fe.width, fe.height, flat.width, flat.height),
    };
    if src.width != src_w || src.height != src_h {
        return Err(Error::Config(format!(
            "frame is {}x{} but source intrinsics expect {}x{}",
            src.width, src.height, src_w, src_h
        )));
    }

    // Destination -> source coordinate map, shared across frames/channels.
    let mut coords = Vec::with_capacity(dst_h * dst_w);
    for y in 0..dst_h {
        for x in 0..dst_w {
            let p = (x as f64, y as f64);
            coords.push(match direction {
                WarpDirection::FlatToFisheye => fisheye_to_flat_coord(p, flat, fe),
                WarpDirection::FisheyeToFlat => flat_to_fisheye_coord(p, flat, fe),
            });
        }
    }

    let fill_s = S::from_f64(fill);
    let out_dims = Dims4::new(src.frames, src.channels, dst_h, dst_w);
    let mut out = Tensor4::zeros(out_dims);
    for d in 0..src.frames {
        for c in 0..src.channels {
            let src_slice = frames.slice(d, c);
            let dst_slice = out.slice_mut(d, c);
            for (o, coord) in dst_slice.iter_mut().zip(coords.iter()) {
                *o = coord
                    .and_then(|(sx, sy)| bilinear(src_slice, src_w, src_h, sx, sy))
                    .unwrap_or(fill_s);
            }
        }
    }
    Ok(out)
}

/// Renders an antialiased checkerboard frame: `cell` is the cell extent in
/// pixels and `softness` the half-width of the linear edge ramp (0 gives
/// hard binary cells, which alias badly under resampling).
pub fn checkerboard<S: Scalar>(height: usize, width: usize, cell: usize, softness: f64) -> Tensor4<S> {
    let wave = |t: f64| -> f64 {
        let c = cell as f64;
        let u = (t / c).rem_euclid(2.0);
        let parity = if u < 1.0 { 1.0 } else { 0.0 };
        if softness <= 0.0 {
            return parity;
        }
        // Distance in pixels to the nearest cell boundary.
        let d = (u - u.round()).abs().min((u - 1.0).abs()) * c;
        let blend = (d / softness).min(1.0);
        0.5 + (parity - 0.5) * blend
    };
    Tensor4::from_fn(Dims4::new(1, 1, height, width), |_, _, h, w| {
        let sx = wave(w as f64);
        let sy = wave(h as f64);
        S::from_f64(sx * sy + (1.0 - sx) * (1.0 - sy))
    })
}

/// Peak signal-to-noise ratio in dB between two equal-length slices over a
/// pixel mask, with peak value 1.
pub fn psnr_masked<S: Scalar>(a: &[S], b: &[S], mask: &[bool]) -> f64 {
    assert_eq!(a.len(), b.len());
    assert_eq!(a.len(), mask.len());
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for ((&x, &y), &m) in a.iter().zip(b.iter()).zip(mask.iter()) {
        if m {
            let d = x.as_f64() - y.as_f64();
            sum += d * d;
            n += 1;
        }
    }
    if n == 0 {
        return f64::INFINITY;
    }
    let mse = sum / n as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_pair() -> (PinholeIntrinsics, FisheyeIntrinsics) {
        let flat = PinholeIntrinsics::centered(16.0, 64, 64);
        let fe = FisheyeIntrinsics::disc_filling(std::f64::consts::PI, 64, 64);
        (flat, fe)
    }

    /// Ray-trace oracle: build the 3D ray of a flat pixel and project it with
    /// the spherical incidence angle acos(z / |v|) instead of atan(rho / f).
    fn ray_trace_fisheye(p: (f64, f64), flat: &PinholeIntrinsics, fe: &FisheyeIntrinsics) -> (f64, f64) {
        let vx = p.0 - flat.center_x;
        let vy = p.1 - flat.center_y;
        let vz = flat.focal;
        let norm = (vx * vx + vy * vy + vz * vz).sqrt();
        let theta = (vz / norm).acos();
        let r = fe.focal * theta;
        let planar = vx.hypot(vy);
        if planar == 0.0 {
            return (fe.center_x, fe.center_y);
        }
        (fe.center_x + r * vx / planar, fe.center_y + r * vy / planar)
    }

    #[test]
    fn principal_point_maps_to_fisheye_center() {
        let (flat, fe) = default_pair();
        let q = flat_to_fisheye_coord((flat.center_x, flat.center_y), &flat, &fe).unwrap();
        assert_eq!(q, (fe.center_x, fe.center_y));
        let p = fisheye_to_flat_coord((fe.center_x, fe.center_y), &flat, &fe).unwrap();
        assert_eq!(p, (flat.center_x, flat.center_y));
    }

    #[test]
    fn fov_boundary_lands_at_max_radius() {
        // A flat point at rho with theta = fov/2 maps exactly to
        // r = focal * fov / 2.
        let flat = PinholeIntrinsics::centered(16.0, 64, 64);
        let fov = 2.0; // < pi so tan(fov/2) is finite
        let fe = FisheyeIntrinsics::disc_filling(fov, 64, 64);
        let rho = flat.focal * (fov / 2.0).tan();
        let p = (flat.center_x + rho, flat.center_y);
        let q = flat_to_fisheye_coord(p, &flat, &fe).unwrap();
        let r = (q.0 - fe.center_x).hypot(q.1 - fe.center_y);
        assert!((r - fe.max_radius()).abs() < 1e-9, "r={r}");
        // And agrees with the ray-trace oracle.
        let o = ray_trace_fisheye(p, &flat, &fe);
        assert!((q.0 - o.0).abs() < 1e-9 && (q.1 - o.1).abs() < 1e-9);
    }

    #[test]
    fn forward_matches_ray_trace_oracle_across_the_frame() {
        let (flat, fe) = default_pair();
        for y in (0..64).step_by(7) {
            for x in (0..64).step_by(7) {
                let p = (x as f64, y as f64);
                let got = flat_to_fisheye_coord(p, &flat, &fe).unwrap();
                let want = ray_trace_fisheye(p, &flat, &fe);
                assert!(
                    (got.0 - want.0).abs() < 1e-9 && (got.1 - want.1).abs() < 1e-9,
                    "at {p:?}: {got:?} vs {want:?}"
                );
            }
        }
    }

    #[test]
    fn roundtrip_identity_on_random_interior_points() {
        let (flat, fe) = default_pair();
        let mut state = 0x1234_5678_9abc_def0u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..1000 {
            let p = (next() * 63.0, next() * 63.0);
            let q = flat_to_fisheye_coord(p, &flat, &fe).expect("interior point inside fov");
            let back = fisheye_to_flat_coord(q, &flat, &fe).expect("roundtrip stays in fov");
            assert!(
                (back.0 - p.0).abs() < 1e-9 && (back.1 - p.1).abs() < 1e-9,
                "{p:?} -> {q:?} -> {back:?}"
            );
        }
    }

    #[test]
    fn radius_beyond_fov_is_rejected() {
        let (flat, fe) = default_pair();
        let r = fe.max_radius() + 1e-6;
        let q = (fe.center_x + r, fe.center_y);
        assert!(fisheye_to_flat_coord(q, &flat, &fe).is_none());
        // Exactly at the boundary is still valid.
        let q_edge = (fe.center_x + fe.max_radius(), fe.center_y);
        assert!(fisheye_to_flat_coord(q_edge, &flat, &fe).is_some());
    }

    #[test]
    fn equidistant_radius_is_monotone_in_theta() {
        let fe = FisheyeIntrinsics::disc_filling(std::f64::consts::PI, 64, 64);
        let mut last = -1.0f64;
        for i in 0..100 {
            let theta = (i as f64 / 99.0) * fe.fov / 2.0;
            let r = fe.focal * theta;
            assert!(r > last || i == 0);
            last = r;
        }
    }

    #[test]
    fn constant_frame_warps_to_constant_inside_fov() {
        let (flat, fe) = default_pair();
        let frame = Tensor4::filled(Dims4::new(1, 1, 64, 64), 0.625_f64);
        let warped = warp_frame(&frame, WarpDirection::FlatToFisheye, &flat, &fe, 0.0).unwrap();
        for y in 0..64usize {
            for x in 0..64usize {
                let v = warped.at(0, 0, y, x);
                // Pixels whose source lies inside the flat frame keep the
                // constant; everything else is the fill value.
                assert!(v == 0.625 || v == 0.0, "unexpected value {v}");
            }
        }
        // The center certainly has a valid source.
        assert_eq!(warped.at(0, 0, 32, 32), 0.625);
    }

    #[test]
    fn warp_preserves_value_range_or_fill() {
        let (flat, fe) = default_pair();
        let frame = Tensor4::from_fn(Dims4::new(2, 1, 64, 64), |d, _, h, w| {
            0.2 + 0.6 * (((d + h * 3 + w * 7) % 13) as f64 / 12.0)
        });
        let (lo, hi) = frame.min_max();
        let warped = warp_frame(&frame, WarpDirection::FlatToFisheye, &flat, &fe, -1.0).unwrap();
        for &v in warped.data() {
            assert!((v >= lo && v <= hi) || v == -1.0);
        }
    }

    #[test]
    fn warp_rejects_dimension_mismatch() {
        let (flat, fe) = default_pair();
        let frame = Tensor4::<f64>::zeros(Dims4::new(1, 1, 32, 32));
        let err = warp_frame(&frame, WarpDirection::FlatToFisheye, &flat, &fe, 0.0).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn degenerate_intrinsics_rejected() {
        let flat = PinholeIntrinsics::centered(16.0, 64, 64);
        let mut fe = FisheyeIntrinsics::disc_filling(std::f64::consts::PI, 64, 64);
        fe.fov = 0.0;
        let frame = Tensor4::<f64>::zeros(Dims4::new(1, 1, 64, 64));
        let err = warp_frame(&frame, WarpDirection::FlatToFisheye, &flat, &fe, 0.0).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        fe.fov = 4.0; // beyond a hemisphere
        assert!(fe.validate().is_err());
    }

    #[test]
    fn checkerboard_roundtrip_recovers_interior() {
        // Warp a checkerboard flat -> fisheye -> flat and require the
        // interior (radius <= 0.8 * half-extent) to recover at >= 25 dB.
        let flat = PinholeIntrinsics::centered(64.0, 128, 128);
        let fe = FisheyeIntrinsics::disc_filling(std::f64::consts::PI, 256, 256);
        let board = checkerboard::<f64>(128, 128, 16, 1.5);
        let fish = warp_frame(&board, WarpDirection::FlatToFisheye, &flat, &fe, 0.0).unwrap();
        let back = warp_frame(&fish, WarpDirection::FisheyeToFlat, &flat, &fe, 0.0).unwrap();
        let max_r = 0.8 * 63.5;
        let mask: Vec<bool> = (0..128 * 128)
            .map(|i| {
                let (y, x) = (i / 128, i % 128);
                ((x as f64 - 63.5).hypot(y as f64 - 63.5)) <= max_r
            })
            .collect();
        let psnr = psnr_masked(board.slice(0, 0), back.slice(0, 0), &mask);
        assert!(psnr >= 25.0, "interior PSNR {psnr:.2} dB < 25 dB");
    }
}
